#pragma once

// Correlation-map refinement: one self-attention encoder shared by the
// current and historical maps, then stacked decoder layers that gate both
// maps with a learned channel filter and exchange information through
// mutual attention. The two decoder branches share a single logits product;
// the current branch consumes its transpose.

#include <optional>
#include <vector>

#include "tempotrack/tensor.hpp"

namespace tempotrack {

struct AttentionConfig {
  std::size_t heads = 6;
  std::size_t model_dim = 192;
  std::size_t encoder_layers = 1;
  std::size_t decoder_layers = 2;
  std::size_t reduction = 2;  // filter bottleneck ratio

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const {
    if (heads == 0 || model_dim % heads != 0)
      throw ContractError("attention config: model_dim " + std::to_string(model_dim) +
                          " must be divisible by heads " + std::to_string(heads));
    if (reduction == 0 || model_dim % reduction != 0)
      throw ContractError("attention config: model_dim must be divisible by reduction ratio");
  }
};

template <typename T>
struct MhaParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct EncoderParams {
  MhaParams<T> mha;
  Tensor<T> ln_g, ln_b;
};

// Mutual attention: one set of logits projections (query side applied to the
// historical map, key side to the current map) plus per-branch value/output
// projections and norms.
template <typename T>
struct MutualAttnParams {
  Tensor<T> wq, bq;            // historical -> queries (shared logits)
  Tensor<T> wk, bk;            // current -> keys (shared logits)
  Tensor<T> wv_cur, bv_cur;    // current -> values consumed by historical branch
  Tensor<T> wv_hist, bv_hist;  // historical -> values consumed by current branch
  Tensor<T> wo_hist, bo_hist;
  Tensor<T> wo_cur, bo_cur;
  Tensor<T> ln_hist_g, ln_hist_b;
  Tensor<T> ln_cur_g, ln_cur_b;
};

template <typename T>
struct FilterParams {
  Tensor<T> w1, b1;  // [2C, C/r], [C/r]
  Tensor<T> w2, b2;  // [C/r, 2C], [2C]
};

template <typename T>
struct DecoderParams {
  FilterParams<T> filter;
  MutualAttnParams<T> attn;
};

template <typename T>
struct TransformerParams {
  EncoderParams<T> encoder;
  std::vector<DecoderParams<T>> decoders;
};

// Optional capture of every softmax attention map produced during a forward,
// for normalization checks.
template <typename T>
struct AttentionTrace {
  std::vector<Tensor<T>> softmax_maps;  // each [heads, Nq, Nk]
};

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const MhaParams<T>& p, std::size_t heads,
                               AttentionTrace<T>* trace = nullptr) {
  Tensor<T> qp = linear(q, p.wq, p.bq);
  Tensor<T> kp = linear(k, p.wk, p.bk);
  Tensor<T> vp = linear(v, p.wv, p.bv);
  Tensor<T> logits = attention_logits(qp, kp, heads);
  Tensor<T> scores = softmax(logits, 2);
  if (trace) trace->softmax_maps.push_back(scores);
  Tensor<T> att = attention_apply(scores, vp, heads);
  return linear(att, p.wo, p.bo);
}

// Norm(x + MHA(x,x,x)). Shared between the current and historical inputs.
template <typename T>
Tensor<T> encode(const Tensor<T>& tokens, const EncoderParams<T>& p, std::size_t heads,
                 AttentionTrace<T>* trace = nullptr) {
  Tensor<T> att = multi_head_attention(tokens, tokens, tokens, p.mha, heads, trace);
  return layer_norm(add(tokens, att), p.ln_g, p.ln_b);
}

template <typename T>
struct FilterResult {
  Tensor<T> cur_f;
  Tensor<T> hist_f;
  Tensor<T> omega;  // [2C], entries in (0,1)
};

// omega = sigmoid(W2 relu(W1 gap(concat(cur, hist)))); the first C entries
// gate the current map, the second C the historical one. The descriptor is
// pooled from the pre-filter maps, which is the only acyclic reading.
template <typename T>
FilterResult<T> filter_maps(const Tensor<T>& cur, const Tensor<T>& hist,
                            const FilterParams<T>& p) {
  if (cur.shape() != hist.shape())
    throw ShapeError("filter_maps: token shapes differ: " + shape_str(cur.shape()) + " vs " +
                     shape_str(hist.shape()));
  const std::size_t n = cur.shape()[0], c = cur.shape()[1];
  Tensor<T> joint = concat<T>({cur, hist}, 1);                    // [N, 2C]
  Tensor<T> desc = global_avg_pool(reshape(joint, {n, 1, 2 * c}));  // [2C]
  Tensor<T> hidden = relu(linear(reshape(desc, {1, 2 * c}), p.w1, p.b1));
  Tensor<T> omega_row = sigmoid(linear(hidden, p.w2, p.b2));  // [1, 2C]
  Tensor<T> omega = reshape(omega_row, {2 * c});
  FilterResult<T> out;
  out.omega = omega;
  out.cur_f = channel_scale(cur, slice_last(omega, 0, c));
  out.hist_f = channel_scale(hist, slice_last(omega, c, c));
  return out;
}

template <typename T>
struct MutualAttentionResult {
  Tensor<T> hist_out;  // updated historical map
  Tensor<T> cur_out;   // refined current map
};

// Both branches share one logits product: the historical branch row-softmaxes
// it, the current branch row-softmaxes its transpose. With reuse_logits=false
// the current branch computes its own product from the same projections
// (mathematically the transpose), used as the no-reuse reference and for
// instrumented matmul counting.
template <typename T>
MutualAttentionResult<T> mutual_attention(const Tensor<T>& hist_f, const Tensor<T>& cur_f,
                                          const MutualAttnParams<T>& p, std::size_t heads,
                                          bool reuse_logits = true,
                                          AttentionTrace<T>* trace = nullptr) {
  if (hist_f.shape() != cur_f.shape())
    throw ShapeError("mutual_attention: shapes differ: " + shape_str(hist_f.shape()) + " vs " +
                     shape_str(cur_f.shape()));
  Tensor<T> q_hist = linear(hist_f, p.wq, p.bq);
  Tensor<T> k_cur = linear(cur_f, p.wk, p.bk);
  Tensor<T> logits = attention_logits(q_hist, k_cur, heads);  // [h, Nh, Nc]

  // Historical branch: queries from history, keys/values from the present.
  Tensor<T> s_hist = softmax(logits, 2);
  if (trace) trace->softmax_maps.push_back(s_hist);
  Tensor<T> v_cur = linear(cur_f, p.wv_cur, p.bv_cur);
  Tensor<T> att_hist = linear(attention_apply(s_hist, v_cur, heads), p.wo_hist, p.bo_hist);
  MutualAttentionResult<T> out;
  out.hist_out = layer_norm(add(hist_f, att_hist), p.ln_hist_g, p.ln_hist_b);

  // Current branch: transposed logits, values from history.
  Tensor<T> logits_cur = reuse_logits
                             ? transpose12(logits)
                             : attention_logits(k_cur, q_hist, heads);
  Tensor<T> s_cur = softmax(logits_cur, 2);
  if (trace) trace->softmax_maps.push_back(s_cur);
  Tensor<T> v_hist = linear(hist_f, p.wv_hist, p.bv_hist);
  Tensor<T> att_cur = linear(attention_apply(s_cur, v_hist, heads), p.wo_cur, p.bo_cur);
  out.cur_out = layer_norm(add(cur_f, att_cur), p.ln_cur_g, p.ln_cur_b);
  return out;
}

struct TransformerToggles {
  bool use_encoder = true;
  bool use_filter = true;
  bool reuse_logits = true;
};

template <typename T>
struct TransformerForwardResult {
  Tensor<T> refined;     // [H,W,C] map for the head
  Tensor<T> new_hist;    // [N,C] tokens carried to the next frame
};

// Full step-2 forward over tokenized maps. cur_map is [H,W,C]; hist_tokens
// is [H*W, C]. Decoder layer j feeds its (hist, cur) outputs to layer j+1;
// the final historical output becomes the carried state.
template <typename T>
TransformerForwardResult<T> mutual_transformer_forward(const Tensor<T>& cur_map,
                                                       const Tensor<T>& hist_tokens,
                                                       const TransformerParams<T>& params,
                                                       const AttentionConfig& cfg,
                                                       const TransformerToggles& toggles = {},
                                                       AttentionTrace<T>* trace = nullptr) {
  if (cur_map.rank() != 3)
    throw ShapeError("mutual_transformer_forward: expected [HxWxC] map, got " +
                     shape_str(cur_map.shape()));
  const std::size_t h = cur_map.shape()[0], w = cur_map.shape()[1], c = cur_map.shape()[2];
  if (hist_tokens.rank() != 2 || hist_tokens.shape()[0] != h * w || hist_tokens.shape()[1] != c)
    throw ShapeError("mutual_transformer_forward: state " + shape_str(hist_tokens.shape()) +
                     " does not match map " + shape_str(cur_map.shape()));

  Tensor<T> cur = reshape(cur_map, {h * w, c});
  Tensor<T> hist = hist_tokens;
  if (toggles.use_encoder) {
    cur = encode(cur, params.encoder, cfg.heads, trace);
    hist = encode(hist, params.encoder, cfg.heads, trace);
  }
  for (const auto& dec : params.decoders) {
    Tensor<T> cur_f = cur, hist_f = hist;
    if (toggles.use_filter) {
      FilterResult<T> f = filter_maps(cur, hist, dec.filter);
      cur_f = f.cur_f;
      hist_f = f.hist_f;
    }
    MutualAttentionResult<T> ma =
        mutual_attention(hist_f, cur_f, dec.attn, cfg.heads, toggles.reuse_logits, trace);
    hist = ma.hist_out;
    cur = ma.cur_out;
  }
  TransformerForwardResult<T> out;
  out.refined = reshape(cur, {h, w, c});
  out.new_hist = hist;
  return out;
}

}  // namespace tempotrack
