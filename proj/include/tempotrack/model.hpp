#pragma once

// Full parameter set: toy stride-8 conv backbone, temporal-correlation
// fusion, mutual transformer, and the anchor-free localization head.

#include <string>
#include <utility>
#include <vector>

#include "tempotrack/config.hpp"
#include "tempotrack/temporal.hpp"
#include "tempotrack/transformer.hpp"

namespace tempotrack {

template <typename T>
struct ConvLayer {
  Tensor<T> w;  // [KH,KW,Cin,Cout]
  Tensor<T> b;  // [Cout]
  std::size_t stride = 1;
  std::size_t pad = 1;
};

template <typename T>
struct NormPair {
  Tensor<T> g, b;
};

template <typename T>
struct Backbone {
  ConvLayer<T> c1, c2, c3, c4;
  NormPair<T> n1, n2, n3;  // instance norms keep correlation responses stable

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = relu(instance_norm(conv2d(x, c1.w, c1.b, c1.stride, c1.pad), n1.g, n1.b));
    h = relu(instance_norm(conv2d(h, c2.w, c2.b, c2.stride, c2.pad), n2.g, n2.b));
    h = relu(instance_norm(conv2d(h, c3.w, c3.b, c3.stride, c3.pad), n3.g, n3.b));
    return conv2d(h, c4.w, c4.b, c4.stride, c4.pad);  // linear output stage
  }
};

template <typename T>
struct HeadParams {
  ConvLayer<T> cls1, cls2;  // C -> hidden -> 1
  ConvLayer<T> reg1, reg2;  // C -> hidden -> 4
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;  // shares the node with the owning module
};

template <typename T>
struct Model {
  TrackerConfig cfg;
  Backbone<T> backbone;
  TemporalParams<T> temporal;
  TransformerParams<T> transformer;
  HeadParams<T> head;

  std::vector<NamedParam<T>> params;  // registration order is the checkpoint order

  static Model random_init(const TrackerConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    m.build(&rng);
    return m;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params) p.tensor.zero_grad();
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& p : params)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }

 private:
  // Uniform(-k, k) with k = 1/sqrt(fan_in); biases and the fusion weight
  // start at zero, layer norms at identity.
  Tensor<T> make_weight(Shape shape, std::size_t fan_in, Rng* rng, const std::string& name) {
    const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> t = Tensor<T>::zeros(shape, true);
    auto d = t.data();
    for (auto& v : d) v = static_cast<T>(rng->uniform(-k, k));
    params.push_back({name, t});
    return t;
  }

  Tensor<T> make_const(Shape shape, T value, const std::string& name) {
    Tensor<T> t = Tensor<T>::full(std::move(shape), value, true);
    params.push_back({name, t});
    return t;
  }

  ConvLayer<T> make_conv(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                         std::size_t stride, std::size_t pad, Rng* rng, const std::string& name) {
    ConvLayer<T> l;
    l.w = make_weight({kh, kw, cin, cout}, kh * kw * cin, rng, name + ".w");
    l.b = make_const({cout}, T(0), name + ".b");
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  MhaParams<T> make_mha(std::size_t c, Rng* rng, const std::string& name) {
    MhaParams<T> p;
    p.wq = make_weight({c, c}, c, rng, name + ".wq");
    p.bq = make_const({c}, T(0), name + ".bq");
    p.wk = make_weight({c, c}, c, rng, name + ".wk");
    p.bk = make_const({c}, T(0), name + ".bk");
    p.wv = make_weight({c, c}, c, rng, name + ".wv");
    p.bv = make_const({c}, T(0), name + ".bv");
    p.wo = make_weight({c, c}, c, rng, name + ".wo");
    p.bo = make_const({c}, T(0), name + ".bo");
    return p;
  }

  void build(Rng* rng) {
    const auto c = static_cast<std::size_t>(cfg.channels);
    backbone.c1 = make_conv(3, 3, 3, cfg.bb1(), 2, 1, rng, "backbone.c1");
    backbone.n1 = {make_const({static_cast<std::size_t>(cfg.bb1())}, T(1), "backbone.n1.g"),
                   make_const({static_cast<std::size_t>(cfg.bb1())}, T(0), "backbone.n1.b")};
    backbone.c2 = make_conv(3, 3, cfg.bb1(), cfg.bb2(), 2, 1, rng, "backbone.c2");
    backbone.n2 = {make_const({static_cast<std::size_t>(cfg.bb2())}, T(1), "backbone.n2.g"),
                   make_const({static_cast<std::size_t>(cfg.bb2())}, T(0), "backbone.n2.b")};
    backbone.c3 = make_conv(3, 3, cfg.bb2(), cfg.bb3(), 2, 1, rng, "backbone.c3");
    backbone.n3 = {make_const({static_cast<std::size_t>(cfg.bb3())}, T(1), "backbone.n3.g"),
                   make_const({static_cast<std::size_t>(cfg.bb3())}, T(0), "backbone.n3.b")};
    backbone.c4 = make_conv(3, 3, cfg.bb3(), cfg.channels, 1, 1, rng, "backbone.c4");

    temporal.beta = make_const({1}, T(0), "temporal.beta");
    const std::size_t hist_in = static_cast<std::size_t>(cfg.n_hist > 0 ? cfg.n_hist : 1) * c;
    temporal.w1_w = make_weight({hist_in, c}, hist_in, rng, "temporal.w1.w");
    temporal.w1_b = make_const({c}, T(0), "temporal.w1.b");

    transformer.encoder.mha = make_mha(c, rng, "mt.encoder.mha");
    transformer.encoder.ln_g = make_const({c}, T(1), "mt.encoder.ln.g");
    transformer.encoder.ln_b = make_const({c}, T(0), "mt.encoder.ln.b");

    transformer.decoders.clear();
    for (int d = 0; d < cfg.dec_layers; ++d) {
      const std::string base = "mt.dec" + std::to_string(d);
      DecoderParams<T> dec;
      const std::size_t cr = c / static_cast<std::size_t>(cfg.reduction);
      dec.filter.w1 = make_weight({2 * c, cr}, 2 * c, rng, base + ".filter.w1");
      dec.filter.b1 = make_const({cr}, T(0), base + ".filter.b1");
      dec.filter.w2 = make_weight({cr, 2 * c}, cr, rng, base + ".filter.w2");
      dec.filter.b2 = make_const({2 * c}, T(0), base + ".filter.b2");
      auto& a = dec.attn;
      a.wq = make_weight({c, c}, c, rng, base + ".attn.wq");
      a.bq = make_const({c}, T(0), base + ".attn.bq");
      a.wk = make_weight({c, c}, c, rng, base + ".attn.wk");
      a.bk = make_const({c}, T(0), base + ".attn.bk");
      a.wv_cur = make_weight({c, c}, c, rng, base + ".attn.wv_cur");
      a.bv_cur = make_const({c}, T(0), base + ".attn.bv_cur");
      a.wv_hist = make_weight({c, c}, c, rng, base + ".attn.wv_hist");
      a.bv_hist = make_const({c}, T(0), base + ".attn.bv_hist");
      a.wo_hist = make_weight({c, c}, c, rng, base + ".attn.wo_hist");
      a.bo_hist = make_const({c}, T(0), base + ".attn.bo_hist");
      a.wo_cur = make_weight({c, c}, c, rng, base + ".attn.wo_cur");
      a.bo_cur = make_const({c}, T(0), base + ".attn.bo_cur");
      a.ln_hist_g = make_const({c}, T(1), base + ".ln_hist.g");
      a.ln_hist_b = make_const({c}, T(0), base + ".ln_hist.b");
      a.ln_cur_g = make_const({c}, T(1), base + ".ln_cur.g");
      a.ln_cur_b = make_const({c}, T(0), base + ".ln_cur.b");
      transformer.decoders.push_back(std::move(dec));
    }

    const auto hid = static_cast<std::size_t>(cfg.head_hidden());
    head.cls1 = make_conv(3, 3, c, hid, 1, 1, rng, "head.cls1");
    head.cls2 = make_conv(3, 3, hid, 1, 1, 1, rng, "head.cls2");
    head.reg1 = make_conv(3, 3, c, hid, 1, 1, rng, "head.reg1");
    head.reg2 = make_conv(3, 3, hid, 4, 1, 1, rng, "head.reg2");
    // bias the offsets positive (about one stride) so the final relu starts
    // in its active region
    for (auto& v : head.reg2.b.data()) v = static_cast<T>(cfg.stride);
  }
};

// Rebuilds the calibration projection for a different history length. The
// projection is a stack of per-slot blocks (oldest first); a shorter memory
// keeps the newest trained blocks, a longer one repeats the oldest, and rows
// are rescaled by trained_n/new_n so the calibration magnitude is comparable.
// n_hist = 0 disables fusion entirely (plain depth-wise correlation).
template <typename T>
void adapt_history_length(Model<T>& model, int new_n) {
  const int trained_n = model.cfg.n_hist;
  if (new_n == trained_n) return;
  if (new_n < 0) throw ContractError("adapt_history_length: negative history length");
  const auto c = static_cast<std::size_t>(model.cfg.channels);
  const int eff_new = std::max(1, new_n);  // memory keeps >=1 slot even when fusion is off
  const int eff_old = std::max(1, trained_n);
  Tensor<T> w = Tensor<T>::zeros({static_cast<std::size_t>(eff_new) * c, c}, true);
  const auto src = model.temporal.w1_w.data();
  auto dst = w.data();
  const T rescale = static_cast<T>(static_cast<double>(eff_old) / eff_new);
  for (int slot = 0; slot < eff_new; ++slot) {
    // map so that the newest slots align: new slot eff_new-1 <-> old eff_old-1
    int src_slot = slot + (eff_old - eff_new);
    src_slot = std::max(0, std::min(eff_old - 1, src_slot));
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t col = 0; col < c; ++col)
        dst[(static_cast<std::size_t>(slot) * c + r) * c + col] =
            src[(static_cast<std::size_t>(src_slot) * c + r) * c + col] * rescale;
  }
  model.temporal.w1_w = w;
  for (auto& p : model.params)
    if (p.name == "temporal.w1.w") p.tensor = w;
  model.cfg.n_hist = new_n;
}

// Closed-form parameter count for a config; must equal the registered total
// and the sum of checkpoint tensor sizes.
inline std::size_t analytic_param_count(const TrackerConfig& cfg) {
  const std::size_t c = static_cast<std::size_t>(cfg.channels);
  const std::size_t b1 = cfg.bb1(), b2 = cfg.bb2(), b3 = cfg.bb3();
  std::size_t n = 0;
  // backbone convs (3x3 kernels + biases) with instance-norm affines
  n += 9 * 3 * b1 + b1 + 2 * b1;
  n += 9 * b1 * b2 + b2 + 2 * b2;
  n += 9 * b2 * b3 + b3 + 2 * b3;
  n += 9 * b3 * c + c;
  // temporal fusion
  const std::size_t hist_in = static_cast<std::size_t>(cfg.n_hist > 0 ? cfg.n_hist : 1) * c;
  n += 1 + hist_in * c + c;
  // encoder: 4 projections + biases + norm
  n += 4 * c * c + 4 * c + 2 * c;
  // decoders: filter bottleneck + 6 projections + biases + two norms
  const std::size_t cr = c / static_cast<std::size_t>(cfg.reduction);
  n += static_cast<std::size_t>(cfg.dec_layers) *
       (2 * c * cr + cr + cr * 2 * c + 2 * c + 6 * c * c + 6 * c + 4 * c);
  // head towers
  const std::size_t hid = static_cast<std::size_t>(cfg.head_hidden());
  n += 9 * c * hid + hid + 9 * hid * 1 + 1;
  n += 9 * c * hid + hid + 9 * hid * 4 + 4;
  return n;
}

}  // namespace tempotrack
