#pragma once

// Correlation-map generation with template fusion: a confidence-gated FIFO
// of bbox-masked search features drives a per-channel calibration vector
// that mixes the previous template into the initial one before depth-wise
// correlation.

#include <deque>

#include "tempotrack/geometry.hpp"
#include "tempotrack/tensor.hpp"

namespace tempotrack {

// Per-channel valid cross-correlation of search with the template as kernel.
// Output is [Hs-Ht+1, Ws-Wt+1, C]; differentiable w.r.t. both inputs.
template <typename T>
Tensor<T> depthwise_correlate(const Tensor<T>& tmpl, const Tensor<T>& search) {
  if (tmpl.rank() != 3 || search.rank() != 3)
    throw ShapeError("depthwise_correlate: expected rank-3 maps, got " +
                     shape_str(tmpl.shape()) + " and " + shape_str(search.shape()));
  const std::size_t th = tmpl.shape()[0], tw = tmpl.shape()[1], c = tmpl.shape()[2];
  const std::size_t sh = search.shape()[0], sw = search.shape()[1];
  if (search.shape()[2] != c || th > sh || tw > sw)
    throw ShapeError("depthwise_correlate: template " + shape_str(tmpl.shape()) +
                     " does not fit search " + shape_str(search.shape()));
  const std::size_t oh = sh - th + 1, ow = sw - tw + 1;

  std::vector<T> out(oh * ow * c, T(0));
  const auto dt = tmpl.data(), ds = search.data();
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* orow = out.data() + (oy * ow + ox) * c;
      for (std::size_t ky = 0; ky < th; ++ky) {
        const T* srow = ds.data() + ((oy + ky) * sw + ox) * c;
        const T* trow = dt.data() + ky * tw * c;
        for (std::size_t kx = 0; kx < tw; ++kx) {
          const T* sp = srow + kx * c;
          const T* tp = trow + kx * c;
          for (std::size_t ch = 0; ch < c; ++ch) orow[ch] += sp[ch] * tp[ch];
        }
      }
    }

  auto tn = tmpl.node(), sn = search.node();
  return detail::make_result<T>(
      {oh, ow, c}, std::move(out), {tmpl, search},
      [tn, sn, th, tw, c, sw, oh, ow](TensorNode<T>& o) {
        const bool gt = tn->requires_grad, gs = sn->requires_grad;
        if (gt) tn->ensure_grad();
        if (gs) sn->ensure_grad();
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T* grow = o.grad.data() + (oy * ow + ox) * c;
            for (std::size_t ky = 0; ky < th; ++ky)
              for (std::size_t kx = 0; kx < tw; ++kx) {
                const std::size_t soff = ((oy + ky) * sw + ox + kx) * c;
                const std::size_t toff = (ky * tw + kx) * c;
                for (std::size_t ch = 0; ch < c; ++ch) {
                  if (gt) tn->grad[toff + ch] += grow[ch] * sn->value[soff + ch];
                  if (gs) sn->grad[soff + ch] += grow[ch] * tn->value[toff + ch];
                }
              }
          }
      });
}

template <typename T>
struct MaskedFeature {
  Tensor<T> feat;
  bool fully_outside = false;
};

// Zeroes feature cells outside the bbox projected onto the feature grid
// (pixel coords / stride, rounded outward). Spatial size is preserved so the
// downstream concat/pool shapes stay fixed.
template <typename T>
MaskedFeature<T> mask_by_bbox(const Tensor<T>& feature, const BBox& bbox, int stride) {
  if (feature.rank() != 3)
    throw ShapeError("mask_by_bbox: expected rank-3 feature, got " + shape_str(feature.shape()));
  if (!(bbox.w > 0) || !(bbox.h > 0))
    throw ContractError("mask_by_bbox: bbox must have positive size");
  const std::size_t h = feature.shape()[0], w = feature.shape()[1], c = feature.shape()[2];

  const std::ptrdiff_t gx0 = static_cast<std::ptrdiff_t>(std::floor(bbox.x0() / stride));
  const std::ptrdiff_t gy0 = static_cast<std::ptrdiff_t>(std::floor(bbox.y0() / stride));
  const std::ptrdiff_t gx1 = static_cast<std::ptrdiff_t>(std::ceil(bbox.x1() / stride));
  const std::ptrdiff_t gy1 = static_cast<std::ptrdiff_t>(std::ceil(bbox.y1() / stride));

  const std::ptrdiff_t cx0 = std::max<std::ptrdiff_t>(0, gx0);
  const std::ptrdiff_t cy0 = std::max<std::ptrdiff_t>(0, gy0);
  const std::ptrdiff_t cx1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w), gx1);
  const std::ptrdiff_t cy1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h), gy1);

  MaskedFeature<T> result;
  result.fully_outside = cx0 >= cx1 || cy0 >= cy1;

  std::vector<T> maskv(h * w, T(0));
  if (!result.fully_outside)
    for (std::ptrdiff_t y = cy0; y < cy1; ++y)
      for (std::ptrdiff_t x = cx0; x < cx1; ++x) maskv[y * w + x] = T(1);

  std::vector<T> out(feature.size());
  const auto df = feature.data();
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) out[p * c + ch] = df[p * c + ch] * maskv[p];

  auto fn = feature.node();
  result.feat = detail::make_result<T>(
      feature.shape(), std::move(out), {feature},
      [fn, maskv = std::move(maskv), h, w, c](TensorNode<T>& o) {
        if (!fn->requires_grad) return;
        fn->ensure_grad();
        for (std::size_t p = 0; p < h * w; ++p)
          for (std::size_t ch = 0; ch < c; ++ch)
            fn->grad[p * c + ch] += o.grad[p * c + ch] * maskv[p];
      });
  return result;
}

// Learnable pieces of the fusion: scalar mixing weight (zero-initialized so
// step 0 reduces to the initial template) and the calibration projection.
template <typename T>
struct TemporalParams {
  Tensor<T> beta;  // [1]
  Tensor<T> w1_w;  // [n*C, C]
  Tensor<T> w1_b;  // [C]
};

template <typename T>
struct TemplateMemory {
  Tensor<T> t0;                  // initial template feature, fixed after init
  Tensor<T> t_prev;              // template feature of the last accepted frame
  std::deque<Tensor<T>> feats;   // exactly `capacity` masked search features, oldest first
  int capacity = 3;
  double tau = 3.0;

  static TemplateMemory init(Tensor<T> t0, const Tensor<T>& masked0, int capacity, double tau) {
    TemplateMemory mem;
    mem.t0 = std::move(t0);
    mem.t_prev = mem.t0.detach();
    mem.capacity = capacity;
    mem.tau = tau;
    for (int i = 0; i < capacity; ++i) mem.feats.push_back(masked0.detach());
    return mem;
  }
};

// alpha = W1(GAP(Concat(F_{b-n}, ..., F_{b-1}))): one calibration weight per
// template channel.
template <typename T>
Tensor<T> compute_alpha(const std::deque<Tensor<T>>& feats, const TemporalParams<T>& params) {
  if (feats.empty()) throw ContractError("compute_alpha: empty feature queue");
  std::vector<Tensor<T>> pooled;
  pooled.reserve(feats.size());
  for (const auto& f : feats) pooled.push_back(global_avg_pool(f));
  Tensor<T> desc = concat(pooled, 0);  // [n*C]
  const std::size_t in_dim = desc.shape()[0];
  if (params.w1_w.shape()[0] != in_dim)
    throw ShapeError("compute_alpha: projection expects " + shape_str(params.w1_w.shape()) +
                     " input but descriptor is " + shape_str(desc.shape()));
  Tensor<T> row = reshape(desc, {1, in_dim});
  Tensor<T> alpha = linear(row, params.w1_w, params.w1_b);
  return reshape(alpha, {alpha.shape()[1]});
}

// T_t = T0 + beta * (alpha ⊙ T_prev), alpha broadcast over spatial positions.
template <typename T>
Tensor<T> fuse_templates(const Tensor<T>& t0, const Tensor<T>& t_prev, const Tensor<T>& alpha,
                         const Tensor<T>& beta) {
  if (t0.shape() != t_prev.shape())
    throw ShapeError("fuse_templates: template shapes differ: " + shape_str(t0.shape()) +
                     " vs " + shape_str(t_prev.shape()));
  if (alpha.rank() != 1 || alpha.shape()[0] != t0.shape().back())
    throw ShapeError("fuse_templates: alpha " + shape_str(alpha.shape()) +
                     " must match channel count of " + shape_str(t0.shape()));
  return add(t0, scale_by(channel_scale(t_prev, alpha), beta));
}

// Pushes the masked feature and refreshes t_prev only when the confidence
// strictly exceeds tau. Returns whether the update was accepted.
template <typename T>
bool update_memory(TemplateMemory<T>& mem, const Tensor<T>& masked_feat,
                   const Tensor<T>& new_template_feat, double score) {
  if (!std::isfinite(score)) throw ContractError("update_memory: score must be finite");
  if (!(score > mem.tau)) return false;
  mem.feats.push_back(masked_feat.detach());
  mem.feats.pop_front();
  mem.t_prev = new_template_feat.detach();
  return true;
}

template <typename T>
struct TemporalForwardResult {
  Tensor<T> corr;
  Tensor<T> fused_template;
};

// Full step-1 forward. With use_fusion=false the fused template is exactly
// t0 (structural bypass used by the baseline ablation).
template <typename T>
TemporalForwardResult<T> temporal_forward(const TemplateMemory<T>& mem,
                                          const TemporalParams<T>& params,
                                          const Tensor<T>& search_feat, const Tensor<T>& t0,
                                          bool use_fusion) {
  TemporalForwardResult<T> out;
  if (use_fusion) {
    Tensor<T> alpha = compute_alpha(mem.feats, params);
    out.fused_template = fuse_templates(t0, mem.t_prev, alpha, params.beta);
  } else {
    out.fused_template = t0;
  }
  out.corr = depthwise_correlate(out.fused_template, search_feat);
  return out;
}

}  // namespace tempotrack
