#pragma once

// End-to-end single-object tracker: crop -> backbone -> temporal correlation
// -> mutual transformer -> anchor-free head -> windowed argmax decode, plus
// the gated memory/state updates.

#include <chrono>

#include "tempotrack/checkpoint.hpp"
#include "tempotrack/geometry.hpp"
#include "tempotrack/image.hpp"
#include "tempotrack/model.hpp"
#include "tempotrack/temporal.hpp"
#include "tempotrack/transformer.hpp"

namespace tempotrack {

// Square crop window in image coordinates plus the crop->image scale.
struct CropWindow {
  double cx = 0, cy = 0, side = 0;
  int out_size = 0;
  double scale() const { return side / out_size; }
  double x_lo() const { return cx - side / 2.0; }
  double y_lo() const { return cy - side / 2.0; }
};

struct CropInfo {
  int fully_outside_pixels = 0;  // output pixels whose sample point is off-frame
};

inline CropWindow crop_window_for(const BBox& bbox, double context_factor, int out_size) {
  const double p = (bbox.w + bbox.h) / 2.0;
  const double side = context_factor * std::sqrt((bbox.w + p) * (bbox.h + p));
  return {bbox.cx, bbox.cy, side, out_size};
}

// Bilinear crop resampled to out_size x out_size, normalized to [0,1].
// Samples that fall outside the frame use the frame's per-channel mean.
template <typename T>
Tensor<T> crop_patch(const Image& frame, const CropWindow& win, CropInfo* info = nullptr) {
  if (frame.empty()) throw ContractError("crop_patch: empty frame");
  const int out = win.out_size;
  const double step = win.side / out;
  double mean[3];
  channel_means(frame, mean);

  std::vector<T> data(static_cast<std::size_t>(out) * out * 3);
  int oob = 0;
  for (int i = 0; i < out; ++i) {
    const double sy = win.y_lo() + (i + 0.5) * step;  // continuous frame coords
    const double uy = sy - 0.5;                       // pixel-index space
    for (int j = 0; j < out; ++j) {
      const double sx = win.x_lo() + (j + 0.5) * step;
      const double ux = sx - 0.5;
      const int x0 = static_cast<int>(std::floor(ux));
      const int y0 = static_cast<int>(std::floor(uy));
      const double tx = ux - x0, ty = uy - y0;
      const bool outside = (x0 + 1 < 0 || x0 >= frame.width || y0 + 1 < 0 || y0 >= frame.height);
      if (outside) ++oob;
      T* px = data.data() + (static_cast<std::size_t>(i) * out + j) * 3;
      for (int c = 0; c < 3; ++c) {
        auto tap = [&](int x, int y) -> double {
          if (x < 0 || x >= frame.width || y < 0 || y >= frame.height) return mean[c];
          return frame.px(x, y)[c];
        };
        const double v = (1 - ty) * ((1 - tx) * tap(x0, y0) + tx * tap(x0 + 1, y0)) +
                         ty * ((1 - tx) * tap(x0, y0 + 1) + tx * tap(x0 + 1, y0 + 1));
        px[c] = static_cast<T>(v / 255.0);
      }
    }
  }
  if (info) info->fully_outside_pixels = oob;
  return Tensor<T>::from({static_cast<std::size_t>(out), static_cast<std::size_t>(out), 3},
                         std::move(data));
}

template <typename T>
Tensor<T> crop_patch(const Image& frame, const BBox& bbox, double context_factor, int out_size,
                     CropInfo* info = nullptr) {
  if (!bbox.valid()) throw ContractError("crop_patch: invalid bbox");
  return crop_patch<T>(frame, crop_window_for(bbox, context_factor, out_size), info);
}

// Maps an image-space box into crop pixel coordinates.
inline BBox box_to_crop(const BBox& b, const CropWindow& win) {
  const double s = win.scale();
  return {(b.cx - win.x_lo()) / s, (b.cy - win.y_lo()) / s, b.w / s, b.h / s};
}

template <typename T>
struct HeadOutputs {
  Tensor<T> cls;  // [H,W,1] raw logits
  Tensor<T> reg;  // [H,W,4] non-negative (l,t,r,b) in crop pixels
};

template <typename T>
HeadOutputs<T> head_forward(const Tensor<T>& refined, const HeadParams<T>& p) {
  HeadOutputs<T> out;
  Tensor<T> h1 = relu(conv2d(refined, p.cls1.w, p.cls1.b, p.cls1.stride, p.cls1.pad));
  out.cls = conv2d(h1, p.cls2.w, p.cls2.b, p.cls2.stride, p.cls2.pad);
  Tensor<T> h2 = relu(conv2d(refined, p.reg1.w, p.reg1.b, p.reg1.stride, p.reg1.pad));
  out.reg = relu(conv2d(h2, p.reg2.w, p.reg2.b, p.reg2.stride, p.reg2.pad));
  return out;
}

// Crop-pixel position of correlation cell (i,j); the grid is centred in the
// search crop with `stride` spacing.
inline double corr_cell_pos(int idx, int grid, int search_size, int stride) {
  const double offset = (search_size - static_cast<double>(grid - 1) * stride) / 2.0;
  return offset + static_cast<double>(idx) * stride;
}

struct TargetSelection {
  BBox bbox;           // image coords, smoothed, not yet clamped
  double raw_score;    // raw cls logit at the argmax (tau lives on this scale)
  int cell_y = 0, cell_x = 0;
};

// Window-penalised argmax decode. The returned confidence is the raw logit,
// not the sigmoid, so the update threshold keeps an unbounded scale.
template <typename T>
TargetSelection select_target(const Tensor<T>& cls, const Tensor<T>& reg,
                              const CropWindow& win, const BBox& prev, const TrackerConfig& cfg) {
  const std::size_t h = cls.shape()[0], w = cls.shape()[1];
  if (reg.shape()[0] != h || reg.shape()[1] != w)
    throw ShapeError("select_target: cls " + shape_str(cls.shape()) + " vs reg " +
                     shape_str(reg.shape()));
  auto hann = [](std::size_t n, std::size_t i) {
    if (n <= 1) return 1.0;
    return 0.5 * (1.0 - std::cos(2.0 * 3.141592653589793 * static_cast<double>(i) /
                                 static_cast<double>(n - 1)));
  };
  const double wi = cfg.window_influence;
  const auto dc = cls.data();
  double best = -1e300;
  std::size_t bi = 0, bj = 0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double logit = static_cast<double>(dc[i * w + j]);
      const double prob = 1.0 / (1.0 + std::exp(-logit));
      const double score = (1.0 - wi) * prob + wi * hann(h, i) * hann(w, j);
      if (score > best) {
        best = score;
        bi = i;
        bj = j;
      }
    }

  const auto dr = reg.data();
  const std::size_t roff = (bi * w + bj) * 4;
  const double l = dr[roff], t = dr[roff + 1], r = dr[roff + 2], b = dr[roff + 3];
  const double px = corr_cell_pos(static_cast<int>(bj), static_cast<int>(w), cfg.search_size,
                                  cfg.stride);
  const double py = corr_cell_pos(static_cast<int>(bi), static_cast<int>(h), cfg.search_size,
                                  cfg.stride);
  const double s = win.scale();
  const double cx_img = win.x_lo() + (px + (r - l) / 2.0) * s;
  const double cy_img = win.y_lo() + (py + (b - t) / 2.0) * s;
  const double w_img = std::max(1.0, (l + r) * s);
  const double h_img = std::max(1.0, (t + b) * s);

  TargetSelection sel;
  sel.cell_y = static_cast<int>(bi);
  sel.cell_x = static_cast<int>(bj);
  sel.raw_score = static_cast<double>(dc[bi * w + bj]);
  sel.bbox.cx = cx_img;
  sel.bbox.cy = cy_img;
  sel.bbox.w = cfg.smooth_factor * w_img + (1.0 - cfg.smooth_factor) * prev.w;
  sel.bbox.h = cfg.smooth_factor * h_img + (1.0 - cfg.smooth_factor) * prev.h;
  return sel;
}

struct StageTimes {
  double backbone_ms = 0, temporal_ms = 0, transformer_ms = 0, head_ms = 0;
};

template <typename T>
struct StepTrace {
  Tensor<T> raw_corr;
  Tensor<T> fused_template;
  Tensor<T> refined;
  Tensor<T> cls, reg;
  StageTimes times;
};

template <typename T>
struct TrackerState {
  BBox bbox;
  double score = 0;
  TemplateMemory<T> mem;
  Tensor<T> hist_tokens;  // transformer state, [N,C]
  int frame_w = 0, frame_h = 0;
};

// Serialized footprint of the per-sequence state; must stay constant over a
// sequence (bounded-memory contract).
template <typename T>
std::size_t state_byte_size(const TrackerState<T>& s) {
  std::size_t bytes = sizeof(BBox) + sizeof(double) + 2 * sizeof(int);
  auto tensor_bytes = [](const Tensor<T>& t) {
    return t.defined() ? t.size() * sizeof(T) + t.shape().size() * sizeof(std::size_t) : 0u;
  };
  bytes += tensor_bytes(s.mem.t0) + tensor_bytes(s.mem.t_prev);
  for (const auto& f : s.mem.feats) bytes += tensor_bytes(f);
  bytes += tensor_bytes(s.hist_tokens);
  return bytes;
}

template <typename T>
TrackerState<T> tracker_init(const Model<T>& model, const Image& frame, const BBox& bbox,
                             StepTrace<T>* trace = nullptr) {
  if (!bbox.valid()) throw ContractError("tracker_init: invalid bbox");
  NoGradGuard no_grad;
  const TrackerConfig& cfg = model.cfg;
  const AblationToggles tog = toggles_for(cfg.ablation);

  TrackerState<T> state;
  state.frame_w = frame.width;
  state.frame_h = frame.height;
  state.bbox = bbox.clamped(frame.width, frame.height);

  Tensor<T> t_img = crop_patch<T>(frame, state.bbox, cfg.template_context, cfg.template_size);
  Tensor<T> t0 = model.backbone.forward(t_img);

  const CropWindow win = crop_window_for(state.bbox, cfg.search_context(), cfg.search_size);
  Tensor<T> s_img = crop_patch<T>(frame, win);
  Tensor<T> search_feat = model.backbone.forward(s_img);

  MaskedFeature<T> masked = mask_by_bbox(search_feat, box_to_crop(state.bbox, win), cfg.stride);
  state.mem = TemplateMemory<T>::init(t0, masked.feat, std::max(1, cfg.n_hist), cfg.tau);

  Tensor<T> corr0 = depthwise_correlate(t0, search_feat);
  const std::size_t n = corr0.shape()[0] * corr0.shape()[1];
  Tensor<T> tokens = reshape(corr0, {n, static_cast<std::size_t>(cfg.channels)});
  if (tog.use_transformer && tog.use_encoder)
    tokens = encode(tokens, model.transformer.encoder, cfg.attention().heads);
  state.hist_tokens = tokens.detach();

  if (trace) {
    trace->raw_corr = corr0;
    trace->fused_template = t0;
  }
  return state;
}

template <typename T>
struct StepResult {
  BBox bbox;
  double score = 0;
};

template <typename T>
StepResult<T> tracker_step(const Model<T>& model, TrackerState<T>& state, const Image& frame,
                           StepTrace<T>* trace = nullptr) {
  NoGradGuard no_grad;
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };
  const TrackerConfig& cfg = model.cfg;
  const AblationToggles tog = toggles_for(cfg.ablation);

  auto t_start = clock::now();
  const CropWindow win = crop_window_for(state.bbox, cfg.search_context(), cfg.search_size);
  Tensor<T> s_img = crop_patch<T>(frame, win);
  Tensor<T> search_feat = model.backbone.forward(s_img);
  const double backbone_ms = ms_since(t_start);

  auto t_temporal = clock::now();
  const bool fusion = tog.use_fusion && cfg.n_hist > 0;
  TemporalForwardResult<T> tc =
      temporal_forward(state.mem, model.temporal, search_feat, state.mem.t0, fusion);
  const double temporal_ms = ms_since(t_temporal);

  auto t_mt = clock::now();
  Tensor<T> refined = tc.corr;
  Tensor<T> new_hist;
  if (tog.use_transformer) {
    TransformerToggles mt_tog;
    mt_tog.use_encoder = tog.use_encoder;
    mt_tog.use_filter = tog.use_filter;
    TransformerForwardResult<T> mt = mutual_transformer_forward(
        tc.corr, state.hist_tokens, model.transformer, cfg.attention(), mt_tog);
    refined = mt.refined;
    new_hist = mt.new_hist;
  }
  const double transformer_ms = ms_since(t_mt);

  auto t_head = clock::now();
  HeadOutputs<T> head = head_forward(refined, model.head);
  TargetSelection sel = select_target(head.cls, head.reg, win, state.bbox, cfg);
  const double head_ms = ms_since(t_head);

  if (!std::isfinite(sel.raw_score) || !sel.bbox.valid())
    throw ContractError("tracker_step: non-finite prediction");

  const BBox new_box = sel.bbox.clamped(frame.width, frame.height);

  // Memory update is gated on the raw confidence; the transformer state is
  // carried unconditionally.
  MaskedFeature<T> masked = mask_by_bbox(search_feat, box_to_crop(new_box, win), cfg.stride);
  update_memory(state.mem, masked.feat, tc.fused_template, sel.raw_score);
  if (tog.use_transformer) state.hist_tokens = new_hist.detach();

  state.bbox = new_box;
  state.score = sel.raw_score;

  if (trace) {
    trace->raw_corr = tc.corr;
    trace->fused_template = tc.fused_template;
    trace->refined = refined;
    trace->cls = head.cls;
    trace->reg = head.reg;
    trace->times = {backbone_ms, temporal_ms, transformer_ms, head_ms};
  }
  return {new_box, sel.raw_score};
}

}  // namespace tempotrack
