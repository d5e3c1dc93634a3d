#pragma once

// Toy-scale trainer: SGD with momentum over template/search pairs sampled
// from synthetic sequences, with the historical-frame memory active so the
// fusion weights learn alongside the backbone, transformer, and head.

#include <deque>

#include "tempotrack/eval.hpp"
#include "tempotrack/model.hpp"
#include "tempotrack/tracker.hpp"

namespace tempotrack {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  int samples_per_epoch = 160;
  double lr_start = 5e-3;
  double lr_end = 5e-4;
  double momentum = 0.9;
  int max_frame_gap = 100;
  double center_jitter = 8.0;  // px, search-crop mis-centering during training
  double iou_positive = 0.6;   // decoded-box IoU needed for a positive cls label
  std::uint64_t seed = 7;
};

// Geometric interpolation between the endpoint learning rates.
inline double lr_at_epoch(const TrainConfig& tc, int epoch) {
  if (tc.epochs <= 1) return tc.lr_start;
  const double t = static_cast<double>(epoch) / static_cast<double>(tc.epochs - 1);
  return tc.lr_start * std::pow(tc.lr_end / tc.lr_start, t);
}

template <typename T>
struct SgdMomentum {
  double lr = 1e-3;
  double momentum = 0.9;
  std::vector<std::vector<T>> velocity;

  void step(Model<T>& model) {
    if (velocity.size() != model.params.size()) {
      velocity.clear();
      for (const auto& p : model.params) velocity.emplace_back(p.tensor.size(), T(0));
    }
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      auto& p = model.params[i].tensor;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto v = velocity[i].data();
      auto d = p.data();
      for (std::size_t j = 0; j < g.size(); ++j) {
        v[j] = static_cast<T>(momentum) * v[j] + g[j];
        d[j] -= static_cast<T>(lr) * v[j];
      }
    }
  }
};

template <typename T>
struct TrainingSample {
  Tensor<T> template_img;                 // template crop of the exemplar frame
  Tensor<T> prev_template_img;            // template crop of the newest historical frame
  Tensor<T> search_img;                   // search crop of the target frame
  std::vector<Tensor<T>> hist_search_imgs;  // search crops of the historical frames
  std::vector<BBox> hist_boxes_in_crop;   // their gt mapped into those crops
  BBox gt_in_crop;                        // target-frame gt in search-crop coords
  Tensor<T> hist_corr_search_img;         // = last hist search crop (alias)
};

// Builds one training sample from a sequence: exemplar frame i, target frame
// j with |i-j| <= gap, and `train_hist` historical frames < j.
template <typename T>
TrainingSample<T> make_sample(const Sequence& seq, const TrackerConfig& cfg,
                              const TrainConfig& tc, Rng* rng) {
  const int n = static_cast<int>(seq.size());
  const int j = static_cast<int>(rng->uniform_int(1, n - 1));
  const int lo = std::max(0, j - tc.max_frame_gap);
  const int i = static_cast<int>(rng->uniform_int(lo, j - 1 >= lo ? j - 1 : lo));

  TrainingSample<T> s;
  s.template_img = crop_patch<T>(seq.frame(i), seq.gt[i], cfg.template_context, cfg.template_size);

  std::vector<int> hist;
  for (int k = 0; k < cfg.train_hist; ++k)
    hist.push_back(static_cast<int>(rng->uniform_int(lo, j - 1 >= lo ? j - 1 : lo)));
  std::sort(hist.begin(), hist.end());

  for (int hf : hist) {
    const Image img = seq.frame(hf);
    const CropWindow win = crop_window_for(seq.gt[hf], cfg.search_context(), cfg.search_size);
    s.hist_search_imgs.push_back(crop_patch<T>(img, win));
    s.hist_boxes_in_crop.push_back(box_to_crop(seq.gt[hf], win));
  }
  s.prev_template_img =
      crop_patch<T>(seq.frame(hist.back()), seq.gt[hist.back()], cfg.template_context,
                    cfg.template_size);
  s.hist_corr_search_img = s.hist_search_imgs.back();

  // Search crop centred off the target to mimic tracker drift.
  const Image target_img = seq.frame(j);
  BBox center = seq.gt[j];
  center.cx += rng->uniform(-tc.center_jitter, tc.center_jitter);
  center.cy += rng->uniform(-tc.center_jitter, tc.center_jitter);
  center.w = seq.gt[j].w;
  center.h = seq.gt[j].h;
  const CropWindow win = crop_window_for(center, cfg.search_context(), cfg.search_size);
  s.search_img = crop_patch<T>(target_img, win);
  s.gt_in_crop = box_to_crop(seq.gt[j], win);
  return s;
}

template <typename T>
struct SampleLoss {
  Tensor<T> loss;
  double cls_loss = 0, reg_loss = 0;
};

// Forward + loss for one sample. Historical features are treated as data
// (detached); gradients reach the backbone through the exemplar and search
// crops, and reach the fusion/transformer/head parameters directly.
template <typename T>
SampleLoss<T> sample_loss(Model<T>& model, const TrainingSample<T>& s, const TrainConfig& tc) {
  const TrackerConfig& cfg = model.cfg;
  const AblationToggles tog = toggles_for(cfg.ablation);

  Tensor<T> t0 = model.backbone.forward(s.template_img);

  // Historical memory contents, detached.
  std::deque<Tensor<T>> feats;
  Tensor<T> hist_search_feat;
  {
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < s.hist_search_imgs.size(); ++k) {
      Tensor<T> f = model.backbone.forward(s.hist_search_imgs[k]);
      if (k + 1 == s.hist_search_imgs.size()) hist_search_feat = f;
      feats.push_back(mask_by_bbox(f, s.hist_boxes_in_crop[k], cfg.stride).feat.detach());
    }
  }
  Tensor<T> t_prev;
  {
    NoGradGuard no_grad;
    t_prev = model.backbone.forward(s.prev_template_img).detach();
  }

  Tensor<T> search_feat = model.backbone.forward(s.search_img);

  Tensor<T> fused = t0;
  const bool fusion = tog.use_fusion && cfg.n_hist > 0;
  if (fusion) {
    Tensor<T> alpha = compute_alpha(feats, model.temporal);
    fused = fuse_templates(t0, t_prev, alpha, model.temporal.beta);
  }
  Tensor<T> corr = depthwise_correlate(fused, search_feat);

  Tensor<T> refined = corr;
  if (tog.use_transformer) {
    Tensor<T> hist_corr;
    {
      NoGradGuard no_grad;
      Tensor<T> t0_d = t0.detach();
      hist_corr = depthwise_correlate(t0_d, hist_search_feat);
    }
    const std::size_t ntok = hist_corr.shape()[0] * hist_corr.shape()[1];
    Tensor<T> hist_tokens = reshape(hist_corr, {ntok, static_cast<std::size_t>(cfg.channels)});
    TransformerToggles mt_tog;
    mt_tog.use_encoder = tog.use_encoder;
    mt_tog.use_filter = tog.use_filter;
    if (mt_tog.use_encoder)
      hist_tokens = encode(hist_tokens, model.transformer.encoder, cfg.attention().heads);
    TransformerForwardResult<T> mt = mutual_transformer_forward(
        corr, hist_tokens, model.transformer, cfg.attention(), mt_tog);
    refined = mt.refined;
  }

  HeadOutputs<T> head = head_forward(refined, model.head);
  const std::size_t gh = head.cls.shape()[0], gw = head.cls.shape()[1];

  // Cell-wise targets in crop pixels. Classification positives are assigned
  // dynamically: a centre-inside cell counts as positive once its decoded box
  // reaches the IoU threshold. Regression is supervised at those positives
  // plus the single centre-closest cell, which bootstraps the assignment out
  // of the all-negative initial state.
  Tensor<T> reg_targets = Tensor<T>::zeros({gh, gw, 4});
  Tensor<T> reg_mask = Tensor<T>::zeros({gh, gw});
  Tensor<T> cls_targets = Tensor<T>::zeros({gh, gw, 1});
  auto rt = reg_targets.data();
  auto rm = reg_mask.data();
  auto ct = cls_targets.data();
  const auto pred_reg = head.reg.data();
  const BBox& gt = s.gt_in_crop;
  std::ptrdiff_t boot_cell = -1;
  double boot_dist = 1e300;
  for (std::size_t iy = 0; iy < gh; ++iy)
    for (std::size_t ix = 0; ix < gw; ++ix) {
      const double px = corr_cell_pos(static_cast<int>(ix), static_cast<int>(gw),
                                      cfg.search_size, cfg.stride);
      const double py = corr_cell_pos(static_cast<int>(iy), static_cast<int>(gh),
                                      cfg.search_size, cfg.stride);
      const double l = px - gt.x0(), t = py - gt.y0();
      const double r = gt.x1() - px, b = gt.y1() - py;
      const std::size_t cell = iy * gw + ix;
      if (!(l > 0 && t > 0 && r > 0 && b > 0)) continue;
      rt[cell * 4 + 0] = static_cast<T>(l);
      rt[cell * 4 + 1] = static_cast<T>(t);
      rt[cell * 4 + 2] = static_cast<T>(r);
      rt[cell * 4 + 3] = static_cast<T>(b);
      const double dist = std::hypot(px - gt.cx, py - gt.cy);
      if (dist < boot_dist) {
        boot_dist = dist;
        boot_cell = static_cast<std::ptrdiff_t>(cell);
      }
      const double pl = pred_reg[cell * 4 + 0], pt = pred_reg[cell * 4 + 1];
      const double pr = pred_reg[cell * 4 + 2], pb = pred_reg[cell * 4 + 3];
      const double iw = std::min(pl, l) + std::min(pr, r);
      const double ih = std::min(pt, t) + std::min(pb, b);
      const double inter = iw * ih;
      const double uni = (pl + pr) * (pt + pb) + (l + r) * (t + b) - inter + 1e-9;
      if (inter / uni > tc.iou_positive) {
        ct[cell] = T(1);
        rm[cell] = T(1);
      }
    }
  if (boot_cell >= 0) rm[boot_cell] = T(1);

  // Balanced BCE with an ignore band: positives and clear negatives (centre
  // outside the target) each carry half the weight; centre-inside cells that
  // have not yet reached the IoU threshold are ignored instead of being
  // fought over, and while the assignment is still all-negative cls is left
  // untouched rather than saturated toward background.
  Tensor<T> cls_weights = Tensor<T>::zeros({gh, gw, 1});
  {
    auto cw = cls_weights.data();
    std::size_t n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < gh * gw; ++i) {
      if (ct[i] > T(0.5))
        ++n_pos;
      else if (rt[i * 4] == T(0) && rt[i * 4 + 1] == T(0) && rt[i * 4 + 2] == T(0) &&
               rt[i * 4 + 3] == T(0))
        ++n_neg;  // centre outside the target box
    }
    if (n_pos > 0 && n_neg > 0)
      for (std::size_t i = 0; i < gh * gw; ++i) {
        const bool inside = rt[i * 4] != T(0) || rt[i * 4 + 1] != T(0) ||
                            rt[i * 4 + 2] != T(0) || rt[i * 4 + 3] != T(0);
        if (ct[i] > T(0.5))
          cw[i] = T(0.5) / static_cast<T>(n_pos);
        else if (!inside)
          cw[i] = T(0.5) / static_cast<T>(n_neg);
      }
  }
  Tensor<T> cls_loss = bce_with_logits_weighted(head.cls, cls_targets, cls_weights);
  Tensor<T> reg_loss = ltrb_iou_loss(head.reg, reg_targets, reg_mask);
  SampleLoss<T> out;
  out.loss = add(cls_loss, reg_loss);
  out.cls_loss = static_cast<double>(cls_loss.item());
  out.reg_loss = static_cast<double>(reg_loss.item());
  return out;
}

struct TrainRecord {
  int epoch = 0;
  int step = 0;
  double lr = 0;
  double loss = 0;
};

// Returns the per-batch loss trace. Deterministic for a given seed.
template <typename T>
std::vector<TrainRecord> toy_train(Model<T>& model, const std::vector<Sequence>& dataset,
                                   const TrainConfig& tc,
                                   const std::function<void(const TrainRecord&)>& on_step = {}) {
  if (dataset.empty()) throw ContractError("toy_train: empty dataset");
  Rng rng(tc.seed);
  SgdMomentum<T> opt;
  opt.momentum = tc.momentum;
  std::vector<TrainRecord> trace;
  int global_step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    opt.lr = lr_at_epoch(tc, epoch);
    int done = 0;
    while (done < tc.samples_per_epoch) {
      const int batch = std::min(tc.batch_size, tc.samples_per_epoch - done);
      model.zero_grad();
      double batch_loss = 0;
      for (int b = 0; b < batch; ++b) {
        const auto& seq = dataset[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(dataset.size()) - 1))];
        TrainingSample<T> sample = make_sample<T>(seq, model.cfg, tc, &rng);
        SampleLoss<T> sl = sample_loss(model, sample, tc);
        Tensor<T> scaled = scale(sl.loss, static_cast<T>(1.0 / batch));
        scaled.backward();
        batch_loss += static_cast<double>(sl.loss.item()) / batch;
      }
      opt.step(model);
      done += batch;
      TrainRecord rec{epoch, global_step++, opt.lr, batch_loss};
      trace.push_back(rec);
      if (on_step) on_step(rec);
    }
  }
  return trace;
}

}  // namespace tempotrack
