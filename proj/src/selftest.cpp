#include "tempotrack/selftest.hpp"

#include <cmath>
#include <deque>

#include "tempotrack/eval.hpp"
#include "tempotrack/gradcheck.hpp"
#include "tempotrack/model.hpp"
#include "tempotrack/temporal.hpp"
#include "tempotrack/transformer.hpp"

namespace tempotrack {

namespace {

using D = double;

Tensor<D> random_tensor(Shape shape, Rng* rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t = Tensor<D>::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng->uniform(lo, hi);
  return t;
}

CheckResult check(const std::string& name, double err, double tol) {
  return {name, err, tol, err <= tol};
}

// --- gradient checks -------------------------------------------------------

CheckResult grad_matmul_softmax(Rng* rng) {
  Tensor<D> x = random_tensor({4, 3}, rng);
  Tensor<D> w = random_tensor({3, 5}, rng);
  auto f = [&]() { return sum(softmax(matmul(x, w), 1)); };
  double err = grad_check<D>(f, x, 1e-5);
  // also a non-symmetric reduction so softmax grads are non-trivial
  Tensor<D> mask = random_tensor({4, 5}, rng);
  auto f2 = [&]() { return sum(mul(softmax(matmul(x, w), 1), mask)); };
  err = std::max(err, grad_check<D>(f2, x, 1e-5));
  err = std::max(err, grad_check<D>(f2, w, 1e-5));
  return check("grad/matmul+softmax", err, 1e-4);
}

CheckResult grad_layer_norm(Rng* rng) {
  Tensor<D> x = random_tensor({3, 8}, rng);
  Tensor<D> g = random_tensor({8}, rng, 0.5, 1.5);
  Tensor<D> b = random_tensor({8}, rng);
  Tensor<D> mask = random_tensor({3, 8}, rng);
  auto f = [&]() { return sum(mul(layer_norm(x, g, b), mask)); };
  double err = grad_check<D>(f, x, 1e-5);
  err = std::max(err, grad_check<D>(f, g, 1e-5));
  err = std::max(err, grad_check<D>(f, b, 1e-5));
  return check("grad/layer-norm", err, 1e-4);
}

CheckResult grad_instance_norm(Rng* rng) {
  Tensor<D> x = random_tensor({4, 4, 3}, rng);
  Tensor<D> g = random_tensor({3}, rng, 0.5, 1.5);
  Tensor<D> b = random_tensor({3}, rng);
  Tensor<D> mask = random_tensor({4, 4, 3}, rng);
  auto f = [&]() { return sum(mul(instance_norm(x, g, b), mask)); };
  double err = grad_check<D>(f, x, 1e-5);
  err = std::max(err, grad_check<D>(f, g, 1e-5));
  err = std::max(err, grad_check<D>(f, b, 1e-5));
  return check("grad/instance-norm", err, 1e-4);
}

CheckResult grad_conv2d(Rng* rng) {
  Tensor<D> x = random_tensor({6, 6, 2}, rng);
  Tensor<D> k = random_tensor({3, 3, 2, 3}, rng);
  Tensor<D> b = random_tensor({3}, rng);
  Tensor<D> mask = random_tensor({3, 3, 3}, rng);
  auto f = [&]() { return sum(mul(conv2d(x, k, b, 2, 1), mask)); };
  double err = grad_check<D>(f, x, 1e-5);
  err = std::max(err, grad_check<D>(f, k, 1e-5));
  err = std::max(err, grad_check<D>(f, b, 1e-5));
  return check("grad/conv2d", err, 1e-4);
}

CheckResult grad_depthwise_correlation(Rng* rng) {
  Tensor<D> tmpl = random_tensor({3, 3, 4}, rng);
  Tensor<D> search = random_tensor({7, 7, 4}, rng);
  Tensor<D> mask = random_tensor({5, 5, 4}, rng);
  auto f = [&]() { return sum(mul(depthwise_correlate(tmpl, search), mask)); };
  double err = grad_check<D>(f, tmpl, 1e-5);
  err = std::max(err, grad_check<D>(f, search, 1e-5));
  return check("grad/depthwise-correlation", err, 1e-4);
}

CheckResult grad_temporal_fusion(Rng* rng) {
  const std::size_t c = 6;
  TemporalParams<D> params;
  params.beta = Tensor<D>::scalar(0.4, true);
  params.w1_w = random_tensor({3 * c, c}, rng);
  params.w1_w.set_requires_grad(true);
  params.w1_b = random_tensor({c}, rng);
  params.w1_b.set_requires_grad(true);
  std::deque<Tensor<D>> feats;
  for (int i = 0; i < 3; ++i) feats.push_back(random_tensor({4, 4, c}, rng));
  Tensor<D> t0 = random_tensor({2, 2, c}, rng);
  Tensor<D> t_prev = random_tensor({2, 2, c}, rng);
  Tensor<D> search = random_tensor({5, 5, c}, rng);
  Tensor<D> mask = random_tensor({4, 4, c}, rng);
  auto f = [&]() {
    Tensor<D> alpha = compute_alpha(feats, params);
    Tensor<D> fused = fuse_templates(t0, t_prev, alpha, params.beta);
    return sum(mul(depthwise_correlate(fused, search), mask));
  };
  double err = grad_check<D>(f, params.beta, 1e-5);
  err = std::max(err, grad_check<D>(f, params.w1_w, 1e-5));
  err = std::max(err, grad_check<D>(f, t_prev, 1e-5));
  err = std::max(err, grad_check<D>(f, feats[1], 1e-5));
  return check("grad/temporal-fusion", err, 1e-4);
}

// Small random transformer parameter set in fp64.
TransformerParams<D> random_transformer(std::size_t c, std::size_t cr, int dec_layers, Rng* rng,
                                        bool requires_grad) {
  auto weight = [&](Shape s) {
    Tensor<D> t = random_tensor(std::move(s), rng, -0.35, 0.35);
    t.set_requires_grad(requires_grad);
    return t;
  };
  TransformerParams<D> p;
  p.encoder.mha = {weight({c, c}), weight({c}), weight({c, c}), weight({c}),
                   weight({c, c}), weight({c}), weight({c, c}), weight({c})};
  p.encoder.ln_g = weight({c});
  for (auto& v : p.encoder.ln_g.data()) v = std::abs(v) + 0.5;
  p.encoder.ln_b = weight({c});
  for (int d = 0; d < dec_layers; ++d) {
    DecoderParams<D> dec;
    dec.filter.w1 = weight({2 * c, cr});
    dec.filter.b1 = weight({cr});
    dec.filter.w2 = weight({cr, 2 * c});
    dec.filter.b2 = weight({2 * c});
    auto& a = dec.attn;
    a.wq = weight({c, c});
    a.bq = weight({c});
    a.wk = weight({c, c});
    a.bk = weight({c});
    a.wv_cur = weight({c, c});
    a.bv_cur = weight({c});
    a.wv_hist = weight({c, c});
    a.bv_hist = weight({c});
    a.wo_hist = weight({c, c});
    a.bo_hist = weight({c});
    a.wo_cur = weight({c, c});
    a.bo_cur = weight({c});
    a.ln_hist_g = weight({c});
    for (auto& v : a.ln_hist_g.data()) v = std::abs(v) + 0.5;
    a.ln_hist_b = weight({c});
    a.ln_cur_g = weight({c});
    for (auto& v : a.ln_cur_g.data()) v = std::abs(v) + 0.5;
    a.ln_cur_b = weight({c});
    p.decoders.push_back(std::move(dec));
  }
  return p;
}

CheckResult grad_filter(Rng* rng) {
  const std::size_t c = 8;
  TransformerParams<D> p = random_transformer(c, c / 2, 1, rng, true);
  Tensor<D> cur = random_tensor({5, c}, rng);
  Tensor<D> hist = random_tensor({5, c}, rng);
  Tensor<D> mask = random_tensor({5, c}, rng);
  auto f = [&]() {
    FilterResult<D> fr = filter_maps(cur, hist, p.decoders[0].filter);
    return sum(add(mul(fr.cur_f, mask), mul(fr.hist_f, mask)));
  };
  double err = grad_check<D>(f, cur, 1e-5);
  err = std::max(err, grad_check<D>(f, p.decoders[0].filter.w1, 1e-5));
  err = std::max(err, grad_check<D>(f, p.decoders[0].filter.w2, 1e-5));
  return check("grad/filter", err, 1e-4);
}

CheckResult grad_mutual_attention(Rng* rng) {
  const std::size_t c = 12;
  TransformerParams<D> p = random_transformer(c, c / 2, 1, rng, true);
  Tensor<D> cur = random_tensor({5, c}, rng);
  Tensor<D> hist = random_tensor({5, c}, rng);
  Tensor<D> mask_h = random_tensor({5, c}, rng);
  Tensor<D> mask_c = random_tensor({5, c}, rng);
  auto f = [&]() {
    MutualAttentionResult<D> r = mutual_attention(hist, cur, p.decoders[0].attn, 6);
    return sum(add(mul(r.hist_out, mask_h), mul(r.cur_out, mask_c)));
  };
  double err = grad_check<D>(f, cur, 1e-5);
  err = std::max(err, grad_check<D>(f, hist, 1e-5));
  err = std::max(err, grad_check<D>(f, p.decoders[0].attn.wq, 1e-5));
  err = std::max(err, grad_check<D>(f, p.decoders[0].attn.wv_hist, 1e-5));
  return check("grad/mutual-attention", err, 1e-4);
}

CheckResult grad_transformer_stack(Rng* rng) {
  // Full encoder + filter + two decoder layers on 6x6x12 maps.
  const std::size_t c = 12;
  AttentionConfig cfg;
  cfg.heads = 6;
  cfg.model_dim = c;
  TransformerParams<D> p = random_transformer(c, c / 2, 2, rng, true);
  Tensor<D> cur = random_tensor({6, 6, c}, rng);
  Tensor<D> hist = random_tensor({36, c}, rng);
  Tensor<D> mask = random_tensor({6, 6, c}, rng);
  auto f = [&]() {
    TransformerForwardResult<D> r = mutual_transformer_forward(cur, hist, p, cfg);
    return sum(mul(r.refined, mask));
  };
  double err = grad_check<D>(f, cur, 1e-5);
  err = std::max(err, grad_check<D>(f, hist, 1e-5));
  err = std::max(err, grad_check<D>(f, p.encoder.mha.wq, 1e-5));
  err = std::max(err, grad_check<D>(f, p.decoders[0].filter.w1, 1e-5));
  err = std::max(err, grad_check<D>(f, p.decoders[1].attn.wo_cur, 1e-5));
  return check("grad/mutual-transformer-stack", err, 1e-4);
}

// --- attention checks ------------------------------------------------------

CheckResult attention_normalization(Rng* rng) {
  const std::size_t c = 12;
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng local = rng->fork(static_cast<std::uint64_t>(trial));
    TransformerParams<D> p = random_transformer(c, c / 2, 2, &local, false);
    AttentionConfig cfg;
    cfg.heads = 6;
    cfg.model_dim = c;
    Tensor<D> cur = random_tensor({4, 5, c}, &local, -2.0, 2.0);
    Tensor<D> hist = random_tensor({20, c}, &local, -2.0, 2.0);
    AttentionTrace<D> trace;
    mutual_transformer_forward(cur, hist, p, cfg, {}, &trace);
    for (const auto& s : trace.softmax_maps) {
      const std::size_t heads = s.shape()[0], nq = s.shape()[1], nk = s.shape()[2];
      const auto d = s.data();
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < nq; ++i) {
          double row = 0;
          for (std::size_t j = 0; j < nk; ++j) row += d[(h * nq + i) * nk + j];
          worst = std::max(worst, std::abs(row - 1.0));
        }
    }
  }
  return check("attention/row-normalization", worst, 1e-6);
}

// Loop-oracle current branch: builds its own logits from the shared
// projections (query side on the current map) instead of transposing.
std::vector<D> oracle_current_branch(const Tensor<D>& hist_f, const Tensor<D>& cur_f,
                                     const MutualAttnParams<D>& p, std::size_t heads) {
  const std::size_t n = cur_f.shape()[0], c = cur_f.shape()[1], hd = c / heads;
  auto project = [&](const Tensor<D>& x, const Tensor<D>& w, const Tensor<D>& b) {
    std::vector<D> out(n * c, 0.0);
    const auto dx = x.data(), dw = w.data(), db = b.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double acc = db[j];
        for (std::size_t k = 0; k < c; ++k) acc += dx[i * c + k] * dw[k * c + j];
        out[i * c + j] = acc;
      }
    return out;
  };
  const std::vector<D> q = project(cur_f, p.wk, p.bk);    // current tokens as queries
  const std::vector<D> k = project(hist_f, p.wq, p.bq);   // historical tokens as keys
  const std::vector<D> v = project(hist_f, p.wv_hist, p.bv_hist);

  std::vector<D> att(n * c, 0.0);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0;
        for (std::size_t d = 0; d < hd; ++d)
          acc += q[i * c + h * hd + d] * k[j * c + h * hd + d];
        logits[j] = acc * inv_scale;
        mx = std::max(mx, logits[j]);
      }
      double denom = 0;
      for (std::size_t j = 0; j < n; ++j) {
        logits[j] = std::exp(logits[j] - mx);
        denom += logits[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double s = logits[j] / denom;
        for (std::size_t d = 0; d < hd; ++d)
          att[i * c + h * hd + d] += s * v[j * c + h * hd + d];
      }
    }

  // output projection, residual, layer norm
  std::vector<D> out(n * c, 0.0);
  const auto wo = p.wo_cur.data(), bo = p.bo_cur.data();
  const auto cur = cur_f.data();
  const auto lg = p.ln_cur_g.data(), lb = p.ln_cur_b.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(c);
    for (std::size_t j = 0; j < c; ++j) {
      double acc = bo[j];
      for (std::size_t k2 = 0; k2 < c; ++k2) acc += att[i * c + k2] * wo[k2 * c + j];
      row[j] = cur[i * c + j] + acc;
    }
    double m = 0;
    for (double x : row) m += x;
    m /= static_cast<double>(c);
    double var = 0;
    for (double x : row) var += (x - m) * (x - m);
    var /= static_cast<double>(c);
    const double inv_std = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = lg[j] * (row[j] - m) * inv_std + lb[j];
  }
  return out;
}

CheckResult logits_reuse_equivalence(Rng* rng) {
  const std::size_t c = 12;
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng local = rng->fork(1000 + static_cast<std::uint64_t>(trial));
    TransformerParams<D> p = random_transformer(c, c / 2, 1, &local, false);
    Tensor<D> cur = random_tensor({6, c}, &local, -1.5, 1.5);
    Tensor<D> hist = random_tensor({6, c}, &local, -1.5, 1.5);
    MutualAttentionResult<D> reuse = mutual_attention(hist, cur, p.decoders[0].attn, 6, true);
    const std::vector<D> oracle = oracle_current_branch(hist, cur, p.decoders[0].attn, 6);
    const auto got = reuse.cur_out.data();
    for (std::size_t i = 0; i < oracle.size(); ++i)
      worst = std::max(worst, std::abs(got[i] - oracle[i]));
  }
  return check("attention/logits-reuse-equivalence", worst, 1e-6);
}

// --- memory checks ---------------------------------------------------------

CheckResult fifo_memory() {
  // Features tagged by constant value; expectation simulated independently.
  auto tagged = [](double v) { return Tensor<D>::full({1, 1, 1}, v); };
  struct Scenario {
    std::vector<double> scores;
    double tau;
  };
  const std::vector<Scenario> scenarios = {
      {{4, 2, 5}, 3.0},          // canonical accept/reject/accept
      {{3, 3, 3}, 3.0},          // boundary: tau exactly, never accepted
      {{10, 11, 12, 13}, 3.0},   // all accepted, rolls over capacity
      {{-5, 0, 2.9}, 3.0},       // none accepted
      {{4, 4, 2, 6, 1}, 3.0},    // mixed
  };
  int mismatches = 0;
  for (const auto& sc : scenarios) {
    TemplateMemory<D> mem = TemplateMemory<D>::init(tagged(-1), tagged(0), 3, sc.tau);
    std::deque<double> expect = {0, 0, 0};
    for (std::size_t step = 0; step < sc.scores.size(); ++step) {
      const double tag = static_cast<double>(step + 1);
      update_memory(mem, tagged(tag), tagged(tag + 100), sc.scores[step]);
      if (sc.scores[step] > sc.tau) {
        expect.push_back(tag);
        expect.pop_front();
      }
    }
    if (mem.feats.size() != 3) ++mismatches;
    for (std::size_t i = 0; i < mem.feats.size(); ++i)
      if (mem.feats[i].data()[0] != expect[i]) ++mismatches;
  }
  return check("memory/fifo-scenarios", static_cast<double>(mismatches), 0.0);
}

// --- metric checks ---------------------------------------------------------

CheckResult metric_oracles() {
  auto box = [](double x, double y, double w, double h) { return BBox::from_corner(x, y, w, h); };
  struct Fixture {
    std::vector<BBox> pred, gt;
  };
  std::vector<Fixture> fixtures;
  // 1: perfect predictions
  fixtures.push_back({{box(0, 0, 10, 10), box(5, 5, 10, 10), box(2, 8, 4, 6)},
                      {box(0, 0, 10, 10), box(5, 5, 10, 10), box(2, 8, 4, 6)}});
  // 2: CLEs {0, 15, 30} with identical sizes
  fixtures.push_back({{box(0, 0, 10, 10), box(15, 0, 10, 10), box(30, 0, 10, 10)},
                      {box(0, 0, 10, 10), box(0, 0, 10, 10), box(0, 0, 10, 10)}});
  // 3: disjoint far-away predictions
  fixtures.push_back({{box(100, 100, 5, 5), box(120, 120, 5, 5)},
                      {box(0, 0, 5, 5), box(0, 0, 5, 5)}});
  // 4: half-overlap mix
  fixtures.push_back({{box(0, 0, 2, 2), box(1, 0, 2, 2), box(0, 0, 2, 2), box(4, 4, 2, 2)},
                      {box(0, 0, 2, 2), box(0, 0, 2, 2), box(1, 1, 2, 2), box(0, 0, 2, 2)}});
  // 5: varying sizes
  fixtures.push_back({{box(0, 0, 8, 8), box(2, 2, 8, 8), box(10, 0, 4, 4)},
                      {box(0, 0, 16, 16), box(0, 0, 8, 8), box(10, 0, 8, 8)}});

  double worst = 0;
  int fixture_id = 0;
  for (const auto& fx : fixtures) {
    ++fixture_id;
    std::map<std::string, TrackResult> results;
    std::map<std::string, std::vector<BBox>> gts;
    TrackResult tr;
    tr.boxes = fx.pred;
    tr.scores.assign(fx.pred.size(), 0.0);
    results["f"] = tr;
    gts["f"] = fx.gt;
    MetricsReport rep = compute_metrics(results, gts);

    // brute-force recount
    const std::size_t n = fx.pred.size();
    for (int t = 0; t < kCurvePoints; ++t) {
      int pc = 0, sc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = std::hypot(fx.pred[i].cx - fx.gt[i].cx, fx.pred[i].cy - fx.gt[i].cy);
        if (d <= static_cast<double>(t)) ++pc;
        const double ix = std::max(0.0, std::min(fx.pred[i].x1(), fx.gt[i].x1()) -
                                            std::max(fx.pred[i].x0(), fx.gt[i].x0()));
        const double iy = std::max(0.0, std::min(fx.pred[i].y1(), fx.gt[i].y1()) -
                                            std::max(fx.pred[i].y0(), fx.gt[i].y0()));
        const double inter = ix * iy;
        const double ov = inter / (fx.pred[i].w * fx.pred[i].h + fx.gt[i].w * fx.gt[i].h - inter);
        if (ov > static_cast<double>(t) / 50.0) ++sc;
      }
      const auto& m = rep.sequences.at("f");
      worst = std::max(worst, std::abs(m.precision_curve[t] - static_cast<double>(pc) / n));
      worst = std::max(worst, std::abs(m.success_curve[t] - static_cast<double>(sc) / n));
    }
    if (fixture_id == 2) {
      // pinned: precision(20) must be exactly 2/3 for CLEs {0,15,30}
      worst = std::max(worst,
                       std::abs(rep.sequences.at("f").precision_at_20 - 2.0 / 3.0));
    }
  }
  return check("metrics/oracle-fixtures", worst, 0.0);
}

}  // namespace

std::vector<CheckResult> run_selftests() {
  Rng rng(20240817);
  std::vector<CheckResult> out;
  out.push_back(grad_matmul_softmax(&rng));
  out.push_back(grad_layer_norm(&rng));
  out.push_back(grad_instance_norm(&rng));
  out.push_back(grad_conv2d(&rng));
  out.push_back(grad_depthwise_correlation(&rng));
  out.push_back(grad_temporal_fusion(&rng));
  out.push_back(grad_filter(&rng));
  out.push_back(grad_mutual_attention(&rng));
  out.push_back(grad_transformer_stack(&rng));
  out.push_back(attention_normalization(&rng));
  out.push_back(logits_reuse_equivalence(&rng));
  out.push_back(fifo_memory());
  out.push_back(metric_oracles());
  return out;
}

}  // namespace tempotrack
