#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tempotrack/gradcheck.hpp"
#include "tempotrack/model.hpp"
#include "tempotrack/transformer.hpp"

#include "oracles.hpp"

using namespace tempotrack;
using D = double;

namespace {

MhaParams<D> random_mha(std::size_t c, Rng* rng, bool zero_bias = false) {
  MhaParams<D> p;
  p.wq = testutil::random_tensor({c, c}, rng, -0.4, 0.4);
  p.wk = testutil::random_tensor({c, c}, rng, -0.4, 0.4);
  p.wv = testutil::random_tensor({c, c}, rng, -0.4, 0.4);
  p.wo = testutil::random_tensor({c, c}, rng, -0.4, 0.4);
  p.bq = zero_bias ? Tensor<D>::zeros({c}) : testutil::random_tensor({c}, rng);
  p.bk = zero_bias ? Tensor<D>::zeros({c}) : testutil::random_tensor({c}, rng);
  p.bv = zero_bias ? Tensor<D>::zeros({c}) : testutil::random_tensor({c}, rng);
  p.bo = zero_bias ? Tensor<D>::zeros({c}) : testutil::random_tensor({c}, rng);
  return p;
}

MutualAttnParams<D> random_mutual(std::size_t c, Rng* rng) {
  MutualAttnParams<D> p;
  auto w = [&] { return testutil::random_tensor({c, c}, rng, -0.4, 0.4); };
  auto b = [&] { return testutil::random_tensor({c}, rng, -0.2, 0.2); };
  p.wq = w();
  p.bq = b();
  p.wk = w();
  p.bk = b();
  p.wv_cur = w();
  p.bv_cur = b();
  p.wv_hist = w();
  p.bv_hist = b();
  p.wo_hist = w();
  p.bo_hist = b();
  p.wo_cur = w();
  p.bo_cur = b();
  p.ln_hist_g = testutil::random_tensor({c}, rng, 0.6, 1.4);
  p.ln_hist_b = b();
  p.ln_cur_g = testutil::random_tensor({c}, rng, 0.6, 1.4);
  p.ln_cur_b = b();
  return p;
}

// All projections and norms shared between the two branches (and wq == wk so
// the shared logits matrix is symmetric for identical inputs).
MutualAttnParams<D> tied_mutual(std::size_t c, Rng* rng) {
  MutualAttnParams<D> p = random_mutual(c, rng);
  p.wk = p.wq.detach();
  p.bk = p.bq.detach();
  p.wv_hist = p.wv_cur.detach();
  p.bv_hist = p.bv_cur.detach();
  p.wo_cur = p.wo_hist.detach();
  p.bo_cur = p.bo_hist.detach();
  p.ln_cur_g = p.ln_hist_g.detach();
  p.ln_cur_b = p.ln_hist_b.detach();
  return p;
}

FilterParams<D> random_filter(std::size_t c, std::size_t r, Rng* rng) {
  FilterParams<D> p;
  p.w1 = testutil::random_tensor({2 * c, c / r}, rng, -0.4, 0.4);
  p.b1 = testutil::random_tensor({c / r}, rng, -0.2, 0.2);
  p.w2 = testutil::random_tensor({c / r, 2 * c}, rng, -0.4, 0.4);
  p.b2 = testutil::random_tensor({2 * c}, rng, -0.2, 0.2);
  return p;
}

TransformerParams<D> random_transformer(std::size_t c, int layers, Rng* rng) {
  TransformerParams<D> p;
  p.encoder.mha = random_mha(c, rng);
  p.encoder.ln_g = testutil::random_tensor({c}, rng, 0.6, 1.4);
  p.encoder.ln_b = testutil::random_tensor({c}, rng, -0.2, 0.2);
  for (int i = 0; i < layers; ++i) {
    DecoderParams<D> d;
    d.filter = random_filter(c, 2, rng);
    d.attn = random_mutual(c, rng);
    p.decoders.push_back(std::move(d));
  }
  return p;
}

}  // namespace

TEST_CASE("multi_head_attention single token forces softmax to one") {
  Rng rng(1);
  const std::size_t c = 12;
  MhaParams<D> p = random_mha(c, &rng);
  Tensor<D> q = testutil::random_tensor({1, c}, &rng);
  Tensor<D> v = testutil::random_tensor({1, c}, &rng);
  Tensor<D> out = multi_head_attention(q, q, v, p, 6);
  // with one key, attention output reduces to Wo applied to the projected v
  const auto expect = testutil::naive_mha(q.data(), q.data(), v.data(), 1, 1, c, 6,
                                          p.wq.data(), p.bq.data(), p.wk.data(), p.bk.data(),
                                          p.wv.data(), p.bv.data(), p.wo.data(), p.bo.data());
  for (std::size_t i = 0; i < c; ++i)
    CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("zero queries give uniform attention over value rows") {
  Rng rng(2);
  const std::size_t c = 12, n = 5;
  MhaParams<D> p = random_mha(c, &rng, /*zero_bias=*/true);
  Tensor<D> q = Tensor<D>::zeros({n, c});
  Tensor<D> kv = testutil::random_tensor({n, c}, &rng);
  Tensor<D> out = multi_head_attention(q, kv, kv, p, 6);
  // uniform attention averages the projected v rows, then projects by Wo
  std::vector<double> vp(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t k = 0; k < c; ++k) vp[i * c + j] += kv.data()[i * c + k] * p.wv.data()[k * c + j];
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += vp[i * c + j] / n;
  for (std::size_t row = 0; row < n; ++row)
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < c; ++k) acc += mean[k] * p.wo.data()[k * c + j];
      CHECK(out.data()[row * c + j] == doctest::Approx(acc).epsilon(1e-10));
    }
}

TEST_CASE("multi_head_attention matches the per-head loop oracle") {
  Rng rng(3);
  const std::size_t c = 12;
  MhaParams<D> p = random_mha(c, &rng);
  Tensor<D> q = testutil::random_tensor({5, c}, &rng);
  Tensor<D> k = testutil::random_tensor({7, c}, &rng);
  Tensor<D> v = testutil::random_tensor({7, c}, &rng);
  Tensor<D> out = multi_head_attention(q, k, v, p, 6);
  const auto expect = testutil::naive_mha(q.data(), k.data(), v.data(), 5, 7, c, 6,
                                          p.wq.data(), p.bq.data(), p.wk.data(), p.bk.data(),
                                          p.wv.data(), p.bv.data(), p.wo.data(), p.bo.data());
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-10));

  Tensor<D> bad = testutil::random_tensor({7, c + 1}, &rng);
  CHECK_THROWS_AS(multi_head_attention(q, bad, bad, p, 6), ShapeError);
}

TEST_CASE("encode examples") {
  Rng rng(4);
  const std::size_t c = 12;
  EncoderParams<D> enc;
  enc.mha = random_mha(c, &rng, /*zero_bias=*/true);
  enc.ln_g = Tensor<D>::full({c}, 1.0);
  enc.ln_b = testutil::random_tensor({c}, &rng);

  // zero input with zero biases: attention output is zero, so the result is
  // the layer-norm affine of zeros = beta broadcast
  Tensor<D> zero = Tensor<D>::zeros({6, c});
  Tensor<D> out = encode(zero, enc, 6);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < c; ++j)
      CHECK(out.data()[r * c + j] == doctest::Approx(enc.ln_b.data()[j]).epsilon(1e-12));

  // residual pipeline preserves the token shape
  Tensor<D> x = testutil::random_tensor({9, c}, &rng);
  CHECK(encode(x, enc, 6).shape() == x.shape());

  // random map equals the step-by-step composition
  Tensor<D> att = multi_head_attention(x, x, x, enc.mha, 6);
  Tensor<D> manual = layer_norm(add(x, att), enc.ln_g, enc.ln_b);
  Tensor<D> got = encode(x, enc, 6);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.data()[i] == manual.data()[i]);
}

TEST_CASE("filter: zero W2 gives a 0.5 gate everywhere") {
  Rng rng(5);
  const std::size_t c = 8;
  FilterParams<D> p = random_filter(c, 2, &rng);
  p.w2 = Tensor<D>::zeros({c / 2, 2 * c});
  p.b2 = Tensor<D>::zeros({2 * c});
  Tensor<D> cur = testutil::random_tensor({5, c}, &rng);
  Tensor<D> hist = testutil::random_tensor({5, c}, &rng);
  FilterResult<D> f = filter_maps(cur, hist, p);
  for (auto v : f.omega.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  for (std::size_t i = 0; i < cur.size(); ++i) {
    CHECK(f.cur_f.data()[i] == doctest::Approx(0.5 * cur.data()[i]).epsilon(1e-12));
    CHECK(f.hist_f.data()[i] == doctest::Approx(0.5 * hist.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("filter chunk split: first half gates current, second half history") {
  // Force a known omega by zeroing W1 (hidden = relu(b1)) and back-solving is
  // overkill; instead check the split structurally via per-channel scaling.
  Rng rng(6);
  const std::size_t c = 6;
  FilterParams<D> p = random_filter(c, 2, &rng);
  Tensor<D> cur = Tensor<D>::full({4, c}, 1.0);
  Tensor<D> hist = Tensor<D>::full({4, c}, 1.0);
  FilterResult<D> f = filter_maps(cur, hist, p);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      CHECK(f.cur_f.data()[r * c + j] == doctest::Approx(f.omega.data()[j]).epsilon(1e-12));
      CHECK(f.hist_f.data()[r * c + j] == doctest::Approx(f.omega.data()[c + j]).epsilon(1e-12));
    }
  // every gate strictly inside (0,1)
  for (auto v : f.omega.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("filter matches the composed pooling/linear/sigmoid oracle") {
  Rng rng(7);
  const std::size_t c = 8, n = 5;
  FilterParams<D> p = random_filter(c, 2, &rng);
  Tensor<D> cur = testutil::random_tensor({n, c}, &rng);
  Tensor<D> hist = testutil::random_tensor({n, c}, &rng);
  FilterResult<D> f = filter_maps(cur, hist, p);

  // oracle: token-mean of channel-concat -> w1 -> relu -> w2 -> sigmoid
  std::vector<double> desc(2 * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      desc[j] += cur.data()[i * c + j] / n;
      desc[c + j] += hist.data()[i * c + j] / n;
    }
  std::vector<double> hidden(c / 2, 0.0);
  for (std::size_t j = 0; j < c / 2; ++j) {
    double acc = p.b1.data()[j];
    for (std::size_t k = 0; k < 2 * c; ++k) acc += desc[k] * p.w1.data()[k * (c / 2) + j];
    hidden[j] = std::max(0.0, acc);
  }
  for (std::size_t j = 0; j < 2 * c; ++j) {
    double acc = p.b2.data()[j];
    for (std::size_t k = 0; k < c / 2; ++k) acc += hidden[k] * p.w2.data()[k * 2 * c + j];
    const double omega = 1.0 / (1.0 + std::exp(-acc));
    CHECK(f.omega.data()[j] == doctest::Approx(omega).epsilon(1e-12));
  }
}

TEST_CASE("mutual attention: identical inputs with shared projections match") {
  Rng rng(8);
  const std::size_t c = 12;
  MutualAttnParams<D> p = tied_mutual(c, &rng);
  Tensor<D> x = testutil::random_tensor({6, c}, &rng);
  MutualAttentionResult<D> r = mutual_attention(x, x, p, 6);
  REQUIRE(r.hist_out.size() == r.cur_out.size());
  for (std::size_t i = 0; i < r.hist_out.size(); ++i)
    CHECK(r.hist_out.data()[i] == doctest::Approx(r.cur_out.data()[i]).epsilon(1e-12));
}

TEST_CASE("mutual attention single-token maps reduce to value projections") {
  Rng rng(9);
  const std::size_t c = 12;
  MutualAttnParams<D> p = random_mutual(c, &rng);
  Tensor<D> hist = testutil::random_tensor({1, c}, &rng);
  Tensor<D> cur = testutil::random_tensor({1, c}, &rng);
  MutualAttentionResult<D> r = mutual_attention(hist, cur, p, 6);
  // with one token per side, both attentions collapse to the value paths
  Tensor<D> v_cur = linear(cur, p.wv_cur, p.bv_cur);
  Tensor<D> manual_hist =
      layer_norm(add(hist, linear(v_cur, p.wo_hist, p.bo_hist)), p.ln_hist_g, p.ln_hist_b);
  Tensor<D> v_hist = linear(hist, p.wv_hist, p.bv_hist);
  Tensor<D> manual_cur =
      layer_norm(add(cur, linear(v_hist, p.wo_cur, p.bo_cur)), p.ln_cur_g, p.ln_cur_b);
  for (std::size_t i = 0; i < c; ++i) {
    CHECK(r.hist_out.data()[i] == doctest::Approx(manual_hist.data()[i]).epsilon(1e-12));
    CHECK(r.cur_out.data()[i] == doctest::Approx(manual_cur.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("transpose reuse equals the independent no-reuse computation") {
  Rng rng(10);
  const std::size_t c = 12;
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng local = rng.fork(trial);
    MutualAttnParams<D> p = random_mutual(c, &local);
    Tensor<D> hist = testutil::random_tensor({6, c}, &local);
    Tensor<D> cur = testutil::random_tensor({6, c}, &local);
    MutualAttentionResult<D> reuse = mutual_attention(hist, cur, p, 6, /*reuse=*/true);

    // independent computation: own projections, own logits product, own
    // softmax, using naive_mha with the roles the current branch sees
    const auto att = testutil::naive_mha(
        cur.data(), hist.data(), hist.data(), 6, 6, c, 6, p.wk.data(), p.bk.data(), p.wq.data(),
        p.bq.data(), p.wv_hist.data(), p.bv_hist.data(), p.wo_cur.data(), p.bo_cur.data());
    std::vector<double> residual(6 * c);
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = cur.data()[i] + att[i];
    const auto expect = testutil::naive_layer_norm(residual, p.ln_cur_g.data(),
                                                   p.ln_cur_b.data(), 6, c, 1e-5);
    for (std::size_t i = 0; i < expect.size(); ++i)
      worst = std::max(worst, std::abs(reuse.cur_out.data()[i] - expect[i]));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("attention rows sum to one in both branches") {
  Rng rng(11);
  const std::size_t c = 12;
  MutualAttnParams<D> p = random_mutual(c, &rng);
  Tensor<D> hist = testutil::random_tensor({7, c}, &rng, -3.0, 3.0);
  Tensor<D> cur = testutil::random_tensor({7, c}, &rng, -3.0, 3.0);
  AttentionTrace<D> trace;
  mutual_attention(hist, cur, p, 6, true, &trace);
  REQUIRE(trace.softmax_maps.size() == 2);
  for (const auto& s : trace.softmax_maps) {
    const std::size_t heads = s.shape()[0], nq = s.shape()[1], nk = s.shape()[2];
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < nq; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < nk; ++j) row += s.data()[(h * nq + i) * nk + j];
        CHECK(std::abs(row - 1.0) <= 1e-6);
      }
  }
}

TEST_CASE("reuse saves exactly one logits product per decoder layer") {
  Rng rng(12);
  const std::size_t c = 12;
  AttentionConfig cfg;
  cfg.heads = 6;
  cfg.model_dim = c;
  TransformerParams<D> p = random_transformer(c, 2, &rng);
  Tensor<D> cur = testutil::random_tensor({4, 4, c}, &rng);
  Tensor<D> hist = testutil::random_tensor({16, c}, &rng);

  TransformerToggles reuse_tog;
  reset_op_counters();
  mutual_transformer_forward(cur, hist, p, cfg, reuse_tog);
  const auto reuse_count = op_counters().attention_logits_products;

  TransformerToggles noreuse_tog;
  noreuse_tog.reuse_logits = false;
  reset_op_counters();
  mutual_transformer_forward(cur, hist, p, cfg, noreuse_tog);
  const auto noreuse_count = op_counters().attention_logits_products;
  reset_op_counters();

  CHECK(noreuse_count - reuse_count == 2);  // one per decoder layer
  CHECK(reuse_count == 2 + 2);              // two encode calls + one per decoder
}

TEST_CASE("forward preserves spatial shape and matches the composed pipeline") {
  Rng rng(13);
  const std::size_t c = 12;
  AttentionConfig cfg;
  cfg.heads = 6;
  cfg.model_dim = c;
  TransformerParams<D> p = random_transformer(c, 2, &rng);
  Tensor<D> cur = testutil::random_tensor({4, 5, c}, &rng);
  Tensor<D> hist = testutil::random_tensor({20, c}, &rng);

  TransformerForwardResult<D> out = mutual_transformer_forward(cur, hist, p, cfg);
  CHECK(out.refined.shape() == cur.shape());
  CHECK(out.new_hist.shape() == hist.shape());

  // layer-by-layer composition of the already-verified stages
  Tensor<D> cur_tok = encode(reshape(cur, {20, c}), p.encoder, 6);
  Tensor<D> hist_tok = encode(hist, p.encoder, 6);
  for (int layer = 0; layer < 2; ++layer) {
    FilterResult<D> f = filter_maps(cur_tok, hist_tok, p.decoders[layer].filter);
    MutualAttentionResult<D> ma = mutual_attention(f.hist_f, f.cur_f, p.decoders[layer].attn, 6);
    hist_tok = ma.hist_out;
    cur_tok = ma.cur_out;
  }
  for (std::size_t i = 0; i < cur_tok.size(); ++i) {
    CHECK(out.refined.data()[i] == cur_tok.data()[i]);
    CHECK(out.new_hist.data()[i] == hist_tok.data()[i]);
  }
}

TEST_CASE("frame-1 symmetry: state equal to the current map with tied branches") {
  Rng rng(14);
  const std::size_t c = 12;
  AttentionConfig cfg;
  cfg.heads = 6;
  cfg.model_dim = c;
  TransformerParams<D> p = random_transformer(c, 1, &rng);
  p.decoders[0].attn = tied_mutual(c, &rng);
  // tie the filter's two gate halves as well so both branches see the same
  // gated input
  {
    auto w2 = p.decoders[0].filter.w2.data();  // [c/2, 2c]
    auto b2 = p.decoders[0].filter.b2.data();  // [2c]
    for (std::size_t row = 0; row < c / 2; ++row)
      for (std::size_t j = 0; j < c; ++j) w2[row * 2 * c + c + j] = w2[row * 2 * c + j];
    for (std::size_t j = 0; j < c; ++j) b2[c + j] = b2[j];
  }
  Tensor<D> map = testutil::random_tensor({3, 3, c}, &rng);
  Tensor<D> state = reshape(map, {9, c}).detach();
  TransformerForwardResult<D> out = mutual_transformer_forward(map, state, p, cfg);
  // the refined (current-branch) map equals the historical-branch output
  for (std::size_t i = 0; i < out.new_hist.size(); ++i)
    CHECK(reshape(out.refined, {9, c}).data()[i] ==
          doctest::Approx(out.new_hist.data()[i]).epsilon(1e-12));
}

TEST_CASE("ablation toggles bypass exactly their stage") {
  Rng rng(15);
  const std::size_t c = 12;
  AttentionConfig cfg;
  cfg.heads = 6;
  cfg.model_dim = c;
  TransformerParams<D> p = random_transformer(c, 1, &rng);
  Tensor<D> cur = testutil::random_tensor({3, 3, c}, &rng);
  Tensor<D> hist = testutil::random_tensor({9, c}, &rng);

  // no-encoder: decoder sees the raw tokens
  TransformerToggles no_enc;
  no_enc.use_encoder = false;
  TransformerForwardResult<D> out = mutual_transformer_forward(cur, hist, p, cfg, no_enc);
  FilterResult<D> f = filter_maps(reshape(cur, {9, c}), hist, p.decoders[0].filter);
  MutualAttentionResult<D> ma = mutual_attention(f.hist_f, f.cur_f, p.decoders[0].attn, 6);
  for (std::size_t i = 0; i < ma.cur_out.size(); ++i)
    CHECK(out.refined.data()[i] == ma.cur_out.data()[i]);

  // no-filter: gate is structurally one
  TransformerToggles no_filter;
  no_filter.use_filter = false;
  TransformerForwardResult<D> out2 = mutual_transformer_forward(cur, hist, p, cfg, no_filter);
  Tensor<D> cur_tok = encode(reshape(cur, {9, c}), p.encoder, 6);
  Tensor<D> hist_tok = encode(hist, p.encoder, 6);
  MutualAttentionResult<D> ma2 = mutual_attention(hist_tok, cur_tok, p.decoders[0].attn, 6);
  for (std::size_t i = 0; i < ma2.cur_out.size(); ++i)
    CHECK(out2.refined.data()[i] == ma2.cur_out.data()[i]);
}

TEST_CASE("parameter count matches the closed form for the default and toy configs") {
  for (TrackerConfig cfg : {TrackerConfig{}, toy_config()}) {
    Model<float> model = Model<float>::random_init(cfg);
    CHECK(model.param_count() == analytic_param_count(cfg));
  }
}

TEST_CASE("compact full-stack gradient check") {
  Rng rng(16);
  const std::size_t c = 12;
  AttentionConfig cfg;
  cfg.heads = 6;
  cfg.model_dim = c;
  TransformerParams<D> p = random_transformer(c, 2, &rng);
  p.encoder.mha.wq.set_requires_grad(true);
  p.decoders[1].filter.w2.set_requires_grad(true);
  Tensor<D> cur = testutil::random_tensor({3, 3, c}, &rng);
  cur.set_requires_grad(true);
  Tensor<D> hist = testutil::random_tensor({9, c}, &rng);
  Tensor<D> mask = testutil::random_tensor({3, 3, c}, &rng);
  auto f = [&]() {
    TransformerForwardResult<D> r = mutual_transformer_forward(cur, hist, p, cfg);
    return sum(mul(r.refined, mask));
  };
  CHECK(grad_check<D>(f, cur, 1e-5) <= 1e-4);
  CHECK(grad_check<D>(f, p.encoder.mha.wq, 1e-5) <= 1e-4);
  CHECK(grad_check<D>(f, p.decoders[1].filter.w2, 1e-5) <= 1e-4);
}
