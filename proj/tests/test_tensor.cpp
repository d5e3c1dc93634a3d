#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tempotrack/gradcheck.hpp"
#include "tempotrack/tensor.hpp"

#include "oracles.hpp"

using namespace tempotrack;
using D = double;

TEST_CASE("matmul identity and zero") {
  // I3 * B = B
  Tensor<D> eye = Tensor<D>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor<D> b = Tensor<D>::from({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor<D> out = matmul(eye, b);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(out.data()[i] == b.data()[i]);

  Tensor<D> zero = Tensor<D>::zeros({2, 3});
  Tensor<D> z = matmul(zero, b);
  for (auto v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
  Rng rng(11);
  Tensor<D> a = testutil::random_tensor({4, 3}, &rng);
  Tensor<D> b = testutil::random_tensor({3, 5}, &rng);
  Tensor<D> out = matmul(a, b);
  const auto expect = testutil::naive_matmul(a.data(), b.data(), 4, 3, 5);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(out.data()[i] - expect[i]) <= 1e-10);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Tensor<D> a = Tensor<D>::zeros({2, 3});
  Tensor<D> b = Tensor<D>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  // constant slice -> uniform
  Tensor<D> c = Tensor<D>::full({2, 4}, 3.25);
  Tensor<D> s = softmax(c, 1);
  for (auto v : s.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  // single-element axis -> 1.0
  Tensor<D> one = Tensor<D>::from({3, 1}, {5, -2, 0});
  Tensor<D> s1 = softmax(one, 1);
  for (auto v : s1.data()) CHECK(v == doctest::Approx(1.0));

  // logits [0, ln 3] -> [0.25, 0.75]
  Tensor<D> l = Tensor<D>::from({1, 2}, {0.0, std::log(3.0)});
  Tensor<D> s2 = softmax(l, 1);
  CHECK(s2.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s2.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  CHECK_THROWS_AS(softmax(l, 2), ShapeError);
}

TEST_CASE("softmax slices sum to one on random inputs") {
  Rng rng(5);
  Tensor<D> x = testutil::random_tensor({4, 7, 3}, &rng, -30.0, 30.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor<D> s = softmax(x, axis);
    // reduce along axis and check each slice
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double sum = 0;
        for (std::size_t i = 0; i < shape[axis]; ++i)
          sum += s.data()[(o * shape[axis] + i) * inner + in];
        CHECK(std::abs(sum - 1.0) <= 1e-6);
      }
  }
}

TEST_CASE("layer_norm examples and oracle") {
  Tensor<D> gamma = Tensor<D>::full({4}, 1.0);
  Tensor<D> beta = Tensor<D>::zeros({4});

  // constant input -> zeros (epsilon handles zero variance)
  Tensor<D> c = Tensor<D>::full({2, 4}, 7.0);
  Tensor<D> out = layer_norm(c, gamma, beta);
  for (auto v : out.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  // gamma = 0 -> output equals beta broadcast
  Tensor<D> g0 = Tensor<D>::zeros({4});
  Tensor<D> b1 = Tensor<D>::from({4}, {1, 2, 3, 4});
  Rng rng(3);
  Tensor<D> x = testutil::random_tensor({2, 4}, &rng);
  Tensor<D> out2 = layer_norm(x, g0, b1);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(out2.data()[r * 4 + j] == b1.data()[j]);

  // random input matches a two-pass mean/var oracle
  Tensor<D> x8 = testutil::random_tensor({2, 8}, &rng);
  Tensor<D> g8 = testutil::random_tensor({8}, &rng, 0.5, 1.5);
  Tensor<D> b8 = testutil::random_tensor({8}, &rng);
  Tensor<D> got = layer_norm(x8, g8, b8);
  const auto expect = testutil::naive_layer_norm(x8.data(), g8.data(), b8.data(), 2, 8, 1e-5);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(got.data()[i] - expect[i]) <= 1e-12);

  Tensor<D> bad = Tensor<D>::zeros({3});
  CHECK_THROWS_AS(layer_norm(x8, bad, b8), ShapeError);
}

TEST_CASE("instance_norm normalizes each channel over spatial positions") {
  Rng rng(41);
  Tensor<D> x = testutil::random_tensor({4, 5, 3}, &rng);
  Tensor<D> g = testutil::random_tensor({3}, &rng, 0.5, 1.5);
  Tensor<D> b = testutil::random_tensor({3}, &rng);
  Tensor<D> out = instance_norm(x, g, b);
  // per-channel mean/var of the normalized pre-affine signal
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double mean = 0, var = 0;
    for (std::size_t p = 0; p < 20; ++p) {
      const double v = (out.data()[p * 3 + ch] - b.data()[ch]) / g.data()[ch];
      mean += v / 20.0;
    }
    for (std::size_t p = 0; p < 20; ++p) {
      const double v = (out.data()[p * 3 + ch] - b.data()[ch]) / g.data()[ch];
      var += (v - mean) * (v - mean) / 20.0;
    }
    CHECK(std::abs(mean) <= 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps shifts it slightly
  }

  Tensor<D> mask = testutil::random_tensor({4, 5, 3}, &rng);
  auto f = [&]() { return sum(mul(instance_norm(x, g, b), mask)); };
  CHECK(grad_check<D>(f, x, 1e-5) <= 1e-4);
  CHECK(grad_check<D>(f, g, 1e-5) <= 1e-4);
  CHECK(grad_check<D>(f, b, 1e-5) <= 1e-4);
}

TEST_CASE("activations") {
  Tensor<D> x = Tensor<D>::from({3}, {0.0, -1.0, std::log(3.0)});
  Tensor<D> s = sigmoid(x);
  CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.data()[2] == doctest::Approx(0.75).epsilon(1e-12));
  Tensor<D> r = relu(x);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == doctest::Approx(std::log(3.0)));
  // sigmoid stays strictly inside (0,1) even for extreme logits
  Tensor<D> ext = Tensor<D>::from({2}, {-800.0, 800.0});
  Tensor<D> se = sigmoid(ext);
  CHECK(se.data()[0] > 0.0);
  CHECK(se.data()[1] < 1.0);
}

TEST_CASE("global_avg_pool") {
  Tensor<D> c = Tensor<D>::full({3, 5, 2}, 2.5);
  Tensor<D> p = global_avg_pool(c);
  CHECK(p.shape() == Shape{2});
  for (auto v : p.data()) CHECK(v == doctest::Approx(2.5));

  Tensor<D> single = Tensor<D>::from({1, 1, 3}, {1, 2, 3});
  Tensor<D> p1 = global_avg_pool(single);
  CHECK(p1.data()[0] == 1.0);
  CHECK(p1.data()[2] == 3.0);

  Rng rng(7);
  Tensor<D> x = testutil::random_tensor({4, 4, 2}, &rng);
  Tensor<D> got = global_avg_pool(x);
  const auto expect = testutil::naive_gap(x.data(), 4, 4, 2);
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(got.data()[i] - expect[i]) <= 1e-12);

  CHECK_THROWS_AS(global_avg_pool(Tensor<D>::zeros({4, 4})), ShapeError);
}

TEST_CASE("concat") {
  Tensor<D> a = Tensor<D>::from({2}, {1, 2});
  Tensor<D> b = Tensor<D>::from({3}, {3, 4, 5});
  Tensor<D> ab = concat<D>({a, b}, 0);
  CHECK(ab.shape() == Shape{5});
  for (std::size_t i = 0; i < 5; ++i) CHECK(ab.data()[i] == static_cast<double>(i + 1));

  // single input -> identity
  Tensor<D> same = concat<D>({a}, 0);
  CHECK(same.shape() == a.shape());
  CHECK(same.data()[1] == 2.0);

  // three maps along the channel axis, checked against index arithmetic
  Rng rng(9);
  Tensor<D> m1 = testutil::random_tensor({4, 4, 3}, &rng);
  Tensor<D> m2 = testutil::random_tensor({4, 4, 3}, &rng);
  Tensor<D> m3 = testutil::random_tensor({4, 4, 3}, &rng);
  Tensor<D> cat = concat<D>({m1, m2, m3}, 2);
  CHECK(cat.shape() == Shape{4, 4, 9});
  for (std::size_t p = 0; p < 16; ++p)
    for (std::size_t c = 0; c < 9; ++c) {
      const Tensor<D>& src = c < 3 ? m1 : (c < 6 ? m2 : m3);
      CHECK(cat.data()[p * 9 + c] == src.data()[p * 3 + c % 3]);
    }

  Tensor<D> bad = Tensor<D>::zeros({5, 4, 3});
  CHECK_THROWS_AS(concat<D>({m1, bad}, 2), ShapeError);
}

TEST_CASE("conv2d examples and oracle") {
  Rng rng(13);
  // 1x1 identity kernel leaves the input unchanged
  Tensor<D> x = testutil::random_tensor({5, 5, 2}, &rng);
  Tensor<D> id = Tensor<D>::from({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor<D> zb = Tensor<D>::zeros({2});
  Tensor<D> out = conv2d(x, id, zb, 1, 0);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(out.data()[i] == x.data()[i]);

  // all-zero kernel -> zero output
  Tensor<D> zk = Tensor<D>::zeros({3, 3, 2, 4});
  Tensor<D> zb4 = Tensor<D>::zeros({4});
  Tensor<D> out0 = conv2d(x, zk, zb4, 1, 1);
  for (auto v : out0.data()) CHECK(v == 0.0);

  // random case matches the quadruple-loop oracle
  Tensor<D> x8 = testutil::random_tensor({8, 8, 2}, &rng);
  Tensor<D> k = testutil::random_tensor({3, 3, 2, 3}, &rng);
  Tensor<D> b = testutil::random_tensor({3}, &rng);
  for (std::size_t stride : {std::size_t(1), std::size_t(2)})
    for (std::size_t pad : {std::size_t(0), std::size_t(1)}) {
      Tensor<D> got = conv2d(x8, k, b, stride, pad);
      const auto expect =
          testutil::naive_conv2d(x8.data(), k.data(), b.data(), 8, 8, 2, 3, 3, 3, stride, pad);
      REQUIRE(got.size() == expect.size());
      for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(got.data()[i] - expect[i]) <= 1e-10);
    }

  // non-positive output size
  Tensor<D> tiny = Tensor<D>::zeros({2, 2, 2});
  CHECK_THROWS_AS(conv2d(tiny, zk, zb4, 1, 0), ShapeError);
}

TEST_CASE("backward contracts") {
  Rng rng(17);
  // loss = sum(x) -> grad all ones
  Tensor<D> x = testutil::random_tensor({3, 4}, &rng);
  x.set_requires_grad(true);
  Tensor<D> loss = sum(x);
  loss.backward();
  for (auto g : x.grad()) CHECK(g == 1.0);

  // detached path -> no grad reaches x
  Tensor<D> y = testutil::random_tensor({3, 4}, &rng);
  y.set_requires_grad(true);
  Tensor<D> z = y.detach();
  Tensor<D> loss2 = sum(z);
  loss2.backward();
  CHECK_FALSE(y.has_grad());

  // grads accumulate across backward calls until zeroed
  Tensor<D> w = testutil::random_tensor({2, 2}, &rng);
  w.set_requires_grad(true);
  sum(w).backward();
  sum(w).backward();
  for (auto g : w.grad()) CHECK(g == 2.0);
  w.zero_grad();
  sum(w).backward();
  for (auto g : w.grad()) CHECK(g == 1.0);

  // non-scalar loss rejected
  CHECK_THROWS_AS(x.backward(), ContractError);
}

TEST_CASE("composite backward matches finite differences") {
  Rng rng(19);
  Tensor<D> x = testutil::random_tensor({4, 3}, &rng);
  Tensor<D> w = testutil::random_tensor({3, 5}, &rng);
  Tensor<D> mask = testutil::random_tensor({4, 5}, &rng);
  auto f = [&]() { return sum(mul(softmax(matmul(x, w), 1), mask)); };
  CHECK(grad_check<D>(f, x, 1e-5) <= 1e-4);
  CHECK(grad_check<D>(f, w, 1e-5) <= 1e-4);
}

TEST_CASE("grad_check trivial cases") {
  Rng rng(23);
  Tensor<D> x = testutil::random_tensor({5}, &rng);
  auto f_sum = [&]() { return sum(x); };
  CHECK(grad_check<D>(f_sum, x, 1e-5) <= 1e-10);
  auto f_const = [&]() { return Tensor<D>::scalar(0.0); };
  CHECK(grad_check<D>(f_const, x, 1e-5) == 0.0);
}

TEST_CASE("ops do not mutate inputs") {
  Rng rng(29);
  Tensor<D> x = testutil::random_tensor({4, 4, 2}, &rng);
  const std::vector<D> before(x.data().begin(), x.data().end());
  Tensor<D> k = testutil::random_tensor({3, 3, 2, 2}, &rng);
  Tensor<D> b = testutil::random_tensor({2}, &rng);
  conv2d(x, k, b, 1, 1);
  global_avg_pool(x);
  softmax(reshape(x, {16, 2}), 1);
  relu(x);
  sigmoid(x);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(x.data()[i] == before[i]);
}

TEST_CASE("forward ops keep finite inputs finite") {
  Rng rng(31);
  Tensor<D> x = testutil::random_tensor({6, 6, 4}, &rng, -50.0, 50.0);
  CHECK(all_finite(softmax(reshape(x, {36, 4}), 1)));
  CHECK(all_finite(sigmoid(x)));
  Tensor<D> g = Tensor<D>::full({4}, 1.0);
  Tensor<D> be = Tensor<D>::zeros({4});
  CHECK(all_finite(layer_norm(x, g, be)));
}

TEST_CASE("determinism: same seed, bit-identical tensors") {
  auto make = [] {
    Rng rng(123);
    return testutil::random_tensor({17}, &rng);
  };
  Tensor<D> a = make(), b = make();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("bce and iou losses gradcheck cleanly") {
  Rng rng(37);
  Tensor<D> logits = testutil::random_tensor({3, 3, 1}, &rng, -2.0, 2.0);
  Tensor<D> targets = Tensor<D>::zeros({3, 3, 1});
  targets.data()[4] = 1.0;
  auto f = [&]() { return bce_with_logits_mean(logits, targets); };
  CHECK(grad_check<D>(f, logits, 1e-5) <= 1e-4);

  // keep pred/target components well separated to stay away from min() kinks
  Tensor<D> reg = Tensor<D>::from({1, 2, 4}, {4, 5, 6, 7, 9, 8, 7, 6});
  Tensor<D> tgt = Tensor<D>::from({1, 2, 4}, {5, 4, 8, 9, 7, 9.5, 6, 8});
  Tensor<D> mask = Tensor<D>::full({1, 2}, 1.0);
  auto f2 = [&]() { return ltrb_iou_loss(reg, tgt, mask); };
  CHECK(grad_check<D>(f2, reg, 1e-6) <= 1e-4);

  // loss is zero when prediction equals target
  Tensor<D> same = tgt.detach();
  CHECK(ltrb_iou_loss(same, tgt, mask).item() == doctest::Approx(0.0).epsilon(1e-8));
}
