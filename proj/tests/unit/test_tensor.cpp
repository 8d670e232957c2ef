#include "doctest.h"

#include <cmath>
#include <random>

#include "star4d/nn.hpp"
#include "star4d/tensor.hpp"
#include "test_support.hpp"

using namespace star4d;
using star4d::testing::max_relative_error;
using star4d::testing::random_tensor;

namespace {

using testing::Probe;

Probe probe_for(const Shape& shape, uint64_t seed) { return Probe::random(shape, seed); }

double check_unary(const std::function<Tensor(const Tensor&)>& op, Shape shape, uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor(shape, rng);
  const Tensor y = op(x);
  const Probe p = probe_for(y.shape(), seed + 1);
  p.loss(y).backward();
  return max_relative_error(x, [&] { NoGradGuard g; return p(op(x)); }, 1e-2);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients match finite differences") {
  CHECK(check_unary([](const Tensor& x) { return ops::gelu(x); }, {3, 5}, 1) < 1e-2);
  CHECK(check_unary([](const Tensor& x) { return ops::silu(x); }, {3, 5}, 2) < 1e-2);
  CHECK(check_unary([](const Tensor& x) { return ops::sigmoid(x); }, {3, 5}, 3) < 1e-2);
  CHECK(check_unary([](const Tensor& x) { return ops::softplus(x); }, {3, 5}, 4) < 1e-2);
  CHECK(check_unary([](const Tensor& x) { return ops::softmax_rows(x); }, {4, 6}, 5) < 1e-2);
  CHECK(check_unary([](const Tensor& x) { return ops::normalize_rows(x); }, {4, 4}, 6) < 1e-2);
  CHECK(check_unary([](const Tensor& x) { return ops::mean_row_groups(x, 2); }, {6, 3}, 7) < 1e-2);
  CHECK(check_unary([](const Tensor& x) { return ops::transpose(x); }, {3, 4}, 8) < 1e-2);
  // Numerator and a denominator bounded away from zero.
  CHECK(check_unary([](const Tensor& x) { return ops::div(x, ops::add_scalar(ops::square(x), 0.5f)); }, {3, 4}, 9) <
        1e-2);
}

TEST_CASE("matmul, norms and attention gradients") {
  std::mt19937_64 rng(11);
  Tensor b = random_tensor({5, 4}, rng);
  CHECK(check_unary([&](const Tensor& x) { return ops::matmul(x, b); }, {2, 3, 5}, 12) < 1e-2);

  Tensor w = random_tensor({6}, rng);
  Tensor bias = random_tensor({6}, rng);
  CHECK(check_unary([&](const Tensor& x) { return ops::rms_norm(x, w); }, {4, 6}, 13) < 1e-2);
  CHECK(check_unary([&](const Tensor& x) { return ops::layer_norm(x, w, bias); }, {4, 6}, 14) < 1e-2);

  Tensor k = random_tensor({2, 5, 8}, rng);
  Tensor v = random_tensor({2, 5, 8}, rng);
  std::vector<uint8_t> mask(3 * 5, 1);
  mask[0] = 0;
  mask[7] = 0;
  CHECK(check_unary([&](const Tensor& q) { return ops::attention(q, k, v, 2, mask); }, {2, 3, 8}, 15) < 1e-2);

  // Key and value gradients through the same op.
  Tensor q = random_tensor({2, 3, 8}, rng);
  CHECK(check_unary([&](const Tensor& kk) { return ops::attention(q, kk, v, 2); }, {2, 5, 8}, 16) < 1e-2);
  CHECK(check_unary([&](const Tensor& vv) { return ops::attention(q, k, vv, 4); }, {2, 5, 8}, 17) < 1e-2);
}

TEST_CASE("attention respects the mask and zeroes fully masked rows") {
  std::mt19937_64 rng(3);
  const Tensor q = random_tensor({1, 2, 4}, rng, 1.0f, false);
  const Tensor k = random_tensor({1, 3, 4}, rng, 1.0f, false);
  Tensor v = random_tensor({1, 3, 4}, rng, 1.0f, false);
  // Row 0 sees only key 1; row 1 sees nothing.
  const std::vector<uint8_t> mask{0, 1, 0, 0, 0, 0};
  const Tensor out = ops::attention(q, k, v, 1, mask);
  for (int j = 0; j < 4; ++j) {
    CHECK(out.at(j) == doctest::Approx(v.at(4 + j)));
    CHECK(out.at(4 + j) == 0.0f);
  }
}

TEST_CASE("convolution gradients including stride and padding") {
  std::mt19937_64 rng(21);
  Tensor w = random_tensor({3, 3, 3, 2, 3}, rng, 0.3f);
  Tensor bias = random_tensor({3}, rng);
  ops::Conv3dGeometry geo{2, 1, 2, 1, 1, 1};
  CHECK(check_unary([&](const Tensor& x) { return ops::conv3d(x, w, bias, geo); }, {2, 4, 3, 5, 2}, 22) < 1e-2);

  Tensor x = random_tensor({1, 3, 3, 3, 2}, rng);
  CHECK(check_unary([&](const Tensor& ww) { return ops::conv3d(x, ww, bias, {}); }, {1, 1, 3, 2, 3}, 23) < 1e-2);

  Tensor w2 = random_tensor({3, 3, 2, 4}, rng, 0.3f);
  Tensor b2 = random_tensor({4}, rng);
  CHECK(check_unary([&](const Tensor& xx) { return ops::conv2d(xx, w2, b2, 2, 1); }, {2, 6, 6, 2}, 24) < 1e-2);
  CHECK(check_unary([](const Tensor& xx) { return ops::upsample3d_nearest2x(xx); }, {1, 2, 2, 2, 3}, 25) < 1e-2);
}

TEST_CASE("conv2d matches a direct sum on a hand-sized example") {
  // 1x3x3x1 input, 3x3 all-ones kernel, padding 1: center output is the sum of all inputs.
  std::vector<float> xs(9);
  for (int i = 0; i < 9; ++i) xs[i] = static_cast<float>(i + 1);
  const Tensor x = Tensor::from({1, 3, 3, 1}, xs);
  const Tensor w = Tensor::full({3, 3, 1, 1}, 1.0f);
  const Tensor b = Tensor::zeros({1});
  const Tensor y = ops::conv2d(x, w, b, 1, 1);
  CHECK(y.shape() == Shape{1, 3, 3, 1});
  CHECK(y.at(4) == doctest::Approx(45.0f));
  CHECK(y.at(0) == doctest::Approx(1 + 2 + 4 + 5));
}

TEST_CASE("nll_rows equals log-sum-exp minus target logit") {
  const Tensor logits = Tensor::from({2, 3}, {1.0f, 2.0f, 3.0f, 0.0f, 0.0f, 0.0f}, true);
  const std::vector<int32_t> targets{2, 1};
  const Tensor nll = ops::nll_rows(logits, targets);
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(nll.at(0) == doctest::Approx(lse - 3.0));
  CHECK(nll.at(1) == doctest::Approx(std::log(3.0)));
  ops::sum(nll).backward();
  Tensor l = logits;
  CHECK(max_relative_error(l, [&] { NoGradGuard g; return static_cast<double>(ops::sum(ops::nll_rows(l, targets)).item()); }, 1e-2) < 1e-2);
}

TEST_CASE("gradients accumulate across shared subgraphs and slices") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  const Tensor y = ops::add(ops::slice_cols(x, 0, 1), ops::slice_cols(x, 1, 1));
  const Tensor z = ops::concat_cols({y, ops::transpose(ops::slice_rows(x, 0, 1))});
  ops::sum(ops::square(z)).backward();
  // d/dx of (x00+x01)^2 + (x10+x11)^2 + x00^2 + x01^2
  CHECK(x.grad()[0] == doctest::Approx(2 * 3 + 2 * 1));
  CHECK(x.grad()[1] == doctest::Approx(2 * 3 + 2 * 2));
  CHECK(x.grad()[2] == doctest::Approx(2 * 7));
  CHECK(x.grad()[3] == doctest::Approx(2 * 7));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  const Tensor y = ops::square(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("adam decreases a quadratic") {
  nn::ParamStore store;
  Tensor& p = store.add("p", Tensor::from({3}, {1.0f, -2.0f, 3.0f}));
  nn::Adam adam(store.entries(), {.learning_rate = 0.1f, .grad_clip = 0.0f});
  float first = 0.0f, last = 0.0f;
  for (int i = 0; i < 200; ++i) {
    adam.zero_grad();
    const Tensor loss = ops::sum(ops::square(p));
    if (i == 0) first = loss.item();
    last = loss.item();
    loss.backward();
    adam.step(0.1f);
  }
  CHECK(last < 1e-2f * first);
}

TEST_CASE("shape errors are reported") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(ops::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ops::matmul(a, a), std::invalid_argument);
  const std::vector<int32_t> bad{5};
  CHECK_THROWS_AS(ops::gather_rows(a, bad), std::invalid_argument);
}
