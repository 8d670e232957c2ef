#pragma once

// Finite-difference helpers shared by the unit tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "star4d/tensor.hpp"

namespace star4d::testing {

// Central difference of a scalar function of `leaf` at element i.
inline double central_difference(Tensor& leaf, int64_t i, const std::function<double()>& f, double h) {
  auto data = leaf.mutable_data();
  const float saved = data[i];
  data[i] = static_cast<float>(saved + h);
  const double plus = f();
  data[i] = static_cast<float>(saved - h);
  const double minus = f();
  data[i] = saved;
  return (plus - minus) / (2.0 * h);
}

// Largest relative error between the analytic gradient stored in `leaf` and
// central differences over every element; denominators are floored at `floor`.
inline double max_relative_error(Tensor& leaf, const std::function<double()>& f, double h, double floor = 1e-3) {
  const std::vector<float> analytic(leaf.grad().begin(), leaf.grad().end());
  double worst = 0.0;
  for (int64_t i = 0; i < leaf.numel(); ++i) {
    const double numeric = central_difference(leaf, i, f, h);
    const double denom = std::max({std::abs(numeric), std::abs(static_cast<double>(analytic[i])), floor});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float scale = 1.0f, bool requires_grad = true) {
  std::normal_distribution<float> dist(0.0f, scale);
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (float& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Scalar probe sum(w .* y) with fixed random weights so every output element matters.
struct Probe {
  Tensor weights;
  double operator()(const Tensor& y) const {
    double s = 0.0;
    for (int64_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y.at(i)) * weights.at(i);
    return s;
  }
  Tensor loss(const Tensor& y) const { return ops::sum(ops::mul(y, weights)); }

  static Probe random(const Shape& shape, uint64_t seed) {
    std::mt19937_64 rng(seed);
    return {random_tensor(shape, rng, 1.0f, false)};
  }
};

}  // namespace star4d::testing
