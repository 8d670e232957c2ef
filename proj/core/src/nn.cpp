#include "star4d/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace star4d::nn {

Tensor& ParamStore::add(const std::string& name, Tensor tensor) {
  if (find(name) != nullptr) throw std::logic_error("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  entries_.emplace_back(name, std::move(tensor));
  return entries_.back().second;
}

Tensor* ParamStore::find(const std::string& name) {
  for (auto& [n, t] : entries_) {
    if (n == name) return &t;
  }
  return nullptr;
}

int64_t ParamStore::parameter_count() const {
  int64_t total = 0;
  for (const auto& [n, t] : entries_) total += t.numel();
  return total;
}

void ParamStore::zero_grad() {
  for (auto& [n, t] : entries_) t.zero_grad();
}

Tensor normal_param(Shape shape, float stddev, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> values(static_cast<size_t>(shape_numel(shape)));
  for (float& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor uniform_param(Shape shape, float bound, Rng& rng) {
  std::uniform_real_distribution<float> dist(-bound, bound);
  std::vector<float> values(static_cast<size_t>(shape_numel(shape)));
  for (float& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor constant_param(Shape shape, float value) { return Tensor::full(std::move(shape), value, true); }

Linear::Linear(ParamStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng,
               bool with_bias) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  weight = store.add(name + ".weight", uniform_param({in, out}, bound, rng));
  if (with_bias) bias = store.add(name + ".bias", constant_param({out}, 0.0f));
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ops::matmul(x, weight);
  return bias.defined() ? ops::add_row(y, bias) : y;
}

Embedding::Embedding(ParamStore& store, const std::string& name, int64_t count, int64_t dim, Rng& rng,
                     float stddev) {
  table = store.add(name + ".table", normal_param({count, dim}, stddev, rng));
}

Tensor Embedding::operator()(std::span<const int32_t> indices) const {
  return ops::gather_rows(table, indices);
}

RmsNorm::RmsNorm(ParamStore& store, const std::string& name, int64_t dim) {
  weight = store.add(name + ".weight", constant_param({dim}, 1.0f));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int64_t dim) {
  weight = store.add(name + ".weight", constant_param({dim}, 1.0f));
  bias = store.add(name + ".bias", constant_param({dim}, 0.0f));
}

Mlp::Mlp(ParamStore& store, const std::string& name, int64_t in, int64_t hidden, int64_t out, Rng& rng)
    : fc1(store, name + ".fc1", in, hidden, rng), fc2(store, name + ".fc2", hidden, out, rng) {}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name, int64_t dim,
                                       int heads_, Rng& rng, int64_t kv_dim)
    : heads(heads_) {
  if (kv_dim < 0) kv_dim = dim;
  query = Linear(store, name + ".q", dim, dim, rng);
  key = Linear(store, name + ".k", kv_dim, dim, rng);
  value = Linear(store, name + ".v", kv_dim, dim, rng);
  output = Linear(store, name + ".o", dim, dim, rng);
}

Tensor MultiHeadAttention::operator()(const Tensor& q_in, const Tensor& kv_in,
                                      std::span<const uint8_t> mask) const {
  const Tensor q = query(q_in), k = key(kv_in), v = value(kv_in);
  return output(ops::attention(q, k, v, heads, mask));
}

Conv3d::Conv3d(ParamStore& store, const std::string& name, int64_t in, int64_t out, int kernel,
               int stride, Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(kernel * kernel * kernel * in));
  weight = store.add(name + ".weight", uniform_param({kernel, kernel, kernel, in, out}, bound, rng));
  bias = store.add(name + ".bias", constant_param({out}, 0.0f));
  const int pad = kernel / 2;
  geometry = {stride, stride, stride, pad, pad, pad};
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, int64_t in, int64_t out, int kernel,
               int stride_, Rng& rng)
    : stride(stride_), pad(kernel / 2) {
  const float bound = std::sqrt(6.0f / static_cast<float>(kernel * kernel * in));
  weight = store.add(name + ".weight", uniform_param({kernel, kernel, in, out}, bound, rng));
  bias = store.add(name + ".bias", constant_param({out}, 0.0f));
}

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
  }
}

float Adam::step(float learning_rate) {
  double sq = 0.0;
  for (auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const float norm = static_cast<float>(std::sqrt(sq));
  const float clip = (options_.grad_clip > 0.0f && norm > options_.grad_clip)
                         ? options_.grad_clip / norm
                         : 1.0f;
  ++steps_;
  const float bc1 = 1.0f - std::pow(options_.beta1, static_cast<float>(steps_));
  const float bc2 = 1.0f - std::pow(options_.beta2, static_cast<float>(steps_));
  for (size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p].second;
    if (!t.has_grad()) continue;
    auto value = t.mutable_data();
    const auto grad = t.grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (size_t i = 0; i < value.size(); ++i) {
      const float g = grad[i] * clip;
      m[i] = options_.beta1 * m[i] + (1.0f - options_.beta1) * g;
      v[i] = options_.beta2 * v[i] + (1.0f - options_.beta2) * g * g;
      value[i] -= learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + options_.epsilon);
    }
  }
  return norm;
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

std::vector<std::pair<std::string, Tensor>> Adam::state_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t p = 0; p < params_.size(); ++p) {
    const auto& [name, t] = params_[p];
    out.emplace_back("adam.m." + name, Tensor::from(t.shape(), m_[p]));
    out.emplace_back("adam.v." + name, Tensor::from(t.shape(), v_[p]));
  }
  return out;
}

void Adam::load_state(const std::string& name, std::span<const float> values) {
  for (size_t p = 0; p < params_.size(); ++p) {
    const std::string& pname = params_[p].first;
    std::vector<float>* target = nullptr;
    if (name == "adam.m." + pname) target = &m_[p];
    if (name == "adam.v." + pname) target = &v_[p];
    if (target == nullptr) continue;
    if (target->size() != values.size()) {
      throw std::invalid_argument("optimizer state " + name + " has wrong size");
    }
    std::copy(values.begin(), values.end(), target->begin());
    return;
  }
  throw std::invalid_argument("unknown optimizer state " + name);
}

float cosine_lr(float base, int64_t step, int64_t total, float floor_fraction) {
  if (total <= 0) return base;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return static_cast<float>(base * (floor_fraction + (1.0 - floor_fraction) * cosine));
}

}  // namespace star4d::nn
