#pragma once

// Layers, parameter registry and optimizer built on the autograd tensors.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "star4d/tensor.hpp"

namespace star4d::nn {

using Rng = std::mt19937_64;

// Ordered name -> parameter table. Names are stable and used by checkpoints.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor tensor);
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  Tensor* find(const std::string& name);
  int64_t parameter_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

Tensor normal_param(Shape shape, float stddev, Rng& rng);
Tensor uniform_param(Shape shape, float bound, Rng& rng);
Tensor constant_param(Shape shape, float value);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng,
         bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
  int64_t in_features() const { return weight.dim(0); }
  int64_t out_features() const { return weight.dim(1); }
};

struct Embedding {
  Tensor table;  // [count, dim]

  Embedding() = default;
  Embedding(ParamStore& store, const std::string& name, int64_t count, int64_t dim, Rng& rng,
            float stddev = 0.02f);
  Tensor operator()(std::span<const int32_t> indices) const;
};

struct RmsNorm {
  Tensor weight;
  RmsNorm() = default;
  RmsNorm(ParamStore& store, const std::string& name, int64_t dim);
  Tensor operator()(const Tensor& x) const { return ops::rms_norm(x, weight); }
};

struct LayerNorm {
  Tensor weight, bias;
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int64_t dim);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, weight, bias); }
};

// Two-layer perceptron with GELU in between.
struct Mlp {
  Linear fc1, fc2;
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, int64_t in, int64_t hidden, int64_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(ops::gelu(fc1(x))); }
};

// Multi-head attention with separate query and key/value sources.
// Inputs are [B, L, D]; projections act on the last axis.
struct MultiHeadAttention {
  Linear query, key, value, output;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, int64_t dim, int heads, Rng& rng,
                     int64_t kv_dim = -1);
  Tensor operator()(const Tensor& q_in, const Tensor& kv_in, std::span<const uint8_t> mask = {}) const;
};

struct Conv3d {
  Tensor weight;  // [k, k, k, ci, co]
  Tensor bias;
  ops::Conv3dGeometry geometry;

  Conv3d() = default;
  Conv3d(ParamStore& store, const std::string& name, int64_t in, int64_t out, int kernel, int stride,
         Rng& rng);
  Tensor operator()(const Tensor& x) const { return ops::conv3d(x, weight, bias, geometry); }
};

struct Conv2d {
  Tensor weight;  // [k, k, ci, co]
  Tensor bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, int64_t in, int64_t out, int kernel, int stride,
         Rng& rng);
  Tensor operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
};

struct AdamOptions {
  float learning_rate = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  float grad_clip = 1.0f;  // global L2 norm; <= 0 disables
};

// Adam over a fixed parameter list. Moment buffers are addressable by name so
// they can be checkpointed alongside the parameters.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, AdamOptions options);

  // Applies one update with the given learning rate; returns the pre-clip grad norm.
  float step(float learning_rate);
  void zero_grad();
  int64_t step_count() const { return steps_; }
  void set_step_count(int64_t steps) { steps_ = steps; }

  std::vector<std::pair<std::string, Tensor>> state_tensors() const;
  void load_state(const std::string& name, std::span<const float> values);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<float>> m_, v_;
  AdamOptions options_;
  int64_t steps_ = 0;
};

// Cosine decay from base to floor over total steps.
float cosine_lr(float base, int64_t step, int64_t total, float floor_fraction = 0.1f);

}  // namespace star4d::nn
