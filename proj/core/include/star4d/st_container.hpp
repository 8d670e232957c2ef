#pragma once

// Spatial-temporal container: DPC-KNN clustering of historical group token
// features, sigma-weighted merging, attention refinement and the projection
// that turns the state into conditioning vectors.

#include <span>
#include <string>
#include <vector>

#include "star4d/config.hpp"
#include "star4d/nn.hpp"

namespace star4d {

struct ContainerConfig {
  int neighbors = 5;   // K in the local density
  int centers = 32;    // M
  // Neighbors come from the whole pool, or only from the token's own group.
  bool per_group_density = false;
  int heads = 4;
  int score_hidden = 64;

  void validate() const;
  void write(Config& config) const;  // keys under "container."
  static ContainerConfig from(const Config& config);
};

// Row-major [count, dim] feature matrix.
struct FeatureView {
  std::span<const float> data;
  int64_t count = 0;
  int64_t dim = 0;

  const float* row(int64_t i) const { return data.data() + i * dim; }
};

// Squared Euclidean distance accumulated in double, coordinate order.
double squared_distance(const float* a, const float* b, int64_t dim);

// rho_i = exp(-(1/K) * sum of the K smallest squared distances to other tokens),
// the sum taken in ascending order. With `groups` non-empty, only tokens of
// the same group are neighbor candidates.
std::vector<double> local_density(const FeatureView& features, int neighbors, std::span<const int> groups = {});

// Minimal squared distance to a token of strictly higher density; tokens with
// none take the maximal squared distance to any token.
std::vector<double> separation_score(const FeatureView& features, std::span<const double> density);

struct ClusterResult {
  std::vector<int> centers;     // pool indices, ordered by decreasing rho * varpi
  std::vector<int> assignment;  // cluster id (rank into centers) per token
  std::vector<double> density, separation;

  int clusters() const { return static_cast<int>(centers.size()); }
  std::vector<int> histogram() const;
};

// Top-M tokens by rho * varpi become centers (ties to the lower index); every
// other token joins its nearest center (ties to the lower center rank).
ClusterResult select_and_assign(const FeatureView& features, std::span<const double> density,
                                std::span<const double> separation, int centers);

// Full DPC-KNN pipeline on plain features.
ClusterResult cluster_tokens(const FeatureView& features, const ContainerConfig& config,
                             std::span<const int> groups = {});

// Merged cluster features: sum over members of sigma_j / (cluster sum of sigma) * y_j.
// features [P, D], sigma [P, 1] -> [M, D].
Tensor merge(const Tensor& features, const ClusterResult& clusters, const Tensor& sigma);

struct TokenTag {
  int group = 0;  // 1-based timestep group
  int view = 0;
  int position = 0;
  int chunk = 0;
  bool operator==(const TokenTag&) const = default;
};

struct ContainerState {
  Tensor pool;                // [P, D]
  std::vector<TokenTag> tags;  // provenance per pool row
  Tensor merged;              // refined features, [min(M, P), D]
  ClusterResult clusters;

  bool empty() const { return tags.empty(); }
  // Distinct group ids present in the pool, ascending.
  std::vector<int> groups() const;
};

class SpatioTemporalContainer {
 public:
  SpatioTemporalContainer() = default;
  SpatioTemporalContainer(nn::ParamStore& store, const std::string& name, const ContainerConfig& config,
                          int64_t feature_dim, int64_t output_dim, nn::Rng& rng);

  const ContainerConfig& config() const { return config_; }
  Tensor dissim_scores(const Tensor& features) const;  // [P, D] -> [P, 1], strictly positive
  Tensor refine(const Tensor& merged) const;           // residual self-attention, [M, D]
  Tensor inject(const Tensor& merged) const;           // [M, output_dim]; empty in, empty out

  // Appends one completed group and recomputes clusters, merge and refinement
  // over the whole pool.
  ContainerState update_state(const ContainerState& state, const Tensor& group_features,
                              const std::vector<TokenTag>& tags) const;

 private:
  ContainerConfig config_;
  int64_t feature_dim_ = 0, output_dim_ = 0;
  nn::Mlp score_;
  nn::LayerNorm refine_norm_;
  nn::MultiHeadAttention refine_attn_;
  nn::Mlp inject_;
};

}  // namespace star4d
