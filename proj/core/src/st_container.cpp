#include "star4d/st_container.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace star4d {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

}  // namespace

void ContainerConfig::validate() const {
  require(neighbors >= 1, "container.neighbors must be >= 1");
  require(centers >= 1, "container.centers must be >= 1");
  require(heads >= 1, "container.heads must be >= 1");
  require(score_hidden >= 1, "container.score_hidden must be >= 1");
}

void ContainerConfig::write(Config& c) const {
  c.set("container.neighbors", std::to_string(neighbors));
  c.set("container.centers", std::to_string(centers));
  c.set("container.per_group_density", per_group_density ? "true" : "false");
  c.set("container.heads", std::to_string(heads));
  c.set("container.score_hidden", std::to_string(score_hidden));
}

ContainerConfig ContainerConfig::from(const Config& c) {
  ContainerConfig v;
  v.neighbors = static_cast<int>(c.get_int("container.neighbors", v.neighbors));
  v.centers = static_cast<int>(c.get_int("container.centers", v.centers));
  v.per_group_density = c.get_bool("container.per_group_density", v.per_group_density);
  v.heads = static_cast<int>(c.get_int("container.heads", v.heads));
  v.score_hidden = static_cast<int>(c.get_int("container.score_hidden", v.score_hidden));
  return v;
}

double squared_distance(const float* a, const float* b, int64_t dim) {
  double s = 0.0;
  for (int64_t k = 0; k < dim; ++k) {
    const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    s += d * d;
  }
  return s;
}

namespace {

// Full symmetric matrix of squared distances; entry (i, j) is computed once
// and mirrored, so both halves are bit-identical.
std::vector<double> distance_matrix(const FeatureView& f) {
  const auto n = static_cast<size_t>(f.count);
  std::vector<double> d(n * n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) d[i * n + j] = d[j * n + i] = squared_distance(f.row(i), f.row(j), f.dim);
  }
  return d;
}

std::vector<double> density_from(const std::vector<double>& d, int64_t count, int neighbors,
                                 std::span<const int> groups) {
  require(groups.empty() || static_cast<int64_t>(groups.size()) == count,
          "local_density: group labels do not match the feature count");
  require(neighbors >= 1, "local_density: K must be >= 1");
  const auto n = static_cast<size_t>(count);
  std::vector<double> rho(n);
  std::vector<double> dist;
  for (size_t i = 0; i < n; ++i) {
    dist.clear();
    for (size_t j = 0; j < n; ++j) {
      if (j == i || (!groups.empty() && groups[j] != groups[i])) continue;
      dist.push_back(d[i * n + j]);
    }
    if (static_cast<int64_t>(dist.size()) < neighbors) {
      throw std::invalid_argument("local_density: K=" + std::to_string(neighbors) + " needs at least " +
                                  std::to_string(neighbors + 1) + " tokens" + (groups.empty() ? "" : " per group") +
                                  ", found " + std::to_string(dist.size() + 1));
    }
    std::nth_element(dist.begin(), dist.begin() + (neighbors - 1), dist.end());
    std::sort(dist.begin(), dist.begin() + neighbors);
    double sum = 0.0;
    for (int k = 0; k < neighbors; ++k) sum += dist[k];
    rho[i] = std::exp(-sum / neighbors);
  }
  return rho;
}

std::vector<double> separation_from(const std::vector<double>& d, std::span<const double> rho) {
  const size_t n = rho.size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    double nearest_higher = std::numeric_limits<double>::infinity(), farthest = 0.0;
    bool has_higher = false;
    for (size_t j = 0; j < n; ++j) {
      const double dij = d[i * n + j];
      farthest = std::max(farthest, dij);
      if (rho[j] > rho[i]) {
        has_higher = true;
        nearest_higher = std::min(nearest_higher, dij);
      }
    }
    out[i] = has_higher ? nearest_higher : farthest;
  }
  return out;
}

}  // namespace

std::vector<double> local_density(const FeatureView& f, int neighbors, std::span<const int> groups) {
  return density_from(distance_matrix(f), f.count, neighbors, groups);
}

std::vector<double> separation_score(const FeatureView& f, std::span<const double> rho) {
  require(static_cast<int64_t>(rho.size()) == f.count, "separation_score: density length mismatch");
  return separation_from(distance_matrix(f), rho);
}

std::vector<int> ClusterResult::histogram() const {
  std::vector<int> h(centers.size(), 0);
  for (int a : assignment) ++h[a];
  return h;
}

ClusterResult select_and_assign(const FeatureView& f, std::span<const double> rho, std::span<const double> varpi,
                                int centers) {
  require(static_cast<int64_t>(rho.size()) == f.count && static_cast<int64_t>(varpi.size()) == f.count,
          "select_and_assign: score length mismatch");
  require(centers >= 1, "select_and_assign: M must be >= 1");
  if (centers > f.count) {
    throw std::invalid_argument("select_and_assign: M=" + std::to_string(centers) + " exceeds the " +
                                std::to_string(f.count) + " available tokens");
  }
  ClusterResult r;
  r.density.assign(rho.begin(), rho.end());
  r.separation.assign(varpi.begin(), varpi.end());
  std::vector<int> order(static_cast<size_t>(f.count));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rho[a] * varpi[a] > rho[b] * varpi[b]; });
  r.centers.assign(order.begin(), order.begin() + centers);
  r.assignment.assign(static_cast<size_t>(f.count), -1);
  for (int c = 0; c < centers; ++c) r.assignment[r.centers[c]] = c;
  for (int64_t i = 0; i < f.count; ++i) {
    if (r.assignment[i] >= 0) continue;
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < centers; ++c) {
      const double d = squared_distance(f.row(i), f.row(r.centers[c]), f.dim);
      if (d < best) {
        best = d;
        r.assignment[i] = c;
      }
    }
  }
  return r;
}

ClusterResult cluster_tokens(const FeatureView& f, const ContainerConfig& config, std::span<const int> groups) {
  require(f.count >= 1, "cluster_tokens: empty pool");
  const std::span<const int> scope = config.per_group_density ? groups : std::span<const int>{};
  // Small pools use every available neighbor rather than failing.
  int64_t smallest = f.count;
  if (!scope.empty()) {
    for (int g : scope) smallest = std::min<int64_t>(smallest, std::count(scope.begin(), scope.end(), g));
  }
  const auto d = distance_matrix(f);
  if (smallest < 2) {
    const std::vector<double> ones(static_cast<size_t>(f.count), 1.0);
    return select_and_assign(f, ones, separation_from(d, ones), static_cast<int>(std::min<int64_t>(config.centers, f.count)));
  }
  const int k = static_cast<int>(std::min<int64_t>(config.neighbors, smallest - 1));
  const auto rho = density_from(d, f.count, k, scope);
  const auto varpi = separation_from(d, rho);
  return select_and_assign(f, rho, varpi, static_cast<int>(std::min<int64_t>(config.centers, f.count)));
}

Tensor merge(const Tensor& features, const ClusterResult& clusters, const Tensor& sigma) {
  const int64_t P = features.rows(), D = features.cols();
  require(sigma.rows() == P && sigma.cols() == 1, "merge: sigma must be [P, 1]");
  require(static_cast<int64_t>(clusters.assignment.size()) == P, "merge: assignment length mismatch");
  const int64_t M = clusters.clusters();
  std::vector<ops::SparseEntry> to_cluster;
  to_cluster.reserve(static_cast<size_t>(P));
  for (int64_t j = 0; j < P; ++j) to_cluster.push_back({clusters.assignment[j], static_cast<int32_t>(j), 1.0f});
  // Per-token weight sigma_j / sum of sigma over its cluster.
  const Tensor totals = ops::sparse_rows(sigma, to_cluster, M);
  std::vector<int32_t> owner(clusters.assignment.begin(), clusters.assignment.end());
  const Tensor weights = ops::div(sigma, ops::gather_rows(totals, owner));
  const Tensor spread = ops::matmul(weights, Tensor::full({1, D}, 1.0f));
  return ops::sparse_rows(ops::mul(ops::reshape(features, {P, D}), spread), to_cluster, M);
}

std::vector<int> ContainerState::groups() const {
  std::vector<int> g;
  for (const auto& t : tags) g.push_back(t.group);
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

SpatioTemporalContainer::SpatioTemporalContainer(nn::ParamStore& store, const std::string& name,
                                                 const ContainerConfig& config, int64_t feature_dim,
                                                 int64_t output_dim, nn::Rng& rng)
    : config_(config), feature_dim_(feature_dim), output_dim_(output_dim) {
  config_.validate();
  require(feature_dim % config.heads == 0, "container: feature dim must be divisible by container.heads");
  score_ = nn::Mlp(store, name + ".score", feature_dim, config.score_hidden, 1, rng);
  refine_norm_ = nn::LayerNorm(store, name + ".refine_norm", feature_dim);
  refine_attn_ = nn::MultiHeadAttention(store, name + ".refine", feature_dim, config.heads, rng);
  // Zero output projection: refinement starts as the identity.
  for (float& w : refine_attn_.output.weight.mutable_data()) w = 0.0f;
  inject_ = nn::Mlp(store, name + ".inject", feature_dim, output_dim, output_dim, rng);
}

Tensor SpatioTemporalContainer::dissim_scores(const Tensor& features) const {
  return ops::add_scalar(ops::softplus(score_(features)), 1e-6f);
}

Tensor SpatioTemporalContainer::refine(const Tensor& merged) const {
  require(merged.rows() >= 1, "refine: needs at least one merged feature");
  const Tensor x = ops::reshape(merged, {1, merged.rows(), feature_dim_});
  const Tensor normed = refine_norm_(x);
  return ops::reshape(ops::add(x, refine_attn_(normed, normed)), {merged.rows(), feature_dim_});
}

Tensor SpatioTemporalContainer::inject(const Tensor& merged) const {
  if (!merged.defined() || merged.rows() == 0) return Tensor::zeros({0, output_dim_});
  return inject_(merged);
}

ContainerState SpatioTemporalContainer::update_state(const ContainerState& state, const Tensor& group_features,
                                                     const std::vector<TokenTag>& tags) const {
  require(group_features.cols() == feature_dim_, "update_state: feature width " +
                                                     std::to_string(group_features.cols()) + " != " +
                                                     std::to_string(feature_dim_));
  require(static_cast<int64_t>(tags.size()) == group_features.rows(), "update_state: one tag per feature row");
  ContainerState next;
  next.tags = state.tags;
  next.tags.insert(next.tags.end(), tags.begin(), tags.end());
  const Tensor rows = ops::reshape(group_features, {group_features.rows(), feature_dim_});
  next.pool = state.empty() ? rows : ops::concat_rows({state.pool, rows});
  std::vector<int> groups;
  for (const auto& t : next.tags) groups.push_back(t.group);
  const FeatureView view{next.pool.data(), next.pool.rows(), feature_dim_};
  next.clusters = cluster_tokens(view, config_, groups);
  next.merged = refine(merge(next.pool, next.clusters, dissim_scores(next.pool)));
  return next;
}

}  // namespace star4d
