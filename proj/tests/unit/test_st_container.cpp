#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "star4d/st_container.hpp"
#include "test_support.hpp"

using namespace star4d;

namespace {

struct Points {
  std::vector<float> data;
  int64_t count = 0, dim = 0;
  FeatureView view() const { return {data, count, dim}; }
};

Points random_points(int64_t n, int64_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  Points p{std::vector<float>(static_cast<size_t>(n * d)), n, d};
  for (float& v : p.data) v = g(rng);
  return p;
}

// O(N^2) oracle: full distance matrix, each row sorted, K smallest summed in order.
std::vector<std::vector<double>> distance_matrix(const Points& p) {
  std::vector<std::vector<double>> m(p.count, std::vector<double>(p.count));
  for (int64_t i = 0; i < p.count; ++i) {
    for (int64_t j = 0; j < p.count; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < p.dim; ++k) {
        const double d = double(p.data[i * p.dim + k]) - double(p.data[j * p.dim + k]);
        s += d * d;
      }
      m[i][j] = s;
    }
  }
  return m;
}

std::vector<double> oracle_density(const std::vector<std::vector<double>>& m, int K) {
  std::vector<double> rho;
  for (size_t i = 0; i < m.size(); ++i) {
    std::vector<double> row;
    for (size_t j = 0; j < m.size(); ++j) {
      if (j != i) row.push_back(m[i][j]);
    }
    std::sort(row.begin(), row.end());
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += row[k];
    rho.push_back(std::exp(-s / K));
  }
  return rho;
}

std::vector<double> oracle_separation(const std::vector<std::vector<double>>& m, const std::vector<double>& rho) {
  std::vector<double> out;
  for (size_t i = 0; i < m.size(); ++i) {
    std::vector<double> higher;
    for (size_t j = 0; j < m.size(); ++j) {
      if (rho[j] > rho[i]) higher.push_back(m[i][j]);
    }
    out.push_back(higher.empty() ? *std::max_element(m[i].begin(), m[i].end())
                                 : *std::min_element(higher.begin(), higher.end()));
  }
  return out;
}

}  // namespace

TEST_CASE("local density worked examples") {
  const Points same{{1, 2, 1, 2, 1, 2, 1, 2}, 4, 2};
  for (int K = 1; K <= 3; ++K) {
    for (double r : local_density(same.view(), K)) CHECK(r == 1.0);
  }
  const Points two{{0, 1}, 2, 1};
  const auto rho = local_density(two.view(), 1);
  CHECK(rho[0] == doctest::Approx(0.36788).epsilon(1e-5));
  CHECK(rho[1] == rho[0]);
  CHECK_THROWS_AS(local_density(two.view(), 2), std::invalid_argument);
}

TEST_CASE("separation score worked examples") {
  const Points p{{0, 1, 3}, 3, 1};
  const std::vector<double> rho{0.9, 0.5, 0.1};
  const auto w = separation_score(p.view(), rho);
  CHECK(w == std::vector<double>{9, 1, 4});
  const Points twins{{2, 2}, 2, 1};
  const auto tied = separation_score(twins.view(), std::vector<double>{1.0, 1.0});
  CHECK(tied == std::vector<double>{0, 0});
}

TEST_CASE("density and separation match the brute-force oracle exactly") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const int64_t n = std::uniform_int_distribution<int64_t>(2, 64)(rng);
    const int64_t d = std::uniform_int_distribution<int64_t>(1, 16)(rng);
    const int K = std::uniform_int_distribution<int>(1, static_cast<int>(n - 1))(rng);
    const Points p = random_points(n, d, rng);
    const auto m = distance_matrix(p);
    const auto rho = local_density(p.view(), K);
    const auto expected_rho = oracle_density(m, K);
    REQUIRE(rho == expected_rho);
    REQUIRE(separation_score(p.view(), rho) == oracle_separation(m, expected_rho));
    for (double r : rho) REQUIRE((r > 0.0 && r <= 1.0));
  }
}

TEST_CASE("per-group density only looks inside the token's group") {
  std::mt19937_64 rng(22);
  const Points p = random_points(12, 3, rng);
  const std::vector<int> groups{1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3};
  const auto rho = local_density(p.view(), 2, groups);
  for (int g = 0; g < 3; ++g) {
    const Points sub{std::vector<float>(p.data.begin() + g * 12, p.data.begin() + (g + 1) * 12), 4, 3};
    const auto local = oracle_density(distance_matrix(sub), 2);
    for (int i = 0; i < 4; ++i) CHECK(rho[g * 4 + i] == local[i]);
  }
  CHECK_THROWS_AS(local_density(p.view(), 4, groups), std::invalid_argument);
}

TEST_CASE("select_and_assign boundary cases") {
  std::mt19937_64 rng(23);
  const Points p = random_points(10, 4, rng);
  const auto rho = local_density(p.view(), 3);
  const auto w = separation_score(p.view(), rho);
  const ClusterResult all = select_and_assign(p.view(), rho, w, 10);
  for (int i = 0; i < 10; ++i) CHECK(all.centers[all.assignment[i]] == i);
  const ClusterResult one = select_and_assign(p.view(), rho, w, 1);
  for (int a : one.assignment) CHECK(a == 0);
  CHECK(one.histogram() == std::vector<int>{10});
  CHECK_THROWS_AS(select_and_assign(p.view(), rho, w, 11), std::invalid_argument);
  // The global density maximum always has the largest separation, hence a high score.
  const auto top = std::max_element(rho.begin(), rho.end()) - rho.begin();
  CHECK(w[top] == *std::max_element(w.begin(), w.end()));
}

TEST_CASE("two separated blobs give one center per blob") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, 0.1f);
    Points p{std::vector<float>(32 * 4), 32, 4};
    std::vector<int> label(32);
    for (int i = 0; i < 32; ++i) {
      label[i] = i % 2;
      for (int k = 0; k < 4; ++k) p.data[i * 4 + k] = g(rng) + (k == 0 && label[i] ? 10.0f : 0.0f);
    }
    ContainerConfig c;
    c.centers = 2;
    c.neighbors = 4;
    const ClusterResult r = cluster_tokens(p.view(), c);
    REQUIRE(label[r.centers[0]] != label[r.centers[1]]);
    for (int i = 0; i < 32; ++i) REQUIRE(label[r.centers[r.assignment[i]]] == label[i]);
  }
}

TEST_CASE("clustering is stable under relabeling") {
  std::mt19937_64 rng(24);
  ContainerConfig c;
  c.centers = 6;
  c.neighbors = 3;
  for (int trial = 0; trial < 10; ++trial) {
    const Points p = random_points(40, 5, rng);
    std::vector<int> perm(40);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Points q{std::vector<float>(p.data.size()), 40, 5};
    for (int i = 0; i < 40; ++i) std::copy_n(p.data.begin() + perm[i] * 5, 5, q.data.begin() + i * 5);
    const ClusterResult a = cluster_tokens(p.view(), c), b = cluster_tokens(q.view(), c);
    for (int k = 0; k < 6; ++k) REQUIRE(perm[b.centers[k]] == a.centers[k]);
    for (int i = 0; i < 40; ++i) REQUIRE(b.assignment[i] == a.assignment[perm[i]]);
  }
}

TEST_CASE("merge worked examples and convex hull") {
  ClusterResult single{{0, 1}, {0, 1}, {}, {}};
  const Tensor y = Tensor::from({2, 2}, {3, 4, 5, 6});
  CHECK(merge(y, single, Tensor::from({2, 1}, {0.3f, 7.0f})).to_vector() == std::vector<float>{3, 4, 5, 6});

  ClusterResult pair{{0}, {0, 0}, {}, {}};
  const Tensor diag = Tensor::from({2, 2}, {1, 0, 0, 1});
  const auto eq = merge(diag, pair, Tensor::from({2, 1}, {2.0f, 2.0f})).to_vector();
  CHECK(eq[0] == doctest::Approx(0.5));
  CHECK(eq[1] == doctest::Approx(0.5));
  const auto weighted = merge(Tensor::from({2, 2}, {2, 0, 0, 0}), pair, Tensor::from({2, 1}, {0.75f, 0.25f})).to_vector();
  CHECK(weighted[0] == doctest::Approx(1.5));
  CHECK(weighted[1] == 0.0f);

  std::mt19937_64 rng(25);
  std::uniform_real_distribution<float> pos(0.01f, 3.0f);
  for (int trial = 0; trial < 20; ++trial) {
    const Points p = random_points(30, 6, rng);
    ContainerConfig c;
    c.centers = 5;
    const ClusterResult r = cluster_tokens(p.view(), c);
    std::vector<float> s(30);
    for (float& v : s) v = pos(rng);
    const auto merged = merge(Tensor::from({30, 6}, p.data), r, Tensor::from({30, 1}, s)).to_vector();
    for (int k = 0; k < 5; ++k) {
      for (int d = 0; d < 6; ++d) {
        float lo = 1e30f, hi = -1e30f;
        for (int i = 0; i < 30; ++i) {
          if (r.assignment[i] != k) continue;
          lo = std::min(lo, p.data[i * 6 + d]);
          hi = std::max(hi, p.data[i * 6 + d]);
        }
        REQUIRE(merged[k * 6 + d] >= lo - 1e-5f);
        REQUIRE(merged[k * 6 + d] <= hi + 1e-5f);
      }
    }
  }
}

TEST_CASE("container modules: sigma, refine, inject") {
  nn::ParamStore store;
  nn::Rng rng(26);
  ContainerConfig c;
  SpatioTemporalContainer box(store, "ctr", c, 16, 24, rng);
  std::mt19937_64 gen(27);
  const Tensor x = testing::random_tensor({1000, 16}, gen, 3.0f, false);
  const Tensor s = box.dissim_scores(x);
  CHECK(s.shape() == Shape{1000, 1});
  for (float v : s.data()) REQUIRE((v > 0.0f && std::isfinite(v)));
  const Tensor twin = Tensor::from({2, 16}, std::vector<float>(32, 0.7f));
  const Tensor st = box.dissim_scores(twin);
  CHECK(st.at(0) == st.at(1));

  // Zero output projection: refinement is the identity.
  const Tensor m = testing::random_tensor({5, 16}, gen, 1.0f, false);
  CHECK(box.refine(m).to_vector() == m.to_vector());
  // With a random output projection it is permutation equivariant.
  std::normal_distribution<float> nd(0.0f, 0.2f);
  for (float& w : store.find("ctr.refine.o.weight")->mutable_data()) w = nd(gen);
  const Tensor r = box.refine(m);
  std::vector<float> swapped = m.to_vector();
  std::swap_ranges(swapped.begin(), swapped.begin() + 16, swapped.begin() + 48);
  const Tensor rs = box.refine(Tensor::from({5, 16}, swapped));
  for (int d = 0; d < 16; ++d) {
    CHECK(rs.at(d) == doctest::Approx(r.at(48 + d)).epsilon(1e-6));
    CHECK(rs.at(48 + d) == doctest::Approx(r.at(d)).epsilon(1e-6));
    CHECK(rs.at(16 + d) == doctest::Approx(r.at(16 + d)).epsilon(1e-6));
  }
  for (float v : r.data()) REQUIRE(std::isfinite(v));

  CHECK(box.inject(Tensor::zeros({0, 16})).shape() == Shape{0, 24});
  const Tensor inj = box.inject(m);
  CHECK(inj.shape() == Shape{5, 24});
  CHECK(box.inject(m).to_vector() == inj.to_vector());
}

TEST_CASE("update_state keeps provenance and merged counts") {
  nn::ParamStore store;
  nn::Rng rng(28);
  ContainerConfig c;
  c.centers = 6;
  c.neighbors = 3;
  SpatioTemporalContainer box(store, "ctr", c, 8, 8, rng);
  std::mt19937_64 gen(29);
  ContainerState state;
  CHECK(state.empty());
  for (int g = 1; g <= 3; ++g) {
    const int n = g == 1 ? 4 : 5;
    std::vector<TokenTag> tags;
    for (int i = 0; i < n; ++i) tags.push_back({g, i % 2, i / 2, 0});
    const Tensor feats = testing::random_tensor({n, 8}, gen, 1.0f, false);
    const ContainerState next = box.update_state(state, feats, tags);
    CHECK(next.pool.rows() == (state.empty() ? n : state.pool.rows() + n));
    CHECK(next.merged.rows() == std::min<int64_t>(6, next.pool.rows()));
    std::vector<int> expected(g);
    std::iota(expected.begin(), expected.end(), 1);
    CHECK(next.groups() == expected);
    if (g == 1) {
      // First update: clusters of group 1 alone.
      const ClusterResult alone = cluster_tokens({feats.data(), 4, 8}, c);
      CHECK(next.clusters.centers == alone.centers);
      CHECK(next.merged.rows() == 4);
    }
    state = next;
  }
  CHECK(state.pool.rows() == 14);
  CHECK_THROWS_AS(box.update_state(state, Tensor::zeros({2, 8}), {{4, 0, 0, 0}}), std::invalid_argument);
}

TEST_CASE("gradients flow through sigma and merge to the scoring network") {
  nn::ParamStore store;
  nn::Rng rng(30);
  ContainerConfig c;
  c.centers = 2;
  c.score_hidden = 6;
  c.heads = 1;
  SpatioTemporalContainer box(store, "ctr", c, 3, 3, rng);
  std::mt19937_64 gen(31);
  const Tensor feats = testing::random_tensor({4, 3}, gen, 1.0f, false);
  const ClusterResult clusters{{0, 2}, {0, 0, 1, 1}, {}, {}};
  const testing::Probe probe = testing::Probe::random({2, 3}, 32);
  Tensor& w1 = *store.find("ctr.score.fc1.weight");
  Tensor& w2 = *store.find("ctr.score.fc2.weight");
  probe.loss(merge(feats, clusters, box.dissim_scores(feats))).backward();
  auto objective = [&] {
    NoGradGuard g;
    return probe(merge(feats, clusters, box.dissim_scores(feats)));
  };
  CHECK(testing::max_relative_error(w1, objective, 1e-2) < 1e-2);
  CHECK(testing::max_relative_error(w2, objective, 1e-2) < 1e-2);

  // And through the merge weights to the features themselves.
  Tensor f = testing::random_tensor({4, 3}, gen);
  const Tensor fixed_sigma = Tensor::from({4, 1}, {0.5f, 1.5f, 0.2f, 0.9f});
  probe.loss(merge(f, clusters, fixed_sigma)).backward();
  CHECK(testing::max_relative_error(f, [&] { NoGradGuard g; return probe(merge(f, clusters, fixed_sigma)); }, 1e-2) <
        1e-2);
}
