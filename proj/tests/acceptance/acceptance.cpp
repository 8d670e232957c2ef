// Acceptance runner: one PASS/FAIL line per criterion. Arguments select
// criteria by number (default: all); the exit code is nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "star4d/metrics.hpp"
#include "star4d/pipeline.hpp"
#include "star4d/splat_render.hpp"
#include "star4d/st_container.hpp"
#include "star4d/star_core.hpp"
#include "star4d/vq4d.hpp"

using namespace star4d;
using star4d::ops::mul;
using star4d::ops::sum;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------- oracles

// Full squared-distance matrix, accumulated in double in coordinate order.
std::vector<std::vector<double>> oracle_distances(const std::vector<float>& x, int n, int d) {
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff = static_cast<double>(x[i * d + k]) - static_cast<double>(x[j * d + k]);
        s += diff * diff;
      }
      m[i][j] = s;
    }
  }
  return m;
}

// rho_i = exp(-(1/K) sum of the K smallest distances to other tokens, ascending).
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

// varpi_i = min distance to a denser token, or the max distance when none is denser.
std::vector<double> oracle_separation(const std::vector<std::vector<double>>& m, const std::vector<double>& rho) {
  std::vector<double> out;
  for (size_t i = 0; i < m.size(); ++i) {
    double best = INFINITY, far = 0.0;
    bool denser = false;
    for (size_t j = 0; j < m.size(); ++j) {
      far = std::max(far, m[i][j]);
      if (rho[j] > rho[i]) {
        denser = true;
        best = std::min(best, m[i][j]);
      }
    }
    out.push_back(denser ? best : far);
  }
  return out;
}

// Mean over rows of logsumexp(row) - row[target], in double.
double oracle_plain_ce(const std::vector<float>& logits, const std::vector<int32_t>& targets, int K) {
  double total = 0.0;
  for (size_t r = 0; r < targets.size(); ++r) {
    const float* row = logits.data() + r * K;
    const double mx = *std::max_element(row, row + K);
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(row[k] - mx);
    total += std::log(s) + mx - row[targets[r]];
  }
  return total / static_cast<double>(targets.size());
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Worst relative error between the stored gradient of `leaf` and central differences of f.
double fd_worst(Tensor& leaf, const std::function<double()>& f, double h, double floor) {
  const std::vector<float> analytic(leaf.grad().begin(), leaf.grad().end());
  double worst = 0.0;
  auto data = leaf.mutable_data();
  for (size_t i = 0; i < analytic.size(); ++i) {
    const float saved = data[i];
    data[i] = static_cast<float>(saved + h);
    const double plus = f();
    data[i] = static_cast<float>(saved - h);
    const double minus = f();
    data[i] = saved;
    worst = std::max(worst, relative_error((plus - minus) / (2 * h), analytic[i], floor));
  }
  return worst;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// ---------------------------------------------------------------- 1, 2

Outcome dpc_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  std::normal_distribution<float> g(0.0f, 1.0f);
  int mismatches = 0;
  for (int instance = 0; instance < 200; ++instance) {
    const int n = std::uniform_int_distribution<int>(2, 128)(rng);
    const int d = std::uniform_int_distribution<int>(1, 64)(rng);
    const int K = std::uniform_int_distribution<int>(1, std::min(n - 1, 16))(rng);
    std::vector<float> x(static_cast<size_t>(n) * d);
    for (float& v : x) v = g(rng);
    const FeatureView view{x, n, d};
    const auto m = oracle_distances(x, n, d);
    const auto rho = local_density(view, K);
    const auto expected_rho = oracle_density(m, K);
    const auto varpi = separation_score(view, rho);
    if (rho != expected_rho || varpi != oracle_separation(m, expected_rho)) ++mismatches;
    ContainerConfig c;
    c.neighbors = K;
    c.centers = std::min(n, 8);
    const ClusterResult r = cluster_tokens(view, c);
    if (r.density != expected_rho || r.separation != oracle_separation(m, expected_rho)) ++mismatches;
  }
  const double elapsed = seconds_since(start);
  return {mismatches == 0 && elapsed < 30.0,
          fmt("200 instances, %d bit mismatches, %.2f s (limit 30 s)", mismatches, elapsed)};
}

Outcome blob_clustering() {
  int errors = 0;
  double worst_ratio = INFINITY;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const int n = 40, d = 8;
    const float spread = 0.1f;
    std::normal_distribution<float> g(0.0f, spread);
    std::normal_distribution<float> dir(0.0f, 1.0f);
    // Second blob centered 30 * spread * sqrt(d) away along a random direction.
    std::vector<float> offset(d);
    double norm = 0.0;
    for (float& v : offset) norm += (v = dir(rng)) * v;
    const double distance = 30.0 * spread * std::sqrt(static_cast<double>(d));
    for (float& v : offset) v = static_cast<float>(v / std::sqrt(norm) * distance);
    std::vector<float> x(static_cast<size_t>(n) * d);
    std::vector<int> label(n);
    for (int i = 0; i < n; ++i) {
      label[i] = static_cast<int>(rng() % 2);
      for (int k = 0; k < d; ++k) x[i * d + k] = g(rng) + (label[i] ? offset[k] : 0.0f);
    }
    // Measured separation: centroid distance over the largest member-to-centroid distance.
    std::vector<double> centroid[2] = {std::vector<double>(d), std::vector<double>(d)};
    int counts[2] = {0, 0};
    for (int i = 0; i < n; ++i) {
      ++counts[label[i]];
      for (int k = 0; k < d; ++k) centroid[label[i]][k] += x[i * d + k];
    }
    if (counts[0] == 0 || counts[1] == 0) {
      ++errors;
      continue;
    }
    for (int b = 0; b < 2; ++b) {
      for (double& v : centroid[b]) v /= counts[b];
    }
    double between = 0.0, within = 0.0;
    for (int k = 0; k < d; ++k) between += std::pow(centroid[0][k] - centroid[1][k], 2);
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += std::pow(x[i * d + k] - centroid[label[i]][k], 2);
      within = std::max(within, s);
    }
    worst_ratio = std::min(worst_ratio, std::sqrt(between) / std::sqrt(within));

    ContainerConfig c;
    c.centers = 2;
    const ClusterResult r = cluster_tokens(FeatureView{x, n, d}, c);
    // Cluster ids are ranks, so compare through the center's blob label.
    for (int i = 0; i < n; ++i) errors += label[r.centers[r.assignment[i]]] != label[i];
    errors += label[r.centers[0]] == label[r.centers[1]];
  }
  return {errors == 0 && worst_ratio >= 10.0,
          fmt("50 seeds, %d assignment errors, min separation ratio %.1f (need >= 10)", errors, worst_ratio)};
}

// ---------------------------------------------------------------- 3

Outcome chunked_ce_degeneracy() {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g(0.0f, 2.0f);
  double worst_g1 = 0.0, worst_uniform = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 2 + static_cast<int>(rng() % 600);
    const int T = 1 + static_cast<int>(rng() % 6);
    const int per = 1 + static_cast<int>(rng() % 40);
    const int R = T * per;
    std::vector<float> logits(static_cast<size_t>(R) * K);
    for (float& v : logits) v = g(rng);
    std::vector<int32_t> targets(R);
    for (auto& t : targets) t = static_cast<int32_t>(rng() % K);
    // The reported chunked CE is the double-precision sum of the per-group values.
    auto reported = [&](const Tensor& l, int groups) {
      std::vector<double> per_group;
      chunked_ce(l, targets, groups, &per_group);
      double total = 0.0;
      for (double v : per_group) total += v;
      return total;
    };
    const double chunk1 = reported(Tensor::from({R, K}, logits), 1);
    worst_g1 = std::max(worst_g1, std::abs(chunk1 - oracle_plain_ce(logits, targets, K)));
    const double uniform = reported(Tensor::zeros({R, K}), T);
    worst_uniform = std::max(worst_uniform, std::abs(uniform - T * std::log(static_cast<double>(K))));
  }
  return {worst_g1 <= 1e-6 && worst_uniform <= 1e-6,
          fmt("G=1 vs plain CE max |diff| %.2e, uniform vs T ln K max |diff| %.2e (tol 1e-6)", worst_g1,
              worst_uniform)};
}

// ---------------------------------------------------------------- 4

StarInputs random_inputs(const StarConfig& c, std::mt19937_64& rng) {
  StarInputs in;
  in.text = "a blue sphere and a yellow cube drifting apart";
  in.cameras = make_orbit_cameras(c.views, 2.0, 0.3, Vec3::Zero());
  for (int i = 0; i < c.video_tokens(); ++i) in.video_tokens.push_back(static_cast<int32_t>(rng() % c.vocab));
  return in;
}

TokenGrid random_grid(const StarConfig& c, std::mt19937_64& rng) {
  TokenGrid g{c.timesteps, c.views, c.latent_height, c.latent_width, c.chunks, c.vocab, {}};
  g.indices.resize(static_cast<size_t>(c.timesteps) * c.tokens_per_group());
  for (auto& v : g.indices) v = static_cast<int32_t>(rng() % c.vocab);
  return g;
}

Outcome causality() {
  NoGradGuard guard;
  std::ostringstream detail;
  bool pass = true;
  for (ContainerMode mode : {ContainerMode::kv, ContainerMode::additive, ContainerMode::none}) {
    StarConfig c;
    c.container_mode = mode;
    const StarModel model(c, 41);
    std::mt19937_64 rng(42);
    const auto in = random_inputs(c, rng);
    const auto grid = random_grid(c, rng);
    const auto base = model.forward(in, grid);
    const auto base_logits = base.logits.to_vector();
    const size_t n = grid.indices.size(), K = static_cast<size_t>(c.vocab);
    int violations = 0;
    for (int trial = 0; trial < 20; ++trial) {
      auto changed = grid;
      const size_t j = rng() % n;
      changed.indices[j] = (changed.indices[j] + 1 + static_cast<int32_t>(rng() % (K - 1))) % c.vocab;
      const auto out = model.forward(in, changed).logits.to_vector();
      // Row i predicts token i, so rows 0..j see only tokens before j.
      if (!std::equal(base_logits.begin(), base_logits.begin() + (j + 1) * K, out.begin())) ++violations;
    }
    // Provenance: the state for group t holds only tokens of groups < t and
    // is bit-identical when every group >= t is rewritten.
    int leaks = 0;
    const int G = c.tokens_per_group();
    for (int t = 1; t <= static_cast<int>(base.states.size()); ++t) {
      for (const auto& tag : base.states[t - 1].tags) leaks += tag.group >= t;
      if (mode == ContainerMode::none || t == 1) continue;  // group 1 starts from an empty state
      auto changed = grid;
      for (size_t i = static_cast<size_t>(t - 1) * G; i < n; ++i) changed.indices[i] = (changed.indices[i] + 7) % c.vocab;
      const auto other = model.forward(in, changed);
      if (other.states[t - 1].tags != base.states[t - 1].tags ||
          other.states[t - 1].merged.to_vector() != base.states[t - 1].merged.to_vector()) {
        ++leaks;
      }
    }
    pass = pass && violations == 0 && leaks == 0;
    detail << to_string(mode) << ": " << violations << "/20 perturbations moved earlier logits, " << leaks
           << " provenance leaks; ";
  }
  return {pass, detail.str()};
}

// ---------------------------------------------------------------- 5

Outcome gradient_checks() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // 2D compositor, analytic VJP against differences of the forward pass.
  std::vector<ProjectedSplat> splats;
  for (int i = 0; i < 5; ++i) {
    ProjectedSplat s;
    s.mean = Vec2(2 + 4 * u(rng), 2 + 4 * u(rng));
    const double a = 1.5 + 2 * u(rng), b = 1.5 + 2 * u(rng), cross = 0.3 * (u(rng) - 0.5);
    s.covariance << a, cross, cross, b;
    s.depth = 1.0 + i;
    s.color = Vec3(u(rng), u(rng), u(rng));
    s.opacity = 0.3 + 0.6 * u(rng);
    s.source = i;
    splats.push_back(s);
  }
  constexpr int H = 8, W = 8;
  const Vec3 bg(0.3, 0.3, 0.3);
  std::vector<float> g_rgb(H * W * 3), g_alpha(H * W);
  for (float& v : g_rgb) v = static_cast<float>(u(rng) - 0.5);
  for (float& v : g_alpha) v = static_cast<float>(u(rng) - 0.5);
  auto objective = [&](const std::vector<ProjectedSplat>& s) {
    const auto img = composite(s, H, W, bg);
    double total = 0.0;
    for (size_t i = 0; i < g_rgb.size(); ++i) total += g_rgb[i] * static_cast<double>(img.rgb[i]);
    for (size_t i = 0; i < g_alpha.size(); ++i) total += g_alpha[i] * static_cast<double>(img.alpha[i]);
    return total;
  };
  const auto grads = composite_gradient(splats, H, W, bg, g_rgb, g_alpha);
  // The compositor outputs float32, so the step must dwarf its rounding.
  const double h = 1e-2;
  double worst2d = 0.0;
  for (size_t i = 0; i < splats.size(); ++i) {
    auto probe = [&](auto&& field) {
      auto plus = splats, minus = splats;
      field(plus[i]) += h;
      field(minus[i]) -= h;
      return (objective(plus) - objective(minus)) / (2 * h);
    };
    auto check = [&](auto&& field, double analytic) { worst2d = std::max(worst2d, relative_error(probe(field), analytic, 1e-3)); };
    check([](ProjectedSplat& s) -> double& { return s.opacity; }, grads[i].opacity);
    check([](ProjectedSplat& s) -> double& { return s.mean.x(); }, grads[i].mean.x());
    check([](ProjectedSplat& s) -> double& { return s.mean.y(); }, grads[i].mean.y());
    for (int k = 0; k < 3; ++k) {
      check([k](ProjectedSplat& s) -> double& { return s.color[k]; }, grads[i].color[k]);
    }
    check([](ProjectedSplat& s) -> double& { return s.covariance(0, 0); }, grads[i].covariance(0, 0));
    check([](ProjectedSplat& s) -> double& { return s.covariance(1, 1); }, grads[i].covariance(1, 1));
  }

  // 3D parameters through projection and compositing, 4 Gaussians.
  GaussianFrame f;
  f.resize(4);
  for (int i = 0; i < 4; ++i) {
    for (int k = 0; k < 3; ++k) {
      f.positions[i * 3 + k] = static_cast<float>(0.4 * (u(rng) - 0.5));
      f.scales[i * 3 + k] = static_cast<float>(0.1 + 0.1 * u(rng));
      f.colors[i * 3 + k] = static_cast<float>(0.2 + 0.7 * u(rng));
    }
    f.positions[i * 3 + 2] = static_cast<float>(-0.3 + 0.2 * i);
    float norm = 0.0f;
    for (int k = 0; k < 4; ++k) norm += (f.rotations[i * 4 + k] = static_cast<float>(u(rng) - 0.5)) * f.rotations[i * 4 + k];
    for (int k = 0; k < 4; ++k) f.rotations[i * 4 + k] /= std::sqrt(norm);
    f.opacities[i] = static_cast<float>(0.3 + 0.6 * u(rng));
  }
  CameraPose cam;
  cam.height = cam.width = 12;
  GaussianParams params = GaussianParams::from_frame(f, true);
  std::vector<float> weights(12 * 12 * 3);
  for (float& w : weights) w = static_cast<float>(u(rng) - 0.5);
  const Tensor probe = Tensor::from({12, 12, 3}, weights);
  auto loss = [&] { return sum(mul(render(params, cam, Vec3(0.1, 0.2, 0.3)).image, probe)); };
  loss().backward();
  auto value = [&] {
    NoGradGuard g;
    return static_cast<double>(loss().item());
  };
  double worst3d = 0.0;
  for (Tensor* leaf : {&params.positions, &params.scales, &params.opacities, &params.colors}) {
    worst3d = std::max(worst3d, fd_worst(*leaf, value, 1e-3, 1e-2));
  }

  // Merge of 4 tokens into 2 clusters, w.r.t. features and sigma.
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> fv(4 * 3), sv(4);
  for (float& v : fv) v = nd(rng);
  for (float& v : sv) v = static_cast<float>(0.2 + u(rng));
  Tensor feats = Tensor::from({4, 3}, fv, true), sigma = Tensor::from({4, 1}, sv, true);
  const ClusterResult clusters{{0, 2}, {0, 0, 1, 1}, {}, {}};
  std::vector<float> mw(2 * 3);
  for (float& v : mw) v = nd(rng);
  const Tensor merge_probe = Tensor::from({2, 3}, mw);
  auto merge_loss = [&] { return sum(mul(merge(feats, clusters, sigma), merge_probe)); };
  merge_loss().backward();
  auto merge_value = [&] {
    NoGradGuard g;
    return static_cast<double>(merge_loss().item());
  };
  const double worst_merge =
      std::max(fd_worst(feats, merge_value, 1e-2, 1e-3), fd_worst(sigma, merge_value, 1e-2, 1e-3));

  const double worst = std::max({worst2d, worst3d, worst_merge});
  return {worst < 1e-2, fmt("max relative error: compositor %.2e, 3D render %.2e, merge %.2e (tol 1e-2)", worst2d,
                            worst3d, worst_merge)};
}

// ---------------------------------------------------------------- 6

Outcome stop_identity() {
  NoGradGuard guard;
  const VqConfig c;
  int differing = 0, nonzero = 0;
  for (uint64_t seed = 0; seed < 3; ++seed) {
    const Vq4d model(c, seed);
    SceneConfig scene;
    scene.objects = 1;
    const Dataset d = synthesize_dataset(scene, seed);
    const Tensor latents = model.encode(d.objects[0].matrix);
    const auto q = model.quantize(latents, c.timesteps, c.views);
    const Vq4d::Decoded out = model.decode_quantized(q.quantized, c.timesteps);
    const OffsetFeatures off = model.stop_offsets(out.coarse, out.continuous);
    for (const Tensor* t : {&off.positions, &off.scales, &off.rotations, &off.opacities, &off.colors}) {
      for (float v : t->data()) nonzero += v != 0.0f;
    }
    differing += !(out.corrected.frames() == out.coarse.frames());
    differing += !(apply_offsets(out.coarse, off).frames() == out.coarse.frames());
  }
  return {differing == 0 && nonzero == 0,
          fmt("3 seeds: %d nonzero offsets, %d corrected sets differing from static", nonzero, differing)};
}

// ---------------------------------------------------------------- 7

Outcome vq_overfit() {
  // Object seeded 1: its ground-truth frames reach the temporal-consistency
  // bar themselves (seed 0's do not; see the README).
  SceneConfig scene;
  scene.objects = 1;
  const Dataset d = synthesize_dataset(scene, 1);
  const auto& obj = d.objects[0];
  const double ceiling = metrics::temporal_consistency(obj.matrix, obj.flow);

  const auto start = Clock::now();
  VqConfig c;
  Vq4d model(c, 0);
  VqTrainOptions o;  // 2000 steps, lr 3e-4
  VqTrainer trainer(model, d, o);
  for (int64_t s = 0; s < o.steps; ++s) {
    const VqStepLog l = trainer.step();
    if (s % 250 == 0) {
      std::printf("  [7] step %lld L_R %.5f  %.0f s\n", static_cast<long long>(l.step), l.reconstruction,
                  seconds_since(start));
      std::fflush(stdout);
    }
  }
  NoGradGuard guard;
  const TokenGrid tokens = tokenize_object(model, obj.matrix);
  const auto rendered = render_gaussians(model.decode(tokens), d.cameras, c.background);
  const auto s = metrics::score(rendered, obj.matrix, obj.flow);
  const double elapsed = seconds_since(start);
  return {s.psnr >= 28.0 && s.temporal_consistency >= 0.95 && elapsed <= 1200.0,
          fmt("PSNR %.2f dB (>= 28), TC %.4f (>= 0.95; ground truth %.4f), SSIM %.4f, %.0f s (<= 1200)", s.psnr,
              s.temporal_consistency, ceiling, s.ssim, elapsed)};
}

// ---------------------------------------------------------------- 8, 9

struct StarRun {
  double ce_before = 0.0, ce_after = 0.0;
  double greedy_match_object0 = 0.0, greedy_match_mean = 0.0;
  double sampled_tc = 0.0;
  double seconds = 0.0;
};

constexpr int64_t kAblationVqSteps = 400;

StarRun train_and_sample(ContainerMode mode, const Vq4d& tokenizer, const Dataset& d,
                         const std::vector<StarExample>& examples, const RunConfig& run) {
  const auto start = Clock::now();
  StarConfig c = run.star;
  c.container_mode = mode;
  StarModel model(c, run.seed);
  StarTrainer trainer(model, examples, run.star_train);
  StarRun r;
  r.ce_before = trainer.evaluate();
  for (int64_t s = 0; s < run.star_train.steps; ++s) {
    const StarStepLog l = trainer.step();
    if (s % 100 == 0) {
      std::printf("  [%s] step %lld chunked CE %.4f  %.0f s\n", to_string(mode).c_str(),
                  static_cast<long long>(l.step), l.loss, seconds_since(start));
      std::fflush(stdout);
    }
  }
  r.ce_after = trainer.evaluate();

  NoGradGuard guard;
  SamplingOptions greedy;
  greedy.temperature = 0.0;
  for (size_t i = 0; i < examples.size(); ++i) {
    const TokenGrid g = model.generate(examples[i].inputs, greedy, 0);
    int same = 0;
    for (size_t k = 0; k < g.indices.size(); ++k) same += g.indices[k] == examples[i].tokens.indices[k];
    const double match = static_cast<double>(same) / static_cast<double>(g.indices.size());
    if (i == 0) r.greedy_match_object0 = match;
    r.greedy_match_mean += match / static_cast<double>(examples.size());

    // Ablation metric: configured sampler, seed = object index, same for both modes.
    const TokenGrid sampled = model.generate(examples[i].inputs, run.sampling, i);
    const auto frames = render_gaussians(tokenizer.decode(sampled), d.cameras, tokenizer.config().background);
    r.sampled_tc += metrics::temporal_consistency(frames, d.objects[i].flow) / static_cast<double>(examples.size());
  }
  r.seconds = seconds_since(start);
  return r;
}

struct StarResults {
  StarRun kv, none;
};

StarResults star_experiment() {
  const RunConfig run = RunConfig::from(Config());  // 16 objects, 500 steps, batch 4, seed 0
  const Dataset d = synthesize_dataset(run.scene, run.seed);
  const auto start = Clock::now();
  Vq4d tokenizer(run.vq, run.seed);
  VqTrainOptions vo = run.vq_train;
  vo.steps = kAblationVqSteps;
  {
    VqTrainer trainer(tokenizer, d, vo);
    for (int64_t s = 0; s < vo.steps; ++s) trainer.step();
  }
  std::printf("  tokenizer: %lld steps on %zu objects, %.0f s\n", static_cast<long long>(vo.steps), d.objects.size(),
              seconds_since(start));
  const auto examples = tokenize_dataset(tokenizer, d);
  StarResults r;
  r.kv = train_and_sample(ContainerMode::kv, tokenizer, d, examples, run);
  r.none = train_and_sample(ContainerMode::none, tokenizer, d, examples, run);
  return r;
}

// ---------------------------------------------------------------- 10

Outcome generate_determinism() {
  const fs::path root = fs::temp_directory_path() / "star4d_acceptance_determinism";
  fs::remove_all(root);
  Config cfg;
  cfg.set("scene.objects", "2");
  cfg.set("run.seed", "17");
  const RunConfig run = RunConfig::from(cfg);
  std::ostringstream log;
  cmd_synth(run, root / "data", log);
  {
    Checkpoint vq_ckpt;
    Vq4d(run.vq, run.seed).save(vq_ckpt);
    save_checkpoint(vq_ckpt, root / "vq.ckpt");
    Checkpoint star_ckpt;
    StarModel(run.star, run.seed).save(star_ckpt);
    save_checkpoint(star_ckpt, root / "star.ckpt");
  }
  GenerateOptions o;
  o.dataset = root / "data";
  o.object = 1;
  o.vq_checkpoint = root / "vq.ckpt";
  o.star_checkpoint = root / "star.ckpt";
  cmd_generate(run, o, root / "a", log);
  cmd_generate(run, o, root / "b", log);
  const std::string a = slurp(root / "a" / "tokens.txt"), b = slurp(root / "b" / "tokens.txt");
  Config other = cfg;
  other.set("run.seed", "18");
  cmd_generate(RunConfig::from(other), o, root / "c", log);
  const bool seed_matters = slurp(root / "c" / "tokens.txt") != a;
  fs::remove_all(root);
  return {!a.empty() && a == b,
          fmt("two runs with seed 17 (temperature %.1f, top-k %d): %s; seed 18 %s", run.sampling.temperature,
              run.sampling.top_k, a == b ? "byte-identical TokenGrid files" : "files differ",
              seed_matters ? "gives a different grid" : "gives the same grid")};
}

void print(int id, const std::string& name, const Outcome& o) {
  std::printf("%s [%d] %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto want = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  int failures = 0;
  auto run = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (!want(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    print(id, name, o);
  };

  run(1, "DPC-KNN matches the brute-force oracle", dpc_oracle);
  run(2, "two-blob clustering", blob_clustering);
  run(3, "chunked CE degeneracy", chunked_ce_degeneracy);
  run(4, "causality and container provenance", causality);
  run(5, "renderer and merge gradient checks", gradient_checks);
  run(6, "STOP identity at zero initialization", stop_identity);
  run(7, "tokenizer overfit on one object", vq_overfit);

  if (want(8) || want(9)) {
    StarResults r;
    std::string error;
    try {
      r = star_experiment();
    } catch (const std::exception& e) {
      error = std::string("exception: ") + e.what();
    }
    run(8, "transformer overfit on 16 objects", [&]() -> Outcome {
      if (!error.empty()) return {false, error};
      const double reduction = 1.0 - r.kv.ce_after / r.kv.ce_before;
      return {reduction >= 0.5 && r.kv.greedy_match_object0 >= 0.6,
              fmt("chunked CE %.3f -> %.3f (reduction %.1f%%, need >= 50%%); greedy reproduces %.1f%% of object 0 "
                  "tokens (need >= 60%%), %.1f%% over all 16; %.0f s",
                  r.kv.ce_before, r.kv.ce_after, 100 * reduction, 100 * r.kv.greedy_match_object0,
                  100 * r.kv.greedy_match_mean, r.kv.seconds)};
    });
    run(9, "container vs no-container temporal consistency", [&]() -> Outcome {
      if (!error.empty()) return {false, error};
      return {r.kv.sampled_tc >= r.none.sampled_tc,
              fmt("mean TC over 16 sampled objects: kv container %.4f, none %.4f (CE %.3f vs %.3f, greedy match "
                  "%.1f%% vs %.1f%%)",
                  r.kv.sampled_tc, r.none.sampled_tc, r.kv.ce_after, r.none.ce_after, 100 * r.kv.greedy_match_mean,
                  100 * r.none.greedy_match_mean)};
    });
  }

  run(10, "generate is deterministic", generate_determinism);
  return failures == 0 ? 0 : 1;
}
