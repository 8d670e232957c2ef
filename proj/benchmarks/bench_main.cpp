#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include "star4d/splat_render.hpp"
#include "star4d/st_container.hpp"
#include "star4d/star_core.hpp"

using namespace star4d;

namespace {

GaussianFrame random_frame(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> pos(-0.5f, 0.5f), scale(0.03f, 0.1f), unit(0.2f, 0.9f), q(-1.0f, 1.0f);
  GaussianFrame f;
  f.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) {
      f.positions[i * 3 + k] = pos(rng);
      f.scales[i * 3 + k] = scale(rng);
      f.colors[i * 3 + k] = unit(rng);
    }
    float norm = 0.0f;
    for (int k = 0; k < 4; ++k) norm += (f.rotations[i * 4 + k] = q(rng)) * f.rotations[i * 4 + k];
    for (int k = 0; k < 4; ++k) f.rotations[i * 4 + k] /= std::sqrt(norm);
    f.opacities[i] = unit(rng);
  }
  return f;
}

void BM_RenderForward(benchmark::State& state) {
  std::mt19937_64 rng(0);
  const auto frame = random_frame(static_cast<int>(state.range(0)), rng);
  const auto camera = make_orbit_cameras(1, 2.0, 0.3, Vec3::Zero())[0];
  for (auto _ : state) {
    const auto splats = project(frame, camera);
    benchmark::DoNotOptimize(composite(splats, camera.height, camera.width, Vec3::Ones()));
  }
}
BENCHMARK(BM_RenderForward)->Arg(64)->Arg(256)->Arg(1024);

void BM_RenderBackward(benchmark::State& state) {
  std::mt19937_64 rng(0);
  const auto frame = random_frame(static_cast<int>(state.range(0)), rng);
  const auto camera = make_orbit_cameras(1, 2.0, 0.3, Vec3::Zero())[0];
  for (auto _ : state) {
    const GaussianParams g = GaussianParams::from_frame(frame, true);
    const auto out = render(g, camera, Vec3::Ones());
    Tensor loss = ops::mean(out.image);
    loss.backward();
    benchmark::DoNotOptimize(g.positions.grad());
  }
}
BENCHMARK(BM_RenderBackward)->Arg(64)->Arg(256);

void BM_DpcKnn(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), dim = 128;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> dist;
  std::vector<float> data(static_cast<size_t>(n) * dim);
  for (float& x : data) x = dist(rng);
  const FeatureView view{data, n, dim};
  ContainerConfig config;
  for (auto _ : state) benchmark::DoNotOptimize(cluster_tokens(view, config));
  state.SetComplexityN(n);
}
BENCHMARK(BM_DpcKnn)->RangeMultiplier(2)->Range(128, 1536)->Complexity(benchmark::oNSquared);

StarInputs default_inputs(const StarConfig& c, std::mt19937_64& rng) {
  StarInputs in;
  in.text = "a red cube spinning slowly";
  in.cameras = make_orbit_cameras(c.views, 2.0, 0.3, Vec3::Zero());
  in.video_tokens.resize(static_cast<size_t>(c.video_tokens()));
  for (auto& t : in.video_tokens) t = static_cast<int32_t>(rng() % c.vocab);
  return in;
}

TokenGrid random_grid(const StarConfig& c, std::mt19937_64& rng) {
  TokenGrid g;
  g.timesteps = c.timesteps;
  g.views = c.views;
  g.height = c.latent_height;
  g.width = c.latent_width;
  g.chunks = c.chunks;
  g.codebook_size = c.vocab;
  g.indices.resize(static_cast<size_t>(c.timesteps) * c.tokens_per_group());
  for (auto& t : g.indices) t = static_cast<int32_t>(rng() % c.vocab);
  return g;
}

void BM_StarForward(benchmark::State& state) {
  StarConfig c;
  c.container_mode = static_cast<ContainerMode>(state.range(0));
  const StarModel model(c, 0);
  std::mt19937_64 rng(2);
  const auto in = default_inputs(c, rng);
  const auto grid = random_grid(c, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(in, grid).logits);
  state.SetLabel(to_string(c.container_mode));
}
BENCHMARK(BM_StarForward)->Arg(0)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_StarGenerate(benchmark::State& state) {
  StarConfig c;
  const StarModel model(c, 0);
  std::mt19937_64 rng(3);
  const auto in = default_inputs(c, rng);
  SamplingOptions greedy;
  greedy.temperature = 0.0;
  for (auto _ : state) benchmark::DoNotOptimize(model.generate(in, greedy, 0));
}
BENCHMARK(BM_StarGenerate)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
