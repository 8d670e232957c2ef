#include "doctest.h"

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "star4d/metrics.hpp"
#include "star4d/pipeline.hpp"

using namespace star4d;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), {}};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("star4d_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Config tiny_run_config() {
  Config c;
  for (const char* a : {"scene.objects=2", "scene.size=16", "scene.timesteps=2", "scene.views=2", "vq.latent_dim=16",
                        "vq.codebook_size=32", "vq.token_dim=32", "vq.gaussians=64", "vq.decoder_hidden=32",
                        "vq.voxel_grid=8", "vq.voxel_channels=4", "train_vq.steps=4", "train_vq.batch_size=1",
                        "star.embed_dim=32", "star.layers=1", "star.heads=2", "star.ffn_hidden=64",
                        "container.centers=4", "train_star.steps=4", "train_star.batch_size=2", "run.log_every=2",
                        "run.seed=3"}) {
    c.set_assignment(a);
  }
  return c;
}

// Dataset, tokenizer and transformer for the command tests, built once.
struct TinyRun {
  TempDir dir{"pipeline"};
  RunConfig run = RunConfig::from(tiny_run_config());
  fs::path data = dir.path / "data", vq = dir.path / "vq" / "vq.ckpt", star = dir.path / "star" / "star.ckpt";
  std::ostringstream log;

  TinyRun() {
    cmd_synth(run, data, log);
    cmd_train_vqvae(run, data, dir.path / "vq", {}, log);
    cmd_train_star(run, data, vq, dir.path / "star", {}, log);
  }
};

TinyRun& tiny_run() {
  static TinyRun r;
  return r;
}

}  // namespace

TEST_CASE("run config derives grids and rejects bad values") {
  const RunConfig d = RunConfig::from(Config());
  CHECK(d.vq.height == d.scene.size);
  CHECK(d.star.timesteps == d.vq.timesteps);
  CHECK(d.star.vocab == d.vq.codebook_size);

  Config bad;
  bad.set("scene.size", "33");
  try {
    RunConfig::from(bad);
    FAIL("size 33 accepted");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("scene.size") != std::string::npos);
  }

  Config clash;
  clash.set("star.timesteps", "7");
  try {
    RunConfig::from(clash);
    FAIL("conflicting star.timesteps accepted");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("star.timesteps") != std::string::npos);
  }

  const RunConfig r = RunConfig::from(tiny_run_config());
  const RunConfig back = RunConfig::from(r.to_config());
  CHECK(back.to_config().to_text() == r.to_config().to_text());
}

TEST_CASE("synthesized objects are seeded independently") {
  SceneConfig s;
  s.objects = 3;
  s.timesteps = 2;
  s.views = 2;
  s.size = 16;
  const Dataset a = synthesize_dataset(s, 5);
  const Dataset b = synthesize_dataset(s, 5);
  s.objects = 1;
  const Dataset c = synthesize_dataset(s, 6);
  REQUIRE(a.objects.size() == 3);
  CHECK(a.objects[2].matrix.pixels == b.objects[2].matrix.pixels);
  CHECK(a.objects[1].matrix.pixels == c.objects[0].matrix.pixels);
  CHECK(a.objects[1].caption == c.objects[0].caption);
  CHECK(a.objects[0].matrix.pixels != a.objects[1].matrix.pixels);
}

TEST_CASE("metrics on constant frames") {
  const std::vector<float> black(16 * 16 * 3, 0.0f), white(16 * 16 * 3, 1.0f);
  CHECK(std::isinf(metrics::psnr(black, black)));
  CHECK(metrics::psnr(black, white) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(metrics::ssim(white, white, 16, 16) == doctest::Approx(1.0));
}

TEST_CASE("eval scores the dataset against itself as perfect") {
  TinyRun& t = tiny_run();
  std::ostringstream log;
  const EvalReport r = cmd_eval(t.run, t.data / object_dir_name(1), t.data, 1, {}, log);
  REQUIRE(r.rows.size() == 1);
  CHECK(std::isinf(r.rows[0].psnr));
  CHECK(r.rows[0].ssim == doctest::Approx(1.0));
  CHECK(log.str().rfind("object\tpsnr_db\tssim\ttemporal_consistency\n", 0) == 0);
}

TEST_CASE("generation is reproducible and decode-only matches") {
  TinyRun& t = tiny_run();
  GenerateOptions o;
  o.dataset = t.data;
  o.object = 1;
  o.vq_checkpoint = t.vq;
  o.star_checkpoint = t.star;
  std::ostringstream log;
  cmd_generate(t.run, o, t.dir.path / "g1", log);
  cmd_generate(t.run, o, t.dir.path / "g2", log);
  CHECK(slurp(t.dir.path / "g1" / "tokens.txt") == slurp(t.dir.path / "g2" / "tokens.txt"));

  GenerateOptions d;
  d.vq_checkpoint = t.vq;
  d.tokens = t.dir.path / "g1" / "tokens.txt";
  cmd_generate(t.run, d, t.dir.path / "d", log);
  for (int tt = 0; tt < 2; ++tt) {
    for (int v = 0; v < 2; ++v) {
      CHECK(slurp(t.dir.path / "d" / frame_name(tt, v)) == slurp(t.dir.path / "g1" / frame_name(tt, v)));
    }
  }
  CHECK(slurp(t.dir.path / "d" / "gaussians_t1.txt") == slurp(t.dir.path / "g1" / "gaussians_t1.txt"));

  // Text-only generation with a custom prompt still produces a full grid.
  GenerateOptions text_only = o;
  text_only.use_video = false;
  text_only.text = "a small green sphere";
  cmd_generate(t.run, text_only, t.dir.path / "g3", log);
  CHECK(fs::exists(t.dir.path / "g3" / frame_name(1, 1)));
}

TEST_CASE("stage errors name the stage and the field") {
  TinyRun& t = tiny_run();
  std::ostringstream log;
  Config overrides = t.run.source;
  overrides.set("star.embed_dim", "64");
  const RunConfig wider = RunConfig::from(overrides);
  GenerateOptions o;
  o.dataset = t.data;
  o.vq_checkpoint = t.vq;
  o.star_checkpoint = t.star;
  try {
    cmd_generate(wider, o, t.dir.path / "bad", log);
    FAIL("mismatch accepted");
  } catch (const StageError& e) {
    CHECK(e.stage() == "generate:transformer");
    CHECK(std::string(e.what()).find("star.embed_dim") != std::string::npos);
  }
  CHECK_THROWS_AS(cmd_train_star(t.run, t.data, t.dir.path / "missing.ckpt", t.dir.path / "x", {}, log), StageError);
  CHECK_THROWS_AS(cmd_eval(t.run, t.dir.path / "nothing", t.data, 0, {}, log), StageError);
}

TEST_CASE("training resumes where it stopped") {
  TinyRun& t = tiny_run();
  Config longer = t.run.source;
  longer.set("train_star.steps", "6");
  std::ostringstream log;
  cmd_train_star(RunConfig::from(longer), t.data, t.vq, t.dir.path / "resumed", t.star, log);
  CHECK(log.str().find("resumed at step 4") != std::string::npos);
  CHECK(load_checkpoint(t.star).metadata.at("train.step") == "4");
  CHECK(load_checkpoint(t.dir.path / "resumed" / "star.ckpt").metadata.at("train.step") == "6");
}

TEST_CASE("cluster report covers every token once") {
  TinyRun& t = tiny_run();
  std::ostringstream log;
  cmd_cluster_report(t.run, {t.data, t.vq, t.star, 0}, t.dir.path / "cr", log);
  std::istringstream in(slurp(t.dir.path / "cr" / "cluster_report.tsv"));
  std::string line;
  std::getline(in, line);
  CHECK(line == "token\tgroup\tview\tposition\tchunk\trho\tvarpi\trho_varpi\tcluster\tcenter");
  const int tokens = t.run.star.timesteps * t.run.star.tokens_per_group();
  int rows = 0, centers = 0, histogram_total = 0, clusters = 0;
  while (std::getline(in, line) && !line.empty()) {
    ++rows;
    if (line.back() == '*') ++centers;
  }
  while (std::getline(in, line)) {
    if (line.rfind("# total", 0) == 0) {
      CHECK(std::stoi(line.substr(line.rfind('\t') + 1)) == tokens);
    } else if (line.rfind("# ", 0) == 0 && line.rfind("# cluster", 0) != 0) {
      ++clusters;
      histogram_total += std::stoi(line.substr(line.rfind('\t') + 1));
    }
  }
  CHECK(rows == tokens);
  CHECK(centers == clusters);
  CHECK(clusters == std::min(t.run.star.container.centers, tokens));
  CHECK(histogram_total == tokens);
}
