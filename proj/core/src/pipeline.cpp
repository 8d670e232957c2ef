#include "star4d/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "star4d/metrics.hpp"
#include "star4d/splat_render.hpp"

namespace star4d {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

// Runs f, re-throwing any failure tagged with the stage name.
template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::string fmt(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

uint64_t params_hash(const nn::ParamStore& store) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : store.entries()) {
    for (char ch : name) h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ull;
    for (float v : t.data()) {
      uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = (h ^ bits) * 1099511628211ull;
    }
  }
  return h;
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

Dataset load_dataset_checked(const fs::path& path) {
  if (path.empty()) throw std::invalid_argument("no dataset directory given (--dataset)");
  if (!fs::exists(path / "manifest.txt")) throw std::runtime_error("no dataset at " + path.string());
  return load_dataset(path);
}

// Star grid keys must follow the tokenizer; explicit disagreeing keys are errors.
StarConfig star_for(const Config& source, StarConfig star, const VqConfig& vq) {
  const std::pair<const char*, int> grid[] = {{"timesteps", vq.timesteps},
                                              {"views", vq.views},
                                              {"latent_height", vq.latent_height()},
                                              {"latent_width", vq.latent_width()},
                                              {"chunks", vq.chunks},
                                              {"vocab", vq.codebook_size}};
  for (const auto& [key, value] : grid) {
    const std::string full = std::string("star.") + key;
    if (source.has(full) && source.get_int(full, value) != value) {
      throw std::invalid_argument(full + "=" + source.get_string(full, "") + " disagrees with the tokenizer (" +
                                  std::to_string(value) + ")");
    }
  }
  const StarConfig g = StarConfig::for_tokenizer(vq);
  star.timesteps = g.timesteps;
  star.views = g.views;
  star.latent_height = g.latent_height;
  star.latent_width = g.latent_width;
  star.chunks = g.chunks;
  star.vocab = g.vocab;
  star.validate();
  return star;
}

std::vector<CameraPose> cameras_for(const RunConfig& run, const VqConfig& vq, const Dataset* dataset) {
  if (dataset) return dataset->cameras;
  SceneConfig scene = run.scene;
  scene.views = vq.views;
  require(vq.height == vq.width, "scene cameras are square; vq.height != vq.width needs a dataset");
  scene.size = vq.height;
  return scene_cameras(scene);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void SceneConfig::validate() const {
  require(objects >= 1, "scene.objects must be >= 1");
  require(timesteps >= 1, "scene.timesteps must be >= 1");
  require(views >= 1, "scene.views must be >= 1");
  require(size > 0 && size % 8 == 0, "scene.size must be a positive multiple of 8 (got " + std::to_string(size) + ")");
  require(radius > 0.0, "scene.radius must be positive");
  require(fov_y > 0.0 && fov_y < 3.1, "scene.fov_y must be in (0, pi)");
}

void SceneConfig::write(Config& c) const {
  c.set("scene.objects", std::to_string(objects));
  c.set("scene.timesteps", std::to_string(timesteps));
  c.set("scene.views", std::to_string(views));
  c.set("scene.size", std::to_string(size));
  c.set("scene.radius", format_double(radius));
  c.set("scene.elevation", format_double(elevation));
  c.set("scene.fov_y", format_double(fov_y));
}

SceneConfig SceneConfig::from(const Config& c) {
  SceneConfig s;
  s.objects = static_cast<int>(c.get_int("scene.objects", s.objects));
  s.timesteps = static_cast<int>(c.get_int("scene.timesteps", s.timesteps));
  s.views = static_cast<int>(c.get_int("scene.views", s.views));
  s.size = static_cast<int>(c.get_int("scene.size", s.size));
  s.radius = c.get_double("scene.radius", s.radius);
  s.elevation = c.get_double("scene.elevation", s.elevation);
  s.fov_y = c.get_double("scene.fov_y", s.fov_y);
  return s;
}

RunConfig RunConfig::from(const Config& c) {
  RunConfig r;
  r.source = c;
  r.seed = static_cast<uint64_t>(c.get_int("run.seed", 0));
  r.log_every = static_cast<int>(c.get_int("run.log_every", r.log_every));
  r.scene = SceneConfig::from(c);
  r.scene.validate();

  Config vq = c;
  auto follow = [&](const char* key, int value) {
    if (!vq.has(key)) vq.set(key, std::to_string(value));
  };
  follow("vq.timesteps", r.scene.timesteps);
  follow("vq.views", r.scene.views);
  follow("vq.height", r.scene.size);
  follow("vq.width", r.scene.size);
  r.vq = VqConfig::from(vq);
  r.vq.validate();
  r.star = star_for(c, StarConfig::from(c), r.vq);

  r.sampling.temperature = c.get_double("sampling.temperature", r.sampling.temperature);
  r.sampling.top_k = static_cast<int>(c.get_int("sampling.top_k", r.sampling.top_k));

  r.vq_train.steps = c.get_int("train_vq.steps", r.vq_train.steps);
  r.vq_train.learning_rate = static_cast<float>(c.get_double("train_vq.learning_rate", r.vq_train.learning_rate));
  r.vq_train.batch_size = static_cast<int>(c.get_int("train_vq.batch_size", r.vq_train.batch_size));
  r.vq_train.reset_interval = c.get_int("train_vq.reset_interval", r.vq_train.reset_interval);
  r.vq_train.weights.alpha = c.get_double("train_vq.alpha", r.vq_train.weights.alpha);
  r.vq_train.weights.beta = c.get_double("train_vq.beta", r.vq_train.weights.beta);
  r.vq_train.weights.gamma = c.get_double("train_vq.gamma", r.vq_train.weights.gamma);
  r.vq_train.seed = r.seed;

  r.star_train.steps = c.get_int("train_star.steps", r.star_train.steps);
  r.star_train.learning_rate =
      static_cast<float>(c.get_double("train_star.learning_rate", r.star_train.learning_rate));
  r.star_train.batch_size = static_cast<int>(c.get_int("train_star.batch_size", r.star_train.batch_size));
  r.star_train.seed = r.seed;
  r.validate();
  return r;
}

Config RunConfig::to_config() const {
  Config c;
  c.set("run.seed", std::to_string(seed));
  c.set("run.log_every", std::to_string(log_every));
  scene.write(c);
  vq.write(c);
  star.write(c);
  c.set("sampling.temperature", format_double(sampling.temperature));
  c.set("sampling.top_k", std::to_string(sampling.top_k));
  c.set("train_vq.steps", std::to_string(vq_train.steps));
  c.set("train_vq.learning_rate", format_double(vq_train.learning_rate));
  c.set("train_vq.batch_size", std::to_string(vq_train.batch_size));
  c.set("train_vq.reset_interval", std::to_string(vq_train.reset_interval));
  c.set("train_vq.alpha", format_double(vq_train.weights.alpha));
  c.set("train_vq.beta", format_double(vq_train.weights.beta));
  c.set("train_vq.gamma", format_double(vq_train.weights.gamma));
  c.set("train_star.steps", std::to_string(star_train.steps));
  c.set("train_star.learning_rate", format_double(star_train.learning_rate));
  c.set("train_star.batch_size", std::to_string(star_train.batch_size));
  return c;
}

void RunConfig::validate() const {
  require(log_every >= 1, "run.log_every must be >= 1");
  scene.validate();
  vq.validate();
  star.validate();
  vq_train.weights.validate();
  require(vq_train.steps >= 1 && vq_train.batch_size >= 1, "train_vq.steps and train_vq.batch_size must be >= 1");
  require(vq_train.learning_rate > 0.0f, "train_vq.learning_rate must be positive");
  require(star_train.steps >= 1 && star_train.batch_size >= 1,
          "train_star.steps and train_star.batch_size must be >= 1");
  require(star_train.learning_rate > 0.0f, "train_star.learning_rate must be positive");
  require(std::isfinite(sampling.temperature), "sampling.temperature must be finite");
}

// ---------------------------------------------------------------------------
// Data helpers

std::vector<CameraPose> scene_cameras(const SceneConfig& s) {
  return make_orbit_cameras(s.views, s.radius, s.elevation, Vec3::Zero(), s.fov_y, s.size, s.size);
}

Dataset synthesize_dataset(const SceneConfig& scene, uint64_t seed) {
  scene.validate();
  Dataset d;
  d.cameras = scene_cameras(scene);
  for (int i = 0; i < scene.objects; ++i) {
    const SceneSpec spec = random_scene(seed + static_cast<uint64_t>(i), scene.timesteps);
    RenderedScene r = render_scene(spec, d.cameras, scene.timesteps);
    d.objects.push_back({spec.caption, std::move(r.matrix), std::move(r.flow)});
  }
  return d;
}

void check_dataset_matches(const VqConfig& vq, const Dataset& d) {
  require(!d.objects.empty(), "dataset has no objects");
  auto field = [](const char* key, int want, int got) {
    require(want == got, std::string(key) + "=" + std::to_string(want) + " but the dataset has " + std::to_string(got));
  };
  field("vq.timesteps", vq.timesteps, d.timesteps());
  field("vq.views", vq.views, d.views());
  field("vq.height", vq.height, d.height());
  field("vq.width", vq.width, d.width());
}

TokenGrid tokenize_object(const Vq4d& tokenizer, const SpatioTemporalMatrix& matrix) {
  NoGradGuard guard;
  return tokenizer.quantize(tokenizer.encode(matrix), matrix.timesteps, matrix.views).tokens;
}

StarInputs object_inputs(const Vq4d& tokenizer, const Dataset& d, size_t index, bool use_text, bool use_video) {
  require(index < d.objects.size(), "object " + std::to_string(index) + " outside the dataset's " +
                                        std::to_string(d.objects.size()) + " objects");
  StarInputs in;
  if (use_text) in.text = d.objects[index].caption;
  if (use_video) in.video_tokens = video_tokens(tokenizer, monocular_video(d.objects[index].matrix, 0));
  in.cameras = d.cameras;
  return in;
}

std::vector<StarExample> tokenize_dataset(const Vq4d& tokenizer, const Dataset& d) {
  std::vector<StarExample> out;
  for (size_t i = 0; i < d.objects.size(); ++i) {
    out.push_back({object_inputs(tokenizer, d, i), tokenize_object(tokenizer, d.objects[i].matrix)});
  }
  return out;
}

SpatioTemporalMatrix render_gaussians(const DynamicGaussians& g, const std::vector<CameraPose>& cameras,
                                      double background) {
  NoGradGuard guard;
  const RenderedSequence r = render_sequence(g, cameras, background);
  return tensor_matrix(r.images, g.timesteps, static_cast<int>(cameras.size()));
}

SpatioTemporalMatrix read_frames(const fs::path& dir, int timesteps, int views) {
  SpatioTemporalMatrix m;
  for (int t = 0; t < timesteps; ++t) {
    for (int v = 0; v < views; ++v) {
      int h = 0, w = 0;
      const auto rgb = read_ppm((dir / frame_name(t, v)).string(), h, w);
      if (m.pixels.empty()) m = SpatioTemporalMatrix(timesteps, views, h, w);
      require(h == m.height && w == m.width, "frame " + (dir / frame_name(t, v)).string() + " is " +
                                                 std::to_string(h) + "x" + std::to_string(w) + ", expected " +
                                                 std::to_string(m.height) + "x" + std::to_string(m.width));
      std::copy(rgb.begin(), rgb.end(), m.frame(t, v).begin());
    }
  }
  return m;
}

void write_frames(const SpatioTemporalMatrix& m, const fs::path& dir) {
  ensure_dir(dir);
  for (int t = 0; t < m.timesteps; ++t) {
    for (int v = 0; v < m.views; ++v) write_ppm((dir / frame_name(t, v)).string(), m.frame(t, v), m.height, m.width);
  }
}

void write_gaussians(const DynamicGaussians& g, const fs::path& dir) {
  ensure_dir(dir);
  for (int t = 0; t < g.timesteps; ++t) {
    const GaussianFrame f = g.frame(t).to_frame();
    std::ofstream out = open_output(dir / ("gaussians_t" + std::to_string(t) + ".txt"));
    out << "# x y z sx sy sz qw qx qy qz opacity r g b\n";
    char buf[32];
    auto put = [&](float x) {
      std::snprintf(buf, sizeof(buf), "%.9g", x);
      out << buf;
    };
    for (int64_t i = 0; i < f.count(); ++i) {
      for (int k = 0; k < 3; ++k) put(f.positions[i * 3 + k]), out << ' ';
      for (int k = 0; k < 3; ++k) put(f.scales[i * 3 + k]), out << ' ';
      for (int k = 0; k < 4; ++k) put(f.rotations[i * 4 + k]), out << ' ';
      put(f.opacities[i]);
      for (int k = 0; k < 3; ++k) out << ' ', put(f.colors[i * 3 + k]);
      out << '\n';
    }
  }
}

EvalRow EvalReport::mean() const {
  EvalRow m{"mean"};
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    m.temporal_consistency += r.temporal_consistency;
  }
  const double n = static_cast<double>(rows.size());
  m.psnr /= n;
  m.ssim /= n;
  m.temporal_consistency /= n;
  return m;
}

void EvalReport::write(std::ostream& out) const {
  out << "object\tpsnr_db\tssim\ttemporal_consistency\n";
  auto line = [&](const EvalRow& r) {
    out << r.object << '\t' << fmt(r.psnr) << '\t' << fmt(r.ssim) << '\t' << fmt(r.temporal_consistency) << '\n';
  };
  for (const auto& r : rows) line(r);
  line(mean());
}

Vq4d load_tokenizer(const fs::path& path, const Config& overrides) {
  if (path.empty()) throw std::invalid_argument("no tokenizer checkpoint given (--vq)");
  const Checkpoint ckpt = load_checkpoint(path);
  require(ckpt.kind == "vq4d", path.string() + " holds a '" + ckpt.kind + "' checkpoint, expected 'vq4d'");
  Config merged = ckpt.config;
  merged.merge(overrides.section("vq"));
  Vq4d model(VqConfig::from(merged), 0);
  model.load(ckpt);
  return model;
}

StarModel load_star(const fs::path& path, const Config& overrides) {
  if (path.empty()) throw std::invalid_argument("no transformer checkpoint given (--star)");
  const Checkpoint ckpt = load_checkpoint(path);
  require(ckpt.kind == "star", path.string() + " holds a '" + ckpt.kind + "' checkpoint, expected 'star'");
  Config merged = ckpt.config;
  merged.merge(overrides.section("star"));
  merged.merge(overrides.section("container"));
  StarModel model(StarConfig::from(merged), 0);
  model.load(ckpt);
  return model;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const RunConfig& run, const fs::path& out, std::ostream& log) {
  const Dataset d = stage("synth", [&] { return synthesize_dataset(run.scene, run.seed); });
  stage("synth:write", [&] {
    if (out.empty()) throw std::invalid_argument("no output directory given (--out)");
    save_dataset(d, out);
  });
  log << "synth: " << d.objects.size() << " objects, T=" << d.timesteps() << " V=" << d.views() << ' '
      << d.height() << 'x' << d.width() << " -> " << out.string() << '\n';
}

void cmd_train_vqvae(const RunConfig& run, const fs::path& dataset, const fs::path& out, const fs::path& resume,
                     std::ostream& log) {
  const Dataset d = stage("train-vqvae:dataset", [&] { return load_dataset_checked(dataset); });
  stage("train-vqvae:config", [&] {
    check_dataset_matches(run.vq, d);
    if (out.empty()) throw std::invalid_argument("no output directory given (--out)");
    ensure_dir(out);
  });
  Vq4d model(run.vq, run.seed);
  VqTrainer trainer(model, d, run.vq_train);
  if (!resume.empty()) {
    stage("train-vqvae:resume", [&] { trainer.resume(load_checkpoint(resume)); });
    log << "train-vqvae: resumed at step " << trainer.steps_done() << '\n';
  }
  stage("train-vqvae:train", [&] {
    std::ofstream tsv(out / "vq_log.tsv", trainer.steps_done() > 0 ? std::ios::app : std::ios::trunc);
    if (trainer.steps_done() == 0) tsv << "step\ttotal\treconstruction\tflow\tcommitment\tadversarial\tused_codes\tlr\n";
    while (trainer.steps_done() < run.vq_train.steps) {
      const VqStepLog s = trainer.step();
      tsv << s.step << '\t' << fmt(s.total) << '\t' << fmt(s.reconstruction) << '\t' << fmt(s.flow) << '\t'
          << fmt(s.commitment) << '\t' << fmt(s.adversarial) << '\t' << s.used_codes << '\t' << fmt(s.learning_rate)
          << '\n';
      if (s.step % run.log_every == 0 || trainer.steps_done() == run.vq_train.steps) {
        log << "train-vqvae: step " << s.step << " L_R " << fmt(s.reconstruction) << " L_F " << fmt(s.flow)
            << " commit " << fmt(s.commitment) << " codes " << s.used_codes << '\n';
      }
    }
  });
  stage("train-vqvae:save", [&] {
    Checkpoint ckpt;
    trainer.save(ckpt);
    save_checkpoint(ckpt, out / "vq.ckpt");
  });
  log << "train-vqvae: wrote " << (out / "vq.ckpt").string() << '\n';
}

void cmd_train_star(const RunConfig& run, const fs::path& dataset, const fs::path& vq_checkpoint,
                    const fs::path& out, const fs::path& resume, std::ostream& log) {
  const Dataset d = stage("train-star:dataset", [&] { return load_dataset_checked(dataset); });
  const Vq4d tokenizer = stage("train-star:tokenizer", [&] { return load_tokenizer(vq_checkpoint, run.source); });
  const StarConfig config = stage("train-star:config", [&] {
    check_dataset_matches(tokenizer.config(), d);
    if (out.empty()) throw std::invalid_argument("no output directory given (--out)");
    ensure_dir(out);
    return star_for(run.source, run.star, tokenizer.config());
  });
  const uint64_t frozen = params_hash(tokenizer.params());
  auto examples = stage("train-star:tokenize", [&] { return tokenize_dataset(tokenizer, d); });
  log << "train-star: tokenized " << examples.size() << " objects\n";

  StarModel model(config, run.seed);
  StarTrainer trainer(model, std::move(examples), run.star_train);
  if (!resume.empty()) {
    stage("train-star:resume", [&] { trainer.resume(load_checkpoint(resume)); });
    log << "train-star: resumed at step " << trainer.steps_done() << '\n';
  }
  stage("train-star:train", [&] {
    std::ofstream tsv(out / "star_log.tsv", trainer.steps_done() > 0 ? std::ios::app : std::ios::trunc);
    if (trainer.steps_done() == 0) {
      tsv << "step\tchunked_ce";
      for (int t = 1; t <= config.timesteps; ++t) tsv << "\tce_group" << t;
      tsv << "\tlr\n";
    }
    while (trainer.steps_done() < run.star_train.steps) {
      const StarStepLog s = trainer.step();
      tsv << s.step << '\t' << fmt(s.loss);
      for (double g : s.per_group) tsv << '\t' << fmt(g);
      tsv << '\t' << fmt(s.learning_rate) << '\n';
      if (s.step % run.log_every == 0 || trainer.steps_done() == run.star_train.steps) {
        log << "train-star: step " << s.step << " chunked CE " << fmt(s.loss) << " per group";
        for (double g : s.per_group) log << ' ' << fmt(g);
        log << '\n';
      }
    }
  });
  stage("train-star:tokenizer", [&] {
    if (params_hash(tokenizer.params()) != frozen) throw std::logic_error("tokenizer weights changed during training");
  });
  stage("train-star:save", [&] {
    Checkpoint ckpt;
    trainer.save(ckpt);
    save_checkpoint(ckpt, out / "star.ckpt");
  });
  log << "train-star: wrote " << (out / "star.ckpt").string() << '\n';
}

void cmd_generate(const RunConfig& run, const GenerateOptions& o, const fs::path& out, std::ostream& log) {
  const Vq4d tokenizer = stage("generate:tokenizer", [&] { return load_tokenizer(o.vq_checkpoint, run.source); });
  std::optional<StarModel> star;
  if (o.tokens.empty()) star.emplace(stage("generate:transformer", [&] { return load_star(o.star_checkpoint, run.source); }));
  std::optional<Dataset> d;
  if (!o.dataset.empty()) {
    d.emplace(stage("generate:dataset", [&] {
      Dataset loaded = load_dataset_checked(o.dataset);
      check_dataset_matches(tokenizer.config(), loaded);
      return loaded;
    }));
  }
  const VqConfig& vq = tokenizer.config();
  const auto cameras = stage("generate:config", [&] {
    if (out.empty()) throw std::invalid_argument("no output directory given (--out)");
    if (o.all_objects && !d) throw std::invalid_argument("--all needs --dataset");
    return cameras_for(run, vq, d ? &*d : nullptr);
  });

  auto one = [&](int object, const fs::path& dir) {
    stage("generate:output", [&] { ensure_dir(dir); });
    TokenGrid grid;
    if (!o.tokens.empty()) {
      grid = stage("generate:tokens", [&] { return read_token_grid(o.tokens); });
    } else {
      const StarInputs inputs = stage("generate:conditioning", [&] {
        StarInputs in;
        in.cameras = cameras;
        if (o.use_text) in.text = o.text ? *o.text : (d ? d->objects.at(object).caption : std::string());
        if (o.use_video) {
          if (!o.video_dir.empty()) {
            in.video_tokens = video_tokens(tokenizer, read_frames(o.video_dir, vq.timesteps, 1));
          } else if (d) {
            in.video_tokens = video_tokens(tokenizer, monocular_video(d->objects.at(object).matrix, 0));
          }
        }
        return in;
      });
      grid = stage("generate:transformer", [&] { return star->generate(inputs, run.sampling, run.seed); });
    }
    stage("generate:tokens", [&] { write_token_grid(grid, dir / "tokens.txt"); });
    const DynamicGaussians g = stage("generate:decode", [&] {
      NoGradGuard guard;
      require(grid.timesteps == vq.timesteps && grid.views == vq.views && grid.codebook_size == vq.codebook_size,
              "token grid " + std::to_string(grid.timesteps) + "x" + std::to_string(grid.views) + " (K=" +
                  std::to_string(grid.codebook_size) + ") does not fit the tokenizer");
      return tokenizer.decode(grid);
    });
    stage("generate:render", [&] {
      write_frames(render_gaussians(g, cameras, vq.background), dir);
      write_gaussians(g, dir);
    });
    log << "generate: " << grid.timesteps * grid.views << " frames -> " << dir.string() << '\n';
  };
  if (o.all_objects) {
    for (size_t i = 0; i < d->objects.size(); ++i) one(static_cast<int>(i), out / object_dir_name(i));
  } else {
    one(o.object, out);
  }
}

EvalReport cmd_eval(const RunConfig& run, const fs::path& generated, const fs::path& dataset, int object,
                    const fs::path& out, std::ostream& log) {
  (void)run;
  const Dataset d = stage("eval:dataset", [&] { return load_dataset_checked(dataset); });
  EvalReport report;
  stage("eval:score", [&] {
    auto score_one = [&](size_t i, const fs::path& dir) {
      const auto& truth = d.objects[i];
      const SpatioTemporalMatrix m = read_frames(dir, truth.matrix.timesteps, truth.matrix.views);
      require(m.height == truth.matrix.height && m.width == truth.matrix.width,
              "generated frames in " + dir.string() + " differ in size from the dataset");
      const auto s = metrics::score(m, truth.matrix, truth.flow);
      report.rows.push_back({object_dir_name(i), s.psnr, s.ssim, s.temporal_consistency});
    };
    for (size_t i = 0; i < d.objects.size(); ++i) {
      if (fs::exists(generated / object_dir_name(i) / frame_name(0, 0))) score_one(i, generated / object_dir_name(i));
    }
    if (report.rows.empty()) {
      require(fs::exists(generated / frame_name(0, 0)), "no generated frames under " + generated.string());
      require(object >= 0 && static_cast<size_t>(object) < d.objects.size(), "--object outside the dataset");
      score_one(static_cast<size_t>(object), generated);
    }
  });
  stage("eval:write", [&] {
    if (out.empty()) return;
    ensure_dir(out);
    std::ofstream f = open_output(out / "eval_report.tsv");
    report.write(f);
  });
  report.write(log);
  return report;
}

void cmd_cluster_report(const RunConfig& run, const ClusterReportOptions& o, const fs::path& out, std::ostream& log) {
  const Vq4d tokenizer = stage("cluster-report:tokenizer", [&] { return load_tokenizer(o.vq_checkpoint, run.source); });
  const StarModel model = stage("cluster-report:transformer", [&] { return load_star(o.star_checkpoint, run.source); });
  const Dataset d = stage("cluster-report:dataset", [&] {
    Dataset loaded = load_dataset_checked(o.dataset);
    check_dataset_matches(tokenizer.config(), loaded);
    require(o.object >= 0 && static_cast<size_t>(o.object) < loaded.objects.size(), "--object outside the dataset");
    return loaded;
  });
  const ContainerState state = stage("cluster-report:container", [&] {
    NoGradGuard guard;
    const StarInputs in = object_inputs(tokenizer, d, static_cast<size_t>(o.object));
    const TokenGrid grid = tokenize_object(tokenizer, d.objects[o.object].matrix);
    const StarConfig& c = model.config();
    const auto layout = SequenceLayout::build(c, static_cast<int>(split_words(in.text).size()),
                                              static_cast<int>(in.video_tokens.size()));
    const Tensor spe = model.build_spe(layout, in.cameras);
    const int G = c.tokens_per_group();
    ContainerState s;
    for (int t = 1; t <= c.timesteps; ++t) {
      std::vector<TokenTag> tags;
      for (int i = 0; i < G; ++i) {
        const auto& p = layout.positions[layout.first_group_position() + (t - 1) * G + i];
        tags.push_back({t, p.view, p.spatial, p.chunk});
      }
      s = model.container().update_state(s, model.group_features(grid.group(t - 1), t, spe, layout), tags);
    }
    return s;
  });

  std::ostringstream table;
  const ClusterResult& cr = state.clusters;
  std::vector<bool> is_center(state.tags.size(), false);
  for (int c : cr.centers) is_center[c] = true;
  table << "token\tgroup\tview\tposition\tchunk\trho\tvarpi\trho_varpi\tcluster\tcenter\n";
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof(buf), "%.9g", x);
    return std::string(buf);
  };
  for (size_t i = 0; i < state.tags.size(); ++i) {
    const auto& tag = state.tags[i];
    table << i << '\t' << tag.group << '\t' << tag.view << '\t' << tag.position << '\t' << tag.chunk << '\t'
          << num(cr.density[i]) << '\t' << num(cr.separation[i]) << '\t' << num(cr.density[i] * cr.separation[i])
          << '\t' << cr.assignment[i] << '\t' << (is_center[i] ? "*" : "") << '\n';
  }
  table << "\n# cluster\tcenter_token\tsize\n";
  const auto hist = cr.histogram();
  int total = 0;
  for (size_t c = 0; c < hist.size(); ++c) {
    table << "# " << c << '\t' << cr.centers[c] << '\t' << hist[c] << '\n';
    total += hist[c];
  }
  table << "# total\t\t" << total << '\n';
  stage("cluster-report:write", [&] {
    if (out.empty()) return;
    ensure_dir(out);
    std::ofstream f = open_output(out / "cluster_report.tsv");
    f << table.str();
  });
  log << table.str();
}

}  // namespace star4d
