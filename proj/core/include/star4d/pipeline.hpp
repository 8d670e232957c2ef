#pragma once

// Stage functions behind the command-line tool. Every failure surfaces as a
// StageError naming the stage that raised it.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "star4d/config.hpp"
#include "star4d/scene_synth.hpp"
#include "star4d/star_core.hpp"
#include "star4d/vq4d.hpp"

namespace star4d {

namespace fs = std::filesystem;

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error("[" + stage + "] " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct SceneConfig {
  int objects = 16;
  int timesteps = 4;
  int views = 4;
  int size = 32;  // square frames
  double radius = 2.0;
  double elevation = 0.3;
  double fov_y = 0.8;

  void validate() const;
  void write(Config& config) const;  // "scene." keys
  static SceneConfig from(const Config& config);
};

struct RunConfig {
  uint64_t seed = 0;
  int log_every = 50;
  SceneConfig scene;
  VqConfig vq;
  StarConfig star;
  SamplingOptions sampling;
  VqTrainOptions vq_train;
  StarTrainOptions star_train;
  Config source;  // the assignments the run was built from

  // Unset vq.* grid keys follow the scene; star grid keys follow vq.
  // Throws std::invalid_argument naming the offending key.
  static RunConfig from(const Config& config);
  Config to_config() const;
  void validate() const;
};

std::vector<CameraPose> scene_cameras(const SceneConfig& scene);
// Object i uses scene seed `seed + i`.
Dataset synthesize_dataset(const SceneConfig& scene, uint64_t seed);

// Throws naming the first grid field where the tokenizer and the dataset disagree.
void check_dataset_matches(const VqConfig& vq, const Dataset& dataset);

// Full token grid of one object under the frozen tokenizer.
TokenGrid tokenize_object(const Vq4d& tokenizer, const SpatioTemporalMatrix& matrix);
// Caption, view-0 video tokens and cameras of one dataset object.
StarInputs object_inputs(const Vq4d& tokenizer, const Dataset& dataset, size_t index, bool use_text = true,
                         bool use_video = true);
std::vector<StarExample> tokenize_dataset(const Vq4d& tokenizer, const Dataset& dataset);

// Frames t{t}_v{v}.ppm of a T x V matrix rendered from decoded Gaussians.
SpatioTemporalMatrix render_gaussians(const DynamicGaussians& gaussians, const std::vector<CameraPose>& cameras,
                                      double background);
SpatioTemporalMatrix read_frames(const fs::path& dir, int timesteps, int views);
void write_frames(const SpatioTemporalMatrix& matrix, const fs::path& dir);
// One text file per timestep: x y z sx sy sz qw qx qy qz opacity r g b per line.
void write_gaussians(const DynamicGaussians& gaussians, const fs::path& dir);

struct EvalRow {
  std::string object;
  double psnr = 0.0, ssim = 0.0, temporal_consistency = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  EvalRow mean() const;
  void write(std::ostream& out) const;  // tab-separated, one row per object plus the mean
};

struct GenerateOptions {
  fs::path dataset;             // source of captions and conditioning videos
  int object = 0;               // dataset object to condition on
  bool all_objects = false;     // one output folder per dataset object
  std::optional<std::string> text;  // overrides the caption
  fs::path video_dir;           // t{t}_v0.ppm frames; overrides the dataset video
  bool use_text = true, use_video = true;
  fs::path vq_checkpoint, star_checkpoint;
  fs::path tokens;              // decode-only: skip the transformer and decode this grid
};

struct ClusterReportOptions {
  fs::path dataset, vq_checkpoint, star_checkpoint;
  int object = 0;
};

// Each command writes into `out` (created if missing) and logs progress to `log`.
void cmd_synth(const RunConfig& run, const fs::path& out, std::ostream& log);
void cmd_train_vqvae(const RunConfig& run, const fs::path& dataset, const fs::path& out, const fs::path& resume,
                     std::ostream& log);
void cmd_train_star(const RunConfig& run, const fs::path& dataset, const fs::path& vq_checkpoint,
                    const fs::path& out, const fs::path& resume, std::ostream& log);
void cmd_generate(const RunConfig& run, const GenerateOptions& options, const fs::path& out, std::ostream& log);
// `generated` holds obj_NNN folders, or the frames of a single object compared
// against dataset object `object`.
EvalReport cmd_eval(const RunConfig& run, const fs::path& generated, const fs::path& dataset, int object,
                    const fs::path& out, std::ostream& log);
void cmd_cluster_report(const RunConfig& run, const ClusterReportOptions& options, const fs::path& out,
                        std::ostream& log);

// Models rebuilt from a checkpoint's config echo, with keys given explicitly
// in `overrides` taking precedence; a conflicting override is reported by the loader.
Vq4d load_tokenizer(const fs::path& path, const Config& overrides);
StarModel load_star(const fs::path& path, const Config& overrides);

}  // namespace star4d
