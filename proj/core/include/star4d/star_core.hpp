#pragma once

// Grouped autoregressive transformer over 4D token grids: conditioning
// prefixes, shift positional encoding, a pre-norm decoder conditioned on the
// spatial-temporal container, chunked cross-entropy and group-wise sampling.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "star4d/camera.hpp"
#include "star4d/checkpoint.hpp"
#include "star4d/config.hpp"
#include "star4d/nn.hpp"
#include "star4d/st_container.hpp"
#include "star4d/vq4d.hpp"

namespace star4d {

enum class ContainerMode { kv, additive, none };
std::string to_string(ContainerMode mode);
ContainerMode parse_container_mode(const std::string& text);

struct StarConfig {
  int embed_dim = 128;
  int layers = 4;
  int heads = 4;
  int ffn_hidden = 352;
  int max_context = 768;
  int text_buckets = 1024;
  int max_text_tokens = 32;
  // Token grid geometry, copied from the tokenizer.
  int timesteps = 4;
  int views = 4;
  int latent_height = 4;
  int latent_width = 4;
  int chunks = 2;
  int vocab = 512;  // K_c, shared by every chunk
  ContainerMode container_mode = ContainerMode::kv;
  ContainerConfig container;

  int tokens_per_group() const { return views * latent_height * latent_width * chunks; }
  int video_tokens() const { return timesteps * latent_height * latent_width * chunks; }
  void validate() const;
  void write(Config& config) const;  // "star." and "container." keys
  static StarConfig from(const Config& config);
  // Grid dimensions taken from a tokenizer config.
  static StarConfig for_tokenizer(const VqConfig& vq);
};

struct SamplingOptions {
  double temperature = 1.0;  // <= 0 means greedy
  int top_k = 50;            // <= 0 disables the cut
};

enum class Segment { text, video, separator, group };

struct PositionInfo {
  Segment segment = Segment::text;
  int group = 0;  // 1-based for group tokens, 0 in the prefix
  int view = 0, spatial = 0, chunk = 0;
  int index = 0;  // position within its segment
};

// Full token sequence [text][video][SEP][group 1]...[group T]. The model input
// is every position but the last; position p predicts token p + 1.
struct SequenceLayout {
  std::vector<PositionInfo> positions;
  int text_length = 0, video_length = 0;

  static SequenceLayout build(const StarConfig& config, int text_length, int video_length);
  int separator() const { return text_length + video_length; }
  int first_group_position() const { return separator() + 1; }
  int length() const { return static_cast<int>(positions.size()); }
  int input_length() const { return length() - 1; }
  // Group whose token the input at p predicts (0 for prefix positions before SEP).
  int target_group(int p) const { return positions[p + 1].group; }
  void validate() const;
};

// Conditioning for one object.
struct StarInputs {
  std::string text;
  std::vector<int32_t> video_tokens;  // T*h*w*n indices from the frozen tokenizer, or empty
  std::vector<CameraPose> cameras;    // V cameras shared by every group
};

std::vector<std::string> split_words(const std::string& text);
uint32_t text_bucket(const std::string& word, int buckets);  // FNV-1a

// Tokens of a monocular video (T frames, one view) under the frozen tokenizer.
std::vector<int32_t> video_tokens(const Vq4d& tokenizer, const SpatioTemporalMatrix& frames);
// View v of every timestep of a matrix as a T-frame video.
SpatioTemporalMatrix monocular_video(const SpatioTemporalMatrix& matrix, int view);

struct ForwardOptions {
  std::optional<ContainerMode> mode;  // overrides the configured mode
  int drop_group = 0;                 // if > 0, conditioning of this group is withheld
};

struct ForwardResult {
  Tensor logits;  // [T*G, vocab], row i predicts group token i
  SequenceLayout layout;
  // states[t-1] is the container state used for group t (built from groups < t).
  std::vector<ContainerState> states;
};

class StarModel {
 public:
  StarModel(const StarConfig& config, uint64_t seed);

  const StarConfig& config() const { return config_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  const SpatioTemporalContainer& container() const { return container_; }

  Tensor embed_text(const std::string& prompt) const;                   // [words, E]
  Tensor embed_video(std::span<const int32_t> tokens) const;            // [T*h*w*n, E]
  Tensor embed_video(const SpatioTemporalMatrix& frames, const Vq4d& tokenizer) const;
  Tensor timestep_embed(int t) const;                                   // [1, E], t in [1, T]
  // [length, E]: Pluecker projection + timestep embedding on group positions,
  // learned segment embedding on prefix positions.
  Tensor build_spe(const SequenceLayout& layout, const std::vector<CameraPose>& cameras) const;
  // Input embeddings of group t's tokens (token + SPE + chunk), [G, E].
  Tensor group_features(std::span<const int32_t> group_tokens, int t, const Tensor& spe,
                        const SequenceLayout& layout) const;

  // Teacher-forced pass over a complete token grid.
  ForwardResult forward(const StarInputs& inputs, const TokenGrid& tokens, const ForwardOptions& options = {}) const;

  // Groups are sampled one after another; after each group the container is
  // updated with that group's features. Returns the grid and, optionally, the final state.
  TokenGrid generate(const StarInputs& inputs, const SamplingOptions& sampling, uint64_t seed,
                     ContainerState* final_state = nullptr, const ForwardOptions& options = {}) const;

  void save(Checkpoint& checkpoint) const;
  void load(const Checkpoint& checkpoint);

 private:
  struct Block {
    nn::RmsNorm attn_norm, ffn_norm;
    nn::Linear wq, wk, wv, wo;
    nn::Linear gate, up, down;
  };
  struct Cache;

  Tensor token_embeddings(std::span<const int32_t> tokens) const;
  // Text, video and SEP rows without SPE; fills the layout.
  Tensor prefix(const StarInputs& inputs, SequenceLayout& layout) const;
  Tensor block_forward(const Block& b, const Tensor& x, const Tensor& memory, std::span<const uint8_t> mask) const;
  Tensor block_step(const Block& b, const Tensor& x, Cache& cache, size_t layer, int target_group) const;
  void push_memory(Cache& cache, const Tensor& cond, int group) const;
  ContainerMode mode(const ForwardOptions& options) const;
  void check_inputs(const StarInputs& inputs) const;

  StarConfig config_;
  nn::ParamStore store_;
  nn::Embedding tokens_, text_table_;  // video prefix tokens share the group token table
  nn::Mlp text_proj_, video_proj_;
  Tensor text_pos_, video_pos_, segment_, chunk_;
  nn::Linear ray_proj_, time_proj_;
  std::vector<Block> blocks_;
  nn::RmsNorm final_norm_;
  nn::Linear head_;
  SpatioTemporalContainer container_;
};

// Sum over groups of the mean negative log-likelihood within the group.
// logits [groups * group_size, K]; returns the float total for backprop and
// fills per-group values recomputed in double.
Tensor chunked_ce(const Tensor& logits, std::span<const int32_t> targets, int groups,
                  std::vector<double>* per_group = nullptr);

// Flat target sequence of a grid in layout order ([t][v][y][x][c]).
std::vector<int32_t> grid_targets(const TokenGrid& grid);

struct StarTrainOptions {
  int64_t steps = 500;
  float learning_rate = 1e-3f;  // 3e-4 stalls at desk scale; see README
  int batch_size = 4;
  uint64_t seed = 0;
};

struct StarExample {
  StarInputs inputs;
  TokenGrid tokens;
};

struct StarStepLog {
  int64_t step = 0;
  double loss = 0.0;
  std::vector<double> per_group;
  float learning_rate = 0.0f;
};

class StarTrainer {
 public:
  StarTrainer(StarModel& model, std::vector<StarExample> examples, const StarTrainOptions& options);
  StarStepLog step();
  int64_t steps_done() const { return adam_.step_count(); }
  // Mean chunked CE over every example without updating weights.
  double evaluate() const;
  void save(Checkpoint& checkpoint) const;
  void resume(const Checkpoint& checkpoint);

 private:
  StarModel& model_;
  std::vector<StarExample> examples_;
  StarTrainOptions options_;
  nn::Adam adam_;
  nn::Rng rng_;
};

}  // namespace star4d
