#pragma once

// 4D VQ-VAE: per-view convolutional encoder, multi-chunk quantizer, token
// factorization, static Gaussian decoder and the spatial-temporal offset
// predictor (STOP) that corrects each timestep's Gaussians.

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "star4d/checkpoint.hpp"
#include "star4d/config.hpp"
#include "star4d/gaussians.hpp"
#include "star4d/nn.hpp"
#include "star4d/scene_synth.hpp"
#include "star4d/splat_render.hpp"

namespace star4d {

struct VqConfig {
  int timesteps = 4;
  int views = 4;
  int height = 32;
  int width = 32;
  int latent_dim = 64;      // d
  int chunks = 2;           // n
  int codebook_size = 512;  // K_c per chunk
  int token_dim = 64;       // C
  int heads = 4;
  int gaussians = 256;      // n_g
  int decoder_hidden = 256;
  int voxel_grid = 16;
  int voxel_channels = 8;
  double voxel_extent = 1.0;  // grid spans [-extent, extent]^3
  bool use_stop = true;
  double commitment = 0.25;
  double background = 1.0;  // gray level behind the Gaussians

  int latent_height() const { return height / 8; }
  int latent_width() const { return width / 8; }
  int tokens_per_view() const { return latent_height() * latent_width(); }
  int chunk_dim() const { return latent_dim / chunks; }
  void validate() const;
  void write(Config& config) const;  // keys under "vq."
  static VqConfig from(const Config& config);
};

// Indices laid out as [T][V][h][w][n].
struct TokenGrid {
  int timesteps = 0, views = 0, height = 0, width = 0, chunks = 0, codebook_size = 0;
  std::vector<int32_t> indices;

  size_t offset(int t, int v, int y, int x, int c) const {
    return ((((static_cast<size_t>(t) * views + v) * height + y) * width + x) * chunks) + c;
  }
  // Tokens of one timestep across all views.
  size_t group_size() const { return static_cast<size_t>(views) * height * width * chunks; }
  std::span<const int32_t> group(int t) const { return {indices.data() + t * group_size(), group_size()}; }
  void validate() const;
  bool operator==(const TokenGrid&) const = default;
};

// Text file: "star4d-tokens 1", one header line "T V h w n K", then one line of
// indices per (t, v).
void write_token_grid(const TokenGrid& grid, const std::filesystem::path& path);
TokenGrid read_token_grid(const std::filesystem::path& path);

// T Gaussian frames stacked row-wise: row t * n_g + i is Gaussian i at time t.
struct DynamicGaussians {
  int timesteps = 0;
  GaussianParams params;

  int64_t per_frame() const { return timesteps > 0 ? params.count() / timesteps : 0; }
  GaussianParams frame(int t) const;
  std::vector<GaussianFrame> frames() const;
};

// Additive corrections with the same row layout as DynamicGaussians.
struct OffsetFeatures {
  Tensor positions, scales, rotations, opacities, colors;
};

struct QuantizeResult {
  TokenGrid tokens;
  Tensor quantized;  // straight-through: value of the codebook entries, gradient to the latents
  Tensor loss;       // embedding term + commitment * commitment term
};

struct RenderedSequence {
  Tensor images;  // [T*V, H, W, 3]
  Tensor flow;    // [(T-1)*V, H, W, 2]; empty when T == 1
};

struct LossWeights {
  double alpha = 1.0;  // rendering
  double beta = 0.0;   // adversarial
  double gamma = 0.1;  // optical flow
  void validate() const;
};

struct VaeLoss {
  Tensor total;
  double reconstruction = 0.0, adversarial = 0.0, flow = 0.0, commitment = 0.0;
};

// total = alpha * L_R + beta * L_G + gamma * L_F + commitment. `disc_logits`
// (discriminator output on the rendered images) is only read when beta > 0;
// `flow_pred` may be empty for T == 1.
VaeLoss vae_loss(const Tensor& rendered, const Tensor& truth, const Tensor& flow_pred, const Tensor& flow_true,
                 const Tensor& disc_logits, const LossWeights& weights, const Tensor& commitment);

// Corrected Gaussians: x + dx, s + ds (clamped positive), q + dq (renormalized
// when any rotation offset is nonzero), alpha and color clamped to [0, 1].
DynamicGaussians apply_offsets(const DynamicGaussians& gaussians, const OffsetFeatures& offsets);

// Renders every (t, v) pair. Flow for t < T-1 splats each Gaussian's screen
// displacement to t + 1 with the same weights as its color, then normalizes
// by alpha (normalize_flow), matching the ground-truth flow.
RenderedSequence render_sequence(const DynamicGaussians& gaussians, const std::vector<CameraPose>& cameras,
                                 double background);

class Vq4d {
 public:
  Vq4d(const VqConfig& config, uint64_t seed);

  const VqConfig& config() const { return config_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  // Names of the encoder and codebook parameters (the frozen tokenizer path).
  bool is_encoder_param(const std::string& name) const;

  // images: [B, H, W, 3] in [0, 1] -> [B, h, w, d].
  Tensor encode_images(const Tensor& images) const;
  Tensor encode(const SpatioTemporalMatrix& matrix) const;
  // latents: [T*V, h, w, d].
  QuantizeResult quantize(const Tensor& latents, int timesteps, int views) const;
  Tensor dequantize(const TokenGrid& tokens) const;  // [T*V, h, w, d]
  Tensor factorize(const Tensor& quantized) const;   // [T*V, N, C]
  DynamicGaussians static_generate(const Tensor& continuous, int timesteps) const;
  OffsetFeatures stop_offsets(const DynamicGaussians& coarse, const Tensor& continuous) const;

  struct Decoded {
    Tensor continuous;
    DynamicGaussians coarse;
    DynamicGaussians corrected;
  };
  Decoded decode_quantized(const Tensor& quantized, int timesteps) const;
  DynamicGaussians decode(const TokenGrid& tokens) const;

  // Codebook rows: chunk c entry k at row c * K + k.
  Tensor codebook() const { return codebook_; }
  // Nearest entry of chunk c's sub-codebook; ties go to the lower index.
  int32_t nearest_entry(int chunk, std::span<const float> vector) const;

  void save(Checkpoint& checkpoint) const;
  void load(const Checkpoint& checkpoint);

 private:
  VqConfig config_;
  nn::ParamStore store_;
  nn::Conv2d enc1_, enc2_, enc3_, enc4_;
  Tensor codebook_;
  nn::Linear fact_in_;
  Tensor fact_pos_;
  nn::LayerNorm fact_norm_;
  nn::MultiHeadAttention fact_attn_;
  nn::Linear dec1_, dec2_;
  nn::Linear stop_query_;
  Tensor stop_time_;
  nn::LayerNorm stop_norm_;
  nn::MultiHeadAttention stop_attn_;
  nn::Linear stop_voxel_;
  nn::Conv3d unet_in_, unet_down_, unet_mid_, unet_out_;
  nn::Linear stop_head_;
};

// 4-layer strided patch classifier for the adversarial term.
class PatchDiscriminator {
 public:
  PatchDiscriminator(nn::ParamStore& store, uint64_t seed);
  Tensor operator()(const Tensor& images) const;  // [B, H, W, 3] -> [B, h', w', 1]

 private:
  nn::Conv2d c1_, c2_, c3_, c4_;
};

struct VqTrainOptions {
  int64_t steps = 2000;
  float learning_rate = 3e-4f;
  int batch_size = 1;
  uint64_t seed = 0;
  int64_t reset_interval = 100;  // minimum steps before an unused entry is reinitialized
  LossWeights weights;
};

struct VqStepLog {
  int64_t step = 0;
  double total = 0.0, reconstruction = 0.0, flow = 0.0, commitment = 0.0, adversarial = 0.0;
  int used_codes = 0;
  float learning_rate = 0.0f;
};

// Joint training of encoder, codebook, decoder and STOP on a dataset.
class VqTrainer {
 public:
  VqTrainer(Vq4d& model, const Dataset& dataset, const VqTrainOptions& options);

  VqStepLog step();
  int64_t steps_done() const { return adam_.step_count(); }
  void save(Checkpoint& checkpoint) const;
  // Restores optimizer moments, the step counter and codebook bookkeeping.
  void resume(const Checkpoint& checkpoint);

 private:
  void initialize_codebook(const Tensor& latents);
  void reset_dead_entries(const Tensor& latents);

  Vq4d& model_;
  const Dataset& dataset_;
  VqTrainOptions options_;
  nn::ParamStore disc_store_;
  std::unique_ptr<PatchDiscriminator> disc_;
  nn::Adam adam_;
  std::unique_ptr<nn::Adam> disc_adam_;
  nn::Rng rng_;
  std::vector<int64_t> last_used_;
  bool codebook_ready_ = false;
  std::vector<Tensor> images_, flows_;
};

// Dataset object as [T*V, H, W, 3] and [(T-1)*V, H, W, 2] tensors.
Tensor matrix_tensor(const SpatioTemporalMatrix& matrix);
Tensor flow_tensor(const FlowField& flow);
// Rendered [T*V, H, W, 3] tensor back into a matrix (values clamped to [0, 1]).
SpatioTemporalMatrix tensor_matrix(const Tensor& images, int timesteps, int views);

}  // namespace star4d
