#include "star4d/vq4d.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace star4d {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

// Rows [t * n, (t + 1) * n) of every Gaussian tensor.
GaussianParams slice_frame(const GaussianParams& g, int64_t start, int64_t count) {
  return {ops::slice_rows(g.positions, start, count), ops::slice_rows(g.scales, start, count),
          ops::slice_rows(g.rotations, start, count), ops::slice_rows(g.opacities, start, count),
          ops::slice_rows(g.colors, start, count)};
}

bool all_zero(const Tensor& t) {
  const auto d = t.data();
  return std::all_of(d.begin(), d.end(), [](float v) { return v == 0.0f; });
}

Tensor softplus_mean(const Tensor& x) { return ops::mean(ops::softplus(x)); }

}  // namespace

// ---------------------------------------------------------------------------
// Config

void VqConfig::validate() const {
  require(timesteps >= 1, "vq.timesteps must be >= 1");
  require(views >= 1, "vq.views must be >= 1");
  require(height > 0 && height % 8 == 0, "vq.height must be a positive multiple of 8 (got " + std::to_string(height) + ")");
  require(width > 0 && width % 8 == 0, "vq.width must be a positive multiple of 8 (got " + std::to_string(width) + ")");
  require(chunks >= 1 && latent_dim % chunks == 0, "vq.latent_dim must be divisible by vq.chunks");
  require(codebook_size >= 2, "vq.codebook_size must be >= 2");
  require(heads >= 1 && token_dim % heads == 0, "vq.token_dim must be divisible by vq.heads");
  require(gaussians >= 1, "vq.gaussians must be >= 1");
  require(decoder_hidden >= 1, "vq.decoder_hidden must be >= 1");
  require(voxel_grid >= 4 && voxel_grid % 2 == 0, "vq.voxel_grid must be an even number >= 4");
  require(voxel_channels >= 1, "vq.voxel_channels must be >= 1");
  require(voxel_extent > 0.0, "vq.voxel_extent must be positive");
  require(commitment >= 0.0, "vq.commitment must be non-negative");
  require(background >= 0.0 && background <= 1.0, "vq.background must lie in [0, 1]");
}

void VqConfig::write(Config& c) const {
  c.set("vq.timesteps", std::to_string(timesteps));
  c.set("vq.views", std::to_string(views));
  c.set("vq.height", std::to_string(height));
  c.set("vq.width", std::to_string(width));
  c.set("vq.latent_dim", std::to_string(latent_dim));
  c.set("vq.chunks", std::to_string(chunks));
  c.set("vq.codebook_size", std::to_string(codebook_size));
  c.set("vq.token_dim", std::to_string(token_dim));
  c.set("vq.heads", std::to_string(heads));
  c.set("vq.gaussians", std::to_string(gaussians));
  c.set("vq.decoder_hidden", std::to_string(decoder_hidden));
  c.set("vq.voxel_grid", std::to_string(voxel_grid));
  c.set("vq.voxel_channels", std::to_string(voxel_channels));
  c.set("vq.voxel_extent", format_double(voxel_extent));
  c.set("vq.use_stop", use_stop ? "true" : "false");
  c.set("vq.commitment", format_double(commitment));
  c.set("vq.background", format_double(background));
}

VqConfig VqConfig::from(const Config& c) {
  VqConfig v;
  v.timesteps = static_cast<int>(c.get_int("vq.timesteps", v.timesteps));
  v.views = static_cast<int>(c.get_int("vq.views", v.views));
  v.height = static_cast<int>(c.get_int("vq.height", v.height));
  v.width = static_cast<int>(c.get_int("vq.width", v.width));
  v.latent_dim = static_cast<int>(c.get_int("vq.latent_dim", v.latent_dim));
  v.chunks = static_cast<int>(c.get_int("vq.chunks", v.chunks));
  v.codebook_size = static_cast<int>(c.get_int("vq.codebook_size", v.codebook_size));
  v.token_dim = static_cast<int>(c.get_int("vq.token_dim", v.token_dim));
  v.heads = static_cast<int>(c.get_int("vq.heads", v.heads));
  v.gaussians = static_cast<int>(c.get_int("vq.gaussians", v.gaussians));
  v.decoder_hidden = static_cast<int>(c.get_int("vq.decoder_hidden", v.decoder_hidden));
  v.voxel_grid = static_cast<int>(c.get_int("vq.voxel_grid", v.voxel_grid));
  v.voxel_channels = static_cast<int>(c.get_int("vq.voxel_channels", v.voxel_channels));
  v.voxel_extent = c.get_double("vq.voxel_extent", v.voxel_extent);
  v.use_stop = c.get_bool("vq.use_stop", v.use_stop);
  v.commitment = c.get_double("vq.commitment", v.commitment);
  v.background = c.get_double("vq.background", v.background);
  return v;
}

void LossWeights::validate() const {
  require(alpha >= 0.0, "loss weight alpha must be non-negative");
  require(beta >= 0.0, "loss weight beta must be non-negative");
  require(gamma >= 0.0, "loss weight gamma must be non-negative");
}

// ---------------------------------------------------------------------------
// Token grids

void TokenGrid::validate() const {
  require(timesteps >= 1 && views >= 1 && height >= 1 && width >= 1 && chunks >= 1,
          "token grid: dimensions must be positive");
  require(codebook_size >= 2, "token grid: codebook_size must be >= 2");
  require(indices.size() == static_cast<size_t>(timesteps) * group_size(),
          "token grid: expected " + std::to_string(timesteps * group_size()) + " indices, found " +
              std::to_string(indices.size()));
  for (size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < codebook_size,
            "token grid: index " + std::to_string(indices[i]) + " at position " + std::to_string(i) +
                " outside [0, " + std::to_string(codebook_size) + ")");
  }
}

void write_token_grid(const TokenGrid& grid, const std::filesystem::path& path) {
  grid.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write token grid " + path.string());
  out << "star4d-tokens 1\n"
      << grid.timesteps << ' ' << grid.views << ' ' << grid.height << ' ' << grid.width << ' ' << grid.chunks
      << ' ' << grid.codebook_size << '\n';
  const size_t row = static_cast<size_t>(grid.height) * grid.width * grid.chunks;
  for (size_t i = 0; i < grid.indices.size(); ++i) {
    out << grid.indices[i] << ((i + 1) % row == 0 ? '\n' : ' ');
  }
  if (!out) throw std::runtime_error("write failed for token grid " + path.string());
}

TokenGrid read_token_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read token grid " + path.string());
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "star4d-tokens" || version != 1) {
    throw std::runtime_error("token grid " + path.string() + ": bad header (expected 'star4d-tokens 1')");
  }
  TokenGrid g;
  if (!(in >> g.timesteps >> g.views >> g.height >> g.width >> g.chunks >> g.codebook_size)) {
    throw std::runtime_error("token grid " + path.string() + ": malformed dimension line");
  }
  require(g.timesteps >= 1 && g.views >= 1 && g.height >= 1 && g.width >= 1 && g.chunks >= 1,
          "token grid " + path.string() + ": dimensions must be positive");
  g.indices.resize(static_cast<size_t>(g.timesteps) * g.group_size());
  for (auto& v : g.indices) {
    if (!(in >> v)) throw std::runtime_error("token grid " + path.string() + ": truncated index array");
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Gaussians, offsets, rendering, loss

GaussianParams DynamicGaussians::frame(int t) const {
  require(t >= 0 && t < timesteps, "DynamicGaussians::frame: timestep out of range");
  const int64_t n = per_frame();
  return slice_frame(params, t * n, n);
}

std::vector<GaussianFrame> DynamicGaussians::frames() const {
  std::vector<GaussianFrame> out;
  for (int t = 0; t < timesteps; ++t) out.push_back(frame(t).to_frame());
  return out;
}

DynamicGaussians apply_offsets(const DynamicGaussians& g, const OffsetFeatures& o) {
  const auto& p = g.params;
  require(o.positions.shape() == p.positions.shape() && o.scales.shape() == p.scales.shape() &&
              o.rotations.shape() == p.rotations.shape() && o.opacities.shape() == p.opacities.shape() &&
              o.colors.shape() == p.colors.shape(),
          "apply_offsets: offset shapes do not match the Gaussians");
  DynamicGaussians out;
  out.timesteps = g.timesteps;
  out.params.positions = ops::add(p.positions, o.positions);
  out.params.scales = ops::clamp(ops::add(p.scales, o.scales), 1e-6f, std::numeric_limits<float>::max());
  // Skipping the renormalization for all-zero offsets keeps the identity exact.
  out.params.rotations = all_zero(o.rotations) ? ops::add(p.rotations, o.rotations)
                                               : ops::normalize_rows(ops::add(p.rotations, o.rotations));
  out.params.opacities = ops::clamp(ops::add(p.opacities, o.opacities), 0.0f, 1.0f);
  out.params.colors = ops::clamp(ops::add(p.colors, o.colors), 0.0f, 1.0f);
  return out;
}

RenderedSequence render_sequence(const DynamicGaussians& g, const std::vector<CameraPose>& cameras,
                                 double background) {
  require(!cameras.empty(), "render_sequence: no cameras");
  const int T = g.timesteps, V = static_cast<int>(cameras.size());
  const int H = cameras.front().height, W = cameras.front().width;
  const auto b = static_cast<float>(background);
  const std::array<float, 5> bg{b, b, b, 0.0f, 0.0f};
  std::vector<GaussianParams> frames;
  for (int t = 0; t < T; ++t) frames.push_back(g.frame(t));
  std::vector<Tensor> images, flows;
  for (int t = 0; t < T; ++t) {
    for (int v = 0; v < V; ++v) {
      const int64_t n = frames[t].count();
      const Tensor flow = t + 1 < T ? ops::sub(project_means(frames[t + 1].positions, cameras[v]),
                                               project_means(frames[t].positions, cameras[v]))
                                    : Tensor::zeros({n, 2});
      const Tensor out = render_features(frames[t], ops::concat_cols({frames[t].colors, flow}), cameras[v], bg);
      const Tensor flat = ops::reshape(out, {static_cast<int64_t>(H) * W, 6});
      images.push_back(ops::slice_cols(flat, 0, 3));
      if (t + 1 < T) flows.push_back(normalize_flow(ops::slice_cols(flat, 3, 2), ops::slice_cols(flat, 5, 1)));
    }
  }
  RenderedSequence r;
  r.images = ops::reshape(ops::concat_rows(images), {static_cast<int64_t>(T) * V, H, W, 3});
  if (!flows.empty()) r.flow = ops::reshape(ops::concat_rows(flows), {static_cast<int64_t>(T - 1) * V, H, W, 2});
  return r;
}

VaeLoss vae_loss(const Tensor& rendered, const Tensor& truth, const Tensor& flow_pred, const Tensor& flow_true,
                 const Tensor& disc_logits, const LossWeights& w, const Tensor& commitment) {
  w.validate();
  require(rendered.shape() == truth.shape(), "vae_loss: rendered " + shape_str(rendered.shape()) +
                                                 " does not match truth " + shape_str(truth.shape()));
  VaeLoss out;
  const Tensor l_r = ops::mse(rendered, truth);
  Tensor total = ops::scale(l_r, static_cast<float>(w.alpha));
  out.reconstruction = l_r.item();
  if (flow_pred.defined() && flow_pred.numel() > 0) {
    require(flow_true.defined() && flow_pred.shape() == flow_true.shape(), "vae_loss: flow shapes differ");
    const Tensor l_f = ops::mse(flow_pred, flow_true);
    out.flow = l_f.item();
    if (w.gamma > 0.0) total = ops::add(total, ops::scale(l_f, static_cast<float>(w.gamma)));
  }
  if (w.beta > 0.0) {
    require(disc_logits.defined(), "vae_loss: beta > 0 requires discriminator logits");
    const Tensor l_g = softplus_mean(ops::scale(disc_logits, -1.0f));
    out.adversarial = l_g.item();
    total = ops::add(total, ops::scale(l_g, static_cast<float>(w.beta)));
  }
  if (commitment.defined()) {
    out.commitment = commitment.item();
    total = ops::add(total, commitment);
  }
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Model

Vq4d::Vq4d(const VqConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  nn::Rng rng(seed);
  const VqConfig& c = config_;
  const int d = c.latent_dim, C = c.token_dim, N = c.tokens_per_view();

  enc1_ = nn::Conv2d(store_, "enc.conv1", 3, 32, 3, 2, rng);
  enc2_ = nn::Conv2d(store_, "enc.conv2", 32, 64, 3, 2, rng);
  enc3_ = nn::Conv2d(store_, "enc.conv3", 64, 64, 3, 2, rng);
  enc4_ = nn::Conv2d(store_, "enc.conv4", 64, d, 1, 1, rng);
  codebook_ = store_.add("quant.codebook",
                         nn::uniform_param({static_cast<int64_t>(c.chunks) * c.codebook_size, c.chunk_dim()},
                                           1.0f / static_cast<float>(c.codebook_size), rng));

  fact_in_ = nn::Linear(store_, "fact.in", d, C, rng);
  fact_pos_ = store_.add("fact.pos", nn::normal_param({N, C}, 0.02f, rng));
  fact_norm_ = nn::LayerNorm(store_, "fact.norm", C);
  fact_attn_ = nn::MultiHeadAttention(store_, "fact.attn", C, c.heads, rng);

  dec1_ = nn::Linear(store_, "dec.fc1", static_cast<int64_t>(N) * C, c.decoder_hidden, rng);
  dec2_ = nn::Linear(store_, "dec.fc2", c.decoder_hidden, static_cast<int64_t>(c.gaussians) * kGaussianParamWidth, rng);
  // Small output weights: the biases define the initial Gaussian cloud.
  for (float& w : dec2_.weight.mutable_data()) w *= 0.1f;
  {
    auto bias = dec2_.bias.mutable_data();
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (int i = 0; i < c.gaussians; ++i) {
      float* b = bias.data() + static_cast<size_t>(i) * kGaussianParamWidth;
      float x, y, z;
      do {
        x = u(rng), y = u(rng), z = u(rng);
      } while (x * x + y * y + z * z > 1.0f);
      b[0] = 0.6f * x, b[1] = 0.6f * y, b[2] = 0.6f * z;
      for (int k = 3; k < 6; ++k) b[k] = std::log(0.08f);
      b[6] = 1.0f, b[7] = b[8] = b[9] = 0.0f;
      b[10] = 0.0f;
      b[11] = b[12] = b[13] = 0.0f;
    }
  }

  const int vc = c.voxel_channels;
  stop_query_ = nn::Linear(store_, "stop.query", kGaussianParamWidth, C, rng);
  stop_time_ = store_.add("stop.time", nn::normal_param({c.timesteps, C}, 0.02f, rng));
  stop_norm_ = nn::LayerNorm(store_, "stop.norm", C);
  stop_attn_ = nn::MultiHeadAttention(store_, "stop.attn", C, c.heads, rng);
  stop_voxel_ = nn::Linear(store_, "stop.voxel", C, vc, rng);
  unet_in_ = nn::Conv3d(store_, "stop.unet.in", vc, vc, 3, 1, rng);
  unet_down_ = nn::Conv3d(store_, "stop.unet.down", vc, 2 * vc, 3, 2, rng);
  unet_mid_ = nn::Conv3d(store_, "stop.unet.mid", 2 * vc, 2 * vc, 3, 1, rng);
  unet_out_ = nn::Conv3d(store_, "stop.unet.out", 2 * vc, vc, 3, 1, rng);
  stop_head_ = nn::Linear(store_, "stop.head", C + vc, kGaussianParamWidth, rng);
  for (float& w : stop_head_.weight.mutable_data()) w = 0.0f;
}

bool Vq4d::is_encoder_param(const std::string& name) const {
  return name.rfind("enc.", 0) == 0 || name == "quant.codebook";
}

Tensor Vq4d::encode_images(const Tensor& images) const {
  require(images.rank() == 4 && images.dim(1) == config_.height && images.dim(2) == config_.width &&
              images.dim(3) == 3,
          "encode: expected images [B, " + std::to_string(config_.height) + ", " + std::to_string(config_.width) +
              ", 3], got " + shape_str(images.shape()));
  Tensor x = ops::add_scalar(ops::scale(images, 2.0f), -1.0f);
  x = ops::gelu(enc1_(x));
  x = ops::gelu(enc2_(x));
  x = ops::gelu(enc3_(x));
  return enc4_(x);
}

Tensor Vq4d::encode(const SpatioTemporalMatrix& m) const {
  m.validate();
  require(m.height % 8 == 0 && m.width % 8 == 0, "encode: H and W must be divisible by 8");
  return encode_images(matrix_tensor(m));
}

int32_t Vq4d::nearest_entry(int chunk, std::span<const float> vec) const {
  const int K = config_.codebook_size, dn = config_.chunk_dim();
  const auto book = codebook_.data();
  int32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) {
    const float* e = book.data() + (static_cast<size_t>(chunk) * K + k) * dn;
    double dist = 0.0;
    for (int j = 0; j < dn; ++j) {
      const double diff = static_cast<double>(vec[j]) - e[j];
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = k;
    }
  }
  return best;
}

QuantizeResult Vq4d::quantize(const Tensor& latents, int timesteps, int views) const {
  const VqConfig& c = config_;
  const int h = c.latent_height(), w = c.latent_width(), n = c.chunks, dn = c.chunk_dim();
  require(latents.rank() == 4 && latents.dim(0) == static_cast<int64_t>(timesteps) * views &&
              latents.dim(1) == h && latents.dim(2) == w && latents.dim(3) == c.latent_dim,
          "quantize: latents " + shape_str(latents.shape()) + " do not match the configured grid");
  QuantizeResult r;
  r.tokens = {timesteps, views, h, w, n, c.codebook_size, {}};
  const int64_t positions = latents.rows();
  r.tokens.indices.resize(static_cast<size_t>(positions) * n);
  std::vector<int32_t> rows(r.tokens.indices.size());
  const auto z = latents.data();
  for (int64_t p = 0; p < positions; ++p) {
    for (int ch = 0; ch < n; ++ch) {
      const int32_t k = nearest_entry(ch, z.subspan(static_cast<size_t>(p) * c.latent_dim + ch * dn, dn));
      r.tokens.indices[p * n + ch] = k;
      rows[p * n + ch] = ch * c.codebook_size + k;
    }
  }
  const Tensor chunks = ops::reshape(latents, {positions * n, dn});
  const Tensor entries = ops::gather_rows(codebook_, rows);
  const Tensor embed_term = ops::mse(entries, chunks.detach());
  const Tensor commit_term = ops::mse(chunks, entries.detach());
  r.loss = ops::add(embed_term, ops::scale(commit_term, static_cast<float>(c.commitment)));
  r.quantized = ops::reshape(ops::straight_through(chunks, entries), latents.shape());
  return r;
}

Tensor Vq4d::dequantize(const TokenGrid& tokens) const {
  const VqConfig& c = config_;
  require(tokens.height == c.latent_height() && tokens.width == c.latent_width() && tokens.chunks == c.chunks &&
              tokens.codebook_size == c.codebook_size,
          "dequantize: token grid layout does not match the model");
  tokens.validate();
  std::vector<int32_t> rows(tokens.indices.size());
  for (size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int32_t>(i % c.chunks) * c.codebook_size + tokens.indices[i];
  const Tensor entries = ops::gather_rows(codebook_, rows);
  return ops::reshape(entries, {static_cast<int64_t>(tokens.timesteps) * tokens.views, c.latent_height(),
                                c.latent_width(), c.latent_dim});
}

Tensor Vq4d::factorize(const Tensor& quantized) const {
  const int N = config_.tokens_per_view();
  const int64_t slices = quantized.rows() / N;
  const Tensor x = ops::reshape(quantized, {slices, N, config_.latent_dim});
  Tensor hdn = fact_in_(x);
  hdn = ops::reshape(ops::add_row(ops::reshape(hdn, {slices, static_cast<int64_t>(N) * config_.token_dim}),
                                  ops::reshape(fact_pos_, {static_cast<int64_t>(N) * config_.token_dim})),
                     {slices, N, config_.token_dim});
  const Tensor normed = fact_norm_(hdn);
  return ops::add(hdn, fact_attn_(normed, normed));
}

DynamicGaussians Vq4d::static_generate(const Tensor& S, int timesteps) const {
  const VqConfig& c = config_;
  const int64_t N = c.tokens_per_view(), C = c.token_dim;
  require(S.rank() == 3 && S.dim(1) == N && S.dim(2) == C && S.dim(0) % timesteps == 0,
          "static_generate: continuous tokens have shape " + shape_str(S.shape()));
  const int64_t V = S.dim(0) / timesteps;
  const Tensor pooled = ops::mean_row_groups(ops::reshape(S, {timesteps * V, N * C}), V);  // [T, N*C]
  const Tensor raw = ops::reshape(dec2_(ops::gelu(dec1_(pooled))),
                                  {static_cast<int64_t>(timesteps) * c.gaussians, kGaussianParamWidth});
  DynamicGaussians g;
  g.timesteps = timesteps;
  g.params.positions = ops::slice_cols(raw, 0, 3);
  g.params.scales = ops::exp(ops::clamp(ops::slice_cols(raw, 3, 3), -9.0f, 2.0f));
  g.params.rotations = ops::normalize_rows(ops::slice_cols(raw, 6, 4));
  g.params.opacities = ops::sigmoid(ops::slice_cols(raw, 10, 1));
  g.params.colors = ops::sigmoid(ops::slice_cols(raw, 11, 3));
  return g;
}

OffsetFeatures Vq4d::stop_offsets(const DynamicGaussians& g, const Tensor& S) const {
  const VqConfig& c = config_;
  const int T = g.timesteps;
  const int64_t n = g.per_frame(), N = c.tokens_per_view(), C = c.token_dim;
  require(S.rank() == 3 && S.dim(1) == N && S.dim(2) == C, "stop_offsets: bad continuous token shape");
  require(T <= c.timesteps, "stop_offsets: more timesteps than the configured maximum");
  const int64_t V = c.views;
  require(S.dim(0) == T * V, "stop_offsets: Gaussians have " + std::to_string(T) + " timesteps but tokens hold " +
                                 std::to_string(S.dim(0)) + " slices for " + std::to_string(V) + " views");

  // Queries: embedded Gaussian parameters plus a learned timestep embedding.
  std::vector<int32_t> t_index(static_cast<size_t>(T * n));
  for (int t = 0; t < T; ++t) std::fill_n(t_index.begin() + t * n, n, t);
  const Tensor query = ops::add(stop_query_(g.params.packed()), ops::gather_rows(stop_time_, t_index));

  // Keys/values per view: S_v over every timestep, [V, T*N, C].
  std::vector<int32_t> kv_rows;
  kv_rows.reserve(static_cast<size_t>(V * T * N));
  for (int64_t v = 0; v < V; ++v) {
    for (int t = 0; t < T; ++t) {
      for (int64_t k = 0; k < N; ++k) kv_rows.push_back(static_cast<int32_t>((t * V + v) * N + k));
    }
  }
  const Tensor kv = ops::reshape(ops::gather_rows(ops::reshape(S, {S.dim(0) * N, C}), kv_rows), {V, T * N, C});
  std::vector<Tensor> repeated(static_cast<size_t>(V), stop_norm_(query));
  const Tensor q = ops::reshape(ops::concat_rows(repeated), {V, T * n, C});
  const Tensor attended = ops::reshape(stop_attn_(q, kv), {V * T * n, C});
  Tensor mean_view = ops::slice_rows(attended, 0, T * n);
  for (int64_t v = 1; v < V; ++v) mean_view = ops::add(mean_view, ops::slice_rows(attended, v * T * n, T * n));
  const Tensor coarse = ops::add(query, ops::scale(mean_view, 1.0f / static_cast<float>(V)));

  // Volumetric refinement: scatter to a voxel grid, 2-level encoder-decoder, gather back.
  const int G = c.voxel_grid;
  const int64_t cells = static_cast<int64_t>(G) * G * G;
  const auto pos = g.params.positions.data();
  const double ext = c.voxel_extent;
  auto grid_coord = [&](float p) { return (static_cast<double>(p) + ext) / (2.0 * ext) * G; };
  std::vector<ops::SparseEntry> scatter, gather;
  std::vector<int> counts(static_cast<size_t>(T * cells), 0);
  std::vector<int32_t> cell_of(static_cast<size_t>(T * n));
  for (int t = 0; t < T; ++t) {
    for (int64_t i = 0; i < n; ++i) {
      const size_t r = static_cast<size_t>(t * n + i);
      int idx[3];
      for (int k = 0; k < 3; ++k) idx[k] = std::clamp(static_cast<int>(std::floor(grid_coord(pos[r * 3 + k]))), 0, G - 1);
      const int32_t cell = static_cast<int32_t>(t * cells + (static_cast<int64_t>(idx[2]) * G + idx[1]) * G + idx[0]);
      cell_of[r] = cell;
      ++counts[cell];
    }
  }
  for (size_t r = 0; r < cell_of.size(); ++r) {
    scatter.push_back({cell_of[r], static_cast<int32_t>(r), 1.0f / static_cast<float>(counts[cell_of[r]])});
  }
  for (int t = 0; t < T; ++t) {
    for (int64_t i = 0; i < n; ++i) {
      const size_t r = static_cast<size_t>(t * n + i);
      int i0[3];
      double f[3];
      for (int k = 0; k < 3; ++k) {
        const double u = std::clamp(grid_coord(pos[r * 3 + k]) - 0.5, 0.0, static_cast<double>(G - 1));
        i0[k] = std::min(static_cast<int>(std::floor(u)), G - 2);
        f[k] = u - i0[k];
      }
      for (int corner = 0; corner < 8; ++corner) {
        double wgt = 1.0;
        int at[3];
        for (int k = 0; k < 3; ++k) {
          const int bit = (corner >> k) & 1;
          at[k] = i0[k] + bit;
          wgt *= bit ? f[k] : 1.0 - f[k];
        }
        if (wgt == 0.0) continue;
        gather.push_back({static_cast<int32_t>(r),
                          static_cast<int32_t>(t * cells + (static_cast<int64_t>(at[2]) * G + at[1]) * G + at[0]),
                          static_cast<float>(wgt)});
      }
    }
  }
  const int vc = c.voxel_channels;
  const Tensor grid = ops::reshape(ops::sparse_rows(stop_voxel_(coarse), scatter, T * cells), {T, G, G, G, vc});
  const Tensor e1 = ops::gelu(unet_in_(grid));
  const Tensor down = ops::gelu(unet_mid_(ops::gelu(unet_down_(e1))));
  const Tensor up = ops::add(unet_out_(ops::upsample3d_nearest2x(down)), e1);
  const Tensor sampled = ops::sparse_rows(ops::reshape(up, {T * cells, vc}), gather, T * n);
  const Tensor out = stop_head_(ops::concat_cols({coarse, sampled}));

  OffsetFeatures o;
  o.positions = ops::slice_cols(out, 0, 3);
  o.scales = ops::slice_cols(out, 3, 3);
  o.rotations = ops::slice_cols(out, 6, 4);
  o.opacities = ops::slice_cols(out, 10, 1);
  o.colors = ops::slice_cols(out, 11, 3);
  return o;
}

Vq4d::Decoded Vq4d::decode_quantized(const Tensor& quantized, int timesteps) const {
  Decoded d;
  d.continuous = factorize(quantized);
  d.coarse = static_generate(d.continuous, timesteps);
  d.corrected = config_.use_stop ? apply_offsets(d.coarse, stop_offsets(d.coarse, d.continuous)) : d.coarse;
  return d;
}

DynamicGaussians Vq4d::decode(const TokenGrid& tokens) const {
  return decode_quantized(dequantize(tokens), tokens.timesteps).corrected;
}

void Vq4d::save(Checkpoint& ckpt) const {
  ckpt.kind = "vq4d";
  config_.write(ckpt.config);
  ckpt.add_all(store_.entries());
}

void Vq4d::load(const Checkpoint& ckpt) {
  Config expected;
  config_.write(expected);
  require_matching_config(ckpt, "vq4d", expected, "vq");
  ckpt.restore(store_.entries());
}

// ---------------------------------------------------------------------------
// Discriminator

PatchDiscriminator::PatchDiscriminator(nn::ParamStore& store, uint64_t seed) {
  nn::Rng rng(seed);
  c1_ = nn::Conv2d(store, "disc.conv1", 3, 32, 3, 2, rng);
  c2_ = nn::Conv2d(store, "disc.conv2", 32, 64, 3, 2, rng);
  c3_ = nn::Conv2d(store, "disc.conv3", 64, 64, 3, 2, rng);
  c4_ = nn::Conv2d(store, "disc.conv4", 64, 1, 3, 1, rng);
}

Tensor PatchDiscriminator::operator()(const Tensor& images) const {
  Tensor x = ops::add_scalar(ops::scale(images, 2.0f), -1.0f);
  x = ops::gelu(c1_(x));
  x = ops::gelu(c2_(x));
  x = ops::gelu(c3_(x));
  return c4_(x);
}

// ---------------------------------------------------------------------------
// Dataset tensors

Tensor matrix_tensor(const SpatioTemporalMatrix& m) {
  return Tensor::from({static_cast<int64_t>(m.timesteps) * m.views, m.height, m.width, 3}, m.pixels);
}

Tensor flow_tensor(const FlowField& f) {
  const int64_t pairs = f.pairs();
  return Tensor::from({pairs * f.views, f.height, f.width, 2},
                      std::vector<float>(f.vectors.begin(), f.vectors.begin() + pairs * f.views * f.frame_size()));
}

SpatioTemporalMatrix tensor_matrix(const Tensor& images, int timesteps, int views) {
  require(images.rank() == 4 && images.dim(0) == static_cast<int64_t>(timesteps) * views && images.dim(3) == 3,
          "tensor_matrix: unexpected image tensor shape " + shape_str(images.shape()));
  SpatioTemporalMatrix m(timesteps, views, static_cast<int>(images.dim(1)), static_cast<int>(images.dim(2)));
  const auto d = images.data();
  for (size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = std::clamp(d[i], 0.0f, 1.0f);
  return m;
}

// ---------------------------------------------------------------------------
// Training

VqTrainer::VqTrainer(Vq4d& model, const Dataset& dataset, const VqTrainOptions& options)
    : model_(model),
      dataset_(dataset),
      options_(options),
      adam_(model.params().entries(), {.learning_rate = options.learning_rate}),
      rng_(options.seed) {
  options_.weights.validate();
  const VqConfig& c = model.config();
  require(!dataset.objects.empty(), "train-vqvae: dataset has no objects");
  if (dataset.timesteps() != c.timesteps || dataset.views() != c.views || dataset.height() != c.height ||
      dataset.width() != c.width) {
    throw std::invalid_argument("train-vqvae: dataset dims (T=" + std::to_string(dataset.timesteps()) +
                                ", V=" + std::to_string(dataset.views()) + ", " + std::to_string(dataset.height()) +
                                "x" + std::to_string(dataset.width()) + ") differ from vq config (T=" +
                                std::to_string(c.timesteps) + ", V=" + std::to_string(c.views) + ", " +
                                std::to_string(c.height) + "x" + std::to_string(c.width) + ")");
  }
  require(options.batch_size >= 1, "train-vqvae: batch size must be >= 1");
  require(options.steps >= 1, "train-vqvae: steps must be >= 1");
  for (const auto& obj : dataset.objects) {
    images_.push_back(matrix_tensor(obj.matrix));
    flows_.push_back(flow_tensor(obj.flow));
  }
  last_used_.assign(static_cast<size_t>(c.chunks) * c.codebook_size, 0);
  if (options_.weights.beta > 0.0) {
    disc_ = std::make_unique<PatchDiscriminator>(disc_store_, options.seed ^ 0x9e3779b97f4a7c15ULL);
    disc_adam_ = std::make_unique<nn::Adam>(disc_store_.entries(), nn::AdamOptions{.learning_rate = options.learning_rate});
  }
}

void VqTrainer::initialize_codebook(const Tensor& latents) {
  // Seed every entry with a randomly chosen encoder output chunk plus a little noise.
  const VqConfig& c = model_.config();
  const int dn = c.chunk_dim();
  const int64_t positions = latents.rows();
  const auto z = latents.data();
  auto book = model_.codebook().mutable_data();
  std::uniform_int_distribution<int64_t> pick(0, positions - 1);
  std::normal_distribution<float> noise(0.0f, 0.01f);
  for (int ch = 0; ch < c.chunks; ++ch) {
    for (int k = 0; k < c.codebook_size; ++k) {
      const int64_t p = pick(rng_);
      float* e = book.data() + (static_cast<size_t>(ch) * c.codebook_size + k) * dn;
      for (int j = 0; j < dn; ++j) e[j] = z[p * c.latent_dim + ch * dn + j] + noise(rng_);
    }
  }
  codebook_ready_ = true;
}

void VqTrainer::reset_dead_entries(const Tensor& latents) {
  const VqConfig& c = model_.config();
  const int dn = c.chunk_dim();
  const int64_t now = adam_.step_count();
  const int64_t epoch = std::max<int64_t>(options_.reset_interval,
                                          (static_cast<int64_t>(dataset_.objects.size()) + options_.batch_size - 1) /
                                              options_.batch_size);
  if (now == 0 || now % epoch != 0) return;
  const auto z = latents.data();
  auto book = model_.codebook().mutable_data();
  std::uniform_int_distribution<int64_t> pick(0, latents.rows() - 1);
  for (int ch = 0; ch < c.chunks; ++ch) {
    for (int k = 0; k < c.codebook_size; ++k) {
      int64_t& last = last_used_[static_cast<size_t>(ch) * c.codebook_size + k];
      if (now - last < epoch) continue;
      const int64_t p = pick(rng_);
      float* e = book.data() + (static_cast<size_t>(ch) * c.codebook_size + k) * dn;
      for (int j = 0; j < dn; ++j) e[j] = z[p * c.latent_dim + ch * dn + j];
      last = now;
    }
  }
}

VqStepLog VqTrainer::step() {
  const VqConfig& c = model_.config();
  const int T = c.timesteps, V = c.views;
  std::uniform_int_distribution<size_t> pick(0, images_.size() - 1);
  const float lr = nn::cosine_lr(options_.learning_rate, adam_.step_count(), options_.steps);

  VqStepLog log;
  log.learning_rate = lr;
  adam_.zero_grad();
  if (disc_adam_) disc_adam_->zero_grad();
  std::vector<Tensor> fakes, reals;
  std::vector<uint8_t> used(last_used_.size(), 0);
  const float inv_batch = 1.0f / static_cast<float>(options_.batch_size);
  for (int b = 0; b < options_.batch_size; ++b) {
    const size_t idx = images_.size() == 1 ? 0 : pick(rng_);
    const Tensor latents = model_.encode_images(images_[idx]);
    if (!codebook_ready_) initialize_codebook(latents);
    if (b == 0) reset_dead_entries(latents);
    const QuantizeResult q = model_.quantize(latents, T, V);
    for (size_t i = 0; i < q.tokens.indices.size(); ++i) {
      used[(i % c.chunks) * c.codebook_size + q.tokens.indices[i]] = 1;
    }
    const auto decoded = model_.decode_quantized(q.quantized, T);
    const RenderedSequence r = render_sequence(decoded.corrected, dataset_.cameras, c.background);
    Tensor logits;
    if (disc_) {
      logits = (*disc_)(r.images);
      fakes.push_back(r.images.detach());
      reals.push_back(images_[idx]);
    }
    const VaeLoss loss = vae_loss(r.images, images_[idx], r.flow, flows_[idx], logits, options_.weights, q.loss);
    ops::scale(loss.total, inv_batch).backward();
    log.total += loss.total.item() * inv_batch;
    log.reconstruction += loss.reconstruction * inv_batch;
    log.flow += loss.flow * inv_batch;
    log.commitment += loss.commitment * inv_batch;
    log.adversarial += loss.adversarial * inv_batch;
  }
  // The generator pass also deposited gradients in the discriminator; discard them.
  if (disc_adam_) disc_adam_->zero_grad();
  adam_.step(lr);
  for (size_t i = 0; i < used.size(); ++i) {
    if (used[i]) last_used_[i] = adam_.step_count();
    log.used_codes += used[i];
  }
  if (disc_) {
    for (size_t b = 0; b < fakes.size(); ++b) {
      const Tensor d_loss = ops::add(softplus_mean(ops::scale((*disc_)(reals[b]), -1.0f)),
                                     softplus_mean((*disc_)(fakes[b])));
      ops::scale(d_loss, inv_batch).backward();
    }
    disc_adam_->step(lr);
  }
  log.step = adam_.step_count();
  return log;
}

void VqTrainer::save(Checkpoint& ckpt) const {
  model_.save(ckpt);
  for (const auto& [name, t] : adam_.state_tensors()) ckpt.add(name, t);
  if (disc_) {
    ckpt.add_all(disc_store_.entries());
    for (const auto& [name, t] : disc_adam_->state_tensors()) ckpt.add("disc." + name, t);
  }
  ckpt.metadata["train.step"] = std::to_string(adam_.step_count());
  ckpt.metadata["train.codebook_ready"] = codebook_ready_ ? "1" : "0";
  std::vector<float> usage(last_used_.begin(), last_used_.end());
  ckpt.arrays.push_back({"train.last_used", {{static_cast<int64_t>(usage.size())}, usage}});
}

void VqTrainer::resume(const Checkpoint& ckpt) {
  model_.load(ckpt);
  for (const auto& [name, t] : adam_.state_tensors()) {
    if (const NamedArray* a = ckpt.find(name)) adam_.load_state(name, a->values);
  }
  if (disc_) {
    if (ckpt.find("disc.conv1.weight") != nullptr) ckpt.restore(disc_store_.entries());
    for (const auto& [name, t] : disc_adam_->state_tensors()) {
      if (const NamedArray* a = ckpt.find("disc." + name)) disc_adam_->load_state(name, a->values);
    }
  }
  const auto it = ckpt.metadata.find("train.step");
  const int64_t step = it == ckpt.metadata.end() ? 0 : std::stoll(it->second);
  adam_.set_step_count(step);
  if (disc_adam_) disc_adam_->set_step_count(step);
  const auto ready = ckpt.metadata.find("train.codebook_ready");
  codebook_ready_ = ready != ckpt.metadata.end() ? ready->second == "1" : step > 0;
  if (const NamedArray* a = ckpt.find("train.last_used"); a && a->values.size() == last_used_.size()) {
    for (size_t i = 0; i < last_used_.size(); ++i) last_used_[i] = static_cast<int64_t>(a->values[i]);
  }
  // Advance the sampling stream so a resumed run does not replay the first batches.
  rng_.discard(static_cast<unsigned long long>(step) * 16);
}

}  // namespace star4d
