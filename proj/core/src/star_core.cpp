#include "star4d/star_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace star4d {

namespace {

constexpr int kTimeFeatures = 32;
// Rows of the segment table.
constexpr int kTextSegment = 0, kVideoSegment = 1, kSeparatorSegment = 2;

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

std::vector<float> sinusoid(int t) {
  std::vector<float> f(kTimeFeatures);
  for (int i = 0; i < kTimeFeatures / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / kTimeFeatures);
    f[2 * i] = static_cast<float>(std::sin(t * freq));
    f[2 * i + 1] = static_cast<float>(std::cos(t * freq));
  }
  return f;
}

// Uniform double in [0, 1) from the top 53 bits; independent of the standard
// library's distribution implementations.
double uniform01(nn::Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int32_t sample_token(std::span<const float> logits, const SamplingOptions& s, nn::Rng& rng) {
  const int K = static_cast<int>(logits.size());
  if (s.temperature <= 0.0) {
    return static_cast<int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<int32_t> order(static_cast<size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  const int keep = s.top_k > 0 ? std::min(s.top_k, K) : K;
  std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&](int32_t a, int32_t b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  });
  std::vector<double> p(static_cast<size_t>(keep));
  const double top = logits[order[0]];
  double total = 0.0;
  for (int i = 0; i < keep; ++i) total += p[i] = std::exp((logits[order[i]] - top) / s.temperature);
  double u = uniform01(rng) * total;
  for (int i = 0; i < keep; ++i) {
    u -= p[i];
    if (u < 0.0) return order[i];
  }
  return order[keep - 1];
}

}  // namespace

std::string to_string(ContainerMode mode) {
  switch (mode) {
    case ContainerMode::kv: return "kv";
    case ContainerMode::additive: return "additive";
    case ContainerMode::none: return "none";
  }
  return "kv";
}

ContainerMode parse_container_mode(const std::string& text) {
  if (text == "kv") return ContainerMode::kv;
  if (text == "additive") return ContainerMode::additive;
  if (text == "none") return ContainerMode::none;
  throw std::invalid_argument("star.container_mode must be kv, additive or none (got '" + text + "')");
}

// ---------------------------------------------------------------------------
// Configuration and layout

void StarConfig::validate() const {
  require(embed_dim >= 1 && layers >= 1 && heads >= 1, "star: embed_dim, layers and heads must be >= 1");
  require(embed_dim % heads == 0, "star.embed_dim must be divisible by star.heads");
  require(embed_dim % container.heads == 0, "star.embed_dim must be divisible by container.heads");
  require(ffn_hidden >= 1, "star.ffn_hidden must be >= 1");
  require(timesteps >= 1, "star.timesteps must be >= 1");
  require(views >= 1 && latent_height >= 1 && latent_width >= 1 && chunks >= 1, "star: grid dims must be >= 1");
  require(vocab >= 2, "star.vocab must be >= 2");
  require(text_buckets >= 1 && max_text_tokens >= 0, "star: text vocabulary sizes must be positive");
  require(max_context >= 1, "star.max_context must be >= 1");
  container.validate();
}

void StarConfig::write(Config& c) const {
  c.set("star.embed_dim", std::to_string(embed_dim));
  c.set("star.layers", std::to_string(layers));
  c.set("star.heads", std::to_string(heads));
  c.set("star.ffn_hidden", std::to_string(ffn_hidden));
  c.set("star.max_context", std::to_string(max_context));
  c.set("star.text_buckets", std::to_string(text_buckets));
  c.set("star.max_text_tokens", std::to_string(max_text_tokens));
  c.set("star.timesteps", std::to_string(timesteps));
  c.set("star.views", std::to_string(views));
  c.set("star.latent_height", std::to_string(latent_height));
  c.set("star.latent_width", std::to_string(latent_width));
  c.set("star.chunks", std::to_string(chunks));
  c.set("star.vocab", std::to_string(vocab));
  c.set("star.container_mode", to_string(container_mode));
  container.write(c);
}

StarConfig StarConfig::from(const Config& c) {
  StarConfig s;
  auto get = [&](const char* key, int fallback) { return static_cast<int>(c.get_int(key, fallback)); };
  s.embed_dim = get("star.embed_dim", s.embed_dim);
  s.layers = get("star.layers", s.layers);
  s.heads = get("star.heads", s.heads);
  s.ffn_hidden = get("star.ffn_hidden", s.ffn_hidden);
  s.max_context = get("star.max_context", s.max_context);
  s.text_buckets = get("star.text_buckets", s.text_buckets);
  s.max_text_tokens = get("star.max_text_tokens", s.max_text_tokens);
  s.timesteps = get("star.timesteps", s.timesteps);
  s.views = get("star.views", s.views);
  s.latent_height = get("star.latent_height", s.latent_height);
  s.latent_width = get("star.latent_width", s.latent_width);
  s.chunks = get("star.chunks", s.chunks);
  s.vocab = get("star.vocab", s.vocab);
  s.container_mode = parse_container_mode(c.get_string("star.container_mode", to_string(s.container_mode)));
  s.container = ContainerConfig::from(c);
  return s;
}

StarConfig StarConfig::for_tokenizer(const VqConfig& vq) {
  StarConfig s;
  s.timesteps = vq.timesteps;
  s.views = vq.views;
  s.latent_height = vq.latent_height();
  s.latent_width = vq.latent_width();
  s.chunks = vq.chunks;
  s.vocab = vq.codebook_size;
  return s;
}

SequenceLayout SequenceLayout::build(const StarConfig& c, int text_length, int video_length) {
  SequenceLayout l;
  l.text_length = text_length;
  l.video_length = video_length;
  const int hw = c.latent_height * c.latent_width;
  l.positions.reserve(static_cast<size_t>(text_length + video_length + 1 + c.timesteps * c.tokens_per_group()));
  for (int i = 0; i < text_length; ++i) l.positions.push_back({Segment::text, 0, 0, 0, 0, i});
  for (int i = 0; i < video_length; ++i) {
    // Video tokens follow the [t][y][x][c] order of a one-view grid.
    l.positions.push_back({Segment::video, 0, 0, (i / c.chunks) % hw, i % c.chunks, i});
  }
  l.positions.push_back({Segment::separator, 0, 0, 0, 0, 0});
  int index = 0;
  for (int t = 1; t <= c.timesteps; ++t) {
    for (int v = 0; v < c.views; ++v) {
      for (int s = 0; s < hw; ++s) {
        for (int ch = 0; ch < c.chunks; ++ch) l.positions.push_back({Segment::group, t, v, s, ch, index++});
      }
    }
  }
  return l;
}

void SequenceLayout::validate() const {
  int separators = 0, last_group = 0;
  for (size_t p = 0; p < positions.size(); ++p) {
    const auto& info = positions[p];
    if (info.segment == Segment::separator) ++separators;
    if (info.segment == Segment::group) {
      require(info.group >= last_group, "layout: groups out of order");
      if (info.group == last_group && p > 0 && positions[p - 1].segment == Segment::group) {
        const auto& prev = positions[p - 1];
        require(std::tie(prev.view, prev.spatial, prev.chunk) < std::tie(info.view, info.spatial, info.chunk),
                "layout: group positions out of (view, spatial, chunk) order");
      }
      last_group = info.group;
    } else {
      require(last_group == 0, "layout: prefix position after a group token");
    }
  }
  require(separators == 1, "layout: expected exactly one SEP, found " + std::to_string(separators));
  require(positions[separator()].segment == Segment::separator, "layout: SEP not after the prefix");
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

uint32_t text_bucket(const std::string& word, int buckets) {
  uint32_t h = 2166136261u;
  for (unsigned char ch : word) {
    h ^= ch;
    h *= 16777619u;
  }
  return h % static_cast<uint32_t>(buckets);
}

SpatioTemporalMatrix monocular_video(const SpatioTemporalMatrix& m, int view) {
  require(view >= 0 && view < m.views, "monocular_video: view " + std::to_string(view) + " out of range");
  SpatioTemporalMatrix out(m.timesteps, 1, m.height, m.width);
  for (int t = 0; t < m.timesteps; ++t) {
    const auto src = m.frame(t, view);
    std::copy(src.begin(), src.end(), out.frame(t, 0).begin());
  }
  return out;
}

std::vector<int32_t> video_tokens(const Vq4d& tokenizer, const SpatioTemporalMatrix& frames) {
  const VqConfig& c = tokenizer.config();
  frames.validate();
  require(frames.views == 1, "embed_video: expected a monocular video, got " + std::to_string(frames.views) + " views");
  require(frames.height == c.height && frames.width == c.width,
          "embed_video: frame size " + std::to_string(frames.height) + "x" + std::to_string(frames.width) +
              " does not match the tokenizer's " + std::to_string(c.height) + "x" + std::to_string(c.width));
  NoGradGuard guard;
  return tokenizer.quantize(tokenizer.encode(frames), frames.timesteps, 1).tokens.indices;
}

// ---------------------------------------------------------------------------
// Model

struct StarModel::Cache {
  struct Layer {
    std::vector<float> seq_k, seq_v, mem_k, mem_v;
    std::vector<int> mem_group;
  };
  std::vector<Layer> layers;
};

StarModel::StarModel(const StarConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  nn::Rng rng(seed);
  const int E = config_.embed_dim;
  tokens_ = nn::Embedding(store_, "star.tokens", config_.vocab, E, rng);
  text_table_ = nn::Embedding(store_, "star.text.table", config_.text_buckets, E, rng);
  text_proj_ = nn::Mlp(store_, "star.text.proj", E, E, E, rng);
  video_proj_ = nn::Mlp(store_, "star.video.proj", E, E, E, rng);
  text_pos_ = store_.add("star.text.position", nn::normal_param({std::max(1, config_.max_text_tokens), E}, 0.02f, rng));
  // Positions index within a frame, so identical frames embed identically.
  video_pos_ = store_.add("star.video.position",
                          nn::normal_param({config_.latent_height * config_.latent_width * config_.chunks, E}, 0.02f, rng));
  segment_ = store_.add("star.segment", nn::normal_param({3, E}, 0.02f, rng));
  chunk_ = store_.add("star.chunk", nn::normal_param({config_.chunks, E}, 0.02f, rng));
  ray_proj_ = nn::Linear(store_, "star.spe.ray", 6, E, rng);
  time_proj_ = nn::Linear(store_, "star.spe.time", kTimeFeatures, E, rng);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "star.block" + std::to_string(l);
    Block b;
    b.attn_norm = nn::RmsNorm(store_, p + ".attn_norm", E);
    b.wq = nn::Linear(store_, p + ".wq", E, E, rng, false);
    b.wk = nn::Linear(store_, p + ".wk", E, E, rng, false);
    b.wv = nn::Linear(store_, p + ".wv", E, E, rng, false);
    b.wo = nn::Linear(store_, p + ".wo", E, E, rng, false);
    b.ffn_norm = nn::RmsNorm(store_, p + ".ffn_norm", E);
    b.gate = nn::Linear(store_, p + ".gate", E, config_.ffn_hidden, rng, false);
    b.up = nn::Linear(store_, p + ".up", E, config_.ffn_hidden, rng, false);
    b.down = nn::Linear(store_, p + ".down", config_.ffn_hidden, E, rng, false);
    blocks_.push_back(b);
  }
  final_norm_ = nn::RmsNorm(store_, "star.final_norm", E);
  head_ = nn::Linear(store_, "star.head", E, config_.vocab, rng, false);
  container_ = SpatioTemporalContainer(store_, "star.container", config_.container, E, E, rng);
}

ContainerMode StarModel::mode(const ForwardOptions& o) const { return o.mode.value_or(config_.container_mode); }

void StarModel::check_inputs(const StarInputs& in) const {
  require(static_cast<int>(in.cameras.size()) == config_.views,
          "star: expected " + std::to_string(config_.views) + " cameras, got " + std::to_string(in.cameras.size()));
  for (const auto& cam : in.cameras) cam.validate();
  require(in.video_tokens.empty() || static_cast<int>(in.video_tokens.size()) == config_.video_tokens(),
          "star: video prefix has " + std::to_string(in.video_tokens.size()) + " tokens, expected " +
              std::to_string(config_.video_tokens()));
}

Tensor StarModel::token_embeddings(std::span<const int32_t> tokens) const {
  for (int32_t tok : tokens) {
    require(tok >= 0 && tok < config_.vocab, "star: token " + std::to_string(tok) + " outside vocabulary of " +
                                                 std::to_string(config_.vocab));
  }
  return tokens_(tokens);
}

Tensor StarModel::embed_text(const std::string& prompt) const {
  const auto words = split_words(prompt);
  if (words.empty()) return Tensor::zeros({0, config_.embed_dim});
  require(static_cast<int>(words.size()) <= config_.max_text_tokens,
          "embed_text: prompt has " + std::to_string(words.size()) + " words, limit is " +
              std::to_string(config_.max_text_tokens));
  std::vector<int32_t> ids;
  for (const auto& w : words) ids.push_back(static_cast<int32_t>(text_bucket(w, config_.text_buckets)));
  const auto n = static_cast<int64_t>(ids.size());
  return ops::add(text_proj_(text_table_(ids)), ops::slice_rows(text_pos_, 0, n));
}

Tensor StarModel::embed_video(std::span<const int32_t> tokens) const {
  if (tokens.empty()) return Tensor::zeros({0, config_.embed_dim});
  require(static_cast<int>(tokens.size()) == config_.video_tokens(),
          "embed_video: " + std::to_string(tokens.size()) + " tokens, expected " +
              std::to_string(config_.video_tokens()));
  const int64_t per_frame = video_pos_.dim(0);
  std::vector<int32_t> slot(tokens.size());
  for (size_t i = 0; i < slot.size(); ++i) slot[i] = static_cast<int32_t>(i % per_frame);
  return ops::add(video_proj_(token_embeddings(tokens)), ops::gather_rows(video_pos_, slot));
}

Tensor StarModel::embed_video(const SpatioTemporalMatrix& frames, const Vq4d& tokenizer) const {
  require(frames.timesteps == config_.timesteps, "embed_video: expected " + std::to_string(config_.timesteps) +
                                                     " frames, got " + std::to_string(frames.timesteps));
  const auto ids = video_tokens(tokenizer, frames);
  return embed_video(ids);
}

Tensor StarModel::timestep_embed(int t) const {
  require(t >= 1 && t <= config_.timesteps,
          "timestep_embed: t=" + std::to_string(t) + " outside [1, " + std::to_string(config_.timesteps) + "]");
  return time_proj_(Tensor::from({1, kTimeFeatures}, sinusoid(t)));
}

Tensor StarModel::build_spe(const SequenceLayout& layout, const std::vector<CameraPose>& cameras) const {
  require(static_cast<int>(cameras.size()) == config_.views, "build_spe: camera count does not match star.views");
  const int hw = config_.latent_height * config_.latent_width, V = config_.views, T = config_.timesteps;
  std::vector<float> rays;
  rays.reserve(static_cast<size_t>(V * hw * 6));
  for (const auto& cam : cameras) {
    for (const auto& ray : pluecker_grid(cam, config_.latent_height, config_.latent_width)) {
      for (double x : ray.coefficients()) rays.push_back(static_cast<float>(x));
    }
  }
  const Tensor ray_rows = ray_proj_(Tensor::from({V * hw, 6}, std::move(rays)));
  std::vector<Tensor> times;
  for (int t = 1; t <= T; ++t) times.push_back(timestep_embed(t));
  const Tensor zero = Tensor::zeros({1, config_.embed_dim});
  times.push_back(zero);
  // Table A: [segments | rays]; table B: [timesteps | zero]. SPE = A[a] + B[b].
  const Tensor table_a = ops::concat_rows({segment_, ray_rows});
  const Tensor table_b = ops::concat_rows(times);
  std::vector<int32_t> ia, ib;
  for (const auto& p : layout.positions) {
    switch (p.segment) {
      case Segment::text: ia.push_back(kTextSegment); ib.push_back(T); break;
      case Segment::video: ia.push_back(kVideoSegment); ib.push_back(T); break;
      case Segment::separator: ia.push_back(kSeparatorSegment); ib.push_back(T); break;
      case Segment::group:
        ia.push_back(3 + p.view * hw + p.spatial);
        ib.push_back(p.group - 1);
        break;
    }
  }
  return ops::add(ops::gather_rows(table_a, ia), ops::gather_rows(table_b, ib));
}

Tensor StarModel::group_features(std::span<const int32_t> group_tokens, int t, const Tensor& spe,
                                 const SequenceLayout& layout) const {
  const int G = config_.tokens_per_group();
  require(static_cast<int>(group_tokens.size()) == G, "group_features: expected " + std::to_string(G) + " tokens");
  require(t >= 1 && t <= config_.timesteps, "group_features: group out of range");
  std::vector<int32_t> chunks(static_cast<size_t>(G));
  for (int i = 0; i < G; ++i) chunks[i] = i % config_.chunks;
  const Tensor content = ops::add(token_embeddings(group_tokens), ops::gather_rows(chunk_, chunks));
  return ops::add(content, ops::slice_rows(spe, layout.first_group_position() + (t - 1) * G, G));
}

Tensor StarModel::prefix(const StarInputs& inputs, SequenceLayout& layout) const {
  const auto words = split_words(inputs.text);
  layout = SequenceLayout::build(config_, static_cast<int>(words.size()), static_cast<int>(inputs.video_tokens.size()));
  require(layout.input_length() <= config_.max_context,
          "star: sequence of " + std::to_string(layout.input_length()) + " positions exceeds star.max_context=" +
              std::to_string(config_.max_context));
  std::vector<Tensor> parts;
  if (!words.empty()) parts.push_back(embed_text(inputs.text));
  if (!inputs.video_tokens.empty()) parts.push_back(embed_video(inputs.video_tokens));
  parts.push_back(Tensor::zeros({1, config_.embed_dim}));  // SEP carries only its segment embedding
  return ops::concat_rows(parts);
}

Tensor StarModel::block_forward(const Block& b, const Tensor& x, const Tensor& memory,
                                std::span<const uint8_t> mask) const {
  const int64_t L = x.rows(), E = config_.embed_dim;
  const Tensor h = b.attn_norm(x);
  Tensor k = b.wk(h), v = b.wv(h);
  if (memory.defined() && memory.rows() > 0) {
    const Tensor hm = b.attn_norm(memory);
    k = ops::concat_rows({b.wk(hm), k});
    v = ops::concat_rows({b.wv(hm), v});
  }
  const int64_t lk = k.rows();
  const Tensor a = ops::attention(ops::reshape(b.wq(h), {1, L, E}), ops::reshape(k, {1, lk, E}),
                                  ops::reshape(v, {1, lk, E}), config_.heads, mask);
  const Tensor y = ops::add(x, b.wo(ops::reshape(a, {L, E})));
  const Tensor h2 = b.ffn_norm(y);
  return ops::add(y, b.down(ops::mul(ops::silu(b.gate(h2)), b.up(h2))));
}

ForwardResult StarModel::forward(const StarInputs& inputs, const TokenGrid& tokens, const ForwardOptions& options) const {
  check_inputs(inputs);
  tokens.validate();
  const StarConfig& c = config_;
  auto field = [](const char* name, int got, int want) {
    require(got == want, std::string("star: token grid ") + name + "=" + std::to_string(got) + " but model expects " +
                             std::to_string(want));
  };
  field("timesteps", tokens.timesteps, c.timesteps);
  field("views", tokens.views, c.views);
  field("height", tokens.height, c.latent_height);
  field("width", tokens.width, c.latent_width);
  field("chunks", tokens.chunks, c.chunks);
  field("codebook_size", tokens.codebook_size, c.vocab);

  ForwardResult r;
  const Tensor pre = prefix(inputs, r.layout);
  const SequenceLayout& layout = r.layout;
  const Tensor spe = build_spe(layout, inputs.cameras);
  const int T = c.timesteps, G = c.tokens_per_group(), E = c.embed_dim;
  const int sep = layout.separator(), L = layout.input_length();

  std::vector<Tensor> groups;
  std::vector<Tensor> parts{ops::add(pre, ops::slice_rows(spe, 0, sep + 1))};
  for (int t = 1; t <= T; ++t) {
    groups.push_back(group_features(tokens.group(t - 1), t, spe, layout));
    parts.push_back(groups.back());
  }
  Tensor x = ops::slice_rows(ops::concat_rows(parts), 0, L);

  const ContainerMode m = mode(options);
  std::vector<std::pair<int, Tensor>> conds;  // (group, conditioning rows)
  if (m != ContainerMode::none) {
    ContainerState state;
    r.states.push_back(state);
    for (int t = 1; t < T; ++t) {
      std::vector<TokenTag> tags;
      for (int i = 0; i < G; ++i) {
        const auto& p = layout.positions[layout.first_group_position() + (t - 1) * G + i];
        tags.push_back({t, p.view, p.spatial, p.chunk});
      }
      state = container_.update_state(state, groups[t - 1], tags);
      r.states.push_back(state);
      if (t + 1 != options.drop_group) conds.emplace_back(t + 1, container_.inject(state.merged));
    }
  }

  Tensor memory;
  std::vector<int> memory_group;
  if (m == ContainerMode::additive && !conds.empty()) {
    std::vector<Tensor> rows{Tensor::zeros({1, E})};
    std::vector<int32_t> slot(static_cast<size_t>(T + 1), 0);
    for (const auto& [g, cond] : conds) {
      slot[g] = static_cast<int32_t>(rows.size());
      rows.push_back(ops::mean_row_groups(cond, cond.rows()));
    }
    std::vector<int32_t> idx(static_cast<size_t>(L));
    for (int p = 0; p < L; ++p) idx[p] = slot[layout.target_group(p)];
    x = ops::add(x, ops::gather_rows(ops::concat_rows(rows), idx));
  } else if (m == ContainerMode::kv && !conds.empty()) {
    std::vector<Tensor> rows;
    for (const auto& [g, cond] : conds) {
      rows.push_back(cond);
      memory_group.insert(memory_group.end(), static_cast<size_t>(cond.rows()), g);
    }
    memory = ops::concat_rows(rows);
  }

  // Causal mask with visibility of conditioning rows from their group on.
  const int M = static_cast<int>(memory_group.size()), lk = M + L;
  std::vector<uint8_t> mask(static_cast<size_t>(L) * lk, 0);
  for (int p = 0; p < L; ++p) {
    const int target = layout.target_group(p);
    uint8_t* row = mask.data() + static_cast<size_t>(p) * lk;
    for (int j = 0; j < M; ++j) row[j] = memory_group[j] <= target ? 1 : 0;
    std::fill(row + M, row + M + p + 1, uint8_t{1});
  }
  for (const auto& b : blocks_) x = block_forward(b, x, memory, mask);
  r.logits = head_(final_norm_(ops::slice_rows(x, sep, static_cast<int64_t>(T) * G)));
  return r;
}

void StarModel::push_memory(Cache& cache, const Tensor& cond, int group) const {
  for (size_t l = 0; l < blocks_.size(); ++l) {
    const Tensor hm = blocks_[l].attn_norm(cond);
    const Tensor kt = blocks_[l].wk(hm), vt = blocks_[l].wv(hm);
    const auto k = kt.data(), v = vt.data();
    auto& layer = cache.layers[l];
    layer.mem_k.insert(layer.mem_k.end(), k.begin(), k.end());
    layer.mem_v.insert(layer.mem_v.end(), v.begin(), v.end());
    layer.mem_group.insert(layer.mem_group.end(), static_cast<size_t>(cond.rows()), group);
  }
}

Tensor StarModel::block_step(const Block& b, const Tensor& x, Cache& cache, size_t layer, int target_group) const {
  const int E = config_.embed_dim, H = config_.heads, dh = E / H;
  auto& c = cache.layers[layer];
  const Tensor h = b.attn_norm(x);
  const auto q = b.wq(h).to_vector();
  const Tensor kt = b.wk(h), vt = b.wv(h);
  const auto k = kt.data(), v = vt.data();
  c.seq_k.insert(c.seq_k.end(), k.begin(), k.end());
  c.seq_v.insert(c.seq_v.end(), v.begin(), v.end());

  // Keys: visible conditioning rows, then every cached sequence position.
  std::vector<const float*> keys, values;
  for (size_t j = 0; j < c.mem_group.size(); ++j) {
    if (c.mem_group[j] > target_group) continue;
    keys.push_back(c.mem_k.data() + j * E);
    values.push_back(c.mem_v.data() + j * E);
  }
  for (size_t j = 0; j < c.seq_k.size() / E; ++j) {
    keys.push_back(c.seq_k.data() + j * E);
    values.push_back(c.seq_v.data() + j * E);
  }
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<float> out(static_cast<size_t>(E), 0.0f), p(keys.size());
  for (int hd = 0; hd < H; ++hd) {
    const int o = hd * dh;
    float mx = -std::numeric_limits<float>::infinity();
    for (size_t j = 0; j < keys.size(); ++j) {
      float s = 0.0f;
      for (int d = 0; d < dh; ++d) s += q[o + d] * keys[j][o + d];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    float total = 0.0f;
    for (float& pj : p) total += pj = std::exp(pj - mx);
    for (size_t j = 0; j < keys.size(); ++j) {
      const float w = p[j] / total;
      for (int d = 0; d < dh; ++d) out[o + d] += w * values[j][o + d];
    }
  }
  const Tensor y = ops::add(x, b.wo(Tensor::from({1, E}, std::move(out))));
  const Tensor h2 = b.ffn_norm(y);
  return ops::add(y, b.down(ops::mul(ops::silu(b.gate(h2)), b.up(h2))));
}

TokenGrid StarModel::generate(const StarInputs& inputs, const SamplingOptions& sampling, uint64_t seed,
                              ContainerState* final_state, const ForwardOptions& options) const {
  check_inputs(inputs);
  NoGradGuard guard;
  const StarConfig& c = config_;
  const int T = c.timesteps, G = c.tokens_per_group();
  SequenceLayout layout;
  const Tensor pre = prefix(inputs, layout);
  const Tensor spe = build_spe(layout, inputs.cameras);
  const int sep = layout.separator(), first = layout.first_group_position();
  const ContainerMode m = mode(options);

  TokenGrid grid{T, c.views, c.latent_height, c.latent_width, c.chunks, c.vocab, {}};
  grid.indices.assign(static_cast<size_t>(T) * G, 0);
  Cache cache;
  cache.layers.resize(blocks_.size());
  std::vector<Tensor> pooled(static_cast<size_t>(T + 1));  // additive conditioning per group
  nn::Rng rng(seed);
  ContainerState state;

  auto feed = [&](const Tensor& row, int target_group) {
    Tensor x = row;
    if (m == ContainerMode::additive && pooled[target_group].defined()) x = ops::add(x, pooled[target_group]);
    for (size_t l = 0; l < blocks_.size(); ++l) x = block_step(blocks_[l], x, cache, l, target_group);
    return head_(final_norm_(x)).to_vector();
  };

  const Tensor prefix_rows = ops::add(pre, ops::slice_rows(spe, 0, sep + 1));
  std::vector<float> logits;
  for (int p = 0; p <= sep; ++p) logits = feed(ops::slice_rows(prefix_rows, p, 1), layout.target_group(p));

  for (int i = 0; i < T * G; ++i) {
    grid.indices[i] = sample_token(logits, sampling, rng);
    const int t = i / G + 1;
    const bool group_done = (i + 1) % G == 0;
    const bool need_state = m != ContainerMode::none ? t < T || final_state : final_state != nullptr;
    if (group_done && need_state) {
      const auto ids = std::span<const int32_t>(grid.indices).subspan(static_cast<size_t>(t - 1) * G, G);
      std::vector<TokenTag> tags;
      for (int j = 0; j < G; ++j) {
        const auto& pos = layout.positions[first + (t - 1) * G + j];
        tags.push_back({t, pos.view, pos.spatial, pos.chunk});
      }
      state = container_.update_state(state, group_features(ids, t, spe, layout), tags);
      if (m != ContainerMode::none && t < T && t + 1 != options.drop_group) {
        const Tensor cond = container_.inject(state.merged);
        if (m == ContainerMode::kv) push_memory(cache, cond, t + 1);
        else pooled[t + 1] = ops::mean_row_groups(cond, cond.rows());
      }
    }
    if (i + 1 == T * G) break;
    // Same arithmetic as group_features, one row at a time.
    const int pos = first + i;
    const int32_t tok = grid.indices[i];
    const Tensor content = ops::add(token_embeddings(std::span<const int32_t>(&tok, 1)),
                                    ops::slice_rows(chunk_, layout.positions[pos].chunk, 1));
    logits = feed(ops::add(content, ops::slice_rows(spe, pos, 1)), layout.target_group(pos));
  }
  if (final_state) *final_state = state;
  return grid;
}

void StarModel::save(Checkpoint& ckpt) const {
  ckpt.kind = "star";
  config_.write(ckpt.config);
  ckpt.add_all(store_.entries());
}

void StarModel::load(const Checkpoint& ckpt) {
  Config expected;
  config_.write(expected);
  require_matching_config(ckpt, "star", expected, "star");
  require_matching_config(ckpt, "star", expected, "container");
  auto entries = store_.entries();
  ckpt.restore(entries);
}

// ---------------------------------------------------------------------------
// Loss

Tensor chunked_ce(const Tensor& logits, std::span<const int32_t> targets, int groups, std::vector<double>* per_group) {
  require(logits.rank() == 2, "chunked_ce: logits must be [positions, K]");
  require(static_cast<int64_t>(targets.size()) == logits.rows(),
          "chunked_ce: " + std::to_string(targets.size()) + " targets for " + std::to_string(logits.rows()) +
              " logit rows");
  require(groups >= 1 && logits.rows() % groups == 0,
          "chunked_ce: " + std::to_string(logits.rows()) + " positions do not split into " + std::to_string(groups) +
              " groups");
  const int64_t size = logits.rows() / groups;
  const Tensor nll = ops::reshape(ops::nll_rows(logits, targets), {logits.rows(), 1});
  Tensor total;
  for (int g = 0; g < groups; ++g) {
    const Tensor ce = ops::mean(ops::slice_rows(nll, g * size, size));
    total = total.defined() ? ops::add(total, ce) : ce;
  }
  if (per_group) {
    // Reported values in double, from the logits directly.
    per_group->assign(groups, 0.0);
    const auto data = logits.data();
    const int64_t K = logits.cols();
    for (int64_t r = 0; r < logits.rows(); ++r) {
      const float* row = data.data() + r * K;
      const double mx = *std::max_element(row, row + K);
      double s = 0.0;
      for (int64_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k]) - mx);
      (*per_group)[r / size] += (std::log(s) + mx - row[targets[r]]) / static_cast<double>(size);
    }
  }
  return total;
}

std::vector<int32_t> grid_targets(const TokenGrid& grid) { return grid.indices; }

// ---------------------------------------------------------------------------
// Training

StarTrainer::StarTrainer(StarModel& model, std::vector<StarExample> examples, const StarTrainOptions& options)
    : model_(model),
      examples_(std::move(examples)),
      options_(options),
      adam_(model.params().entries(), nn::AdamOptions{options.learning_rate}),
      rng_(options.seed) {
  require(!examples_.empty(), "train-star: no training examples");
  require(options_.batch_size >= 1, "train-star: batch size must be >= 1");
  require(options_.steps >= 1, "train-star: steps must be >= 1");
}

StarStepLog StarTrainer::step() {
  StarStepLog log;
  log.step = adam_.step_count();
  log.learning_rate = nn::cosine_lr(options_.learning_rate, log.step, options_.steps);
  adam_.zero_grad();
  const int T = model_.config().timesteps;
  const float inv_batch = 1.0f / static_cast<float>(options_.batch_size);
  log.per_group.assign(static_cast<size_t>(T), 0.0);
  for (int b = 0; b < options_.batch_size; ++b) {
    const StarExample& ex = examples_[rng_() % examples_.size()];
    const ForwardResult fr = model_.forward(ex.inputs, ex.tokens);
    std::vector<double> groups;
    const Tensor loss = chunked_ce(fr.logits, grid_targets(ex.tokens), T, &groups);
    ops::scale(loss, inv_batch).backward();
    log.loss += loss.item() * inv_batch;
    for (int g = 0; g < T; ++g) log.per_group[g] += groups[g] * inv_batch;
  }
  adam_.step(log.learning_rate);
  return log;
}

double StarTrainer::evaluate() const {
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& ex : examples_) {
    std::vector<double> per_group;
    chunked_ce(model_.forward(ex.inputs, ex.tokens).logits, grid_targets(ex.tokens), model_.config().timesteps,
               &per_group);
    for (double g : per_group) total += g;
  }
  return total / static_cast<double>(examples_.size());
}

void StarTrainer::save(Checkpoint& ckpt) const {
  model_.save(ckpt);
  for (const auto& [name, t] : adam_.state_tensors()) ckpt.add(name, t);
  ckpt.metadata["train.step"] = std::to_string(adam_.step_count());
}

void StarTrainer::resume(const Checkpoint& ckpt) {
  model_.load(ckpt);
  for (const auto& [name, t] : adam_.state_tensors()) {
    if (const NamedArray* a = ckpt.find(name)) adam_.load_state(name, a->values);
  }
  const auto it = ckpt.metadata.find("train.step");
  const int64_t step = it == ckpt.metadata.end() ? 0 : std::stoll(it->second);
  adam_.set_step_count(step);
  rng_.discard(static_cast<unsigned long long>(step) * options_.batch_size);
}

}  // namespace star4d
