#include "star4d/scene_synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "star4d/splat_render.hpp"

namespace star4d {

namespace fs = std::filesystem;

Vec3 Primitive::center_at(double t) const {
  if (trajectory.empty()) throw std::invalid_argument("primitive without keyframes");
  if (t <= trajectory.front().time) return trajectory.front().position;
  if (t >= trajectory.back().time) return trajectory.back().position;
  for (size_t k = 1; k < trajectory.size(); ++k) {
    const Keyframe& a = trajectory[k - 1];
    const Keyframe& b = trajectory[k];
    if (t <= b.time) {
      const double span = b.time - a.time;
      const double u = span > 0.0 ? (t - a.time) / span : 1.0;
      return (1.0 - u) * a.position + u * b.position;
    }
  }
  return trajectory.back().position;
}

void SceneSpec::validate() const {
  auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  for (int k = 0; k < 3; ++k) {
    if (!in_unit(background[k])) throw std::invalid_argument("scene: background color outside [0,1]");
  }
  for (size_t i = 0; i < primitives.size(); ++i) {
    const auto& p = primitives[i];
    const std::string at = " (primitive " + std::to_string(i) + ")";
    if (p.trajectory.empty()) throw std::invalid_argument("scene: empty trajectory" + at);
    if (!in_unit(p.opacity)) throw std::invalid_argument("scene: opacity outside [0,1]" + at);
    for (int k = 0; k < 3; ++k) {
      if (!in_unit(p.color[k])) throw std::invalid_argument("scene: color outside [0,1]" + at);
      if (!(p.scale[k] > 0.0)) throw std::invalid_argument("scene: non-positive scale" + at);
    }
    for (size_t k = 1; k < p.trajectory.size(); ++k) {
      if (p.trajectory[k].time < p.trajectory[k - 1].time) {
        throw std::invalid_argument("scene: keyframes not sorted by time" + at);
      }
    }
  }
}

SceneSpec SceneSpec::time_reversed(int timesteps) const {
  SceneSpec out = *this;
  const double last = timesteps - 1;
  for (auto& p : out.primitives) {
    std::reverse(p.trajectory.begin(), p.trajectory.end());
    for (auto& k : p.trajectory) k.time = last - k.time;
  }
  return out;
}

GaussianFrame SceneSpec::gaussians_at(double t) const {
  GaussianFrame f;
  f.resize(static_cast<int64_t>(primitives.size()));
  for (size_t i = 0; i < primitives.size(); ++i) {
    const auto& p = primitives[i];
    const Vec3 c = p.center_at(t);
    for (int k = 0; k < 3; ++k) {
      f.positions[i * 3 + k] = static_cast<float>(c[k]);
      f.scales[i * 3 + k] = static_cast<float>(p.scale[k]);
      f.colors[i * 3 + k] = static_cast<float>(p.color[k]);
    }
    f.opacities[i] = static_cast<float>(p.opacity);
  }
  return f;
}

SceneSpec random_scene(uint64_t seed, int timesteps) {
  struct Named {
    const char* name;
    std::array<double, 3> rgb;
  };
  static constexpr std::array<Named, 8> palette{{{"red", {0.9, 0.1, 0.1}},
                                                 {"green", {0.1, 0.75, 0.2}},
                                                 {"blue", {0.15, 0.25, 0.9}},
                                                 {"yellow", {0.95, 0.85, 0.1}},
                                                 {"purple", {0.6, 0.2, 0.75}},
                                                 {"orange", {0.95, 0.5, 0.1}},
                                                 {"cyan", {0.1, 0.8, 0.85}},
                                                 {"black", {0.05, 0.05, 0.05}}}};
  struct Motion {
    const char* name;
    std::array<double, 3> dir;
  };
  static constexpr std::array<Motion, 5> motions{{{"left", {-1, 0, 0}},
                                                  {"right", {1, 0, 0}},
                                                  {"up", {0, 1, 0}},
                                                  {"down", {0, -1, 0}},
                                                  {"still", {0, 0, 0}}}};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count_dist(2, 3);
  std::uniform_real_distribution<double> pos_dist(-0.35, 0.35);
  std::uniform_real_distribution<double> scale_dist(0.12, 0.25);
  std::uniform_real_distribution<double> speed_dist(0.06, 0.12);
  std::uniform_int_distribution<size_t> color_dist(0, palette.size() - 1);
  std::uniform_int_distribution<size_t> motion_dist(0, motions.size() - 1);

  SceneSpec spec;
  const int count = count_dist(rng);
  std::vector<size_t> used_colors;
  for (int i = 0; i < count; ++i) {
    size_t ci = color_dist(rng);
    while (std::find(used_colors.begin(), used_colors.end(), ci) != used_colors.end()) {
      ci = (ci + 1) % palette.size();
    }
    used_colors.push_back(ci);
    const Motion& m = motions[motion_dist(rng)];
    Primitive p;
    p.color = Vec3(palette[ci].rgb[0], palette[ci].rgb[1], palette[ci].rgb[2]);
    p.scale = Vec3(scale_dist(rng), scale_dist(rng), scale_dist(rng));
    p.opacity = 0.95;
    const Vec3 start(pos_dist(rng), pos_dist(rng), pos_dist(rng));
    const double speed = speed_dist(rng);
    const Vec3 dir(m.dir[0], m.dir[1], m.dir[2]);
    const double last = std::max(0, timesteps - 1);
    p.trajectory = {{0.0, start}, {last, start + speed * last * dir}};
    spec.primitives.push_back(p);
    if (!spec.caption.empty()) spec.caption += " and ";
    spec.caption += std::string("a ") + palette[ci].name + " blob " +
                    (m.dir == std::array<double, 3>{0, 0, 0} ? "staying still" : std::string("moving ") + m.name);
  }
  spec.validate();
  return spec;
}

SpatioTemporalMatrix::SpatioTemporalMatrix(int t, int v, int h, int w)
    : timesteps(t), views(v), height(h), width(w),
      pixels(static_cast<size_t>(t) * v * h * w * 3, 0.0f) {}

void SpatioTemporalMatrix::validate() const {
  if (timesteps < 1 || views < 1 || height < 1 || width < 1) {
    throw std::invalid_argument("matrix: dimensions must be positive");
  }
  if (pixels.size() != static_cast<size_t>(timesteps) * views * frame_size()) {
    throw std::invalid_argument("matrix: pixel buffer does not match declared shape");
  }
  for (float p : pixels) {
    if (!(p >= 0.0f && p <= 1.0f)) throw std::invalid_argument("matrix: pixel outside [0,1]");
  }
}

FlowField::FlowField(int t, int v, int h, int w)
    : timesteps(t), views(v), height(h), width(w),
      vectors(static_cast<size_t>(std::max(0, t - 1)) * v * h * w * 2, 0.0f) {}

RenderedScene render_scene(const SceneSpec& spec, const std::vector<CameraPose>& cameras, int timesteps) {
  spec.validate();
  if (timesteps < 1) throw std::invalid_argument("render_scene: timesteps must be >= 1");
  if (cameras.empty()) throw std::invalid_argument("render_scene: no cameras");
  const int views = static_cast<int>(cameras.size());
  const int h = cameras.front().height, w = cameras.front().width;
  for (const auto& c : cameras) {
    if (c.height != h || c.width != w) throw std::invalid_argument("render_scene: cameras differ in size");
  }
  RenderedScene out{SpatioTemporalMatrix(timesteps, views, h, w), FlowField(timesteps, views, h, w)};
  NoGradGuard no_grad;
  const std::array<float, 5> background{static_cast<float>(spec.background.x()),
                                        static_cast<float>(spec.background.y()),
                                        static_cast<float>(spec.background.z()), 0.0f, 0.0f};
  const auto n = static_cast<int64_t>(spec.primitives.size());
  for (int t = 0; t < timesteps; ++t) {
    const GaussianParams now = GaussianParams::from_frame(spec.gaussians_at(t));
    const GaussianParams next = GaussianParams::from_frame(spec.gaussians_at(std::min(t + 1, timesteps - 1)));
    for (int v = 0; v < views; ++v) {
      const Tensor flow = ops::sub(project_means(next.positions, cameras[v]),
                                   project_means(now.positions, cameras[v]));
      const Tensor features = n > 0 ? ops::concat_cols({now.colors, flow}) : Tensor::zeros({0, 5});
      const Tensor img = render_features(now, features, cameras[v], background);
      const Tensor flat = ops::reshape(img, {static_cast<int64_t>(h) * w, 6});
      const auto px = img.data();
      const auto fl = normalize_flow(ops::slice_cols(flat, 3, 2), ops::slice_cols(flat, 5, 1)).to_vector();
      auto frame = out.matrix.frame(t, v);
      for (size_t p = 0; p < static_cast<size_t>(h) * w; ++p) {
        for (int k = 0; k < 3; ++k) frame[p * 3 + k] = std::clamp(px[p * 6 + k], 0.0f, 1.0f);
      }
      if (t + 1 < timesteps) {
        float* dst = out.flow.vectors.data() + out.flow.frame_offset(t, v);
        for (size_t p = 0; p < static_cast<size_t>(h) * w; ++p) {
          dst[p * 2] = fl[p * 2];
          dst[p * 2 + 1] = fl[p * 2 + 1];
        }
      }
    }
  }
  return out;
}

int Dataset::timesteps() const { return objects.empty() ? 0 : objects.front().matrix.timesteps; }
int Dataset::height() const { return cameras.empty() ? 0 : cameras.front().height; }
int Dataset::width() const { return cameras.empty() ? 0 : cameras.front().width; }

std::string object_dir_name(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "obj_%03zu", index);
  return buf;
}

std::string frame_name(int t, int v) { return "t" + std::to_string(t) + "_v" + std::to_string(v) + ".ppm"; }

namespace {

std::string flow_name(int t, int v) { return "flow_t" + std::to_string(t) + "_v" + std::to_string(v) + ".f32"; }

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

[[noreturn]] void manifest_error(const fs::path& path, const std::string& field, const std::string& why) {
  throw std::runtime_error("malformed manifest " + path.string() + ": field '" + field + "' " + why);
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& root) {
  if (dataset.cameras.empty()) throw std::invalid_argument("save_dataset: no cameras");
  const int T = dataset.timesteps(), V = dataset.views(), H = dataset.height(), W = dataset.width();
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + root.string() + ": " + ec.message());

  std::ostringstream manifest;
  manifest << "star4d-dataset 1\n"
           << "timesteps " << T << "\nviews " << V << "\nheight " << H << "\nwidth " << W << "\n"
           << "objects " << dataset.objects.size() << "\n";
  for (int v = 0; v < V; ++v) {
    const auto& c = dataset.cameras[v];
    manifest << "camera " << v;
    for (const Vec3* vec : {&c.position, &c.target, &c.up}) {
      for (int k = 0; k < 3; ++k) manifest << ' ' << fmt_double((*vec)[k]);
    }
    manifest << ' ' << fmt_double(c.fov_y) << '\n';
  }
  for (size_t i = 0; i < dataset.objects.size(); ++i) {
    const auto& obj = dataset.objects[i];
    if (obj.matrix.timesteps != T || obj.matrix.views != V || obj.matrix.height != H || obj.matrix.width != W) {
      throw std::invalid_argument("save_dataset: object " + std::to_string(i) + " has inconsistent dimensions");
    }
    const fs::path dir = root / object_dir_name(i);
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    for (int t = 0; t < T; ++t) {
      for (int v = 0; v < V; ++v) {
        write_ppm((dir / frame_name(t, v)).string(), obj.matrix.frame(t, v), H, W);
        if (t + 1 < T) {
          const fs::path fp = dir / flow_name(t, v);
          std::ofstream out(fp, std::ios::binary);
          const auto f = obj.flow.frame(t, v);
          out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
          if (!out) throw std::runtime_error("write failed: " + fp.string());
        }
      }
    }
    manifest << "object " << i << ' ' << object_dir_name(i) << ' ' << obj.caption << '\n';
  }
  const fs::path mp = root / "manifest.txt";
  std::ofstream out(mp);
  out << manifest.str();
  if (!out) throw std::runtime_error("write failed: " + mp.string());
}

Dataset load_dataset(const fs::path& root) {
  const fs::path mp = root / "manifest.txt";
  if (!fs::is_directory(root)) throw std::runtime_error("dataset directory not found: " + root.string());
  std::ifstream in(mp);
  if (!in) throw std::runtime_error("cannot read manifest: " + mp.string());

  std::string line;
  if (!std::getline(in, line) || line != "star4d-dataset 1") manifest_error(mp, "header", "missing or unsupported");

  auto read_int = [&](const std::string& key) {
    if (!std::getline(in, line)) manifest_error(mp, key, "missing");
    std::istringstream ls(line);
    std::string name;
    long long value = 0;
    if (!(ls >> name) || name != key) manifest_error(mp, key, "expected, got '" + line + "'");
    if (!(ls >> value) || value < 0) manifest_error(mp, key, "is not a non-negative integer");
    return value;
  };
  const int T = static_cast<int>(read_int("timesteps"));
  const int V = static_cast<int>(read_int("views"));
  const int H = static_cast<int>(read_int("height"));
  const int W = static_cast<int>(read_int("width"));
  const auto count = static_cast<size_t>(read_int("objects"));
  if (T < 1) manifest_error(mp, "timesteps", "must be >= 1");
  if (V < 1) manifest_error(mp, "views", "must be >= 1");
  if (H < 1) manifest_error(mp, "height", "must be >= 1");
  if (W < 1) manifest_error(mp, "width", "must be >= 1");

  Dataset ds;
  for (int v = 0; v < V; ++v) {
    const std::string field = "camera " + std::to_string(v);
    if (!std::getline(in, line)) manifest_error(mp, field, "missing");
    std::istringstream ls(line);
    std::string key;
    int index = -1;
    std::array<double, 10> nums{};
    if (!(ls >> key >> index) || key != "camera" || index != v) manifest_error(mp, field, "expected");
    for (double& x : nums) {
      if (!(ls >> x)) manifest_error(mp, field, "needs 10 numbers");
    }
    CameraPose c;
    c.position = Vec3(nums[0], nums[1], nums[2]);
    c.target = Vec3(nums[3], nums[4], nums[5]);
    c.up = Vec3(nums[6], nums[7], nums[8]);
    c.fov_y = nums[9];
    c.height = H;
    c.width = W;
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      manifest_error(mp, field, e.what());
    }
    ds.cameras.push_back(c);
  }
  for (size_t i = 0; i < count; ++i) {
    const std::string field = "object " + std::to_string(i);
    if (!std::getline(in, line)) manifest_error(mp, field, "missing");
    std::istringstream ls(line);
    std::string key, dir_name;
    size_t index = 0;
    if (!(ls >> key >> index >> dir_name) || key != "object" || index != i) manifest_error(mp, field, "expected");
    std::string caption;
    std::getline(ls >> std::ws, caption);

    DatasetObject obj{caption, SpatioTemporalMatrix(T, V, H, W), FlowField(T, V, H, W)};
    const fs::path dir = root / dir_name;
    for (int t = 0; t < T; ++t) {
      for (int v = 0; v < V; ++v) {
        int fh = 0, fw = 0;
        const auto rgb = read_ppm((dir / frame_name(t, v)).string(), fh, fw);
        if (fh != H || fw != W) {
          throw std::runtime_error("frame " + (dir / frame_name(t, v)).string() + " is " + std::to_string(fh) +
                                   "x" + std::to_string(fw) + ", manifest says " + std::to_string(H) + "x" +
                                   std::to_string(W));
        }
        std::copy(rgb.begin(), rgb.end(), obj.matrix.frame(t, v).begin());
        if (t + 1 < T) {
          const fs::path fp = dir / flow_name(t, v);
          std::ifstream fin(fp, std::ios::binary);
          if (!fin) throw std::runtime_error("cannot read flow file " + fp.string());
          float* dst = obj.flow.vectors.data() + obj.flow.frame_offset(t, v);
          const auto bytes = static_cast<std::streamsize>(obj.flow.frame_size() * sizeof(float));
          fin.read(reinterpret_cast<char*>(dst), bytes);
          if (fin.gcount() != bytes || fin.peek() != std::char_traits<char>::eof()) {
            throw std::runtime_error("flow file has wrong size: " + fp.string());
          }
        }
      }
    }
    ds.objects.push_back(std::move(obj));
  }
  return ds;
}

}  // namespace star4d
