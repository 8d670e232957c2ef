#pragma once

// Synthetic animated scenes, their ground-truth renders and optical flow,
// and the on-disk dataset format.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "star4d/camera.hpp"
#include "star4d/gaussians.hpp"

namespace star4d {

struct Keyframe {
  double time = 0.0;
  Vec3 position = Vec3::Zero();
};

struct Primitive {
  std::vector<Keyframe> trajectory;  // sorted by time, at least one entry
  Vec3 scale{0.2, 0.2, 0.2};
  Vec3 color{1.0, 0.0, 0.0};
  double opacity = 1.0;

  // Piecewise-linear, constant outside the keyframe range.
  Vec3 center_at(double t) const;
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  Vec3 background{1.0, 1.0, 1.0};
  std::string caption;

  void validate() const;
  // Maps every keyframe time t to (timesteps - 1) - t.
  SceneSpec time_reversed(int timesteps) const;
  GaussianFrame gaussians_at(double t) const;
};

// Random scene of a few colored, moving ellipsoids with a describing caption.
SceneSpec random_scene(uint64_t seed, int timesteps);

// T x V x H x W x 3 render grid of one 4D object.
struct SpatioTemporalMatrix {
  int timesteps = 0, views = 0, height = 0, width = 0;
  std::vector<float> pixels;

  SpatioTemporalMatrix() = default;
  SpatioTemporalMatrix(int t, int v, int h, int w);
  size_t frame_size() const { return static_cast<size_t>(height) * width * 3; }
  size_t frame_offset(int t, int v) const { return (static_cast<size_t>(t) * views + v) * frame_size(); }
  std::span<float> frame(int t, int v) { return {pixels.data() + frame_offset(t, v), frame_size()}; }
  std::span<const float> frame(int t, int v) const {
    return {pixels.data() + frame_offset(t, v), frame_size()};
  }
  void validate() const;
};

// Pixel displacement from frame t to t + 1 for t < T - 1: (T-1) x V x H x W x 2.
struct FlowField {
  int timesteps = 0, views = 0, height = 0, width = 0;
  std::vector<float> vectors;

  FlowField() = default;
  FlowField(int t, int v, int h, int w);
  size_t frame_size() const { return static_cast<size_t>(height) * width * 2; }
  size_t frame_offset(int t, int v) const { return (static_cast<size_t>(t) * views + v) * frame_size(); }
  std::span<const float> frame(int t, int v) const {
    return {vectors.data() + frame_offset(t, v), frame_size()};
  }
  int pairs() const { return timesteps > 0 ? timesteps - 1 : 0; }
};

struct RenderedScene {
  SpatioTemporalMatrix matrix;
  FlowField flow;
};

RenderedScene render_scene(const SceneSpec& spec, const std::vector<CameraPose>& cameras, int timesteps);

struct DatasetObject {
  std::string caption;
  SpatioTemporalMatrix matrix;
  FlowField flow;
};

struct Dataset {
  std::vector<CameraPose> cameras;
  std::vector<DatasetObject> objects;

  int timesteps() const;
  int views() const { return static_cast<int>(cameras.size()); }
  int height() const;
  int width() const;
};

// Directory layout: manifest.txt plus obj_NNN/ folders holding t{T}_v{V}.ppm
// frames and flow_t{T}_v{V}.f32 raw little-endian float arrays.
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

std::string object_dir_name(size_t index);
std::string frame_name(int t, int v);  // t{T}_v{V}.ppm

}  // namespace star4d
