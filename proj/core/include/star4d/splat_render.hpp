#pragma once

// Differentiable Gaussian splatting with exact per-pixel evaluation.

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "star4d/camera.hpp"
#include "star4d/gaussians.hpp"
#include "star4d/tensor.hpp"

namespace star4d {

inline constexpr double kCovarianceEpsilon = 1e-4;
inline constexpr double kNearPlane = 0.01;

struct ProjectedSplat {
  Vec2 mean;                   // pixels
  Eigen::Matrix2d covariance;  // pixels^2, includes the epsilon regularizer
  double depth = 0.0;
  Vec3 color = Vec3::Zero();
  double opacity = 0.0;
  int source = -1;             // index of the originating Gaussian
};

// Drops Gaussians whose depth is at or in front of the near plane.
std::vector<ProjectedSplat> project(const GaussianFrame& frame, const CameraPose& camera);

struct CompositeImage {
  int height = 0, width = 0;
  std::vector<float> rgb;    // H*W*3
  std::vector<float> alpha;  // H*W
};

CompositeImage composite(std::span<const ProjectedSplat> splats, int height, int width,
                         const Vec3& background = Vec3::Zero());

struct SplatGradient {
  Vec2 mean = Vec2::Zero();
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();  // symmetric form
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();
};

// Vector-Jacobian product of composite(): gradients of sum(grad_rgb*rgb + grad_alpha*alpha).
std::vector<SplatGradient> composite_gradient(std::span<const ProjectedSplat> splats, int height,
                                              int width, const Vec3& background,
                                              std::span<const float> grad_rgb,
                                              std::span<const float> grad_alpha);

// Autograd rendering of arbitrary per-Gaussian feature channels.
// features: [n, F]; background: F values. Returns [H, W, F + 1], the last
// channel being accumulated alpha.
Tensor render_features(const GaussianParams& gaussians, const Tensor& features,
                       const CameraPose& camera, std::span<const float> background);

struct RenderResult {
  Tensor image;  // [H, W, 3]
  Tensor alpha;  // [H, W, 1]
};

RenderResult render(const GaussianParams& gaussians, const CameraPose& camera, const Vec3& background);

// Per-pixel flow from a splatted premultiplied displacement [H, W, 2] and the
// accumulated alpha [H, W, 1]: flow / max(alpha, kFlowAlphaFloor). Inside a
// splat this is the weight-normalized displacement; it fades to zero over the
// empty background.
inline constexpr float kFlowAlphaFloor = 0.01f;
Tensor normalize_flow(const Tensor& premultiplied, const Tensor& alpha);

// Screen-space means [n, 2]; Gaussians behind the near plane map to (0, 0).
Tensor project_means(const Tensor& positions, const CameraPose& camera);

// 8-bit binary PPM export of an [H, W, 3] image in [0, 1].
void write_ppm(const std::string& path, std::span<const float> rgb, int height, int width);
std::vector<float> read_ppm(const std::string& path, int& height, int& width);

}  // namespace star4d
