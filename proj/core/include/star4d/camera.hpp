#pragma once

#include <array>
#include <vector>

#include <Eigen/Core>

namespace star4d {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

// Pinhole look-at camera. Image x grows right, image y grows down; pixel
// (i, j) covers [j, j+1) x [i, i+1) so the principal point is (W/2, H/2).
struct CameraPose {
  Vec3 position{0.0, 0.0, 2.0};
  Vec3 target{0.0, 0.0, 0.0};
  Vec3 up{0.0, 1.0, 0.0};
  double fov_y = 0.8;
  int height = 32;
  int width = 32;

  // Throws std::invalid_argument when an invariant does not hold.
  void validate() const;
};

// Orthonormal camera basis plus intrinsics at a given resolution.
struct CameraFrame {
  Vec3 origin;
  Vec3 right, down, forward;
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;

  static CameraFrame from(const CameraPose& pose);
  static CameraFrame from(const CameraPose& pose, int height, int width);

  Vec3 to_camera(const Vec3& world) const;
  // Continuous pixel coordinates; only meaningful for positive depth.
  Vec2 project(const Vec3& world) const;
};

struct PlueckerRay {
  Vec3 direction;
  Vec3 moment;

  static PlueckerRay through(const Vec3& origin, const Vec3& direction);
  std::array<double, 6> coefficients() const;
};

std::vector<CameraPose> make_orbit_cameras(int views, double radius, double elevation,
                                           const Vec3& target, double fov_y = 0.8, int height = 32,
                                           int width = 32);

// One ray per cell center of an h x w grid over the camera's image plane,
// row-major.
std::vector<PlueckerRay> pluecker_grid(const CameraPose& camera, int h, int w);

}  // namespace star4d
