#include "star4d/camera.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace star4d {

void CameraPose::validate() const {
  if (!position.allFinite() || !target.allFinite() || !up.allFinite()) {
    throw std::invalid_argument("camera: non-finite pose");
  }
  if ((position - target).norm() < 1e-12) {
    throw std::invalid_argument("camera: position equals target");
  }
  if (std::abs(up.norm() - 1.0) > 1e-6) throw std::invalid_argument("camera: up is not unit length");
  if (!(fov_y > 0.0 && fov_y < std::numbers::pi)) {
    throw std::invalid_argument("camera: fov_y must lie in (0, pi)");
  }
  if (height < 1 || width < 1) throw std::invalid_argument("camera: image size must be positive");
  const Vec3 forward = (target - position).normalized();
  if (forward.cross(up).norm() < 1e-9) throw std::invalid_argument("camera: up is parallel to view");
}

CameraFrame CameraFrame::from(const CameraPose& pose) { return from(pose, pose.height, pose.width); }

CameraFrame CameraFrame::from(const CameraPose& pose, int height, int width) {
  pose.validate();
  CameraFrame f;
  f.origin = pose.position;
  f.forward = (pose.target - pose.position).normalized();
  f.right = f.forward.cross(pose.up).normalized();
  f.down = f.forward.cross(f.right);
  const double focal = 0.5 * static_cast<double>(height) / std::tan(0.5 * pose.fov_y);
  f.fx = focal;
  f.fy = focal;
  f.cx = 0.5 * static_cast<double>(width);
  f.cy = 0.5 * static_cast<double>(height);
  return f;
}

Vec3 CameraFrame::to_camera(const Vec3& world) const {
  const Vec3 p = world - origin;
  return {p.dot(right), p.dot(down), p.dot(forward)};
}

Vec2 CameraFrame::project(const Vec3& world) const {
  const Vec3 c = to_camera(world);
  return {cx + fx * c.x() / c.z(), cy + fy * c.y() / c.z()};
}

PlueckerRay PlueckerRay::through(const Vec3& origin, const Vec3& direction) {
  const Vec3 d = direction.normalized();
  return {d, origin.cross(d)};
}

std::array<double, 6> PlueckerRay::coefficients() const {
  return {direction.x(), direction.y(), direction.z(), moment.x(), moment.y(), moment.z()};
}

std::vector<CameraPose> make_orbit_cameras(int views, double radius, double elevation,
                                           const Vec3& target, double fov_y, int height, int width) {
  if (views < 1) throw std::invalid_argument("make_orbit_cameras: views must be >= 1");
  if (!(radius > 0.0)) throw std::invalid_argument("make_orbit_cameras: radius must be > 0");
  std::vector<CameraPose> cameras;
  cameras.reserve(static_cast<size_t>(views));
  for (int k = 0; k < views; ++k) {
    const double azimuth = 2.0 * std::numbers::pi * k / views;
    CameraPose c;
    c.position = target + radius * Vec3(std::cos(elevation) * std::sin(azimuth), std::sin(elevation),
                                        std::cos(elevation) * std::cos(azimuth));
    c.target = target;
    c.up = Vec3(0.0, 1.0, 0.0);
    c.fov_y = fov_y;
    c.height = height;
    c.width = width;
    c.validate();
    cameras.push_back(c);
  }
  return cameras;
}

std::vector<PlueckerRay> pluecker_grid(const CameraPose& camera, int h, int w) {
  if (h < 1 || w < 1) throw std::invalid_argument("pluecker_grid: grid size must be >= 1");
  const CameraFrame f = CameraFrame::from(camera, h, w);
  std::vector<PlueckerRay> rays;
  rays.reserve(static_cast<size_t>(h) * w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double xc = (j + 0.5 - f.cx) / f.fx;
      const double yc = (i + 0.5 - f.cy) / f.fy;
      rays.push_back(PlueckerRay::through(f.origin, xc * f.right + yc * f.down + f.forward));
    }
  }
  return rays;
}

}  // namespace star4d
