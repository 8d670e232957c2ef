#include "star4d/splat_render.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace star4d {

namespace {

using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Vec4 = Eigen::Vector4d;

constexpr double kMinWeight = 1e-7;
constexpr double kMinTransmittance = 1e-7;

// Screen-space splat with precomputed inverse covariance and pixel bounds.
struct CoreSplat {
  Vec2 mean;
  Mat2 covariance;
  double conic_a = 0.0, conic_b = 0.0, conic_c = 0.0;
  double opacity = 0.0;
  double depth = 0.0;
  int source = -1;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

struct CoreGrad {
  Vec2 mean = Vec2::Zero();
  Mat2 covariance = Mat2::Zero();
  double opacity = 0.0;
  std::vector<double> feature;
};

CoreSplat make_core(const Vec2& mean, const Mat2& cov, double opacity, double depth, int source,
                    int height, int width) {
  CoreSplat s;
  s.mean = mean;
  s.covariance = cov;
  s.opacity = opacity;
  s.depth = depth;
  s.source = source;
  const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
  s.conic_a = cov(1, 1) / det;
  s.conic_b = -cov(0, 1) / det;
  s.conic_c = cov(0, 0) / det;
  const double mid = 0.5 * (cov(0, 0) + cov(1, 1));
  const double lambda_max = mid + std::sqrt(std::max(0.1, mid * mid - det));
  // The box covers every pixel whose weight can reach kMinWeight, so culling
  // never removes a contribution the per-pixel threshold would keep.
  if (!(opacity > kMinWeight)) return s;
  const double sigmas = std::sqrt(2.0 * std::log(opacity / kMinWeight));
  const double radius = std::ceil(sigmas * std::sqrt(lambda_max));
  if (!std::isfinite(radius) || !mean.allFinite()) return s;
  s.x0 = std::max(0, static_cast<int>(std::floor(mean.x() - radius)));
  s.x1 = std::min(width - 1, static_cast<int>(std::ceil(mean.x() + radius)));
  s.y0 = std::max(0, static_cast<int>(std::floor(mean.y() - radius)));
  s.y1 = std::min(height - 1, static_cast<int>(std::ceil(mean.y() + radius)));
  return s;
}

// Stable depth order; equal depths keep input order.
std::vector<int> depth_order(const std::vector<CoreSplat>& splats) {
  std::vector<int> order(splats.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (splats[a].depth != splats[b].depth) return splats[a].depth < splats[b].depth;
    return splats[a].source < splats[b].source;
  });
  return order;
}

struct Contribution {
  int splat;
  double alpha;
  double gaussian;
  double dx, dy;
  double transmittance;  // before this splat
};

// Front-to-back list of splats touching pixel (px, py).
void pixel_contributions(const std::vector<CoreSplat>& splats, const std::vector<int>& order, int px,
                         int py, std::vector<Contribution>& out, double& final_transmittance) {
  out.clear();
  double t = 1.0;
  const double cx = px + 0.5, cy = py + 0.5;
  for (int idx : order) {
    const CoreSplat& s = splats[idx];
    if (px < s.x0 || px > s.x1 || py < s.y0 || py > s.y1) continue;
    const double dx = cx - s.mean.x(), dy = cy - s.mean.y();
    const double power = -0.5 * (s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy);
    if (power > 0.0) continue;
    const double g = std::exp(power);
    const double a = s.opacity * g;
    if (a < kMinWeight) continue;
    out.push_back({idx, a, g, dx, dy, t});
    t *= (1.0 - a);
    if (t < kMinTransmittance) break;
  }
  final_transmittance = t;
}

// out: H*W*(F+1); features: per splat F doubles.
void composite_core(const std::vector<CoreSplat>& splats, const std::vector<double>& features, int channels,
                    int height, int width, std::span<const double> background, std::vector<double>& out) {
  const std::vector<int> order = depth_order(splats);
  out.assign(static_cast<size_t>(height) * width * (channels + 1), 0.0);
  std::vector<Contribution> contrib;
  for (int py = 0; py < height; ++py) {
    for (int px = 0; px < width; ++px) {
      double t_final = 1.0;
      pixel_contributions(splats, order, px, py, contrib, t_final);
      double* o = out.data() + (static_cast<size_t>(py) * width + px) * (channels + 1);
      double alpha = 0.0;
      for (const auto& c : contrib) {
        const double w = c.alpha * c.transmittance;
        const double* f = features.data() + static_cast<size_t>(c.splat) * channels;
        for (int k = 0; k < channels; ++k) o[k] += w * f[k];
        alpha += w;
      }
      for (int k = 0; k < channels; ++k) o[k] += t_final * background[k];
      o[channels] = alpha;
    }
  }
}

std::vector<CoreGrad> composite_core_backward(const std::vector<CoreSplat>& splats,
                                              const std::vector<double>& features, int channels,
                                              int height, int width, std::span<const double> background,
                                              std::span<const double> grad_out) {
  const std::vector<int> order = depth_order(splats);
  std::vector<CoreGrad> grads(splats.size());
  for (auto& g : grads) g.feature.assign(static_cast<size_t>(channels), 0.0);
  std::vector<Contribution> contrib;
  std::vector<double> rest(static_cast<size_t>(channels));
  for (int py = 0; py < height; ++py) {
    for (int px = 0; px < width; ++px) {
      double t_final = 1.0;
      pixel_contributions(splats, order, px, py, contrib, t_final);
      if (contrib.empty()) continue;
      const double* go = grad_out.data() + (static_cast<size_t>(py) * width + px) * (channels + 1);
      // rest = what lies behind the current splat, seen through nothing.
      for (int k = 0; k < channels; ++k) rest[k] = background[k];
      double rest_alpha = 0.0;
      for (auto it = contrib.rbegin(); it != contrib.rend(); ++it) {
        const CoreSplat& s = splats[it->splat];
        CoreGrad& g = grads[it->splat];
        const double* f = features.data() + static_cast<size_t>(it->splat) * channels;
        const double a = it->alpha, t = it->transmittance;
        double d_alpha = go[channels] * t * (1.0 - rest_alpha);
        for (int k = 0; k < channels; ++k) {
          d_alpha += go[k] * t * (f[k] - rest[k]);
          g.feature[k] += go[k] * a * t;
          rest[k] = f[k] * a + (1.0 - a) * rest[k];
        }
        rest_alpha = a + (1.0 - a) * rest_alpha;

        g.opacity += d_alpha * it->gaussian;
        const double d_power = d_alpha * a;
        const double dx = it->dx, dy = it->dy;
        // d(power)/d(mean) = conic * delta, since delta = pixel - mean.
        g.mean.x() += d_power * (s.conic_a * dx + s.conic_b * dy);
        g.mean.y() += d_power * (s.conic_b * dx + s.conic_c * dy);
        // d(power)/d(conic) in symmetric-matrix form, then through the inverse.
        Mat2 g_conic;
        g_conic << -0.5 * dx * dx, -0.5 * dx * dy, -0.5 * dx * dy, -0.5 * dy * dy;
        g_conic *= d_power;
        Mat2 conic;
        conic << s.conic_a, s.conic_b, s.conic_b, s.conic_c;
        g.covariance -= conic * g_conic * conic;
      }
    }
  }
  return grads;
}

Mat3 rotation_matrix(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// Gradient of sum(G .* R(q)) with respect to the unit quaternion q.
Vec4 rotation_vjp(const Vec4& q, const Mat3& g) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4 out;
  out[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  out[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                w * g(2, 1) - 2 * x * g(2, 2));
  out[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                z * g(2, 1) - 2 * y * g(2, 2));
  out[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
                x * g(2, 0) + y * g(2, 1));
  return out;
}

// Forward projection of one Gaussian with everything needed for its backward pass.
struct Projection {
  bool visible = false;
  Vec3 cam = Vec3::Zero();
  Vec4 q_unit = Vec4::Zero();
  double q_norm = 1.0;
  Vec3 scale = Vec3::Zero();
  Mat3 rot = Mat3::Identity();
  Mat3 sigma3 = Mat3::Zero();
  Mat23 jacobian = Mat23::Zero();
  Mat23 transform = Mat23::Zero();
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Zero();
};

Mat3 camera_basis(const CameraFrame& f) {
  Mat3 w;
  w.row(0) = f.right.transpose();
  w.row(1) = f.down.transpose();
  w.row(2) = f.forward.transpose();
  return w;
}

Projection project_one(const CameraFrame& f, const Mat3& basis, const float* pos, const float* scale,
                       const float* rot) {
  Projection p;
  p.cam = basis * (Vec3(pos[0], pos[1], pos[2]) - f.origin);
  if (!(p.cam.z() > kNearPlane)) return p;
  p.visible = true;
  const double X = p.cam.x(), Y = p.cam.y(), Z = p.cam.z();
  p.mean = Vec2(f.cx + f.fx * X / Z, f.cy + f.fy * Y / Z);
  Vec4 q(rot[0], rot[1], rot[2], rot[3]);
  p.q_norm = std::max(q.norm(), 1e-12);
  p.q_unit = q / p.q_norm;
  p.scale = Vec3(scale[0], scale[1], scale[2]);
  p.rot = rotation_matrix(p.q_unit);
  const Mat3 m = p.rot * p.scale.asDiagonal();
  p.sigma3 = m * m.transpose();
  p.jacobian << f.fx / Z, 0.0, -f.fx * X / (Z * Z), 0.0, f.fy / Z, -f.fy * Y / (Z * Z);
  p.transform = p.jacobian * basis;
  p.cov = p.transform * p.sigma3 * p.transform.transpose();
  p.cov(0, 0) += kCovarianceEpsilon;
  p.cov(1, 1) += kCovarianceEpsilon;
  return p;
}

struct ProjectionGrad {
  Vec3 position = Vec3::Zero();
  Vec3 scale = Vec3::Zero();
  Vec4 rotation = Vec4::Zero();
};

// Backward through the mean (pixels) part of the projection.
Vec3 mean_to_camera_grad(const CameraFrame& f, const Projection& p, const Vec2& g_mean) {
  const double X = p.cam.x(), Y = p.cam.y(), Z = p.cam.z();
  return {g_mean.x() * f.fx / Z, g_mean.y() * f.fy / Z,
          -g_mean.x() * f.fx * X / (Z * Z) - g_mean.y() * f.fy * Y / (Z * Z)};
}

ProjectionGrad project_one_backward(const CameraFrame& f, const Mat3& basis, const Projection& p,
                                    const Vec2& g_mean, const Mat2& g_cov) {
  ProjectionGrad out;
  if (!p.visible) return out;
  const double X = p.cam.x(), Y = p.cam.y(), Z = p.cam.z();
  Vec3 g_cam = mean_to_camera_grad(f, p, g_mean);

  // cov = T S T^T with T = J W.
  const Mat23 g_transform = 2.0 * g_cov * p.transform * p.sigma3;
  const Mat3 g_sigma = p.transform.transpose() * g_cov * p.transform;
  const Mat23 g_jac = g_transform * basis.transpose();
  const double z2 = Z * Z, z3 = z2 * Z;
  g_cam.x() += g_jac(0, 2) * (-f.fx / z2);
  g_cam.y() += g_jac(1, 2) * (-f.fy / z2);
  g_cam.z() += g_jac(0, 0) * (-f.fx / z2) + g_jac(0, 2) * (2.0 * f.fx * X / z3) +
               g_jac(1, 1) * (-f.fy / z2) + g_jac(1, 2) * (2.0 * f.fy * Y / z3);
  out.position = basis.transpose() * g_cam;

  // sigma3 = M M^T with M = R diag(s).
  const Mat3 m = p.rot * p.scale.asDiagonal();
  const Mat3 g_m = 2.0 * g_sigma * m;
  for (int c = 0; c < 3; ++c) out.scale[c] = g_m.col(c).dot(p.rot.col(c));
  const Mat3 g_rot = g_m * p.scale.asDiagonal();
  const Vec4 g_unit = rotation_vjp(p.q_unit, g_rot);
  out.rotation = (g_unit - p.q_unit * p.q_unit.dot(g_unit)) / p.q_norm;
  return out;
}

}  // namespace

std::vector<ProjectedSplat> project(const GaussianFrame& frame, const CameraPose& camera) {
  const CameraFrame f = CameraFrame::from(camera);
  const Mat3 basis = camera_basis(f);
  std::vector<ProjectedSplat> out;
  for (int64_t i = 0; i < frame.count(); ++i) {
    const Projection p = project_one(f, basis, &frame.positions[i * 3], &frame.scales[i * 3],
                                     &frame.rotations[i * 4]);
    if (!p.visible) continue;
    ProjectedSplat s;
    s.mean = p.mean;
    s.covariance = p.cov;
    s.depth = p.cam.z();
    s.color = Vec3(frame.colors[i * 3], frame.colors[i * 3 + 1], frame.colors[i * 3 + 2]);
    s.opacity = frame.opacities[i];
    s.source = static_cast<int>(i);
    out.push_back(s);
  }
  return out;
}

namespace {

std::vector<CoreSplat> core_from(std::span<const ProjectedSplat> splats, int height, int width,
                                 std::vector<double>& features) {
  std::vector<CoreSplat> core;
  features.clear();
  for (size_t i = 0; i < splats.size(); ++i) {
    const auto& s = splats[i];
    // Ties in depth fall back to list position.
    core.push_back(make_core(s.mean, s.covariance, s.opacity, s.depth, static_cast<int>(i), height, width));
    for (int k = 0; k < 3; ++k) features.push_back(s.color[k]);
  }
  return core;
}

}  // namespace

CompositeImage composite(std::span<const ProjectedSplat> splats, int height, int width,
                         const Vec3& background) {
  if (height < 1 || width < 1) throw std::invalid_argument("composite: image size must be positive");
  std::vector<double> features;
  const auto core = core_from(splats, height, width, features);
  const double bg[3] = {background.x(), background.y(), background.z()};
  std::vector<double> out;
  composite_core(core, features, 3, height, width, bg, out);
  CompositeImage img;
  img.height = height;
  img.width = width;
  img.rgb.resize(static_cast<size_t>(height) * width * 3);
  img.alpha.resize(static_cast<size_t>(height) * width);
  for (size_t p = 0; p < img.alpha.size(); ++p) {
    for (int k = 0; k < 3; ++k) img.rgb[p * 3 + k] = static_cast<float>(std::clamp(out[p * 4 + k], 0.0, 1.0));
    img.alpha[p] = static_cast<float>(std::clamp(out[p * 4 + 3], 0.0, 1.0));
  }
  return img;
}

std::vector<SplatGradient> composite_gradient(std::span<const ProjectedSplat> splats, int height,
                                              int width, const Vec3& background,
                                              std::span<const float> grad_rgb,
                                              std::span<const float> grad_alpha) {
  const size_t pixels = static_cast<size_t>(height) * width;
  if (grad_rgb.size() != pixels * 3 || grad_alpha.size() != pixels) {
    throw std::invalid_argument("composite_gradient: gradient buffer size mismatch");
  }
  std::vector<double> features;
  const auto core = core_from(splats, height, width, features);
  std::vector<double> g(pixels * 4);
  for (size_t p = 0; p < pixels; ++p) {
    for (int k = 0; k < 3; ++k) g[p * 4 + k] = grad_rgb[p * 3 + k];
    g[p * 4 + 3] = grad_alpha[p];
  }
  const double bg[3] = {background.x(), background.y(), background.z()};
  const auto core_grads = composite_core_backward(core, features, 3, height, width, bg, g);
  std::vector<SplatGradient> out(splats.size());
  for (size_t i = 0; i < splats.size(); ++i) {
    out[i].mean = core_grads[i].mean;
    out[i].covariance = core_grads[i].covariance;
    out[i].opacity = core_grads[i].opacity;
    out[i].color = Vec3(core_grads[i].feature[0], core_grads[i].feature[1], core_grads[i].feature[2]);
  }
  return out;
}

Tensor render_features(const GaussianParams& gaussians, const Tensor& features, const CameraPose& camera,
                       std::span<const float> background) {
  const int64_t n = gaussians.count();
  const int channels = static_cast<int>(features.cols());
  if (features.rows() != n) throw std::invalid_argument("render_features: feature rows != gaussian count");
  if (static_cast<int>(background.size()) != channels) {
    throw std::invalid_argument("render_features: background has wrong channel count");
  }
  const int height = camera.height, width = camera.width;
  const CameraFrame f = CameraFrame::from(camera);
  const Mat3 basis = camera_basis(f);

  const auto pos = gaussians.positions.data(), scl = gaussians.scales.data(),
             rot = gaussians.rotations.data(), opa = gaussians.opacities.data(), feat = features.data();
  std::vector<Projection> projections(static_cast<size_t>(n));
  std::vector<CoreSplat> core;
  std::vector<double> core_features;
  for (int64_t i = 0; i < n; ++i) {
    projections[i] = project_one(f, basis, &pos[i * 3], &scl[i * 3], &rot[i * 4]);
    if (!projections[i].visible) continue;
    core.push_back(make_core(projections[i].mean, projections[i].cov, opa[i], projections[i].cam.z(),
                             static_cast<int>(i), height, width));
    for (int k = 0; k < channels; ++k) core_features.push_back(feat[i * channels + k]);
  }
  std::vector<double> bg(background.begin(), background.end());
  std::vector<double> out;
  composite_core(core, core_features, channels, height, width, bg, out);
  std::vector<float> value(out.begin(), out.end());

  auto p_pos = gaussians.positions.node_ptr(), p_scl = gaussians.scales.node_ptr(),
       p_rot = gaussians.rotations.node_ptr(), p_opa = gaussians.opacities.node_ptr(),
       p_feat = features.node_ptr();
  return Tensor::make_result(
      {height, width, channels + 1}, std::move(value),
      {gaussians.positions, gaussians.scales, gaussians.rotations, gaussians.opacities, features},
      [=, projections = std::move(projections), core = std::move(core),
       core_features = std::move(core_features), bg = std::move(bg)](detail::Node& self) {
        std::vector<double> g(self.grad.begin(), self.grad.end());
        const auto grads = composite_core_backward(core, core_features, channels, height, width, bg, g);
        for (size_t c = 0; c < core.size(); ++c) {
          const int i = core[c].source;
          const CoreGrad& cg = grads[c];
          if (p_opa->requires_grad) p_opa->grad_buffer()[i] += static_cast<float>(cg.opacity);
          if (p_feat->requires_grad) {
            float* gf = p_feat->grad_buffer() + static_cast<size_t>(i) * channels;
            for (int k = 0; k < channels; ++k) gf[k] += static_cast<float>(cg.feature[k]);
          }
          if (!p_pos->requires_grad && !p_scl->requires_grad && !p_rot->requires_grad) continue;
          const ProjectionGrad pg = project_one_backward(f, basis, projections[i], cg.mean, cg.covariance);
          if (p_pos->requires_grad) {
            float* gp = p_pos->grad_buffer() + static_cast<size_t>(i) * 3;
            for (int k = 0; k < 3; ++k) gp[k] += static_cast<float>(pg.position[k]);
          }
          if (p_scl->requires_grad) {
            float* gs = p_scl->grad_buffer() + static_cast<size_t>(i) * 3;
            for (int k = 0; k < 3; ++k) gs[k] += static_cast<float>(pg.scale[k]);
          }
          if (p_rot->requires_grad) {
            float* gr = p_rot->grad_buffer() + static_cast<size_t>(i) * 4;
            for (int k = 0; k < 4; ++k) gr[k] += static_cast<float>(pg.rotation[k]);
          }
        }
      });
}

RenderResult render(const GaussianParams& gaussians, const CameraPose& camera, const Vec3& background) {
  const float bg[3] = {static_cast<float>(background.x()), static_cast<float>(background.y()),
                       static_cast<float>(background.z())};
  const Tensor out = render_features(gaussians, gaussians.colors, camera, bg);
  const int64_t h = camera.height, w = camera.width;
  return {ops::reshape(ops::slice_cols(out, 0, 3), {h, w, 3}),
          ops::reshape(ops::slice_cols(out, 3, 1), {h, w, 1})};
}

Tensor project_means(const Tensor& positions, const CameraPose& camera) {
  const int64_t n = positions.rows();
  if (positions.cols() != 3) throw std::invalid_argument("project_means: positions must be [n, 3]");
  const CameraFrame f = CameraFrame::from(camera);
  const Mat3 basis = camera_basis(f);
  std::vector<float> out(static_cast<size_t>(n) * 2, 0.0f);
  std::vector<Vec3> cams(static_cast<size_t>(n));
  const auto pos = positions.data();
  for (int64_t i = 0; i < n; ++i) {
    cams[i] = basis * (Vec3(pos[i * 3], pos[i * 3 + 1], pos[i * 3 + 2]) - f.origin);
    if (!(cams[i].z() > kNearPlane)) continue;
    out[i * 2] = static_cast<float>(f.cx + f.fx * cams[i].x() / cams[i].z());
    out[i * 2 + 1] = static_cast<float>(f.cy + f.fy * cams[i].y() / cams[i].z());
  }
  auto pp = positions.node_ptr();
  return Tensor::make_result({n, 2}, std::move(out), {positions},
                             [pp, f, basis, cams = std::move(cams)](detail::Node& self) {
                               if (!pp->requires_grad) return;
                               float* g = pp->grad_buffer();
                               for (size_t i = 0; i < cams.size(); ++i) {
                                 if (!(cams[i].z() > kNearPlane)) continue;
                                 Projection p;
                                 p.cam = cams[i];
                                 const Vec3 gc = mean_to_camera_grad(
                                     f, p, Vec2(self.grad[i * 2], self.grad[i * 2 + 1]));
                                 const Vec3 gw = basis.transpose() * gc;
                                 for (int k = 0; k < 3; ++k) g[i * 3 + k] += static_cast<float>(gw[k]);
                               }
                             });
}

void write_ppm(const std::string& path, std::span<const float> rgb, int height, int width) {
  if (rgb.size() != static_cast<size_t>(height) * width * 3) {
    throw std::invalid_argument("write_ppm: buffer does not match " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "P6\n" << width << ' ' << height << "\n255\n";
  std::vector<unsigned char> bytes(rgb.size());
  for (size_t i = 0; i < rgb.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(rgb[i], 0.0f, 1.0f) * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<float> read_ppm(const std::string& path, int& height, int& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || width < 1 || height < 1 || maxval != 255) {
    throw std::runtime_error("not an 8-bit binary PPM: " + path);
  }
  in.get();
  std::vector<unsigned char> bytes(static_cast<size_t>(height) * width * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error("truncated PPM: " + path);
  std::vector<float> rgb(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) rgb[i] = static_cast<float>(bytes[i]) / 255.0f;
  return rgb;
}

Tensor normalize_flow(const Tensor& premultiplied, const Tensor& alpha) {
  const Tensor a = ops::reshape(alpha, {alpha.numel(), 1});
  const Tensor denom = ops::clamp(a, kFlowAlphaFloor, std::numeric_limits<float>::max());
  return ops::reshape(ops::div(ops::reshape(premultiplied, {a.rows(), 2}), ops::concat_cols({denom, denom})),
                      premultiplied.shape());
}

}  // namespace star4d
