#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "star4d/camera.hpp"
#include "star4d/scene_synth.hpp"

using namespace star4d;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("star4d_test_" + name);
  fs::remove_all(p);
  return p;
}

double azimuth_of(const CameraPose& c) { return std::atan2(c.position.x(), c.position.z()); }

SceneSpec single_blob(const Vec3& from, const Vec3& to, int timesteps) {
  Primitive p;
  p.trajectory = {{0.0, from}, {static_cast<double>(timesteps - 1), to}};
  p.scale = Vec3(0.15, 0.15, 0.15);
  p.color = Vec3(0.9, 0.1, 0.1);
  p.opacity = 0.95;
  SceneSpec spec;
  spec.primitives = {p};
  return spec;
}

}  // namespace

TEST_CASE("orbit cameras are evenly spaced and equidistant") {
  const auto four = make_orbit_cameras(4, 2.0, 0.0, Vec3::Zero());
  REQUIRE(four.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(four[i].position.norm() == doctest::Approx(2.0).epsilon(1e-12));
    const double expected = std::remainder(i * std::numbers::pi / 2, 2 * std::numbers::pi);
    CHECK(std::abs(std::remainder(azimuth_of(four[i]) - expected, 2 * std::numbers::pi)) < 1e-12);
  }

  const auto one = make_orbit_cameras(1, 1.0, 0.0, Vec3::Zero());
  REQUIRE(one.size() == 1);
  CHECK(std::abs(azimuth_of(one[0])) < 1e-12);

  const Vec3 target(0.1, -0.2, 0.3);
  const auto eight = make_orbit_cameras(8, 2.5, 0.3, target);
  for (int i = 0; i < 8; ++i) {
    CHECK(std::abs((eight[i].position - target).norm() - 2.5) < 1e-9);
    const Vec3 a = eight[i].position - target, b = eight[(i + 1) % 8].position - target;
    const double gap = std::atan2(a.x() * b.z() - a.z() * b.x(), a.x() * b.x() + a.z() * b.z());
    CHECK(std::abs(std::abs(gap) - std::numbers::pi / 4) < 1e-9);
  }

  CHECK_THROWS_AS(make_orbit_cameras(0, 1.0, 0.0, Vec3::Zero()), std::invalid_argument);
  CHECK_THROWS_AS(make_orbit_cameras(4, 0.0, 0.0, Vec3::Zero()), std::invalid_argument);
  CHECK_THROWS_AS(make_orbit_cameras(4, -1.0, 0.0, Vec3::Zero()), std::invalid_argument);
}

TEST_CASE("pluecker rays: worked examples") {
  CameraPose cam;  // at (0,0,2) looking at the origin
  // Odd grid so one cell center sits on the optical axis.
  const auto rays = pluecker_grid(cam, 3, 3);
  REQUIRE(rays.size() == 9);
  const auto& center = rays[4];
  CHECK(center.direction.isApprox(Vec3(0, 0, -1), 1e-12));
  CHECK(center.moment.norm() < 1e-12);

  const auto r = PlueckerRay::through(Vec3(1, 0, 0), Vec3(0, 0, 1));
  CHECK(r.moment.isApprox(Vec3(0, -1, 0), 1e-15));
  const auto c = r.coefficients();
  CHECK(c[4] == -1.0);

  CameraPose degenerate;
  degenerate.target = degenerate.position;
  CHECK_THROWS_AS(pluecker_grid(degenerate, 4, 4), std::invalid_argument);
  CHECK_THROWS_AS(pluecker_grid(cam, 0, 4), std::invalid_argument);
}

TEST_CASE("pluecker invariants hold for 1000 random cameras") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::uniform_real_distribution<double> fov(0.2, 2.5);
  double worst_norm = 0.0, worst_dot = 0.0;
  for (int i = 0; i < 1000; ++i) {
    CameraPose cam;
    cam.position = Vec3(u(rng), u(rng), u(rng));
    cam.target = Vec3(u(rng), u(rng), u(rng)) * 0.2;
    if ((cam.position - cam.target).norm() < 0.1) cam.position.z() += 1.0;
    // Keep up away from the viewing direction.
    const Vec3 fwd = (cam.target - cam.position).normalized();
    cam.up = std::abs(fwd.y()) > 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
    cam.fov_y = fov(rng);
    for (const auto& ray : pluecker_grid(cam, 4, 4)) {
      worst_norm = std::max(worst_norm, std::abs(ray.direction.norm() - 1.0));
      worst_dot = std::max(worst_dot, std::abs(ray.moment.dot(ray.direction)));
    }
  }
  CHECK(worst_norm < 1e-6);
  CHECK(worst_dot < 1e-6);
}

TEST_CASE("camera pose validation") {
  CameraPose cam;
  CHECK_NOTHROW(cam.validate());
  cam.fov_y = 0.0;
  CHECK_THROWS_AS(cam.validate(), std::invalid_argument);
  cam = CameraPose{};
  cam.up = Vec3(0, 2, 0);
  CHECK_THROWS_AS(cam.validate(), std::invalid_argument);
}

TEST_CASE("static and empty scenes") {
  const auto cams = make_orbit_cameras(2, 2.0, 0.2, Vec3::Zero());
  const auto still = render_scene(single_blob(Vec3(0.1, 0, 0), Vec3(0.1, 0, 0), 3), cams, 3);
  for (int t = 1; t < 3; ++t) {
    for (int v = 0; v < 2; ++v) {
      const auto a = still.matrix.frame(0, v), b = still.matrix.frame(t, v);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
  for (float f : still.flow.vectors) CHECK(f == 0.0f);

  SceneSpec empty;
  empty.background = Vec3(0.25, 0.5, 0.75);
  const auto blank = render_scene(empty, cams, 2);
  for (size_t i = 0; i < blank.matrix.pixels.size(); ++i) {
    CHECK(blank.matrix.pixels[i] == doctest::Approx(empty.background[static_cast<int>(i % 3)]));
  }
}

TEST_CASE("a blob moving along +x has rightward flow in a front camera") {
  CameraPose front;  // (0,0,2) looking at origin: world +x maps to image +x
  const auto scene = render_scene(single_blob(Vec3(-0.1, 0, 0), Vec3(0.1, 0, 0), 2), {front}, 2);
  // Oracle: projected displacement of the blob center.
  const CameraFrame f = CameraFrame::from(front);
  const double expected = f.project(Vec3(0.1, 0, 0)).x() - f.project(Vec3(-0.1, 0, 0)).x();
  REQUIRE(expected > 0.0);
  const auto flow = scene.flow.frame(0, 0);
  const Vec2 c = f.project(Vec3(-0.1, 0, 0));
  const size_t p = static_cast<size_t>(c.y()) * front.width + static_cast<size_t>(c.x());
  CHECK(flow[p * 2] > 0.0f);
  // Inside the splat the alpha-normalized flow is exactly the displacement.
  CHECK(flow[p * 2] == doctest::Approx(expected).epsilon(1e-4));
  CHECK(std::abs(flow[p * 2 + 1]) < 1e-3);
}

TEST_CASE("rendering is deterministic and time reversal reverses frames") {
  const auto cams = make_orbit_cameras(2, 2.0, 0.3, Vec3::Zero());
  const SceneSpec spec = random_scene(42, 4);
  const auto a = render_scene(spec, cams, 4);
  const auto b = render_scene(spec, cams, 4);
  CHECK(a.matrix.pixels == b.matrix.pixels);
  CHECK(a.flow.vectors == b.flow.vectors);

  const auto rev = render_scene(spec.time_reversed(4), cams, 4);
  for (int t = 0; t < 4; ++t) {
    for (int v = 0; v < 2; ++v) {
      const auto x = a.matrix.frame(t, v), y = rev.matrix.frame(3 - t, v);
      CHECK(std::equal(x.begin(), x.end(), y.begin()));
    }
  }
  CHECK_FALSE(spec.caption.empty());
  for (float px : a.matrix.pixels) {
    CHECK(px >= 0.0f);
    CHECK(px <= 1.0f);
  }
}

TEST_CASE("scene validation rejects out-of-range values") {
  SceneSpec spec = single_blob(Vec3::Zero(), Vec3::Zero(), 2);
  spec.primitives[0].opacity = 1.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = single_blob(Vec3::Zero(), Vec3::Zero(), 2);
  spec.primitives[0].trajectory.clear();
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("dataset round trip") {
  Dataset ds;
  ds.cameras = make_orbit_cameras(4, 2.0, 0.3, Vec3::Zero());
  for (uint64_t s = 0; s < 2; ++s) {
    const SceneSpec spec = random_scene(s, 4);
    auto r = render_scene(spec, ds.cameras, 4);
    ds.objects.push_back({spec.caption, std::move(r.matrix), std::move(r.flow)});
  }
  const fs::path dir = scratch_dir("roundtrip");
  save_dataset(ds, dir);

  std::ifstream manifest(dir / "manifest.txt");
  std::string text((std::istreambuf_iterator<char>(manifest)), std::istreambuf_iterator<char>());
  CHECK(text.find("timesteps 4") != std::string::npos);
  CHECK(text.find("views 4") != std::string::npos);
  CHECK(text.find("height 32") != std::string::npos);

  const Dataset back = load_dataset(dir);
  CHECK(back.timesteps() == 4);
  CHECK(back.views() == 4);
  CHECK(back.height() == 32);
  CHECK(back.width() == 32);
  REQUIRE(back.objects.size() == 2);
  for (size_t v = 0; v < 4; ++v) {
    CHECK(back.cameras[v].position == ds.cameras[v].position);
    CHECK(back.cameras[v].target == ds.cameras[v].target);
    CHECK(back.cameras[v].up == ds.cameras[v].up);
    CHECK(back.cameras[v].fov_y == ds.cameras[v].fov_y);
  }
  for (size_t i = 0; i < 2; ++i) {
    CHECK(back.objects[i].caption == ds.objects[i].caption);
    CHECK(back.objects[i].flow.vectors == ds.objects[i].flow.vectors);
    double worst = 0.0;
    for (size_t k = 0; k < ds.objects[i].matrix.pixels.size(); ++k) {
      worst = std::max(worst, static_cast<double>(std::abs(back.objects[i].matrix.pixels[k] - ds.objects[i].matrix.pixels[k])));
    }
    CHECK(worst <= 1.0 / 255.0 + 1e-6);
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset loading errors") {
  CHECK_THROWS(load_dataset(scratch_dir("does_not_exist")));

  const fs::path dir = scratch_dir("malformed");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.txt");
    out << "star4d-dataset 1\ntimesteps four\n";
  }
  try {
    load_dataset(dir);
    FAIL("expected a parse error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("timesteps") != std::string::npos);
  }
  fs::remove_all(dir);
}
