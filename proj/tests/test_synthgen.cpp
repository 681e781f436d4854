#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "rangeseg/synthgen.hpp"

#include <cmath>

using namespace rangeseg;

namespace {

DomainConfig small_config() {
  DomainConfig cfg;
  cfg.seed = 12;
  cfg.grid.height = 24;
  cfg.grid.width = 96;
  return cfg;
}

bool clouds_identical(const PointCloud& a, const PointCloud& b) {
  if (a.points.size() != b.points.size()) return false;
  for (size_t i = 0; i < a.points.size(); ++i) {
    const auto &p = a.points[i], &q = b.points[i];
    if (p.x != q.x || p.y != q.y || p.z != q.z || p.intensity != q.intensity ||
        p.has_intensity != q.has_intensity || p.label != q.label)
      return false;
  }
  return true;
}

bool on_box_surface(const Box& b, const LidarPoint& p, double tol) {
  const double dx = std::abs(p.x - b.cx) - b.half_x;
  const double dy = std::abs(p.y - b.cy) - b.half_y;
  const double dz0 = b.z0 - p.z;
  const double dz1 = p.z - b.z1;
  if (dx > tol || dy > tol || dz0 > tol || dz1 > tol) return false;  // outside
  // On at least one face.
  return std::abs(dx) < tol || std::abs(dy) < tol || std::abs(dz0) < tol || std::abs(dz1) < tol;
}

bool on_cylinder_surface(const Cylinder& c, const LidarPoint& p, double tol) {
  const double rr = std::hypot(p.x - c.cx, p.y - c.cy);
  return std::abs(rr - c.radius) < tol && p.z >= c.z0 - tol && p.z <= c.z1 + tol;
}

}  // namespace

TEST_CASE("generate_scene is deterministic in (seed, index)") {
  DomainConfig cfg = small_config();
  cfg.p_drop = 0.2;
  cfg.jitter = 0.001;
  cfg.intensity = IntensityModel::Bimodal;
  PointCloud a = generate_scene(cfg, 3);
  PointCloud b = generate_scene(cfg, 3);
  CHECK(clouds_identical(a, b));
  PointCloud c = generate_scene(cfg, 4);
  CHECK(!clouds_identical(a, c));
}

TEST_CASE("a scene with zero objects yields only background ground points") {
  DomainConfig cfg = small_config();
  cfg.scene.cars = 0;
  cfg.scene.pedestrians = 0;
  cfg.scene.cyclists = 0;
  PointCloud cloud = generate_scene(cfg, 0);
  CHECK(!cloud.points.empty());
  for (const auto& p : cloud.points) {
    CHECK(p.label == kBackground);
    CHECK(p.z == doctest::Approx(-cfg.scene.sensor_height).epsilon(1e-9));
  }
}

TEST_CASE("a ray hitting a box face at 12 m reports depth 12 and label car") {
  DomainConfig cfg;
  cfg.grid.height = 1;
  cfg.grid.width = 1;
  cfg.grid.elev_min = -0.1;
  cfg.grid.elev_max = 0.1;
  cfg.grid.azim_min = -0.1;
  cfg.grid.azim_max = 0.1;
  Scene scene;
  scene.ground_z = -1.7;
  Box b;
  b.cx = 12.5;
  b.cy = 0.0;
  b.half_x = 0.5;
  b.half_y = 1.0;
  b.z0 = -1.0;
  b.z1 = 1.0;
  b.label = kCar;
  scene.boxes.push_back(b);
  Rng rng(0);
  PointCloud cloud = cast_scene(scene, cfg, rng);
  REQUIRE(cloud.points.size() == 1);
  const auto& p = cloud.points[0];
  const double depth = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
  CHECK(std::abs(depth - 12.0) < 1e-9);
  CHECK(p.label == kCar);
}

TEST_CASE("every generated point satisfies the depth identity") {
  DomainConfig cfg = small_config();
  cfg.jitter = 0.002;
  for (int index = 0; index < 3; ++index) {
    PointCloud cloud = generate_scene(cfg, index);
    for (const auto& p : cloud.points) {
      const double d = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
      CHECK(d > 0.0);
      CHECK(std::abs(d - std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z)) < 1e-9);
    }
  }
}

TEST_CASE("labels are consistent with the generating geometry") {
  DomainConfig cfg = small_config();
  Scene scene = build_scene(cfg, 5);
  Rng sensor = Rng::derive(cfg.seed, 0x73656e73ULL, 5);
  PointCloud cloud = cast_scene(scene, cfg, sensor);
  const double tol = 1e-6;
  for (const auto& p : cloud.points) {
    if (p.label == kBackground) {
      CHECK(std::abs(p.z - scene.ground_z) < tol);
    } else {
      bool on_surface = false;
      for (const auto& b : scene.boxes)
        if (b.label == p.label && on_box_surface(b, p, tol)) on_surface = true;
      for (const auto& c : scene.cylinders)
        if (c.label == p.label && on_cylinder_surface(c, p, tol)) on_surface = true;
      CHECK(on_surface);
    }
  }
}

TEST_CASE("scene content depends only on the scene seed, not sensor knobs") {
  DomainConfig a = small_config();
  DomainConfig b = a;
  b.p_drop = 0.5;
  b.intensity = IntensityModel::Bimodal;
  b.jitter = 0.01;
  for (int index : {0, 1, 7}) {
    Scene sa = build_scene(a, index);
    Scene sb = build_scene(b, index);
    REQUIRE(sa.boxes.size() == sb.boxes.size());
    REQUIRE(sa.cylinders.size() == sb.cylinders.size());
    for (size_t i = 0; i < sa.boxes.size(); ++i) {
      CHECK(sa.boxes[i].cx == sb.boxes[i].cx);
      CHECK(sa.boxes[i].cy == sb.boxes[i].cy);
      CHECK(sa.boxes[i].z1 == sb.boxes[i].z1);
      CHECK(sa.boxes[i].material == sb.boxes[i].material);
    }
    for (size_t i = 0; i < sa.cylinders.size(); ++i) {
      CHECK(sa.cylinders[i].cx == sb.cylinders[i].cx);
      CHECK(sa.cylinders[i].z1 == sb.cylinders[i].z1);
    }
  }
}

TEST_CASE("generate_domain_pair with identical configs is bit-identical") {
  DomainConfig cfg = small_config();
  auto [source, target] = generate_domain_pair(cfg, cfg, 4);
  REQUIRE(source.size() == 4);
  REQUIRE(target.size() == 4);
  for (size_t i = 0; i < source.size(); ++i) {
    CHECK((source[i].x == target[i].x).all());
    CHECK((source[i].mask == target[i].mask).all());
    CHECK((source[i].labels == target[i].labels).all());
    CHECK((source[i].intensity == target[i].intensity).all());
  }
}

TEST_CASE("generate_domain_pair rejects differing scene statistics") {
  DomainConfig a = small_config();
  DomainConfig b = a;
  b.scene.cars = a.scene.cars + 1;
  CHECK_THROWS_AS(generate_domain_pair(a, b, 2), std::invalid_argument);
  DomainConfig c = a;
  c.seed = a.seed + 1;
  CHECK_THROWS_AS(generate_domain_pair(a, c, 2), std::invalid_argument);
}

TEST_CASE("target dropout thins the mask by the configured fraction") {
  DomainConfig src = small_config();
  src.grid.height = 48;
  src.grid.width = 256;
  DomainConfig tgt = src;
  tgt.p_drop = 0.2;
  auto [source, target] = generate_domain_pair(src, tgt, 8);
  double src_pixels = 0.0, tgt_pixels = 0.0;
  for (size_t i = 0; i < source.size(); ++i) {
    src_pixels += source[i].mask.cast<double>().sum();
    tgt_pixels += target[i].mask.cast<double>().sum();
  }
  const double dropped = 1.0 - tgt_pixels / src_pixels;
  CHECK(dropped > 0.18);
  CHECK(dropped < 0.22);
}

TEST_CASE("intensity models fill the channel per contract") {
  DomainConfig src = small_config();
  DomainConfig tgt = src;
  tgt.intensity = IntensityModel::Bimodal;
  auto [source, target] = generate_domain_pair(src, tgt, 2);
  for (const auto& img : source) CHECK((img.intensity == 0.0).all());
  for (const auto& img : target) {
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) {
        if (img.mask(r, c)) {
          const bool bimodal_value =
              img.intensity(r, c) == 0.2 || img.intensity(r, c) == 0.8;
          CHECK(bimodal_value);
        } else {
          CHECK(img.intensity(r, c) == 0.0);
        }
      }
  }
}

TEST_CASE("analytic intensity follows reflectance over depth") {
  DomainConfig cfg = small_config();
  cfg.intensity = IntensityModel::Analytic;
  PointCloud cloud = generate_scene(cfg, 2);
  for (const auto& p : cloud.points) {
    const double d = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    CHECK(p.intensity == doctest::Approx(std::clamp(1.0 / d, 0.0, 1.0)).epsilon(1e-12));
  }
}

TEST_CASE("mask density decreases as dropout probability grows") {
  DomainConfig base = small_config();
  double prev = 1e18;
  for (double p : {0.0, 0.15, 0.3, 0.5}) {
    DomainConfig cfg = base;
    cfg.p_drop = p;
    double pixels = 0.0;
    for (int index = 0; index < 50; ++index)
      pixels += project(generate_scene(cfg, index), cfg.grid).mask.cast<double>().sum();
    CHECK(pixels < prev);
    prev = pixels;
  }
}

TEST_CASE("a configuration without a ground plane is rejected") {
  DomainConfig cfg = small_config();
  cfg.scene.ground_plane = false;
  CHECK_THROWS_AS(generate_scene(cfg, 0), std::invalid_argument);
}
