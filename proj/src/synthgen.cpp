#include "rangeseg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>

namespace rangeseg {

namespace {

constexpr std::uint64_t kSceneStream = 0x7363656eULL;    // "scen"
constexpr std::uint64_t kSensorStream = 0x73656e73ULL;   // "sens"
constexpr double kRayEps = 1e-9;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::optional<double> ray_ground(double dz, double ground_z) {
  if (dz >= -1e-12) return std::nullopt;  // rays at or above horizontal never land
  return ground_z / dz;
}

std::optional<double> ray_box(const double d[3], const Box& b) {
  double tmin = kRayEps;
  double tmax = std::numeric_limits<double>::infinity();
  const double lo[3] = {b.cx - b.half_x, b.cy - b.half_y, b.z0};
  const double hi[3] = {b.cx + b.half_x, b.cy + b.half_y, b.z1};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (lo[a] > 0.0 || hi[a] < 0.0) return std::nullopt;  // origin outside the slab
      continue;
    }
    double t1 = lo[a] / d[a];
    double t2 = hi[a] / d[a];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return std::nullopt;
  }
  return tmin;
}

std::optional<double> ray_cylinder(const double d[3], const Cylinder& cyl) {
  // Quadratic in t for the squared horizontal distance to the axis.
  const double a = d[0] * d[0] + d[1] * d[1];
  if (a < 1e-15) return std::nullopt;  // vertical ray
  const double bq = -2.0 * (d[0] * cyl.cx + d[1] * cyl.cy);
  const double cq = cyl.cx * cyl.cx + cyl.cy * cyl.cy - cyl.radius * cyl.radius;
  const double disc = bq * bq - 4.0 * a * cq;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  for (double t : {(-bq - sq) / (2.0 * a), (-bq + sq) / (2.0 * a)}) {
    if (t <= kRayEps) continue;
    const double z = d[2] * t;
    if (z >= cyl.z0 && z <= cyl.z1) return t;
  }
  return std::nullopt;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  std::uint8_t label = kBackground;
  int material = 0;
};

Hit nearest_hit(const Scene& scene, const double d[3]) {
  Hit best;
  if (scene.ground_plane) {
    if (auto t = ray_ground(d[2], scene.ground_z); t && *t < best.t)
      best = {*t, kBackground, scene.ground_material};
  }
  for (const Box& b : scene.boxes) {
    if (auto t = ray_box(d, b); t && *t < best.t) best = {*t, b.label, b.material};
  }
  for (const Cylinder& c : scene.cylinders) {
    if (auto t = ray_cylinder(d, c); t && *t < best.t) best = {*t, c.label, c.material};
  }
  return best;
}

double intensity_for(const DomainConfig& cfg, const Hit& hit, double depth) {
  switch (cfg.intensity) {
    case IntensityModel::None:
      return 0.0;
    case IntensityModel::Analytic:
      return std::clamp(cfg.albedo[hit.label] / depth, 0.0, 1.0);
    case IntensityModel::Bimodal:
      return hit.material ? 0.8 : 0.2;
  }
  return 0.0;
}

}  // namespace

Scene build_scene(const DomainConfig& config, int index) {
  check(config.scene.ground_plane, "degenerate scene: a ground plane is required");
  check(config.scene.range_min > 0.0 && config.scene.range_max > config.scene.range_min,
        "scene range interval is empty");
  Rng rng = Rng::derive(config.seed, kSceneStream, static_cast<std::uint64_t>(index));
  Scene scene;
  scene.ground_z = -config.scene.sensor_height;
  scene.ground_material = 0;

  const double az_lo = config.grid.azim_min * 0.9;
  const double az_hi = config.grid.azim_max * 0.9;
  auto place = [&](double& cx, double& cy) {
    const double az = rng.uniform(az_lo, az_hi);
    const double dist = rng.uniform(config.scene.range_min, config.scene.range_max);
    cx = dist * std::cos(az);
    cy = dist * std::sin(az);
  };

  // Materials are a hidden per-object bit correlated with class and
  // height: raised objects (cars, people, bikes) reflect strongly, the
  // ground does not. The same coordinates near object bottoms can carry
  // either intensity mode depending on what occupies them. All draws come
  // from the scene stream so sensor knobs can never shift placements.
  for (int i = 0; i < config.scene.cars; ++i) {
    Box b;
    place(b.cx, b.cy);
    b.material = 1;
    const double height = rng.uniform(1.15, 1.65);
    double half_l = rng.uniform(1.9, 2.3);
    double half_w = rng.uniform(0.85, 0.95);
    if (rng.bernoulli(0.5)) std::swap(half_l, half_w);  // heading along x or y
    b.half_x = half_l;
    b.half_y = half_w;
    b.z0 = scene.ground_z;
    b.z1 = scene.ground_z + height;
    b.label = kCar;
    scene.boxes.push_back(b);
  }
  for (int i = 0; i < config.scene.pedestrians; ++i) {
    Cylinder c;
    place(c.cx, c.cy);
    c.material = 1;
    const double height = rng.uniform(1.6, 1.85);
    c.radius = rng.uniform(0.3, 0.45);
    c.z0 = scene.ground_z;
    c.z1 = scene.ground_z + height;
    c.label = kPedestrian;
    scene.cylinders.push_back(c);
  }
  for (int i = 0; i < config.scene.cyclists; ++i) {
    // Bike box plus a rider cylinder on top.
    Box b;
    place(b.cx, b.cy);
    b.material = 1;
    const double total = rng.uniform(1.55, 1.75);
    double half_l = rng.uniform(0.8, 0.95);
    double half_w = rng.uniform(0.25, 0.35);
    if (rng.bernoulli(0.5)) std::swap(half_l, half_w);
    b.half_x = half_l;
    b.half_y = half_w;
    b.z0 = scene.ground_z;
    b.z1 = scene.ground_z + 0.8;
    b.label = kCyclist;
    scene.boxes.push_back(b);
    Cylinder rider;
    rider.cx = b.cx;
    rider.cy = b.cy;
    rider.radius = rng.uniform(0.22, 0.28);
    rider.z0 = b.z1;
    rider.z1 = scene.ground_z + total;
    rider.label = kCyclist;
    rider.material = b.material;
    scene.cylinders.push_back(rider);
  }
  return scene;
}

PointCloud cast_scene(const Scene& scene, const DomainConfig& config, Rng& sensor_rng) {
  check(config.p_drop >= 0.0 && config.p_drop <= 1.0, "p_drop must be in [0,1]");
  const GridConfig& g = config.grid;
  const double delev = (g.elev_max - g.elev_min) / g.height;
  const double dazim = (g.azim_max - g.azim_min) / g.width;
  PointCloud cloud;
  cloud.points.reserve(static_cast<size_t>(g.height) * g.width);
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      double elev = g.elev_max - (r + 0.5) * delev;
      double azim = g.azim_max - (c + 0.5) * dazim;
      if (config.jitter > 0.0) {
        elev += sensor_rng.normal() * config.jitter;
        azim += sensor_rng.normal() * config.jitter;
      }
      const double d[3] = {std::cos(elev) * std::cos(azim), std::cos(elev) * std::sin(azim),
                           std::sin(elev)};
      Hit hit = nearest_hit(scene, d);
      if (!std::isfinite(hit.t)) continue;
      if (config.p_drop > 0.0 && sensor_rng.uniform() < config.p_drop) continue;
      LidarPoint p;
      p.x = d[0] * hit.t;
      p.y = d[1] * hit.t;
      p.z = d[2] * hit.t;
      p.label = hit.label;
      if (config.intensity != IntensityModel::None) {
        p.intensity = intensity_for(config, hit, hit.t);
        p.has_intensity = true;
      }
      cloud.points.push_back(p);
    }
  }
  return cloud;
}

PointCloud generate_scene(const DomainConfig& config, int index) {
  Scene scene = build_scene(config, index);
  Rng sensor_rng = Rng::derive(config.seed, kSensorStream, static_cast<std::uint64_t>(index));
  return cast_scene(scene, config, sensor_rng);
}

std::pair<std::vector<RangeImage>, std::vector<RangeImage>> generate_domain_pair(
    const DomainConfig& source_cfg, const DomainConfig& target_cfg, int count, int first_index) {
  check(count >= 1, "generate_domain_pair: count must be >= 1");
  check(first_index >= 0, "generate_domain_pair: first_index must be >= 0");
  check(source_cfg.seed == target_cfg.seed,
        "generate_domain_pair: configs must share the scene seed");
  const GridConfig &ga = source_cfg.grid, &gb = target_cfg.grid;
  check(ga.height == gb.height && ga.width == gb.width && ga.elev_min == gb.elev_min &&
            ga.elev_max == gb.elev_max && ga.azim_min == gb.azim_min && ga.azim_max == gb.azim_max,
        "generate_domain_pair: configs must share the projection grid");
  check(source_cfg.scene == target_cfg.scene,
        "generate_domain_pair: configs must share scene statistics; only sensor knobs "
        "(dropout, intensity, jitter) may differ");
  std::vector<RangeImage> source, target;
  source.reserve(count);
  target.reserve(count);
  for (int i = first_index; i < first_index + count; ++i) {
    source.push_back(project(generate_scene(source_cfg, i), source_cfg.grid));
    target.push_back(project(generate_scene(target_cfg, i), target_cfg.grid));
  }
  return {std::move(source), std::move(target)};
}

}  // namespace rangeseg
