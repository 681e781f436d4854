#pragma once

#include "rangeseg/range_image.hpp"
#include "rangeseg/rng.hpp"

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

namespace rangeseg {

enum class IntensityModel { None, Analytic, Bimodal };

/// Scene content knobs. These (plus the seed and grid) define what is in
/// the world; everything else in DomainConfig is a sensor property.
struct SceneStats {
  int cars = 5;
  int pedestrians = 3;
  int cyclists = 2;
  double range_min = 5.0;
  double range_max = 22.0;
  double sensor_height = 1.7;
  bool ground_plane = true;

  bool operator==(const SceneStats&) const = default;
};

struct DomainConfig {
  std::uint64_t seed = 1;
  GridConfig grid;
  SceneStats scene;
  // Sensor knobs: these are the only legal differences within a domain pair.
  double p_drop = 0.0;
  IntensityModel intensity = IntensityModel::None;
  double jitter = 0.0;  // std of per-ray angular jitter, radians
  std::array<double, 4> albedo = {1.0, 1.0, 1.0, 1.0};  // analytic reflectance per class
};

/// Axis-aligned box primitive resting on the ground plane.
struct Box {
  double cx = 0.0, cy = 0.0;
  double half_x = 1.0, half_y = 1.0;
  double z0 = 0.0, z1 = 1.0;
  std::uint8_t label = kBackground;
  int material = 0;
};

/// Vertical cylinder primitive.
struct Cylinder {
  double cx = 0.0, cy = 0.0;
  double radius = 0.3;
  double z0 = 0.0, z1 = 1.0;
  std::uint8_t label = kBackground;
  int material = 0;
};

struct Scene {
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;
  bool ground_plane = true;
  double ground_z = -1.7;
  int ground_material = 0;
};

/// Scene content is a function of (seed, index) and the scene statistics
/// alone; sensor knobs never influence it.
Scene build_scene(const DomainConfig& config, int index);

/// Ray-casts the scene on the configured grid with the configured sensor
/// model. Separate RNG streams keep scene content and sensor noise
/// independent.
PointCloud cast_scene(const Scene& scene, const DomainConfig& config, Rng& sensor_rng);

/// build_scene + cast_scene with the canonical per-(seed,index) streams.
PointCloud generate_scene(const DomainConfig& config, int index);

/// Paired datasets over identical scene seeds; the configs must agree on
/// seed, grid and scene statistics and may differ only in sensor knobs.
/// first_index offsets the scene indices so disjoint splits can be drawn
/// from one seed.
std::pair<std::vector<RangeImage>, std::vector<RangeImage>> generate_domain_pair(
    const DomainConfig& source_cfg, const DomainConfig& target_cfg, int count,
    int first_index = 0);

}  // namespace rangeseg
