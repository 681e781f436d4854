#pragma once

#include "rangeseg/checkpoint.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace rangeseg {

enum SemClass : std::uint8_t {
  kBackground = 0,
  kCar = 1,
  kPedestrian = 2,
  kCyclist = 3,
};
constexpr int kNumClasses = 4;

struct LidarPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double intensity = 0.0;
  bool has_intensity = false;
  std::uint8_t label = kBackground;
};

struct PointCloud {
  std::vector<LidarPoint> points;
};

/// Spherical binning grid: rows span elevation, columns span azimuth.
/// Row 0 is the top of the image (maximum elevation), column 0 the
/// leftmost azimuth (maximum azimuth, i.e. +y side for a forward sensor).
struct GridConfig {
  int height = 64;
  int width = 512;
  double elev_min = -25.0 * 3.14159265358979323846 / 180.0;
  double elev_max = 3.0 * 3.14159265358979323846 / 180.0;
  double azim_min = -45.0 * 3.14159265358979323846 / 180.0;
  double azim_max = 45.0 * 3.14159265358979323846 / 180.0;
};

using ImageXd = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ImageXu8 = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// H x W grid of per-pixel channels plus labels. Empty pixels (mask 0)
/// carry zeros in every float channel, background label and ignore=1.
struct RangeImage {
  int height = 0;
  int width = 0;
  ImageXd x, y, z, intensity, depth;
  ImageXu8 mask, labels, ignore;

  RangeImage() = default;
  RangeImage(int h, int w);

  /// Clears one pixel back to the empty state.
  void clear_pixel(int r, int c);
  /// Checks the structural invariants; throws on violation.
  void validate() const;
};

struct ProjectionStats {
  int projected = 0;       // points that landed in a pixel
  int out_of_range = 0;    // points outside the configured angular ranges
  int occluded = 0;        // points displaced by a nearer point in the same pixel
};

/// Spherical projection. Elevation asin(z/depth), azimuth atan2(y,x),
/// uniform binning over the configured ranges; the nearest point wins a
/// shared pixel.
RangeImage project(const PointCloud& cloud, const GridConfig& grid,
                   ProjectionStats* stats = nullptr);

/// Each existing pixel independently becomes missing with probability p.
RangeImage inject_dropout(const RangeImage& img, double p, std::uint64_t seed);

struct IouResult {
  double iou = 0.0;
  long intersection = 0;
  long union_count = 0;
  bool empty_union = false;  // both sets empty; iou reported as 1 by convention
};

/// Point-wise IoU for one class; ignore-flagged pixels are excluded from
/// both the prediction and ground-truth sets.
IouResult compute_iou(const ImageXu8& pred, const RangeImage& gt, int cls);

/// Dataset container: magic "RSDS", u16 version, u32 image count, then per
/// image u16 H, u16 W and channel payloads in fixed order
/// (x,y,z,intensity,depth,mask,labels,ignore).
void write_dataset(const std::string& path, const std::vector<RangeImage>& images);
std::vector<RangeImage> read_dataset(const std::string& path);

constexpr std::uint16_t kDatasetVersion = 1;

}  // namespace rangeseg
