#include "rangeseg/range_image.hpp"

#include "rangeseg/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rangeseg {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

RangeImage::RangeImage(int h, int w) : height(h), width(w) {
  check(h >= 1 && w >= 1, "RangeImage dimensions must be positive");
  x = ImageXd::Zero(h, w);
  y = ImageXd::Zero(h, w);
  z = ImageXd::Zero(h, w);
  intensity = ImageXd::Zero(h, w);
  depth = ImageXd::Zero(h, w);
  mask = ImageXu8::Zero(h, w);
  labels = ImageXu8::Zero(h, w);
  ignore = ImageXu8::Constant(h, w, 1);
}

void RangeImage::clear_pixel(int r, int c) {
  x(r, c) = 0.0;
  y(r, c) = 0.0;
  z(r, c) = 0.0;
  intensity(r, c) = 0.0;
  depth(r, c) = 0.0;
  mask(r, c) = 0;
  labels(r, c) = kBackground;
  ignore(r, c) = 1;
}

void RangeImage::validate() const {
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (mask(r, c) == 0) {
        if (x(r, c) != 0.0 || y(r, c) != 0.0 || z(r, c) != 0.0 || intensity(r, c) != 0.0 ||
            depth(r, c) != 0.0 || labels(r, c) != kBackground || ignore(r, c) != 1)
          throw std::logic_error("empty pixel carries data at (" + std::to_string(r) + "," +
                                 std::to_string(c) + ")");
      } else {
        const double d = std::sqrt(x(r, c) * x(r, c) + y(r, c) * y(r, c) + z(r, c) * z(r, c));
        if (std::abs(depth(r, c) - d) > 1e-6)
          throw std::logic_error("depth channel inconsistent with coordinates at (" +
                                 std::to_string(r) + "," + std::to_string(c) + ")");
      }
    }
  }
}

RangeImage project(const PointCloud& cloud, const GridConfig& grid, ProjectionStats* stats) {
  check(grid.height >= 1 && grid.width >= 1, "project: grid dimensions must be positive");
  check(grid.elev_min < grid.elev_max && grid.azim_min < grid.azim_max,
        "project: angular ranges must be non-empty");
  RangeImage img(grid.height, grid.width);
  ProjectionStats local;
  const double elev_span = grid.elev_max - grid.elev_min;
  const double azim_span = grid.azim_max - grid.azim_min;

  for (const LidarPoint& p : cloud.points) {
    const double d = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    check(d > 0.0, "project: point at the origin has undefined direction");
    if (p.has_intensity)
      check(p.intensity >= 0.0 && p.intensity <= 1.0, "project: intensity outside [0,1]");
    const double elev = std::asin(p.z / d);
    const double azim = std::atan2(p.y, p.x);
    if (elev < grid.elev_min || elev > grid.elev_max ||
        azim < grid.azim_min || azim > grid.azim_max) {
      ++local.out_of_range;
      continue;
    }
    int row = static_cast<int>((grid.elev_max - elev) / elev_span * grid.height);
    int col = static_cast<int>((grid.azim_max - azim) / azim_span * grid.width);
    row = std::min(row, grid.height - 1);  // inclusive lower boundary
    col = std::min(col, grid.width - 1);
    if (img.mask(row, col) != 0) {
      if (d >= img.depth(row, col)) {  // nearest point keeps the pixel
        ++local.occluded;
        continue;
      }
      ++local.occluded;
    }
    img.x(row, col) = p.x;
    img.y(row, col) = p.y;
    img.z(row, col) = p.z;
    img.intensity(row, col) = p.has_intensity ? p.intensity : 0.0;
    img.depth(row, col) = d;
    img.mask(row, col) = 1;
    img.labels(row, col) = p.label;
    img.ignore(row, col) = 0;
    ++local.projected;
  }
  if (stats) *stats = local;
  return img;
}

RangeImage inject_dropout(const RangeImage& img, double p, std::uint64_t seed) {
  check(p >= 0.0 && p <= 1.0, "inject_dropout: probability must be in [0,1]");
  RangeImage out = img;
  if (p == 0.0) return out;
  Rng rng = Rng::derive(seed, /*stream=*/0x64726f70ULL);  // "drop"
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      if (out.mask(r, c) == 0) continue;
      if (rng.uniform() < p) out.clear_pixel(r, c);
    }
  }
  return out;
}

IouResult compute_iou(const ImageXu8& pred, const RangeImage& gt, int cls) {
  check(cls >= 0 && cls < kNumClasses, "compute_iou: unknown class id " + std::to_string(cls));
  check(pred.rows() == gt.labels.rows() && pred.cols() == gt.labels.cols(),
        "compute_iou: prediction shape does not match ground truth");
  IouResult res;
  for (int r = 0; r < gt.height; ++r) {
    for (int c = 0; c < gt.width; ++c) {
      if (gt.ignore(r, c)) continue;
      const bool in_pred = pred(r, c) == cls;
      const bool in_gt = gt.labels(r, c) == cls;
      if (in_pred && in_gt) ++res.intersection;
      if (in_pred || in_gt) ++res.union_count;
    }
  }
  if (res.union_count == 0) {
    res.empty_union = true;
    res.iou = 1.0;
  } else {
    res.iou = static_cast<double>(res.intersection) / static_cast<double>(res.union_count);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[4] = {'R', 'S', 'D', 'S'};

class DatasetReader {
 public:
  explicit DatasetReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw ParseError("cannot open dataset file '" + path + "'", 0);
  }

  void read_bytes(void* dst, std::size_t count, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(count));
    if (in_.gcount() != static_cast<std::streamsize>(count))
      throw ParseError("truncated dataset: missing " + std::string(what) + " in '" + path_ + "'",
                       offset_);
    offset_ += count;
  }

  template <typename T>
  T read_scalar(const char* what) {
    T v;
    read_bytes(&v, sizeof(T), what);
    return v;
  }

  std::size_t offset() const { return offset_; }

 private:
  std::ifstream in_;
  std::string path_;
  std::size_t offset_ = 0;
};

void write_float_channel(std::ofstream& out, const ImageXd& ch) {
  out.write(reinterpret_cast<const char*>(ch.data()),
            static_cast<std::streamsize>(sizeof(double) * ch.size()));
}

void write_byte_channel(std::ofstream& out, const ImageXu8& ch) {
  out.write(reinterpret_cast<const char*>(ch.data()), static_cast<std::streamsize>(ch.size()));
}

}  // namespace

void write_dataset(const std::string& path, const std::vector<RangeImage>& images) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(kDatasetMagic, 4);
  const std::uint16_t version = kDatasetVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint32_t count = static_cast<std::uint32_t>(images.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const RangeImage& img : images) {
    const std::uint16_t h = static_cast<std::uint16_t>(img.height);
    const std::uint16_t w = static_cast<std::uint16_t>(img.width);
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    out.write(reinterpret_cast<const char*>(&w), sizeof(w));
    write_float_channel(out, img.x);
    write_float_channel(out, img.y);
    write_float_channel(out, img.z);
    write_float_channel(out, img.intensity);
    write_float_channel(out, img.depth);
    write_byte_channel(out, img.mask);
    write_byte_channel(out, img.labels);
    write_byte_channel(out, img.ignore);
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<RangeImage> read_dataset(const std::string& path) {
  DatasetReader r(path);
  char magic[4];
  r.read_bytes(magic, 4, "magic bytes");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw ParseError("bad magic: not a dataset file", 0);
  const auto version = r.read_scalar<std::uint16_t>("format version");
  if (version != kDatasetVersion)
    throw ParseError("unsupported dataset version " + std::to_string(version) + " (expected " +
                         std::to_string(kDatasetVersion) + ")",
                     4);
  const auto count = r.read_scalar<std::uint32_t>("image count");
  std::vector<RangeImage> images;
  images.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto h = r.read_scalar<std::uint16_t>("image height");
    const auto w = r.read_scalar<std::uint16_t>("image width");
    if (h == 0 || w == 0)
      throw ParseError("zero image dimension in image " + std::to_string(i), r.offset());
    RangeImage img(h, w);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    r.read_bytes(img.x.data(), n * sizeof(double), "x channel");
    r.read_bytes(img.y.data(), n * sizeof(double), "y channel");
    r.read_bytes(img.z.data(), n * sizeof(double), "z channel");
    r.read_bytes(img.intensity.data(), n * sizeof(double), "intensity channel");
    r.read_bytes(img.depth.data(), n * sizeof(double), "depth channel");
    r.read_bytes(img.mask.data(), n, "mask channel");
    r.read_bytes(img.labels.data(), n, "labels channel");
    r.read_bytes(img.ignore.data(), n, "ignore channel");
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace rangeseg
