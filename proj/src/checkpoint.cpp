#include "rangeseg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "container formats are little-endian; big-endian hosts are unsupported");

namespace rangeseg {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'A', 'T'};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw ParseError("cannot open checkpoint file '" + path + "'", 0);
  }

  void read_bytes(void* dst, std::size_t count, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(count));
    if (in_.gcount() != static_cast<std::streamsize>(count))
      throw ParseError("truncated checkpoint: missing " + std::string(what) + " in '" + path_ + "'",
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

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<NamedTensorRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  const std::uint16_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint32_t count = static_cast<std::uint32_t>(records.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& rec : records) {
    const std::uint32_t name_len = static_cast<std::uint32_t>(rec.name.size());
    out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    out.write(rec.name.data(), name_len);
    const std::uint32_t rank = static_cast<std::uint32_t>(rec.shape.size());
    out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    std::size_t n = 1;
    for (int d : rec.shape) {
      const std::uint32_t dim = static_cast<std::uint32_t>(d);
      out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
      n *= static_cast<std::size_t>(d);
    }
    if (n != rec.data.size())
      throw std::runtime_error("record '" + rec.name + "': shape/data size mismatch");
    out.write(reinterpret_cast<const char*>(rec.data.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<NamedTensorRecord> read_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.read_bytes(magic, 4, "magic bytes");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw ParseError("bad magic: not a checkpoint file", 0);
  const auto version = r.read_scalar<std::uint16_t>("format version");
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version) +
                         " (expected " + std::to_string(kCheckpointVersion) + ")",
                     4);
  const auto count = r.read_scalar<std::uint32_t>("record count");
  std::vector<NamedTensorRecord> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensorRecord rec;
    const auto name_len = r.read_scalar<std::uint32_t>("record name length");
    rec.name.resize(name_len);
    if (name_len > 0) r.read_bytes(rec.name.data(), name_len, "record name");
    const auto rank = r.read_scalar<std::uint32_t>("record rank");
    if (rank > 8) throw ParseError("implausible record rank " + std::to_string(rank), r.offset());
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto dim = r.read_scalar<std::uint32_t>("record dimension");
      if (dim == 0) throw ParseError("zero dimension in record '" + rec.name + "'", r.offset());
      rec.shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    rec.data.resize(n);
    r.read_bytes(rec.data.data(), n * sizeof(double), "record payload");
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace rangeseg
