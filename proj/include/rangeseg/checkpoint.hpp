#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace rangeseg {

/// Parse failure in a binary container; offset is the byte position at
/// which the failing read started.
struct ParseError : std::runtime_error {
  std::size_t offset;
  ParseError(const std::string& msg, std::size_t offset_)
      : std::runtime_error(msg + " (at byte offset " + std::to_string(offset_) + ")"),
        offset(offset_) {}
};

struct NamedTensorRecord {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

/// Flat parameter container: magic "RSAT", u16 version, u32 record count,
/// then (name, shape, little-endian float64 payload) records.
void write_checkpoint(const std::string& path, const std::vector<NamedTensorRecord>& records);
std::vector<NamedTensorRecord> read_checkpoint(const std::string& path);

constexpr std::uint16_t kCheckpointVersion = 1;

}  // namespace rangeseg
