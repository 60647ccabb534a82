#pragma once

// Binary checkpoint container: magic "RSRP", format version, a UTF-8
// metadata block, then a table of named tensors with dtype tags, dims and
// little-endian raw payloads. Writes are atomic (temp file + rename).

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace resrep {

inline constexpr char kContainerMagic[4] = {'R', 'S', 'R', 'P'};
inline constexpr std::uint32_t kContainerVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 8; }

struct TensorRecord {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> dims;
  std::vector<std::byte> payload;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct Container {
  std::uint32_t version = kContainerVersion;
  std::string metadata;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;
};

/// Serialize to path atomically. Throws CheckpointError on I/O failure.
void write_container(const std::string& path, const Container& c);

/// Parse a container file. Throws CheckpointError naming the byte offset on
/// truncation, and rejects unknown magic or version.
Container read_container(const std::string& path);

}  // namespace resrep
