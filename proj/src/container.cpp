#include "resrep/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian raw bytes");

namespace resrep {

namespace {

void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <typename T>
void put_scalar(std::string& out, T v) {
  put_bytes(out, &v, sizeof(v));
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

  void read(void* dst, std::size_t n, const char* what) {
    if (pos_ + n > buf_.size()) {
      throw CheckpointError(path_ + ": truncated while reading " + std::string(what) +
                            " at byte offset " + std::to_string(pos_));
    }
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }

  template <typename T>
  T scalar(const char* what) {
    T v;
    read(&v, sizeof(v), what);
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

const TensorRecord* Container::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_container(const std::string& path, const Container& c) {
  std::string buf;
  put_bytes(buf, kContainerMagic, 4);
  put_scalar<std::uint32_t>(buf, c.version);
  put_scalar<std::uint64_t>(buf, c.metadata.size());
  put_bytes(buf, c.metadata.data(), c.metadata.size());
  put_scalar<std::uint32_t>(buf, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.payload.size() != t.element_count() * dtype_size(t.dtype)) {
      throw CheckpointError("tensor '" + t.name + "' payload size " +
                            std::to_string(t.payload.size()) + " does not match dims");
    }
    put_scalar<std::uint16_t>(buf, static_cast<std::uint16_t>(t.name.size()));
    put_bytes(buf, t.name.data(), t.name.size());
    put_scalar<std::uint8_t>(buf, static_cast<std::uint8_t>(t.dtype));
    put_scalar<std::uint8_t>(buf, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_scalar<std::uint64_t>(buf, d);
    put_scalar<std::uint64_t>(buf, t.payload.size());
    put_bytes(buf, t.payload.data(), t.payload.size());
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open for writing: " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("rename " + tmp + " -> " + path + ": " + ec.message());
}

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(buf, path);

  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kContainerMagic, 4) != 0) {
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  }
  Container c;
  c.version = r.scalar<std::uint32_t>("version");
  if (c.version != kContainerVersion) {
    throw CheckpointError(path + ": unsupported checkpoint version " +
                          std::to_string(c.version));
  }
  const auto meta_len = r.scalar<std::uint64_t>("metadata length");
  c.metadata = r.str(meta_len, "metadata");
  const auto count = r.scalar<std::uint32_t>("tensor count");
  c.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    const auto name_len = r.scalar<std::uint16_t>("tensor name length");
    t.name = r.str(name_len, "tensor name");
    const auto tag = r.scalar<std::uint8_t>("dtype tag");
    if (tag > 1) {
      throw CheckpointError(path + ": unknown dtype tag " + std::to_string(tag) +
                            " for tensor '" + t.name + "'");
    }
    t.dtype = static_cast<DType>(tag);
    const auto rank = r.scalar<std::uint8_t>("rank");
    t.dims.resize(rank);
    for (auto& d : t.dims) d = r.scalar<std::uint64_t>("dim");
    const auto payload_len = r.scalar<std::uint64_t>("payload length");
    if (payload_len != t.element_count() * dtype_size(t.dtype)) {
      throw CheckpointError(path + ": tensor '" + t.name + "' payload length " +
                            std::to_string(payload_len) + " inconsistent with dims");
    }
    t.payload.resize(payload_len);
    r.read(t.payload.data(), payload_len, "payload");
    c.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) {
    throw CheckpointError(path + ": trailing bytes at offset " + std::to_string(r.pos()));
  }
  return c;
}

}  // namespace resrep
