#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "htr/errors.hpp"
#include "htr/tensor.hpp"

namespace htr {

/// Named tensors; std::map keeps serialization order (and so the bytes) deterministic.
using TensorMap = std::map<std::string, Tensor>;

namespace io {

using Bytes = std::vector<std::uint8_t>;

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(Bytes& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_bytes(Bytes& out, const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  out.insert(out.end(), p, p + n);
}

inline void put_string(Bytes& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

/// Bounds-checked little-endian reader over a byte buffer.
class Reader {
 public:
  Reader(const Bytes& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw InputError(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string string() { return str(u32()); }
  Bytes bytes(std::size_t n) {
    need(n);
    Bytes b(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return b;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }
  const std::string& what() const { return what_; }

 private:
  const Bytes& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("short write to " + path);
}

}  // namespace io

inline constexpr char kCheckpointMagic[4] = {'H', 'T', 'R', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian: "HTRF", version u32, count u32, then per tensor
/// {u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f64 payload[]}.
inline io::Bytes serialize_checkpoint(const TensorMap& tensors) {
  io::Bytes out;
  io::put_bytes(out, kCheckpointMagic, 4);
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (t.empty()) throw UsageError("checkpoint: tensor '" + name + "' is empty");
    io::put_string(out, name);
    io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) io::put_f64(out, v);
  }
  return out;
}

inline TensorMap deserialize_checkpoint(const io::Bytes& bytes, const std::string& what = "checkpoint") {
  io::Reader r(bytes, what);
  if (r.str(4) != std::string(kCheckpointMagic, 4)) throw InputError(what + ": bad magic, not an HTRF checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw InputError(what + ": unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  TensorMap tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw InputError(what + ": tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = element_count(shape);
    r.need(n * 8);
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    if (!tensors.emplace(name, Tensor(shape, std::move(data))).second) {
      throw InputError(what + ": duplicate tensor '" + name + "'");
    }
  }
  if (!r.at_end()) throw InputError(what + ": trailing bytes after last tensor");
  return tensors;
}

inline void save_checkpoint(const std::string& path, const TensorMap& tensors) {
  io::write_file(path, serialize_checkpoint(tensors));
}

inline TensorMap load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path), path); }

}  // namespace htr
