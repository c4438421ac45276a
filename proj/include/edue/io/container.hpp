#pragma once

// EDT1 tensor container.
//
//   "EDT1" | u32 entry_count | entries... | u32 crc32(all preceding bytes)
//   entry: u32 name_len | name (UTF-8) | u32 rank | u32 extent[rank] | f32 payload
//
// All integers and floats are little-endian regardless of host byte order.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "edue/error.hpp"
#include "edue/tensor.hpp"

namespace edue::io {

inline constexpr char kContainerMagic[4] = {'E', 'D', 'T', '1'};

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, data, static_cast<uInt>(len)));
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t len) : data_(data), len_(len) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] std::size_t remaining() const { return len_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (len_ - pos_ < n) throw CorruptFileError("truncated EDT1 data");
  }
  const std::uint8_t* data_;
  std::size_t len_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_container(const std::vector<NamedTensor>& entries) {
  std::set<std::string> names;
  std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 4);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) throw ValidationError("duplicate container entry '" + e.name + "'");
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    const Shape s = e.tensor.shape();
    detail::put_u32(out, 4);
    for (std::size_t x : {s.n, s.c, s.h, s.w}) detail::put_u32(out, static_cast<std::uint32_t>(x));
    for (float f : e.tensor.data()) detail::put_f32(out, f);
  }
  detail::put_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

// Ranks below 4 are left-padded with unit extents.
inline std::vector<NamedTensor> decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) throw CorruptFileError("truncated EDT1 data: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) throw CorruptFileError("bad magic, not an EDT1 file");
  const std::size_t body = bytes.size() - 4;
  detail::Reader crc_reader(bytes.data() + body, 4);
  const std::uint32_t stored = crc_reader.u32();
  if (stored != crc32_of(bytes.data(), body)) throw CorruptFileError("CRC mismatch (file truncated or modified)");

  detail::Reader r(bytes.data() + 4, body - 4);
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  std::set<std::string> names;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor e;
    e.name = r.bytes(r.u32());
    if (!names.insert(e.name).second) throw CorruptFileError("duplicate entry '" + e.name + "'");
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 4) throw CorruptFileError("entry '" + e.name + "' has unsupported rank " + std::to_string(rank));
    std::vector<std::size_t> ext(4, 1);
    for (std::uint32_t i = 0; i < rank; ++i) ext[4 - rank + i] = r.u32();
    const Shape s{ext[0], ext[1], ext[2], ext[3]};
    if (static_cast<unsigned long long>(s.numel()) * 4ULL > r.remaining())
      throw CorruptFileError("entry '" + e.name + "' payload exceeds file size");
    std::vector<float> data(s.numel());
    for (float& f : data) f = r.f32();
    e.tensor = Tensor<float>(s, std::move(data));
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw CorruptFileError("trailing bytes after last entry");
  return out;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Write to a sibling temp file, then rename over the target.
inline void write_atomic(const std::filesystem::path& path, const void* data, std::size_t len) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_atomic(path, text.data(), text.size());
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

inline void save_container(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  const auto bytes = encode_container(entries);
  write_atomic(path, bytes.data(), bytes.size());
}

inline std::vector<NamedTensor> load_container(const std::filesystem::path& path) {
  return decode_container(read_bytes(path));
}

inline const Tensor<float>& find_entry(const std::vector<NamedTensor>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return e.tensor;
  throw ValidationError("container has no entry '" + name + "'");
}

}  // namespace edue::io
