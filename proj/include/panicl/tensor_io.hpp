#pragma once

// Binary tensor container.
//
//   offset  size        field
//   0       4           magic "PNCL"
//   4       4           version (u32, currently 1)
//   8       4           dtype code (u32: 1 = f32, 2 = u32)
//   12      4           rank (u32)
//   16      8 * rank    dims (u64 each)
//   ..      4           sidecar length in bytes (u32)
//   ..      n           sidecar (UTF-8 JSON, may be empty)
//   ..      4 * prod    payload, row-major
//   ..      4           CRC-32 (zlib polynomial) of every preceding byte
//
// Every integer and payload element is little-endian.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "panicl/errors.hpp"

namespace panicl {

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr char kTensorMagic[4] = {'P', 'N', 'C', 'L'};

enum class DType : std::uint32_t { kF32 = 1, kU32 = 2 };

struct Tensor {
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> dims;
  std::vector<float> f32;
  std::vector<std::uint32_t> u32;
  std::string sidecar;  // raw JSON text, kept verbatim for bit-exact round trips

  static Tensor from_f32(std::vector<std::uint64_t> dims, std::vector<float> values,
                         const nlohmann::json& meta = nlohmann::json()) {
    Tensor t;
    t.dtype = DType::kF32;
    t.dims = std::move(dims);
    t.f32 = std::move(values);
    if (!meta.is_null()) t.sidecar = meta.dump();
    t.check_shape();
    return t;
  }

  static Tensor from_u32(std::vector<std::uint64_t> dims, std::vector<std::uint32_t> values,
                         const nlohmann::json& meta = nlohmann::json()) {
    Tensor t;
    t.dtype = DType::kU32;
    t.dims = std::move(dims);
    t.u32 = std::move(values);
    if (!meta.is_null()) t.sidecar = meta.dump();
    t.check_shape();
    return t;
  }

  std::uint64_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::uint64_t{1}, std::multiplies<>());
  }

  std::size_t rank() const noexcept { return dims.size(); }

  std::uint64_t dim(std::size_t i) const {
    if (i >= dims.size()) throw DimensionError("tensor axis out of range");
    return dims[i];
  }

  nlohmann::json meta() const {
    if (sidecar.empty()) return nlohmann::json::object();
    return nlohmann::json::parse(sidecar);
  }

  void check_shape() const {
    const std::uint64_t n = element_count();
    const std::size_t have = dtype == DType::kF32 ? f32.size() : u32.size();
    if (have != n) {
      throw DimensionError("tensor payload has " + std::to_string(have) + " elements, dims need " +
                           std::to_string(n));
    }
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t done = 0;
  while (done < len) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(len - done, 1U << 30));
    crc = crc32(crc, p + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string raw(std::size_t n, const char* field) {
    need(n, field);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* field) const {
    if (bytes_.size() < pos_ || bytes_.size() - pos_ < n) {
      throw FormatError(path_ + ": truncated while reading " + field + " at offset " + std::to_string(pos_) +
                        " (need " + std::to_string(n) + " bytes, " + std::to_string(bytes_.size() - std::min(pos_, bytes_.size())) +
                        " available)");
    }
  }

  std::size_t pos() const noexcept { return pos_; }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  t.check_shape();
  std::string out;
  out.append(kTensorMagic, 4);
  detail::put_u32(out, kTensorVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(t.dtype));
  detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u64(out, d);
  detail::put_u32(out, static_cast<std::uint32_t>(t.sidecar.size()));
  out += t.sidecar;
  if (t.dtype == DType::kF32) {
    for (float v : t.f32) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  } else {
    for (std::uint32_t v : t.u32) detail::put_u32(out, v);
  }
  detail::put_u32(out, detail::crc32_of(out, out.size()));
  return out;
}

inline Tensor decode_tensor(const std::string& bytes, const std::string& origin = "<memory>") {
  detail::Reader r(bytes, origin);
  const std::string magic = r.raw(4, "magic");
  if (magic != std::string(kTensorMagic, 4)) throw FormatError(origin + ": bad magic at offset 0");
  const std::uint32_t version = r.u32("version");
  if (version != kTensorVersion) {
    throw FormatError(origin + ": unsupported version " + std::to_string(version) + " at offset 4");
  }
  const std::uint32_t code = r.u32("dtype");
  if (code != 1 && code != 2) throw FormatError(origin + ": unknown dtype code " + std::to_string(code) + " at offset 8");
  const std::uint32_t rank = r.u32("rank");
  if (rank > 16) throw FormatError(origin + ": implausible rank " + std::to_string(rank) + " at offset 12");

  Tensor t;
  t.dtype = static_cast<DType>(code);
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(r.u64("dims"));
  const std::uint32_t side_len = r.u32("sidecar length");
  t.sidecar = r.raw(side_len, "sidecar");

  const std::uint64_t n = t.element_count();
  const std::size_t payload_at = r.pos();
  const std::uint64_t expected_total = payload_at + n * 4 + 4;
  if (bytes.size() != expected_total) {
    throw FormatError(origin + ": expected " + std::to_string(expected_total) + " bytes for dims, found " +
                      std::to_string(bytes.size()) + " (payload starts at offset " + std::to_string(payload_at) + ")");
  }
  if (t.dtype == DType::kF32) {
    t.f32.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) t.f32[i] = std::bit_cast<float>(r.u32("payload"));
  } else {
    t.u32.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) t.u32[i] = r.u32("payload");
  }
  const std::size_t crc_at = r.pos();
  const std::uint32_t stored = r.u32("crc");
  const std::uint32_t actual = detail::crc32_of(bytes, crc_at);
  if (stored != actual) {
    throw ChecksumError(origin + ": CRC mismatch at offset " + std::to_string(crc_at) + " (stored " +
                        std::to_string(stored) + ", computed " + std::to_string(actual) + ")");
  }
  return t;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file_bytes(path), path.string());
}

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file_atomic(path, encode_tensor(t));
}

}  // namespace panicl
