// SPDX-License-Identifier: Apache-2.0
#pragma once

// Little-endian binary formats.
//
//   MSDT tensor:      "MSDT" u8 version=1, u8 dtype (1=f32, 2=f64, 3=u8), u8 rank,
//                     u8 reserved=0, rank x u32 dims, row-major payload.
//   MSDC checkpoint:  "MSDC" u8 version=1, u32 count, then per tensor
//                     u16 name length, UTF-8 name, MSDT record.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msdino/param_set.hpp"
#include "msdino/tensor.hpp"

namespace msdino::io {

inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else return DType::u8;
}

// ---------------------------------------------------------------------------
// Byte cursors

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void text(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename T>
  void values(std::span<const T> v) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
      buf_.insert(buf_.end(), p, p + v.size() * sizeof(T));
    } else {
      for (T x : v) {
        if constexpr (sizeof(T) == 4) f32(x);
        else if constexpr (sizeof(T) == 8) f64(x);
        else u8(x);
      }
    }
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  template <typename U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  void need(std::uint64_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated ") + what, pos_);
  }
  std::uint8_t u8(const char* what = "u8") { need(1, what); return data_[pos_++]; }
  std::uint16_t u16(const char* what = "u16") { return get<std::uint16_t>(what); }
  std::uint32_t u32(const char* what = "u32") { return get<std::uint32_t>(what); }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  void expect_magic(const char (&magic)[5]) {
    const auto start = pos_;
    if (text(4, "magic") != std::string(magic, 4))
      throw FormatError(std::string("bad magic, expected ") + magic, start);
  }

 private:
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::uint64_t pos_ = 0;
};

template <typename T>
void decode_values(std::span<const std::uint8_t> src, std::span<T> dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst.data(), src.data(), dst.size() * sizeof(T));
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                   std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
      U bits = 0;
      for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<U>(src[i * sizeof(T) + b]) << (8 * b);
      dst[i] = std::bit_cast<T>(bits);
    }
  }
}

// ---------------------------------------------------------------------------
// Files

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> buf(size);
  if (size && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size)))
    throw IoError("cannot read " + path.string());
  return buf;
}

inline std::size_t write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
  return bytes.size();
}

// ---------------------------------------------------------------------------
// MSDT

/// A decoded MSDT record: dtype-tagged raw little-endian payload.
struct TensorRecord {
  DType dtype = DType::f32;
  Shape dims;
  std::vector<std::uint8_t> payload;

  std::size_t numel() const { return shape_numel(dims); }

  template <typename T>
  static TensorRecord from_tensor(const Tensor<T>& t) {
    TensorRecord r;
    r.dtype = dtype_of<T>();
    r.dims = t.dims();
    ByteWriter w;
    w.values<T>(t.data());
    r.payload = w.take();
    return r;
  }

  static TensorRecord from_bytes(Shape dims, std::vector<std::uint8_t> values) {
    TensorRecord r;
    r.dtype = DType::u8;
    r.dims = std::move(dims);
    r.payload = std::move(values);
    if (r.payload.size() != r.numel()) throw ShapeError("u8 record payload size mismatch");
    return r;
  }

  /// Converts to a tensor of type T; u8 payloads convert value-wise.
  template <typename T>
  Tensor<T> to_tensor() const {
    std::vector<T> out(numel());
    switch (dtype) {
      case DType::f32: {
        std::vector<float> tmp(numel());
        decode_values<float>(payload, tmp);
        for (std::size_t i = 0; i < tmp.size(); ++i) out[i] = static_cast<T>(tmp[i]);
        break;
      }
      case DType::f64: {
        std::vector<double> tmp(numel());
        decode_values<double>(payload, tmp);
        for (std::size_t i = 0; i < tmp.size(); ++i) out[i] = static_cast<T>(tmp[i]);
        break;
      }
      case DType::u8:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(payload[i]);
        break;
    }
    return Tensor<T>(dims, std::move(out));
  }

  bool operator==(const TensorRecord&) const = default;
};

inline void encode_tensor(ByteWriter& w, const TensorRecord& r) {
  if (r.dims.empty() || r.dims.size() > 255) throw ShapeError("MSDT rank must be in [1,255]");
  w.text("MSDT");
  w.u8(kTensorVersion);
  w.u8(static_cast<std::uint8_t>(r.dtype));
  w.u8(static_cast<std::uint8_t>(r.dims.size()));
  w.u8(0);
  for (auto d : r.dims) {
    if (d > UINT32_MAX) throw ShapeError("MSDT dim exceeds u32");
    w.u32(static_cast<std::uint32_t>(d));
  }
  w.bytes(r.payload);
}

inline TensorRecord decode_tensor(ByteReader& r) {
  r.expect_magic("MSDT");
  const auto at = r.offset();
  if (const auto v = r.u8("version"); v != kTensorVersion)
    throw FormatError("unsupported MSDT version " + std::to_string(v), at);
  const auto dt_at = r.offset();
  const auto dt = r.u8("dtype");
  if (dt < 1 || dt > 3) throw FormatError("unknown MSDT dtype " + std::to_string(dt), dt_at);
  const auto rank_at = r.offset();
  const auto rank = r.u8("rank");
  if (rank == 0) throw FormatError("MSDT rank 0", rank_at);
  const auto res_at = r.offset();
  if (r.u8("reserved") != 0) throw FormatError("MSDT reserved byte not zero", res_at);
  TensorRecord rec;
  rec.dtype = static_cast<DType>(dt);
  std::uint64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    const auto d_at = r.offset();
    const auto d = r.u32("dims");
    if (d == 0) throw FormatError("MSDT zero dim", d_at);
    count *= d;
    if (count > (std::uint64_t{1} << 40)) throw FormatError("MSDT element count too large", d_at);
    rec.dims.push_back(d);
  }
  const std::uint64_t bytes = count * dtype_size(rec.dtype);
  r.need(bytes, "MSDT payload");
  auto payload = r.bytes(bytes, "MSDT payload");
  rec.payload.assign(payload.begin(), payload.end());
  return rec;
}

inline std::vector<std::uint8_t> encode_tensor(const TensorRecord& rec) {
  ByteWriter w;
  encode_tensor(w, rec);
  return w.take();
}

inline TensorRecord decode_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto rec = decode_tensor(r);
  if (!r.at_end()) throw FormatError("trailing bytes after MSDT record", r.offset());
  return rec;
}

template <typename T>
std::size_t write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  return write_file(path, encode_tensor(TensorRecord::from_tensor(t)));
}

inline TensorRecord read_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file(path));
}

// ---------------------------------------------------------------------------
// MSDC

using Checkpoint = std::map<std::string, TensorRecord>;

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.text("MSDC");
  w.u8(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& [name, rec] : ckpt) {
    if (name.empty() || name.size() > UINT16_MAX) throw ParameterError("checkpoint name length out of range");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.text(name);
    encode_tensor(w, rec);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("MSDC");
  const auto at = r.offset();
  if (const auto v = r.u8("version"); v != kCheckpointVersion)
    throw FormatError("unsupported MSDC version " + std::to_string(v), at);
  const auto count = r.u32("tensor count");
  Checkpoint out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_at = r.offset();
    const auto len = r.u16("name length");
    auto name = r.text(len, "name");
    if (name.empty()) throw FormatError("empty tensor name", name_at);
    auto rec = decode_tensor(r);
    if (!out.emplace(std::move(name), std::move(rec)).second)
      throw FormatError("duplicate tensor name", name_at);
  }
  if (!r.at_end()) throw FormatError("trailing bytes after MSDC", r.offset());
  return out;
}

template <typename T>
void add_params(Checkpoint& ckpt, const ParamSet<T>& params) {
  for (const auto& [name, t] : params) ckpt[name] = TensorRecord::from_tensor(t);
}

/// Float parameters found in `ckpt` under `prefix`.
template <typename T>
ParamSet<T> params_from(const Checkpoint& ckpt, const std::string& prefix = "") {
  ParamSet<T> out;
  for (const auto& [name, rec] : ckpt)
    if (name.compare(0, prefix.size(), prefix) == 0 && rec.dtype != DType::u8)
      out.add(name, rec.template to_tensor<T>());
  return out;
}

inline std::size_t write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  return write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace msdino::io
