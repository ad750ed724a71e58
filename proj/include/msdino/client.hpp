// SPDX-License-Identifier: Apache-2.0
#pragma once

// Client side: synthetic data, feature encryption and the MSDF bundle format.
//
//   MSDF: "MSDF" u8 version=1, u16 client_id length, UTF-8 client_id,
//         u32 image count n, u32 T, u32 d, u8 permuted, u8 x 3 reserved=0,
//         then n*T*d f32 (image-major, token, dim). All little-endian.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msdino/permuter.hpp"
#include "msdino/rng.hpp"
#include "msdino/serialize.hpp"
#include "msdino/vit.hpp"

namespace msdino {

struct LabeledImage {
  Tensor<float> pixels;  // [H x W], values in [0,1]
  int label = 0;
};

inline constexpr int kMaxSyntheticClasses = 8;

namespace corpus_detail {

/// Foreground membership of pixel (x, y) for a motif centred at (cx, cy) with
/// half-extent r.
inline bool motif_covers(int cls, double x, double y, double cx, double cy, double r, double angle) {
  const double dx0 = x - cx, dy0 = y - cy;
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double dx = ca * dx0 + sa * dy0, dy = -sa * dx0 + ca * dy0;
  const double dist = std::sqrt(dx * dx + dy * dy);
  const double bar = std::max(1.0, 0.3 * r);
  switch (cls) {
    case 0: return dist <= r;                                                   // disk
    case 1: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;        // square
    case 2: return (std::abs(dx) <= bar && std::abs(dy) <= r) || (std::abs(dy) <= bar && std::abs(dx) <= r);  // cross
    case 3: return std::abs(dx) <= r && std::abs(dy) <= r && std::fmod(dy + 64.0, 4.0) < 2.0;  // horizontal stripes
    case 4: return dist <= r && dist >= 0.6 * r;                                // ring
    case 5: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);       // triangle
    case 6: return std::abs(dx) <= r && std::abs(dy) <= r && std::fmod(dx + 64.0, 4.0) < 2.0;  // vertical stripes
    case 7: return std::abs(dx) <= r && std::abs(dy) <= r && (std::abs(dx - dy) <= bar || std::abs(dx + dy) <= bar);  // X
    default: return false;
  }
}

}  // namespace corpus_detail

/// Deterministic grayscale motifs: the class picks the shape, position, size
/// and intensity are random, plus Gaussian noise (sigma 0.05) clipped to [0,1].
/// Labels cycle through the classes so counts are balanced to within one.
inline std::vector<LabeledImage> generate_synthetic_corpus(std::uint64_t seed, std::size_t n, int num_classes,
                                                           std::size_t image_size = 32) {
  if (n < 1) throw ParameterError("generate_synthetic_corpus: n must be >= 1");
  if (num_classes < 2 || num_classes > kMaxSyntheticClasses)
    throw ParameterError("generate_synthetic_corpus: num_classes must be in [2,8]");
  if (image_size < 16) throw ParameterError("generate_synthetic_corpus: image_size must be >= 16");
  std::vector<LabeledImage> out;
  out.reserve(n);
  const double s = static_cast<double>(image_size);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = substream(seed, {0x636f7270ull, i});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int cls = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    const double r = s * (0.18 + 0.12 * u(rng));
    const double cx = r + (s - 2 * r) * u(rng), cy = r + (s - 2 * r) * u(rng);
    const double angle = (u(rng) - 0.5) * 0.5;
    const double background = 0.1 + 0.1 * u(rng);
    const double foreground = 0.65 + 0.3 * u(rng);
    std::normal_distribution<double> noise(0.0, 0.05);
    Tensor<float> img({image_size, image_size});
    for (std::size_t y = 0; y < image_size; ++y)
      for (std::size_t x = 0; x < image_size; ++x) {
        const bool on = corpus_detail::motif_covers(cls, x + 0.5, y + 0.5, cx, cy, r, angle);
        const double v = (on ? foreground : background) + noise(rng);
        img.data()[y * image_size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    out.push_back({std::move(img), cls});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encryption

struct TokenFeatures {
  Tensor<float> tokens;  // [T x d]
};

/// Embed the image with the client's secret embedder, then (unless disabled
/// for the ablation) shuffle token rows with the per-image permutation.
inline TokenFeatures encrypt_features(const Tensor<float>& image, const ParamSet<float>& embedder,
                                      const ViTConfig& cfg, std::uint64_t seed, std::uint64_t index, bool permute) {
  NoGradGuard guard;
  auto tokens = embed_patches(image, embedder, cfg);
  if (permute) tokens = permute_tokens(tokens, sample_permutation(seed, index, cfg.tokens()));
  return {tokens.detach()};
}

// ---------------------------------------------------------------------------
// Bundles

inline constexpr std::uint8_t kBundleVersion = 1;

struct FeatureBundle {
  std::string client_id;
  std::size_t tokens = 0;  // T
  std::size_t dim = 0;     // d
  bool permuted = true;
  std::vector<TokenFeatures> images;

  void validate() const {
    if (client_id.empty()) throw DataError("bundle: client_id must be non-empty");
    if (client_id.size() > UINT16_MAX) throw DataError("bundle: client_id too long");
    for (const auto& f : images)
      if (f.tokens.dims() != Shape{tokens, dim})
        throw ShapeError("bundle: features " + shape_str(f.tokens.dims()) + " do not match header [" +
                         std::to_string(tokens) + "," + std::to_string(dim) + "]");
  }

  bool operator==(const FeatureBundle& o) const {
    if (client_id != o.client_id || tokens != o.tokens || dim != o.dim || permuted != o.permuted ||
        images.size() != o.images.size())
      return false;
    for (std::size_t i = 0; i < images.size(); ++i)
      if (std::memcmp(images[i].tokens.data().data(), o.images[i].tokens.data().data(),
                      images[i].tokens.numel() * sizeof(float)) != 0)
        return false;
    return true;
  }
};

inline constexpr std::size_t kBundleFixedHeader = 4 + 1 + 2 + 4 + 4 + 4 + 1 + 3;

/// Serialised size in bytes.
inline std::size_t bundle_size(const FeatureBundle& b) {
  return kBundleFixedHeader + b.client_id.size() + b.images.size() * b.tokens * b.dim * sizeof(float);
}

inline std::vector<std::uint8_t> encode_bundle(const FeatureBundle& b) {
  b.validate();
  io::ByteWriter w;
  w.text("MSDF");
  w.u8(kBundleVersion);
  w.u16(static_cast<std::uint16_t>(b.client_id.size()));
  w.text(b.client_id);
  w.u32(static_cast<std::uint32_t>(b.images.size()));
  w.u32(static_cast<std::uint32_t>(b.tokens));
  w.u32(static_cast<std::uint32_t>(b.dim));
  w.u8(b.permuted ? 1 : 0);
  w.u8(0);
  w.u8(0);
  w.u8(0);
  for (const auto& f : b.images) w.values<float>(f.tokens.data());
  return w.take();
}

/// Parses and validates the whole header before touching the payload.
inline FeatureBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("MSDF");
  const auto v_at = r.offset();
  if (const auto v = r.u8("version"); v != kBundleVersion)
    throw FormatError("unsupported MSDF version " + std::to_string(v), v_at);
  FeatureBundle b;
  const auto id_len = r.u16("client_id length");
  const auto id_at = r.offset();
  b.client_id = r.text(id_len, "client_id");
  if (b.client_id.empty()) throw FormatError("empty client_id", id_at);
  const std::uint64_t n = r.u32("image count");
  const auto t_at = r.offset();
  b.tokens = r.u32("T");
  b.dim = r.u32("d");
  if (b.tokens == 0 || b.dim == 0) throw FormatError("zero token count or width", t_at);
  const auto flag_at = r.offset();
  const auto flag = r.u8("permuted flag");
  if (flag > 1) throw FormatError("permuted flag must be 0 or 1", flag_at);
  b.permuted = flag == 1;
  for (int i = 0; i < 3; ++i) {
    const auto at = r.offset();
    if (r.u8("reserved") != 0) throw FormatError("reserved byte not zero", at);
  }
  const std::uint64_t per_image = static_cast<std::uint64_t>(b.tokens) * b.dim;
  r.need(n * per_image * sizeof(float), "MSDF payload");
  if (r.remaining() != n * per_image * sizeof(float))
    throw FormatError("trailing bytes after MSDF payload", r.offset() + n * per_image * sizeof(float));
  b.images.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto raw = r.bytes(per_image * sizeof(float), "MSDF payload");
    std::vector<float> vals(per_image);
    io::decode_values<float>(raw, vals);
    b.images.push_back({Tensor<float>({b.tokens, b.dim}, std::move(vals))});
  }
  return b;
}

inline std::size_t write_bundle(const FeatureBundle& b, const std::filesystem::path& path) {
  return io::write_file(path, encode_bundle(b));
}

inline FeatureBundle read_bundle(const std::filesystem::path& path) {
  return decode_bundle(io::read_file(path));
}

/// Encrypts every image of a client into one bundle.
inline FeatureBundle make_bundle(const std::string& client_id, const std::vector<LabeledImage>& images,
                                 const ParamSet<float>& embedder, const ViTConfig& cfg, std::uint64_t perm_seed,
                                 bool permute) {
  FeatureBundle b{client_id, cfg.tokens(), cfg.dim, permute, {}};
  b.images.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i)
    b.images.push_back(encrypt_features(images[i].pixels, embedder, cfg, perm_seed, i, permute));
  return b;
}

// ---------------------------------------------------------------------------
// Image sets on disk: one MSDT [N x H x W] f32 file plus a labels CSV.

inline void write_image_set(const std::filesystem::path& dir, const std::vector<LabeledImage>& images) {
  if (images.empty()) throw ParameterError("write_image_set: no images");
  const std::size_t h = images[0].pixels.dim(0), w = images[0].pixels.dim(1);
  std::vector<float> all;
  all.reserve(images.size() * h * w);
  for (const auto& im : images) {
    if (im.pixels.dims() != Shape{h, w}) throw ShapeError("write_image_set: mixed image sizes");
    all.insert(all.end(), im.pixels.data().begin(), im.pixels.data().end());
  }
  std::filesystem::create_directories(dir);
  io::write_tensor(dir / "images.msdt", Tensor<float>({images.size(), h, w}, std::move(all)));
  std::ofstream labels(dir / "labels.csv");
  if (!labels) throw IoError("cannot create " + (dir / "labels.csv").string());
  labels << "index,label\n";
  for (std::size_t i = 0; i < images.size(); ++i) labels << i << ',' << images[i].label << '\n';
}

/// Reads `index,label` rows. Missing rows keep label -1.
inline std::vector<int> read_labels(const std::filesystem::path& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<int> labels(n, -1);
  std::string line;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("no comma");
      const auto idx = std::stoul(line.substr(0, comma));
      const int lab = std::stoi(line.substr(comma + 1));
      if (idx >= n) throw DataError("labels: index " + std::to_string(idx) + " out of range");
      labels[idx] = lab;
    } catch (const std::logic_error&) {
      throw DataError("labels: malformed line " + std::to_string(lineno) + ": " + line);
    }
  }
  return labels;
}

inline std::vector<LabeledImage> read_image_set(const std::filesystem::path& dir) {
  const auto rec = io::read_tensor(dir / "images.msdt");
  if (rec.dims.size() != 3) throw DataError("images.msdt must be rank 3 [N,H,W]");
  const auto all = rec.to_tensor<float>();
  const std::size_t n = rec.dims[0], h = rec.dims[1], w = rec.dims[2];
  std::vector<int> labels(n, -1);
  if (std::filesystem::exists(dir / "labels.csv")) labels = read_labels(dir / "labels.csv", n);
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> px(all.data().begin() + i * h * w, all.data().begin() + (i + 1) * h * w);
    out.push_back({Tensor<float>({h, w}, std::move(px)), labels[i]});
  }
  return out;
}

}  // namespace msdino
