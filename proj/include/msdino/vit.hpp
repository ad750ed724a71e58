// SPDX-License-Identifier: Apache-2.0
#pragma once

// Vision transformer pieces split along the client/server boundary:
//   embedder.*  patch projection + position table (client secret)
//   backbone.*  CLS token, pre-norm encoder blocks, final norm (server)
//   head.*      DINO projection head with weight-normalised output layer

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "msdino/ops.hpp"
#include "msdino/param_set.hpp"
#include "msdino/rng.hpp"
#include "msdino/serialize.hpp"

namespace msdino {

enum class HeadActivation { gelu, identity };

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t head_out_dim = 256;  // K
  std::size_t head_hidden = 256;
  std::size_t head_bottleneck = 64;
  std::size_t mlp_ratio = 4;
  HeadActivation head_activation = HeadActivation::gelu;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_pixels() const { return patch_size * patch_size; }

  void validate() const {
    if (!image_size || !patch_size || !dim || !heads || !head_out_dim || !head_hidden || !head_bottleneck ||
        !mlp_ratio)
      throw ParameterError("ViTConfig: sizes must be positive");
    if (image_size % patch_size != 0) throw ParameterError("ViTConfig: image_size not divisible by patch_size");
    if (dim % heads != 0) throw ParameterError("ViTConfig: dim not divisible by heads");
  }

  /// ViT-S/8 at 224 px with an 8,192-way head.
  static ViTConfig full_scale() {
    ViTConfig c;
    c.image_size = 224;
    c.patch_size = 8;
    c.dim = 384;
    c.depth = 12;
    c.heads = 6;
    c.head_out_dim = 8192;
    c.head_hidden = 2048;
    c.head_bottleneck = 256;
    return c;
  }

  std::string to_string() const {
    std::ostringstream os;
    os << "image_size=" << image_size << ";patch_size=" << patch_size << ";dim=" << dim << ";depth=" << depth
       << ";heads=" << heads << ";head_out_dim=" << head_out_dim << ";head_hidden=" << head_hidden
       << ";head_bottleneck=" << head_bottleneck << ";mlp_ratio=" << mlp_ratio
       << ";head_activation=" << (head_activation == HeadActivation::gelu ? "gelu" : "identity");
    return os.str();
  }

  static ViTConfig parse(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ';')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ParameterError("ViTConfig: malformed entry '" + item + "'");
      kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    ViTConfig c;
    auto num = [&](const char* key, std::size_t& field) {
      if (auto it = kv.find(key); it != kv.end()) field = std::stoul(it->second);
    };
    num("image_size", c.image_size);
    num("patch_size", c.patch_size);
    num("dim", c.dim);
    num("depth", c.depth);
    num("heads", c.heads);
    num("head_out_dim", c.head_out_dim);
    num("head_hidden", c.head_hidden);
    num("head_bottleneck", c.head_bottleneck);
    num("mlp_ratio", c.mlp_ratio);
    if (auto it = kv.find("head_activation"); it != kv.end())
      c.head_activation = it->second == "identity" ? HeadActivation::identity : HeadActivation::gelu;
    c.validate();
    return c;
  }

  bool operator==(const ViTConfig&) const = default;
};

template <typename T>
struct ViTParams {
  ParamSet<T> embedder;
  ParamSet<T> backbone;
  ParamSet<T> head;
};

namespace vit_detail {

inline std::string block(std::size_t i, const char* leaf) {
  return "backbone.blocks." + std::to_string(i) + "." + leaf;
}

template <typename T>
Tensor<T> trunc_normal_tensor(Rng& rng, Shape dims, T stddev) {
  Tensor<T> t(std::move(dims));
  for (auto& v : t.data()) v = truncated_normal<T>(rng, stddev);
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Rng& rng, Shape dims, T stddev) {
  Tensor<T> t(std::move(dims));
  for (auto& v : t.data()) v = normal<T>(rng, stddev);
  return t;
}

template <typename T>
void add_linear(ParamSet<T>& ps, Rng& rng, const std::string& name, std::size_t out, std::size_t in,
                bool bias = true) {
  ps.add(name + ".weight", trunc_normal_tensor<T>(rng, {out, in}, T(0.02)));
  if (bias) ps.add(name + ".bias", normal_tensor<T>(rng, {out}, T(0.02)));
}

template <typename T>
void add_norm(ParamSet<T>& ps, const std::string& name, std::size_t dim) {
  ps.add(name + ".weight", Tensor<T>({dim}, T(1)));
  ps.add(name + ".bias", Tensor<T>({dim}, T(0)));
}

}  // namespace vit_detail

/// Patch projection and position table. Seeded independently so every client
/// can hold its own secret embedder.
template <typename T>
ParamSet<T> init_embedder(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = substream(seed, {0x656d62ull});
  ParamSet<T> ps;
  vit_detail::add_linear(ps, rng, "embedder.patch_proj", cfg.dim, cfg.patch_pixels());
  ps.add("embedder.pos_embed", vit_detail::normal_tensor<T>(rng, {cfg.tokens(), cfg.dim}, T(0.02)));
  return ps;
}

/// Transformer encoder blocks under `prefix` ("<prefix>blocks.i.*" and "<prefix>norm.*").
template <typename T>
void add_encoder_params(ParamSet<T>& ps, Rng& rng, const std::string& prefix, std::size_t dim, std::size_t depth,
                        std::size_t mlp_ratio) {
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string b = prefix + "blocks." + std::to_string(i) + ".";
    vit_detail::add_norm(ps, b + "norm1", dim);
    vit_detail::add_linear(ps, rng, b + "attn.qkv", 3 * dim, dim);
    vit_detail::add_linear(ps, rng, b + "attn.proj", dim, dim);
    vit_detail::add_norm(ps, b + "norm2", dim);
    vit_detail::add_linear(ps, rng, b + "mlp.fc1", mlp_ratio * dim, dim);
    vit_detail::add_linear(ps, rng, b + "mlp.fc2", dim, mlp_ratio * dim);
  }
  vit_detail::add_norm(ps, prefix + "norm", dim);
}

template <typename T>
ParamSet<T> init_backbone(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = substream(seed, {0x626b62ull});
  ParamSet<T> ps;
  ps.add("backbone.cls_token", Tensor<T>({cfg.dim}, T(0)));
  add_encoder_params(ps, rng, "backbone.", cfg.dim, cfg.depth, cfg.mlp_ratio);
  return ps;
}

template <typename T>
ParamSet<T> init_head(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = substream(seed, {0x686564ull});
  ParamSet<T> ps;
  vit_detail::add_linear(ps, rng, "head.mlp.0", cfg.head_hidden, cfg.dim);
  vit_detail::add_linear(ps, rng, "head.mlp.1", cfg.head_hidden, cfg.head_hidden);
  vit_detail::add_linear(ps, rng, "head.mlp.2", cfg.head_bottleneck, cfg.head_hidden);
  // Weight-normalised output layer with the gain fixed at 1: rows are unit norm.
  auto last = vit_detail::trunc_normal_tensor<T>(rng, {cfg.head_out_dim, cfg.head_bottleneck}, T(0.02));
  {
    NoGradGuard guard;
    last = ops::l2_normalize(last).clone();
  }
  ps.add("head.last.weight", last);
  return ps;
}

template <typename T>
ViTParams<T> init_params(const ViTConfig& cfg, std::uint64_t seed) {
  return {init_embedder<T>(cfg, seed), init_backbone<T>(cfg, seed), init_head<T>(cfg, seed)};
}

// ---------------------------------------------------------------------------
// Embedding

/// Non-overlapping patches of an image [H x W] flattened row-major: [T x p^2].
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, const ViTConfig& cfg) {
  if (image.rank() != 2 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size)
    throw ShapeError("patchify: expected " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                     " image, got " + shape_str(image.dims()));
  const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
  std::vector<T> out(cfg.tokens() * cfg.patch_pixels());
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          out[(pr * g + pc) * p * p + y * p + x] = image.data()[(pr * p + y) * s + pc * p + x];
  return Tensor<T>({cfg.tokens(), cfg.patch_pixels()}, std::move(out));
}

/// Inverse of patchify.
template <typename T>
Tensor<T> unpatchify(std::span<const T> patches, const ViTConfig& cfg) {
  if (patches.size() != cfg.tokens() * cfg.patch_pixels()) throw ShapeError("unpatchify: size mismatch");
  const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
  std::vector<T> out(s * s);
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          out[(pr * p + y) * s + pc * p + x] = patches[(pr * g + pc) * p * p + y * p + x];
  return Tensor<T>({s, s}, std::move(out));
}

/// Patch tokens [T x d] with the position table added row-wise.
template <typename T>
Tensor<T> embed_patches(const Tensor<T>& image, const ParamSet<T>& embedder, const ViTConfig& cfg) {
  const auto patches = patchify(image, cfg);
  const auto& pos = embedder.at("embedder.pos_embed");
  if (pos.dims() != Shape{cfg.tokens(), cfg.dim}) throw ShapeError("embed_patches: position table shape mismatch");
  auto proj = ops::linear(patches, embedder.at("embedder.patch_proj.weight"), embedder.at("embedder.patch_proj.bias"));
  return ops::add(proj, pos);
}

// ---------------------------------------------------------------------------
// Encoder

/// Pre-norm encoder over row-stacked sequences delimited by `offsets`,
/// followed by the final norm.
template <typename T>
Tensor<T> run_encoder(const ParamSet<T>& ps, const std::string& prefix, Tensor<T> x,
                      const std::vector<std::size_t>& offsets, std::size_t depth, std::size_t heads) {
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string b = prefix + "blocks." + std::to_string(i) + ".";
    auto p = [&](const char* leaf) -> const Tensor<T>& { return ps.at(b + leaf); };
    auto h = ops::layer_norm(x, p("norm1.weight"), p("norm1.bias"));
    h = ops::linear(h, p("attn.qkv.weight"), p("attn.qkv.bias"));
    h = ops::multi_head_attention(h, offsets, heads);
    h = ops::linear(h, p("attn.proj.weight"), p("attn.proj.bias"));
    x = ops::add(x, h);
    h = ops::layer_norm(x, p("norm2.weight"), p("norm2.bias"));
    h = ops::gelu(ops::linear(h, p("mlp.fc1.weight"), p("mlp.fc1.bias")));
    h = ops::linear(h, p("mlp.fc2.weight"), p("mlp.fc2.bias"));
    x = ops::add(x, h);
  }
  return ops::layer_norm(x, ps.at(prefix + "norm.weight"), ps.at(prefix + "norm.bias"));
}

template <typename T>
struct EncodedBatch {
  Tensor<T> hidden;                  // [rows x d], CLS first in each sequence
  std::vector<std::size_t> offsets;  // sequence starts + final end
  Tensor<T> cls;                     // [sequences x d]
};

/// Encodes many token subsets at once. Each sequence lists row indices into
/// `source` ([R x d]); the CLS token is prepended to every sequence.
template <typename T>
EncodedBatch<T> encode_sequences(const Tensor<T>& source, const std::vector<std::vector<std::size_t>>& sequences,
                                 const ParamSet<T>& backbone, const ViTConfig& cfg) {
  if (source.rank() != 2 || source.dim(1) != cfg.dim)
    throw ShapeError("encode: token width " + shape_str(source.dims()) + " does not match dim " +
                     std::to_string(cfg.dim));
  const auto& cls = backbone.at("backbone.cls_token");
  const auto src = ops::concat_rows<T>({cls, source});
  std::vector<std::size_t> rows, offsets{0}, cls_rows;
  for (const auto& seq : sequences) {
    cls_rows.push_back(rows.size());
    rows.push_back(0);
    for (auto r : seq) {
      if (r >= source.dim(0)) throw ShapeError("encode: sequence row out of range");
      rows.push_back(r + 1);
    }
    offsets.push_back(rows.size());
  }
  auto hidden = run_encoder(backbone, "backbone.", ops::gather_rows(src, rows), offsets, cfg.depth, cfg.heads);
  auto cls_out = ops::gather_rows(hidden, cls_rows);
  return {hidden, offsets, cls_out};
}

template <typename T>
struct Encoded {
  Tensor<T> cls;         // [d]
  Tensor<T> token_outs;  // [T x d]
};

/// Single image: prepend CLS, run the encoder, split CLS and patch rows.
template <typename T>
Encoded<T> encode(const Tensor<T>& tokens, const ParamSet<T>& backbone, const ViTConfig& cfg) {
  if (tokens.rank() != 2) throw ShapeError("encode: tokens must be [T x d]");
  std::vector<std::size_t> all(tokens.dim(0));
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto enc = encode_sequences(tokens, {all}, backbone, cfg);
  std::vector<std::size_t> patch_rows(tokens.dim(0));
  std::iota(patch_rows.begin(), patch_rows.end(), std::size_t{1});
  return {ops::reshape(enc.cls, {cfg.dim}), ops::gather_rows(enc.hidden, patch_rows)};
}

// ---------------------------------------------------------------------------
// DINO head

/// MLP to the bottleneck followed by L2 normalisation: [S x bottleneck].
template <typename T>
Tensor<T> head_embedding(const Tensor<T>& cls, const ParamSet<T>& head, const ViTConfig& cfg) {
  auto x = cls.rank() == 1 ? ops::reshape(cls, {1, cls.dim(0)}) : cls;
  if (x.dim(1) != cfg.dim) throw ShapeError("dino_head: input width mismatch");
  auto act = [&](const Tensor<T>& v) { return cfg.head_activation == HeadActivation::gelu ? ops::gelu(v) : v; };
  x = act(ops::linear(x, head.at("head.mlp.0.weight"), head.at("head.mlp.0.bias")));
  x = act(ops::linear(x, head.at("head.mlp.1.weight"), head.at("head.mlp.1.bias")));
  x = ops::linear(x, head.at("head.mlp.2.weight"), head.at("head.mlp.2.bias"));
  return ops::l2_normalize(x);
}

/// Pre-temperature logits [S x K].
template <typename T>
Tensor<T> dino_head(const Tensor<T>& cls, const ParamSet<T>& head, const ViTConfig& cfg) {
  const auto z = head_embedding(cls, head, cfg);
  const auto w = ops::l2_normalize(head.at("head.last.weight"));
  return ops::linear(z, w);
}

// ---------------------------------------------------------------------------
// Checkpoint glue

inline io::TensorRecord config_record(const ViTConfig& cfg) {
  const auto s = cfg.to_string();
  return io::TensorRecord::from_bytes({s.size()}, std::vector<std::uint8_t>(s.begin(), s.end()));
}

inline ViTConfig config_from(const io::Checkpoint& ckpt) {
  auto it = ckpt.find("meta.config");
  if (it == ckpt.end() || it->second.dtype != io::DType::u8)
    throw DataError("checkpoint lacks meta.config record");
  return ViTConfig::parse(std::string(it->second.payload.begin(), it->second.payload.end()));
}

}  // namespace msdino
