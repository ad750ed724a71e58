// SPDX-License-Identifier: Apache-2.0
#pragma once

// Feature-inversion attack harness. The attacker holds a public image set
// and intercepted feature bundles, and trains
//   F^  an embedder with the client architecture,
//   J   a jigsaw solver restoring token order (used when bundles are permuted),
//   D   a discriminator telling J(F^(public)) from J(intercepted),
//   G   a decoder from tokens back to pixels.
// The attacker samples its own permutations; it never sees the clients'.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msdino/client.hpp"
#include "msdino/metrics.hpp"
#include "msdino/feature_store.hpp"

namespace msdino {

enum class DecoderKind { conv, identity };

struct AttackConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t jigsaw_depth = 4;
  std::size_t jigsaw_heads = 4;
  std::size_t jigsaw_mlp_ratio = 2;
  std::size_t disc_channels = 32;
  std::size_t gen_channels = 32;
  double adversarial_weight = 1.0;
  double beta1 = 0.5;
  DecoderKind decoder = DecoderKind::conv;  // identity: tokens are raw patches (d == patch_size^2)
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ParameterError("attack: batch size must be positive");
    if (!(lr > 0)) throw ParameterError("attack: learning rate must be positive");
    if (jigsaw_heads == 0 || jigsaw_mlp_ratio == 0 || disc_channels == 0 || gen_channels == 0)
      throw ParameterError("attack: layer widths must be positive");
  }
};

struct AttackerModels {
  ViTConfig vit;
  AttackConfig cfg;
  bool use_jigsaw = false;
  ParamSet<float> encoder;  // embedder.*
  ParamSet<float> jigsaw;   // jigsaw.*
  ParamSet<float> disc;     // disc.*
  ParamSet<float> gen;      // gen.*
};

struct AttackEpoch {
  std::size_t epoch = 0;
  double jigsaw_loss = 0;  // L1 over mean |token|, permuted public tokens vs originals
  double disc_loss = 0;
  double adv_loss = 0;
  double recon_loss = 0;   // L1 + L2 on public images
};

struct AttackResult {
  AttackerModels models;
  std::vector<AttackEpoch> history;
};

namespace attack_detail {

inline std::size_t upsample_layers(const ViTConfig& vit) {
  std::size_t n = 0, p = vit.patch_size;
  while (p > 1 && p % 2 == 0) p /= 2, ++n;
  if (p != 1) throw ParameterError("attack: conv decoder needs a power-of-two patch size");
  return n;
}

inline std::size_t gen_width(const AttackConfig& cfg, std::size_t layer) {
  return std::max<std::size_t>(4, cfg.gen_channels >> layer);
}

inline Tensor<float> conv_weight(Rng& rng, Shape dims, double fan_in) {
  Tensor<float> t(std::move(dims));
  const double sd = 1.0 / std::sqrt(fan_in);
  for (auto& v : t.data()) v = normal<float>(rng, float(sd));
  return t;
}

inline Tensor<float> batch_tokens(const std::vector<const Tensor<float>*>& rows) {
  std::vector<Tensor<float>> parts;
  parts.reserve(rows.size());
  for (const auto* r : rows) parts.push_back(*r);
  return ops::concat_rows(parts);
}

}  // namespace attack_detail

inline AttackerModels init_attacker(const ViTConfig& vit, const AttackConfig& cfg, bool use_jigsaw) {
  vit.validate();
  cfg.validate();
  AttackerModels m;
  m.vit = vit;
  m.cfg = cfg;
  m.use_jigsaw = use_jigsaw;
  const std::size_t d = vit.dim, t = vit.tokens(), g = vit.grid();
  m.encoder = init_embedder<float>(vit, substream(cfg.seed, {0x656e63ull})());

  Rng jr = substream(cfg.seed, {0x6a6967ull});
  add_encoder_params(m.jigsaw, jr, "jigsaw.", d, cfg.jigsaw_depth, cfg.jigsaw_mlp_ratio);
  m.jigsaw.add("jigsaw.slots", vit_detail::normal_tensor<float>(jr, {t, d}, 0.02f));
  vit_detail::add_linear(m.jigsaw, jr, "jigsaw.out", d, d);

  Rng dr = substream(cfg.seed, {0x646973ull});
  const std::size_t c = cfg.disc_channels;
  m.disc.add("disc.0.weight", attack_detail::conv_weight(dr, {c, d, 3, 3}, double(d * 9)));
  m.disc.add("disc.0.bias", Tensor<float>({c}, 0.f));
  m.disc.add("disc.1.weight", attack_detail::conv_weight(dr, {c, c, 3, 3}, double(c * 9)));
  m.disc.add("disc.1.bias", Tensor<float>({c}, 0.f));
  m.disc.add("disc.2.weight", attack_detail::conv_weight(dr, {1, c, g, g}, double(c * g * g)));
  m.disc.add("disc.2.bias", Tensor<float>({1}, 0.f));

  if (cfg.decoder == DecoderKind::conv) {
    Rng gr = substream(cfg.seed, {0x67656eull});
    const std::size_t ups = attack_detail::upsample_layers(vit);
    std::size_t in = d;
    for (std::size_t l = 0; l < ups; ++l) {
      const std::size_t out = attack_detail::gen_width(cfg, l);
      const auto name = "gen." + std::to_string(l);
      m.gen.add(name + ".weight", attack_detail::conv_weight(gr, {in, out, 4, 4}, double(in * 4)));
      m.gen.add(name + ".bias", Tensor<float>({out}, 0.f));
      in = out;
    }
    const auto name = "gen." + std::to_string(ups);
    m.gen.add(name + ".weight", attack_detail::conv_weight(gr, {1, in, 3, 3}, double(in * 9)));
    m.gen.add(name + ".bias", Tensor<float>({1}, 0.f));
  } else if (d != vit.patch_pixels()) {
    throw ParameterError("attack: identity decoder needs dim == patch_size^2");
  }
  return m;
}

/// Attacker embedding of a batch of images: [n*T x d].
inline Tensor<float> attacker_tokens(const AttackerModels& m, const std::vector<const Tensor<float>*>& images) {
  std::vector<Tensor<float>> rows;
  rows.reserve(images.size());
  for (const auto* im : images) rows.push_back(embed_patches(*im, m.encoder, m.vit));
  return ops::concat_rows(rows);
}

/// Jigsaw solver. Each image's T tokens attend jointly with T learned slot
/// queries; the slot outputs, projected, are the reordered tokens. The
/// output does not depend on the order of the input tokens.
inline Tensor<float> jigsaw_forward(const AttackerModels& m, const Tensor<float>& x, std::size_t n) {
  if (!m.use_jigsaw) return x;
  const std::size_t t = m.vit.tokens();
  if (x.rank() != 2 || x.dim(0) != n * t || x.dim(1) != m.vit.dim) throw ShapeError("jigsaw: expected [n*T x d] tokens");
  const auto src = ops::concat_rows<float>({x, m.jigsaw.at("jigsaw.slots")});
  std::vector<std::size_t> rows, offsets{0}, slot_rows;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < t; ++j) rows.push_back(i * t + j);
    for (std::size_t j = 0; j < t; ++j) {
      slot_rows.push_back(rows.size());
      rows.push_back(n * t + j);
    }
    offsets.push_back(rows.size());
  }
  auto h = run_encoder(m.jigsaw, "jigsaw.", ops::gather_rows(src, rows), offsets, m.cfg.jigsaw_depth,
                       m.cfg.jigsaw_heads);
  return ops::linear(ops::gather_rows(h, slot_rows), m.jigsaw.at("jigsaw.out.weight"), m.jigsaw.at("jigsaw.out.bias"));
}

/// Discriminator logits [n] over the g x g token grid.
inline Tensor<float> disc_forward(const AttackerModels& m, const Tensor<float>& x, std::size_t n) {
  auto h = ops::tokens_to_grid(x, n);
  h = ops::leaky_relu(ops::conv2d(h, m.disc.at("disc.0.weight"), m.disc.at("disc.0.bias"), {1, 1}));
  h = ops::leaky_relu(ops::conv2d(h, m.disc.at("disc.1.weight"), m.disc.at("disc.1.bias"), {1, 1}));
  h = ops::conv2d(h, m.disc.at("disc.2.weight"), m.disc.at("disc.2.bias"), {1, 0});
  return ops::reshape(h, {n});
}

/// Decoder output [n, 1, S, S] in (0,1).
inline Tensor<float> gen_forward(const AttackerModels& m, const Tensor<float>& x, std::size_t n) {
  const std::size_t s = m.vit.image_size;
  if (m.cfg.decoder == DecoderKind::identity) {
    std::vector<float> out(n * s * s);
    const std::size_t t = m.vit.tokens(), pp = m.vit.patch_pixels();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<float> patch(x.data().begin() + i * t * pp, x.data().begin() + (i + 1) * t * pp);
      const auto img = unpatchify(std::span<const float>(patch), m.vit);
      std::copy(img.data().begin(), img.data().end(), out.begin() + i * s * s);
    }
    return Tensor<float>({n, 1, s, s}, std::move(out));
  }
  const std::size_t ups = attack_detail::upsample_layers(m.vit);
  auto h = ops::tokens_to_grid(x, n);
  for (std::size_t l = 0; l < ups; ++l) {
    const auto name = "gen." + std::to_string(l);
    h = ops::relu(ops::conv_transpose2d(h, m.gen.at(name + ".weight"), m.gen.at(name + ".bias"), {2, 1}));
  }
  const auto name = "gen." + std::to_string(ups);
  return ops::sigmoid(ops::conv2d(h, m.gen.at(name + ".weight"), m.gen.at(name + ".bias"), {1, 1}));
}

inline Tensor<float> pixel_batch(const std::vector<const Tensor<float>*>& images, std::size_t size) {
  std::vector<float> out;
  out.reserve(images.size() * size * size);
  for (const auto* im : images) out.insert(out.end(), im->data().begin(), im->data().end());
  return Tensor<float>({images.size(), 1, size, size}, std::move(out));
}

/// Alternating optimisation over public batches; intercepted batches cycle
/// through a fresh shuffle whenever exhausted.
inline AttackResult attack_train(const std::vector<LabeledImage>& public_images,
                                 const std::vector<FeatureBundle>& bundles, const ViTConfig& vit,
                                 const AttackConfig& cfg) {
  std::vector<const Tensor<float>*> priv;
  int permuted = -1;
  for (const auto& b : bundles) {
    if (b.tokens != vit.tokens() || b.dim != vit.dim)
      throw IncompatibleError("attack: bundle " + b.client_id + " dims do not match the attacker architecture");
    if (b.images.empty()) continue;
    if (permuted >= 0 && permuted != int(b.permuted))
      throw ParameterError("attack: bundles mix permuted and unpermuted features");
    permuted = int(b.permuted);
    for (const auto& f : b.images) priv.push_back(&f.tokens);
  }
  if (public_images.empty()) throw ParameterError("attack: public corpus is empty");
  if (priv.empty()) throw ParameterError("attack: no intercepted features");
  for (const auto& im : public_images)
    if (im.pixels.dims() != Shape{vit.image_size, vit.image_size})
      throw ShapeError("attack: public image dims do not match the architecture");

  AttackResult res{init_attacker(vit, cfg, permuted == 1), {}};
  auto& m = res.models;
  const std::size_t t = vit.tokens();
  AdamWHyper hyper;
  hyper.lr = cfg.lr;
  hyper.beta1 = cfg.beta1;
  AdamState<float> enc_opt, jig_opt, disc_opt, gen_opt;
  std::size_t perm_counter = 0, priv_cursor = 0, priv_epoch = 0;
  auto priv_order = shuffled_batches(priv.size(), cfg.batch_size, substream(cfg.seed, {0x707276ull, 0})());
  const std::uint64_t perm_seed = substream(cfg.seed, {0x7072ull})();

  auto permute_public = [&](const Tensor<float>& x, std::size_t n) {
    if (!m.use_jigsaw) return x;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = sample_permutation(perm_seed, perm_counter++, t);
      for (std::size_t j = 0; j < t; ++j) rows.push_back(i * t + p.mapping[j]);
    }
    return ops::gather_rows(x, rows);
  };
  auto train_only = [&](std::initializer_list<ParamSet<float>*> on) {
    for (auto* ps : {&m.encoder, &m.jigsaw, &m.disc, &m.gen}) ps->set_requires_grad(false);
    for (auto* ps : on) {
      ps->set_requires_grad(true);
      ps->zero_grad();
    }
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    AttackEpoch rec;
    rec.epoch = epoch;
    std::size_t seen = 0;
    const auto batches =
        shuffled_batches(public_images.size(), cfg.batch_size, substream(cfg.seed, {0x707562ull, epoch})());
    for (const auto& batch : batches) {
      const std::size_t n = batch.size();
      std::vector<const Tensor<float>*> imgs;
      for (auto i : batch) imgs.push_back(&public_images[i].pixels);
      if (priv_cursor == priv_order.size()) {
        priv_order = shuffled_batches(priv.size(), cfg.batch_size, substream(cfg.seed, {0x707276ull, ++priv_epoch})());
        priv_cursor = 0;
      }
      std::vector<const Tensor<float>*> priv_rows;
      for (auto i : priv_order[priv_cursor++]) priv_rows.push_back(priv[i]);
      const std::size_t np = priv_rows.size();

      // J: restore order of attacker-permuted public tokens
      if (m.use_jigsaw) {
        Tensor<float> clean;
        {
          NoGradGuard ng;
          clean = attacker_tokens(m, imgs);
        }
        train_only({&m.jigsaw});
        // relative to the token scale, which drifts as F^ trains
        double scale = 0;
        for (float v : clean.values()) scale += std::abs(v);
        scale = std::max(scale / double(clean.numel()), 1e-12);
        auto loss = ops::scale(ops::l1_loss(jigsaw_forward(m, permute_public(clean, n), n), clean), float(1 / scale));
        backward(loss);
        adamw_step(m.jigsaw, jig_opt, hyper);
        rec.jigsaw_loss += loss.item() * double(n);
      }

      // D: intercepted (1) vs public (0)
      {
        Tensor<float> real, fake;
        {
          NoGradGuard ng;
          real = jigsaw_forward(m, attack_detail::batch_tokens(priv_rows), np);
          fake = jigsaw_forward(m, permute_public(attacker_tokens(m, imgs), n), n);
        }
        train_only({&m.disc});
        auto loss = ops::add(ops::bce_with_logits(disc_forward(m, real, np), std::vector<float>(np, 1.f)),
                             ops::bce_with_logits(disc_forward(m, fake, n), std::vector<float>(n, 0.f)));
        backward(loss);
        adamw_step(m.disc, disc_opt, hyper);
        rec.disc_loss += loss.item() * double(n);
      }

      // F^: make public tokens look intercepted
      {
        train_only({&m.encoder});
        auto z = jigsaw_forward(m, permute_public(attacker_tokens(m, imgs), n), n);
        auto aloss = ops::bce_with_logits(disc_forward(m, z, n), std::vector<float>(n, 1.f));
        backward(ops::scale(aloss, float(cfg.adversarial_weight)));
        adamw_step(m.encoder, enc_opt, hyper);
        rec.adv_loss += aloss.item() * double(n);
      }

      // G: reconstruct public images from J(F^(x))
      if (cfg.decoder == DecoderKind::conv) {
        Tensor<float> z;
        {
          NoGradGuard ng;
          z = jigsaw_forward(m, permute_public(attacker_tokens(m, imgs), n), n);
        }
        train_only({&m.gen});
        auto recon = gen_forward(m, z, n);
        const auto target = pixel_batch(imgs, vit.image_size);
        auto rloss = ops::add(ops::l1_loss(recon, target), ops::mse_loss(recon, target));
        backward(rloss);
        adamw_step(m.gen, gen_opt, hyper);
        rec.recon_loss += rloss.item() * double(n);
      }
      seen += n;
    }
    for (double* v : {&rec.jigsaw_loss, &rec.disc_loss, &rec.adv_loss, &rec.recon_loss}) *v /= double(seen);
    res.history.push_back(rec);
  }
  for (auto* ps : {&m.encoder, &m.jigsaw, &m.disc, &m.gen}) ps->set_requires_grad(false);
  return res;
}

/// G(J(f)) per image, clipped to [0,1].
inline std::vector<Tensor<float>> reconstruct(const AttackerModels& m, const FeatureBundle& bundle) {
  if (bundle.tokens != m.vit.tokens() || bundle.dim != m.vit.dim)
    throw IncompatibleError("reconstruct: bundle dims do not match the attacker models");
  NoGradGuard ng;
  const std::size_t s = m.vit.image_size;
  std::vector<Tensor<float>> out;
  out.reserve(bundle.images.size());
  for (const auto& f : bundle.images) {
    if (f.tokens.dims() != Shape{m.vit.tokens(), m.vit.dim}) throw ShapeError("reconstruct: feature shape mismatch");
    auto img = gen_forward(m, jigsaw_forward(m, f.tokens, 1), 1);
    std::vector<float> px(img.data().begin(), img.data().end());
    for (auto& v : px) v = std::clamp(v, 0.f, 1.f);
    out.emplace_back(Shape{s, s}, std::move(px));
  }
  return out;
}

struct ReconstructionScore {
  std::size_t index = 0;
  double mse = 0;
  double ssim = 0;
};

inline std::vector<ReconstructionScore> score_reconstructions(const std::vector<Tensor<float>>& recons,
                                                              const std::vector<Tensor<float>>& originals) {
  if (recons.size() != originals.size()) throw ShapeError("score: reconstruction and original counts differ");
  std::vector<ReconstructionScore> out;
  for (std::size_t i = 0; i < recons.size(); ++i) out.push_back({i, mse(recons[i], originals[i]), ssim(recons[i], originals[i])});
  return out;
}

inline std::pair<double, double> mean_mse_ssim(const std::vector<ReconstructionScore>& scores) {
  if (scores.empty()) throw ParameterError("score: no reconstructions");
  double m = 0, s = 0;
  for (const auto& r : scores) m += r.mse, s += r.ssim;
  return {m / double(scores.size()), s / double(scores.size())};
}

inline void write_attack_metrics(const std::filesystem::path& path, const std::vector<ReconstructionScore>& scores) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path.string());
  out << "image_index,mse,ssim\n";
  char buf[96];
  for (const auto& r : scores) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", r.index, r.mse, r.ssim);
    out << buf;
  }
}

inline void write_reconstructions(const std::filesystem::path& path, const std::vector<Tensor<float>>& images) {
  if (images.empty()) throw ParameterError("write_reconstructions: no images");
  const std::size_t h = images[0].dim(0), w = images[0].dim(1);
  std::vector<float> all;
  for (const auto& im : images) all.insert(all.end(), im.data().begin(), im.data().end());
  io::write_tensor(path, Tensor<float>({images.size(), h, w}, std::move(all)));
}

}  // namespace msdino
