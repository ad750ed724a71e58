// SPDX-License-Identifier: Apache-2.0
#pragma once

// f64 finite-difference verification of the full distillation loss:
// embedder, backbone and head of the student, differentiated through view
// sampling, the untaped teacher and centering.

#include <cstdint>

#include "msdino/trainer.hpp"

namespace msdino {

struct GradientVerification {
  ViTConfig vit;
  GradCheckReport report;
  double h = 1e-5;
  Stencil stencil = Stencil::central;
  double loss = 0;
};

/// The verification model: 2 blocks, width 16, 16 prototypes.
inline ViTConfig verification_config() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.head_out_dim = 16;
  c.head_hidden = 32;
  c.head_bottleneck = 8;
  c.mlp_ratio = 4;
  return c;
}

inline GradientVerification verify_distillation_gradients(std::uint64_t seed, double h = 1e-5,
                                                          Stencil stencil = Stencil::central,
                                                          double perturbation = 0.2) {
  GradientVerification out;
  out.vit = verification_config();
  out.h = h;
  out.stencil = stencil;
  const auto& vit = out.vit;
  auto p = init_params<double>(vit, seed);
  ParamSet<double> student = p.embedder;
  student.merge(p.backbone);
  student.merge(p.head);
  Rng rng = substream(seed, {0x766572ull});
  // move away from the near-symmetric initialisation
  for (auto& [_, t] : student)
    for (auto& v : t.data()) v += normal(rng, perturbation);
  ParamSet<double> teacher = student.clone();
  for (auto& [_, t] : teacher)
    for (auto& v : t.data()) v += normal(rng, 0.05);
  teacher.set_requires_grad(false);
  Tensor<double> center({vit.head_out_dim});
  for (auto& v : center.data()) v = normal(rng, 0.1);

  TrainConfig cfg;
  cfg.global_views = 2;
  cfg.local_views = 2;
  const auto images = generate_synthetic_corpus(seed, 2, 2, vit.image_size);
  std::vector<ViewSet> views;
  for (std::size_t i = 0; i < images.size(); ++i) views.push_back(sample_views(vit.tokens(), cfg, rng));
  std::vector<Tensor<double>> pixels;
  for (const auto& im : images) pixels.push_back(im.pixels.cast<double>());

  auto stack = [&](const ParamSet<double>& ps) {
    std::vector<Tensor<double>> rows;
    for (const auto& px : pixels) rows.push_back(embed_patches(px, ps, vit));
    return ops::concat_rows(rows);
  };
  Tensor<double> teacher_src;
  {
    NoGradGuard ng;
    teacher_src = stack(teacher).detach();
  }
  auto f = [&](ParamSet<double>& ps) {
    return dino_loss_batch(ps, teacher, center, stack(ps), teacher_src, views, vit, cfg).loss;
  };
  out.report = grad_check<double>(f, student, h, stencil);
  {
    NoGradGuard ng;
    out.loss = f(student).item();
  }
  return out;
}

}  // namespace msdino
