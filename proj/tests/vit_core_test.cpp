// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "msdino/permuter.hpp"
#include "msdino/vit.hpp"
#include "test_util.hpp"

using namespace msdino;

namespace {

ViTConfig small_config() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.head_out_dim = 12;
  c.head_hidden = 10;
  c.head_bottleneck = 6;
  c.mlp_ratio = 2;
  return c;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST(ViTConfig, DeskDefaults) {
  ViTConfig c;
  EXPECT_EQ(c.tokens(), 16u);
  EXPECT_EQ(c.patch_pixels(), 64u);
  auto full = ViTConfig::full_scale();
  EXPECT_EQ(full.tokens(), 784u);
  EXPECT_EQ(full.head_out_dim, 8192u);
}

TEST(ViTConfig, TextRoundTrip) {
  auto c = small_config();
  c.head_activation = HeadActivation::identity;
  EXPECT_EQ(ViTConfig::parse(c.to_string()), c);
}

TEST(ViTConfig, RejectsBadGeometry) {
  ViTConfig c;
  c.patch_size = 7;
  EXPECT_THROW(c.validate(), ParameterError);
  c = ViTConfig{};
  c.heads = 3;
  EXPECT_THROW(c.validate(), ParameterError);
}

TEST(ViTInit, DeterministicInSeed) {
  ViTConfig c;
  auto a = init_params<float>(c, 11), b = init_params<float>(c, 11), d = init_params<float>(c, 12);
  EXPECT_TRUE(a.embedder.bit_equal(b.embedder));
  EXPECT_TRUE(a.backbone.bit_equal(b.backbone));
  EXPECT_TRUE(a.head.bit_equal(b.head));
  EXPECT_FALSE(a.embedder.bit_equal(d.embedder));
}

TEST(ViTInit, PositionTableShapeAndScale) {
  ViTConfig c;
  auto e = init_embedder<float>(c, 3);
  const auto& pos = e.at("embedder.pos_embed");
  ASSERT_EQ(pos.dims(), (Shape{16, 64}));
  double s2 = 0;
  for (float v : pos.data()) s2 += double(v) * v;
  EXPECT_NEAR(std::sqrt(s2 / pos.numel()), 0.02, 0.004);
}

TEST(ViTInit, LastLayerRowsAreUnitNorm) {
  auto h = init_head<float>(ViTConfig{}, 5);
  const auto& w = h.at("head.last.weight");
  for (std::size_t k = 0; k < w.dim(0); ++k) {
    double n = 0;
    for (std::size_t j = 0; j < w.dim(1); ++j) n += double(w.data()[k * w.dim(1) + j]) * w.data()[k * w.dim(1) + j];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
}

TEST(Embedder, ZeroImageYieldsBiasPlusPositionTable) {
  ViTConfig c;
  auto e = init_embedder<float>(c, 9);
  std::fill(e.at("embedder.patch_proj.bias").data().begin(), e.at("embedder.patch_proj.bias").data().end(), 0.f);
  auto out = embed_patches(Tensor<float>({32, 32}, 0.f), e, c);
  EXPECT_EQ(out.dims(), (Shape{16, 64}));
  EXPECT_LE(max_abs_diff(out.data(), e.at("embedder.pos_embed").data()), 1e-7);
}

TEST(Embedder, OneHotPixelSelectsProjectionColumn) {
  ViTConfig c;
  auto e = init_embedder<float>(c, 9);
  Tensor<float> img({32, 32}, 0.f);
  // patch (row 1, col 2) -> token 1*4+2 = 6; pixel (3,5) inside it -> column 3*8+5 = 29
  img.data()[(8 + 3) * 32 + (16 + 5)] = 1.f;
  auto out = embed_patches(img, e, c);
  const auto& w = e.at("embedder.patch_proj.weight");
  const auto& b = e.at("embedder.patch_proj.bias");
  const auto& pos = e.at("embedder.pos_embed");
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t j = 0; j < 64; ++j) {
      float expect = b.data()[j] + pos.data()[t * 64 + j] + (t == 6 ? w.data()[j * 64 + 29] : 0.f);
      EXPECT_NEAR(out.data()[t * 64 + j], expect, 1e-6);
    }
}

TEST(Embedder, RejectsWrongImageSize) {
  ViTConfig c;
  auto e = init_embedder<float>(c, 1);
  EXPECT_THROW(embed_patches(Tensor<float>({31, 32}, 0.f), e, c), ShapeError);
}

TEST(Patchify, UnpatchifyInverts) {
  ViTConfig c;
  Rng rng(4);
  auto img = msdino::testing::random_tensor<float>(rng, {32, 32}, 0.f, 1.f);
  auto p = patchify(img, c);
  EXPECT_EQ(p.dims(), (Shape{16, 64}));
  auto back = unpatchify<float>(p.data(), c);
  EXPECT_EQ(back.values(), img.values());
}

TEST(Backbone, ClsInvariantAndTokensEquivariantUnderPermutation) {
  ViTConfig c;
  auto p = init_params<float>(c, 21);
  Rng rng(8);
  std::normal_distribution<float> cls_init(0.f, 0.02f);
  for (auto& v : p.backbone.at("backbone.cls_token").data()) v = cls_init(rng);
  auto tokens = msdino::testing::random_tensor<float>(rng, {16, 64});
  auto base = encode(tokens, p.backbone, c);
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    auto perm = sample_permutation(99, trial, 16);
    auto enc = encode(permute_tokens(tokens, perm), p.backbone, c);
    EXPECT_LE(max_abs_diff(enc.cls.data(), base.cls.data()), 1e-5);
    auto expected = permute_tokens(base.token_outs, perm);
    EXPECT_LE(max_abs_diff(enc.token_outs.data(), expected.data()), 1e-5);
  }
}

TEST(Backbone, DepthZeroIsFinalNormOfCls) {
  ViTConfig c;
  c.depth = 0;
  auto b = init_backbone<float>(c, 2);
  Rng rng(1);
  auto cls = msdino::testing::random_tensor<float>(rng, {64});
  b.set("backbone.cls_token", cls);
  auto enc = encode(msdino::testing::random_tensor<float>(rng, {16, 64}), b, c);
  double mean = 0, var = 0;
  for (float v : cls.data()) mean += v;
  mean /= 64;
  for (float v : cls.data()) var += (v - mean) * (v - mean);
  var /= 64;
  for (std::size_t j = 0; j < 64; ++j)
    EXPECT_NEAR(enc.cls.data()[j], (cls.data()[j] - mean) / std::sqrt(var + 1e-5), 1e-4);
}

TEST(Backbone, SequencesAreIndependent) {
  auto c = small_config();
  auto b = init_backbone<float>(c, 6);
  Rng rng(2);
  auto src = msdino::testing::random_tensor<float>(rng, {16, 8});
  auto together = encode_sequences(src, {{0, 1, 2}, {5, 6, 7, 8, 9}}, b, c);
  auto alone = encode_sequences(src, {{5, 6, 7, 8, 9}}, b, c);
  EXPECT_EQ(together.offsets, (std::vector<std::size_t>{0, 4, 10}));
  std::vector<float> second(together.cls.data().begin() + 8, together.cls.data().end());
  EXPECT_LE(max_abs_diff(second, alone.cls.data()), 1e-6);
}

TEST(Backbone, RejectsWrongWidth) {
  auto c = small_config();
  auto b = init_backbone<float>(c, 6);
  EXPECT_THROW(encode(Tensor<float>({16, 9}, 0.f), b, c), ShapeError);
}

TEST(Head, OutputShapeAndUnitEmbedding) {
  ViTConfig c;
  auto h = init_head<float>(c, 3);
  Rng rng(5);
  auto cls = msdino::testing::random_tensor<float>(rng, {7, 64});
  auto logits = dino_head(cls, h, c);
  EXPECT_EQ(logits.dims(), (Shape{7, 256}));
  auto z = head_embedding(cls, h, c);
  for (std::size_t s = 0; s < 7; ++s) {
    double n = 0;
    for (std::size_t j = 0; j < 64; ++j) n += double(z.data()[s * 64 + j]) * z.data()[s * 64 + j];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
  for (float v : logits.data()) EXPECT_LE(std::abs(v), 1.0 + 1e-5);
}

TEST(Head, LinearVariantIsScaleInvariant) {
  auto c = small_config();
  c.head_activation = HeadActivation::identity;
  auto h = init_head<float>(c, 3);
  for (const char* b : {"head.mlp.0.bias", "head.mlp.1.bias", "head.mlp.2.bias"})
    std::fill(h.at(b).data().begin(), h.at(b).data().end(), 0.f);
  Rng rng(5);
  auto x = msdino::testing::random_tensor<float>(rng, {3, 8});
  auto a = dino_head(x, h, c);
  auto b = dino_head(ops::scale(x, 3.5f), h, c);
  EXPECT_LE(max_abs_diff(a.data(), b.data()), 1e-5);
}

TEST(Head, LastLayerIsNormalisedInForward) {
  auto c = small_config();
  auto h = init_head<float>(c, 3);
  Rng rng(5);
  auto x = msdino::testing::random_tensor<float>(rng, {2, 8});
  auto a = dino_head(x, h, c);
  for (auto& v : h.at("head.last.weight").data()) v *= 4.f;
  auto b = dino_head(x, h, c);
  EXPECT_LE(max_abs_diff(a.data(), b.data()), 1e-6);
}

TEST(ConfigRecord, RoundTripsThroughCheckpoint) {
  auto c = small_config();
  io::Checkpoint ck;
  ck["meta.config"] = config_record(c);
  auto back = io::decode_checkpoint(io::encode_checkpoint(ck));
  EXPECT_EQ(config_from(back), c);
  EXPECT_THROW(config_from(io::Checkpoint{}), DataError);
}

TEST(GradCheck, FullPipelineDouble) {
  auto c = small_config();
  auto p = init_params<double>(c, 17);
  ParamSet<double> all = p.embedder;
  all.merge(p.backbone);
  all.merge(p.head);
  Rng rng(3);
  auto img = msdino::testing::random_tensor<double>(rng, {16, 16}, 0.0, 1.0);
  std::normal_distribution<double> n(0.0, 0.2);
  // generic operating point: small init leaves attention nearly uniform
  for (auto& [_, t] : all)
    for (auto& v : t.data()) v += n(rng);
  auto targets = msdino::testing::random_tensor<double>(rng, {1, 12}, 0.0, 1.0);
  const double total = ops::sum(targets).item();
  for (auto& v : targets.data()) v /= total;
  auto loss_fn = [&](ParamSet<double>& ps) {
    auto tokens = embed_patches(img, ps, c);
    auto enc = encode(tokens, ps, c);
    auto logits = dino_head(enc.cls, ps, c);
    auto lp = ops::log_softmax(logits, 0.1);
    return ops::scale(ops::sum(ops::mul(lp, targets)), -1.0);
  };
  auto report = grad_check<double>(loss_fn, all, 1e-5);
  // f64 central differences at h=1e-5 carry ~1e-10 rounding noise, so
  // coordinates with |grad| below ~1e-6 are compared on an absolute scale.
  EXPECT_LT(report.max_rel_error_with_floor(1e-6), 1e-4) << report.worst_param << "[" << report.worst_index << "] analytic "
                                        << report.analytic << " numeric " << report.numeric;
}
