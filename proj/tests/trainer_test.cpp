// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "msdino/trainer.hpp"
#include "test_util.hpp"

using namespace msdino;

namespace {

ViTConfig tiny_vit() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.head_out_dim = 16;
  c.head_hidden = 24;
  c.head_bottleneck = 8;
  c.mlp_ratio = 2;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.global_views = 2;
  t.local_views = 3;
  t.epochs = 2;
  t.batch_size = 4;
  t.lr_max = 1e-3;
  t.seed = 3;
  return t;
}

FeatureStore random_store(const ViTConfig& vit, std::size_t clients, std::size_t per_client, std::uint64_t seed) {
  FeatureStore s;
  auto imgs = generate_synthetic_corpus(seed, clients * per_client, 2, vit.image_size);
  for (std::size_t c = 0; c < clients; ++c) {
    std::vector<LabeledImage> part(imgs.begin() + c * per_client, imgs.begin() + (c + 1) * per_client);
    s.ingest(make_bundle("c" + std::to_string(c), part, init_embedder<float>(vit, 50 + c), vit, 70 + c, true));
  }
  s.freeze();
  return s;
}

Tensor<float> logits_for(const std::vector<std::vector<double>>& probs, double tau) {
  // z = tau * ln q reproduces q under softmax(z / tau)
  Tensor<float> z({probs.size(), probs[0].size()});
  for (std::size_t r = 0; r < probs.size(); ++r)
    for (std::size_t j = 0; j < probs[r].size(); ++j) z.data()[r * probs[r].size() + j] = float(tau * std::log(probs[r][j]));
  return z;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(TrainConfig, DefaultsAreValid) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.pairs_per_image(), 14u);
  c.student_views = StudentViews::local_only;
  EXPECT_EQ(c.pairs_per_image(), 12u);
}

TEST(TrainConfig, RejectsInvalid) {
  TrainConfig c;
  c.small_ratio = {0.3, 0.95};
  EXPECT_THROW(c.validate(), ParameterError);
  c = TrainConfig{};
  c.local_views = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = TrainConfig{};
  c.teacher_temp = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_THROW(parse_student_views("global"), ParameterError);
  EXPECT_EQ(parse_student_views("local-only"), StudentViews::local_only);
}

// ---------------------------------------------------------------------------
// Schedules, EMA, center

TEST(CosineSchedule, EndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_schedule(0, 100, 0.996, 1.0), 0.996);
  EXPECT_DOUBLE_EQ(cosine_schedule(100, 100, 0.996, 1.0), 1.0);
  EXPECT_NEAR(cosine_schedule(50, 100, 1e-4, 0.0), 5e-5, 1e-18);
  EXPECT_DOUBLE_EQ(cosine_schedule(0, 0, 3.0, 7.0), 7.0);
  EXPECT_THROW(cosine_schedule(5, 4, 1.0, 0.0), ParameterError);
}

TEST(Ema, Examples) {
  ParamSet<float> t, s;
  t.add("w", Tensor<float>({2}, 2.f));
  s.add("w", Tensor<float>({2}, 4.f));
  auto t1 = t.clone();
  ema_update(t1, s, 1.0);
  EXPECT_TRUE(t1.bit_equal(t));
  auto t0 = t.clone();
  ema_update(t0, s, 0.0);
  EXPECT_TRUE(t0.bit_equal(s));
  auto th = t.clone();
  ema_update(th, s, 0.5);
  EXPECT_EQ(th.at("w").values(), (std::vector<float>{3.f, 3.f}));
  ParamSet<float> bad;
  bad.add("w", Tensor<float>({3}, 1.f));
  EXPECT_THROW(ema_update(t, bad, 0.5), ShapeError);
  EXPECT_THROW(ema_update(t, s, 1.5), ParameterError);
}

TEST(Center, Examples) {
  Tensor<float> c({2}, 0.f);
  std::vector<float> batch{1.f, 1.f, 1.f, 1.f};
  update_center<float>(c, batch, 0.9);
  EXPECT_NEAR(c.data()[0], 0.1f, 1e-7);
  Tensor<float> same({2}, 0.5f);
  std::vector<float> half{0.5f, 0.5f};
  update_center<float>(same, half, 0.9);
  EXPECT_FLOAT_EQ(same.data()[1], 0.5f);
  update_center<float>(same, std::span<const float>{}, 0.9);
  EXPECT_FLOAT_EQ(same.data()[1], 0.5f);
}

TEST(Center, GeometricConvergence) {
  Tensor<double> c({1}, 5.0);
  std::vector<double> batch{2.0};
  for (int k = 1; k <= 20; ++k) {
    update_center<double>(c, batch, 0.9);
    EXPECT_NEAR(c.data()[0] - 2.0, std::pow(0.9, k) * 3.0, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Views

TEST(SampleViews, SizesForSixteenTokens) {
  TrainConfig cfg;
  Rng rng(1);
  std::set<std::size_t> g_sizes, l_sizes;
  for (int i = 0; i < 500; ++i) {
    auto v = sample_views(16, cfg, rng);
    ASSERT_EQ(v.global.size(), 2u);
    ASSERT_EQ(v.local.size(), 6u);
    for (auto* group : {&v.global, &v.local})
      for (const auto& s : *group) {
        EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
        EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), s.size());
        EXPECT_LT(s.back(), 16u);
      }
    for (const auto& s : v.global) g_sizes.insert(s.size());
    for (const auto& s : v.local) l_sizes.insert(s.size());
  }
  EXPECT_EQ(g_sizes, (std::set<std::size_t>{15, 16}));
  EXPECT_EQ(l_sizes, (std::set<std::size_t>{5, 6, 7, 8}));
}

TEST(SampleViews, FullRatioKeepsEveryRowInOrder) {
  TrainConfig cfg;
  cfg.large_ratio = {1.0, 1.0};
  Rng rng(2);
  auto v = sample_views(10, cfg, rng);
  std::vector<std::size_t> all(10);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (const auto& g : v.global) EXPECT_EQ(g, all);
}

TEST(SampleViews, RejectsTooFewTokens) {
  TrainConfig cfg;
  Rng rng(3);
  EXPECT_THROW(sample_views(3, cfg, rng), ParameterError);
  cfg.small_ratio = {0.3, 0.32};
  EXPECT_THROW(sample_views(4, cfg, rng), ParameterError);
}

// ---------------------------------------------------------------------------
// Loss

TEST(DinoLoss, UniformDistributionsGiveLogK) {
  const std::size_t k = 7;
  Tensor<float> student({4, k}, 0.3f);  // M=2, N=2, one image
  Tensor<float> targets({2, k}, 1.f / k);
  auto loss = dino_loss_from_logits(student, targets, 1, 2, 2, StudentViews::both, 0.1);
  EXPECT_NEAR(loss.item(), std::log(7.0), 1e-6);
}

TEST(DinoLoss, OneHotTeacherPicksStudentLogProb) {
  auto student = logits_for({{0.2, 0.5, 0.3}, {0.2, 0.5, 0.3}}, 0.1);  // M=1, N=1
  Tensor<float> targets({1, 3}, std::vector<float>{0.f, 1.f, 0.f});
  auto loss = dino_loss_from_logits(student, targets, 1, 1, 1, StudentViews::both, 0.1);
  EXPECT_NEAR(loss.item(), -std::log(0.5), 1e-6);
}

TEST(DinoLoss, HandCaseK3) {
  const double expected = -(0.2 * std::log(0.1) + 0.3 * std::log(0.6) + 0.5 * std::log(0.3));
  EXPECT_NEAR(expected, 1.21575, 1e-5);
  auto student = logits_for({{0.1, 0.6, 0.3}, {0.1, 0.6, 0.3}}, 0.1);
  Tensor<float> targets({1, 3}, std::vector<float>{0.2f, 0.3f, 0.5f});
  auto loss = dino_loss_from_logits(student, targets, 1, 1, 1, StudentViews::both, 0.1);
  EXPECT_NEAR(loss.item(), expected, 1e-5);
}

TEST(DinoLoss, PairRoutingAndNormalisation) {
  // M=2, N=1; student rows: g0, g1, l0. Pairs (both): (g0,g1) (g0,l0) (g1,g0) (g1,l0).
  const std::vector<std::vector<double>> q{{0.7, 0.3}, {0.4, 0.6}, {0.5, 0.5}};
  const std::vector<std::vector<double>> p{{0.9, 0.1}, {0.2, 0.8}};
  auto student = logits_for(q, 0.1);
  Tensor<float> targets({2, 2}, std::vector<float>{0.9f, 0.1f, 0.2f, 0.8f});
  auto h = [&](int t, int s) { return -(p[t][0] * std::log(q[s][0]) + p[t][1] * std::log(q[s][1])); };
  const double both = (h(0, 1) + h(0, 2) + h(1, 0) + h(1, 2)) / 4;
  const double local = (h(0, 2) + h(1, 2)) / 2;
  EXPECT_NEAR(dino_loss_from_logits(student, targets, 1, 2, 1, StudentViews::both, 0.1).item(), both, 1e-5);
  EXPECT_NEAR(dino_loss_from_logits(student, targets, 1, 2, 1, StudentViews::local_only, 0.1).item(), local, 1e-5);
}

TEST(DinoLoss, BatchIsMeanOverImages) {
  Rng rng(4);
  auto s = msdino::testing::random_tensor<float>(rng, {6, 5});
  auto traw = msdino::testing::random_tensor<float>(rng, {2, 5});
  auto t = ops::softmax(traw);
  auto both = dino_loss_from_logits(s, t, 2, 1, 2, StudentViews::both, 0.1).item();
  auto first = dino_loss_from_logits(ops::gather_rows(s, {0, 1, 2}), ops::gather_rows(t, {0}), 1, 1, 2,
                                     StudentViews::both, 0.1)
                   .item();
  auto second = dino_loss_from_logits(ops::gather_rows(s, {3, 4, 5}), ops::gather_rows(t, {1}), 1, 1, 2,
                                      StudentViews::both, 0.1)
                    .item();
  EXPECT_NEAR(both, (first + second) / 2, 1e-6);
}

TEST(DinoLoss, DegenerateViewsAreContractError) {
  Tensor<float> s({1, 3}, 0.f), t({1, 3}, 1.f / 3);
  EXPECT_THROW(dino_loss_from_logits(s, t, 1, 1, 0, StudentViews::both, 0.1), ContractError);
  EXPECT_THROW(dino_loss_from_logits(s, t, 1, 1, 0, StudentViews::local_only, 0.1), ContractError);
}

TEST(DinoLoss, NonNegativeOnRandomInputs) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto st = init_distill_state(vit, 1, false);
  Rng rng(5);
  for (int i = 0; i < 5; ++i) {
    auto tokens = msdino::testing::random_tensor<float>(rng, {16, 16});
    auto views = sample_views(16, cfg, rng);
    EXPECT_GE(dino_loss(st.student, st.teacher, st.center, tokens, views, vit, cfg).item(), 0.f);
  }
}

TEST(DinoLoss, InvariantToStoredRowOrder) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto st = init_distill_state(vit, 2, false);
  for (auto& v : st.center.data()) v = 0.01f;
  Rng rng(6);
  auto tokens = msdino::testing::random_tensor<float>(rng, {16, 16});
  auto views = sample_views(16, cfg, rng);
  const double base = dino_loss(st.student, st.teacher, st.center, tokens, views, vit, cfg).item();
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    auto p = sample_permutation(9, trial, 16);
    auto inv = p.inverse();
    ViewSet moved = views;
    for (auto* group : {&moved.global, &moved.local})
      for (auto& s : *group)
        for (auto& r : s) r = inv.mapping[r];
    const double again =
        dino_loss(st.student, st.teacher, st.center, permute_tokens(tokens, p), moved, vit, cfg).item();
    EXPECT_LE(std::abs(again - base) / std::abs(base), 1e-5);
  }
}

TEST(DinoLoss, GradCheckStudentDouble) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto p = init_params<double>(vit, 8);
  ParamSet<double> student = p.backbone;
  student.merge(p.head);
  Rng rng(7);
  std::normal_distribution<double> n(0.0, 0.2);
  for (auto& [_, t] : student)
    for (auto& v : t.data()) v += n(rng);
  auto teacher = student.clone();
  for (auto& [_, t] : teacher)
    for (auto& v : t.data()) v += n(rng) * 0.1;
  teacher.set_requires_grad(false);
  Tensor<double> center({16}, 0.0);
  auto tokens = msdino::testing::random_tensor<double>(rng, {16, 16});
  auto views = sample_views(16, cfg, rng);
  auto f = [&](ParamSet<double>& s) { return dino_loss(s, teacher, center, tokens, views, vit, cfg); };
  auto report = grad_check<double>(f, student, 1e-5);
  EXPECT_LT(report.max_rel_error_with_floor(1e-6), 1e-4)
      << report.worst_param << " analytic " << report.analytic << " numeric " << report.numeric;
}

// ---------------------------------------------------------------------------
// Steps and loop

TEST(DistillStep, TeacherOnlyMovesThroughEma) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto st = init_distill_state(vit, 3, false);
  Rng rng(8);
  auto tokens = msdino::testing::random_tensor<float>(rng, {32, 16});
  std::vector<ViewSet> views{sample_views(16, cfg, rng), sample_views(16, cfg, rng)};
  const auto teacher_hash = st.teacher.hash(), student_hash = st.student.hash();
  distill_step(st, [&](const ParamSet<float>&) { return tokens; }, views, vit, cfg, 1e-3, 1.0);
  EXPECT_EQ(st.teacher.hash(), teacher_hash);
  EXPECT_NE(st.student.hash(), student_hash);
  EXPECT_EQ(st.step, 1u);
  distill_step(st, [&](const ParamSet<float>&) { return tokens; }, views, vit, cfg, 1e-3, 0.5);
  EXPECT_NE(st.teacher.hash(), teacher_hash);
}

TEST(Train, ZeroEpochsReturnsInitialisation) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  cfg.epochs = 0;
  auto store = random_store(vit, 2, 3, 1);
  auto r = train(store, vit, cfg, 11);
  auto init = init_distill_state(vit, 11, false);
  EXPECT_TRUE(r.student.bit_equal(init.student));
  EXPECT_TRUE(r.teacher.bit_equal(init.student));
  EXPECT_TRUE(r.metrics.empty());
}

TEST(Train, BitReproducible) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto store = random_store(vit, 2, 5, 2);
  auto a = train(store, vit, cfg, 12), b = train(store, vit, cfg, 12);
  EXPECT_TRUE(a.student.bit_equal(b.student));
  EXPECT_TRUE(a.teacher.bit_equal(b.teacher));
  EXPECT_EQ(a.center.values(), b.center.values());
  ASSERT_EQ(a.metrics.size(), 2u);
  EXPECT_EQ(a.metrics[1].mean_loss, b.metrics[1].mean_loss);
  cfg.seed = 4;
  auto c = train(store, vit, cfg, 12);
  EXPECT_FALSE(a.student.bit_equal(c.student));
}

TEST(Train, MetricsAreFinite) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto store = random_store(vit, 2, 5, 3);
  auto r = train(store, vit, cfg, 13);
  for (const auto& e : r.metrics) {
    EXPECT_TRUE(std::isfinite(e.mean_loss));
    EXPECT_GT(e.teacher_entropy, 0.0);
    EXPECT_LE(e.teacher_entropy, std::log(16.0) + 1e-6);
    EXPECT_FALSE(e.collapsed) << e.diversity;
  }
  EXPECT_NEAR(r.metrics.back().lambda, 1.0, 1e-3);
}

TEST(Train, ZeroFeatureStoreTriggersCollapseMonitor) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  FeatureStore s;
  FeatureBundle b{"zeros", 16, 16, true, {}};
  for (int i = 0; i < 8; ++i) b.images.push_back({Tensor<float>({16, 16}, 0.f)});
  s.ingest(b);
  s.freeze();
  // identical views everywhere so every teacher output is the same vector
  cfg.large_ratio = {1.0, 1.0};
  auto r = train(s, vit, cfg, 14);
  ASSERT_FALSE(r.metrics.empty());
  EXPECT_TRUE(r.any_collapse());
  for (const auto& e : r.metrics) EXPECT_LT(e.diversity, kCollapseDiversity) << e.diversity;
}

TEST(Train, Errors) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  FeatureStore open;
  open.ingest(FeatureBundle{"a", 16, 16, true, {{Tensor<float>({16, 16}, 0.f)}}});
  EXPECT_THROW(train(open, vit, cfg, 1), ContractError);
  FeatureStore empty;
  empty.freeze();
  EXPECT_THROW(train(empty, vit, cfg, 1), ContractError);
  FeatureStore wide;
  wide.ingest(FeatureBundle{"a", 16, 8, true, {{Tensor<float>({16, 8}, 0.f)}}});
  wide.freeze();
  EXPECT_THROW(train(wide, vit, cfg, 1), IncompatibleError);
}

TEST(Train, OutputsRoundTrip) {
  msdino::testing::TempDir dir("train");
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto store = random_store(vit, 1, 4, 4);
  auto r = train(store, vit, cfg, 15);
  const auto prefix = (dir / "run").string();
  write_train_checkpoints(prefix, r, vit);
  write_metrics_csv(dir / "metrics.csv", r.metrics);
  auto ck = io::read_checkpoint(prefix + ".teacher.msdc");
  EXPECT_EQ(config_from(ck), vit);
  EXPECT_TRUE(io::params_from<float>(ck, "backbone.").bit_equal(r.teacher.with_prefix("backbone.")));
  EXPECT_EQ(ck.at("state.center").to_tensor<float>().values(), r.center.values());
  std::ifstream in(dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,mean_loss,teacher_entropy,lr,lambda");
}
