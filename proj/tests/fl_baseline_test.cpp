// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "msdino/fl_baseline.hpp"
#include "test_util.hpp"

using namespace msdino;

namespace {

ViTConfig tiny_vit() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.head_out_dim = 16;
  c.head_hidden = 24;
  c.head_bottleneck = 8;
  c.mlp_ratio = 2;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.local_views = 2;
  t.epochs = 3;
  t.batch_size = 4;
  t.lr_max = 1e-3;
  t.seed = 5;
  return t;
}

std::vector<ClientData> make_clients(std::size_t n, std::size_t per_client, std::uint64_t seed) {
  auto imgs = generate_synthetic_corpus(seed, n * per_client, 2, 16);
  std::vector<ClientData> out;
  for (std::size_t c = 0; c < n; ++c)
    out.push_back({"c" + std::to_string(c), {imgs.begin() + c * per_client, imgs.begin() + (c + 1) * per_client}});
  return out;
}

ParamSet<float> scalar_set(float v) {
  ParamSet<float> p;
  p.add("w", Tensor<float>({3}, v));
  return p;
}

}  // namespace

TEST(FedAvg, Examples) {
  EXPECT_EQ(fedavg({scalar_set(1.f), scalar_set(3.f)}, {1, 1}).at("w").values()[0], 2.f);
  EXPECT_EQ(fedavg({scalar_set(0.f), scalar_set(4.f)}, {1, 3}).at("w").values()[0], 3.f);
  auto same = fedavg({scalar_set(0.7f), scalar_set(0.7f), scalar_set(0.7f)}, {2, 5, 1});
  EXPECT_EQ(same.at("w").values()[1], 0.7f);
}

TEST(FedAvg, SingleContributorIsBitExact) {
  Rng rng(1);
  ParamSet<float> p;
  p.add("a", msdino::testing::random_tensor<float>(rng, {7, 3}));
  p.add("b", msdino::testing::random_tensor<float>(rng, {5}));
  EXPECT_TRUE(fedavg({p}, {17}).bit_equal(p));
  auto q = p.clone();
  for (auto& [_, t] : q)
    for (auto& v : t.data()) v += 1.f;
  EXPECT_TRUE(fedavg({p, q}, {3, 0}).bit_equal(p));
}

TEST(FedAvg, IdempotentAndOrderIndependent) {
  Rng rng(2);
  std::vector<ParamSet<float>> states(4);
  std::vector<double> w{3, 1, 4, 1};
  for (auto& s : states) s.add("x", msdino::testing::random_tensor<float>(rng, {50}));
  auto avg = fedavg(states, w);
  std::vector<ParamSet<float>> rev(states.rbegin(), states.rend());
  auto avg_rev = fedavg(rev, std::vector<double>(w.rbegin(), w.rend()));
  const auto a = avg.at("x").values(), b = avg_rev.at("x").values();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], std::abs(a[i]) * 2e-7);
  auto again = fedavg({avg, avg, avg}, {1, 2, 3});
  EXPECT_TRUE(again.bit_equal(avg));
}

TEST(FedAvg, Errors) {
  EXPECT_THROW(fedavg(std::vector<ParamSet<float>>{}, {}), ParameterError);
  EXPECT_THROW(fedavg({scalar_set(1.f), scalar_set(2.f)}, {0, 0}), ParameterError);
  EXPECT_THROW(fedavg({scalar_set(1.f), scalar_set(2.f)}, {-1, 2}), ParameterError);
  ParamSet<float> other;
  other.add("w", Tensor<float>({4}, 1.f));
  EXPECT_THROW(fedavg({scalar_set(1.f), other}, {1, 1}), ShapeError);
}

TEST(LocalRound, ZeroStepsLeaveStateUnchanged) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto st = init_distill_state(vit, 1, true);
  const auto hs = st.student.hash(), ht = st.teacher.hash();
  auto acc = local_round(make_clients(1, 4, 1)[0].images, st, vit, cfg, 0, 0, 10);
  EXPECT_EQ(acc.steps, 0u);
  EXPECT_EQ(st.student.hash(), hs);
  EXPECT_EQ(st.teacher.hash(), ht);
}

TEST(LocalRound, TrainsTheEmbedder) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto st = init_distill_state(vit, 1, true);
  const auto before = st.student.with_prefix("embedder.").clone();
  local_round(make_clients(1, 8, 2)[0].images, st, vit, cfg, 0, 2, 10);
  EXPECT_FALSE(st.student.with_prefix("embedder.").bit_equal(before));
  EXPECT_EQ(st.step, 2u);
}

TEST(FlTrain, SingleClientMatchesOrdinaryTrainingBitExactly) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto clients = make_clients(1, 10, 3);
  FlConfig fl;
  fl.rounds = cfg.epochs;
  auto fed = fl_train(clients, vit, cfg, fl, 21);
  auto ref_cfg = cfg;
  ref_cfg.seed = client_seed(cfg.seed, 0);
  auto ref = train_images(clients[0].images, vit, ref_cfg, 21);
  EXPECT_TRUE(fed.student.bit_equal(ref.student));
  EXPECT_TRUE(fed.teacher.bit_equal(ref.teacher));
  ASSERT_EQ(fed.metrics.size(), ref.metrics.size());
  for (std::size_t i = 0; i < ref.metrics.size(); ++i) EXPECT_EQ(fed.metrics[i].mean_loss, ref.metrics[i].mean_loss);
}

TEST(FlTrain, ZeroRoundsReturnsInitialisation) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  FlConfig fl;
  fl.rounds = 0;
  auto r = fl_train(make_clients(2, 3, 4), vit, cfg, fl, 22);
  EXPECT_TRUE(r.student.bit_equal(init_distill_state(vit, 22, true).student));
  EXPECT_EQ(r.comm_total_bytes(), 0u);
  EXPECT_TRUE(r.comm_log.empty());
}

TEST(FlTrain, CommLogMatchesPerLinkWeightTraffic) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  FlConfig fl;
  fl.rounds = 5;
  fl.aggregation_interval = 2;
  fl.local_steps = 1;
  auto r = fl_train(make_clients(2, 4, 5), vit, cfg, fl, 23);
  const std::uint64_t p = init_distill_state(vit, 23, true).student.numel();
  ASSERT_EQ(r.comm_log.size(), 5u);
  // aggregation after rounds 1, 3 and the final round 4: ceil(5/2) = 3 exchanges
  std::size_t exchanges = 0;
  for (const auto& c : r.comm_log) exchanges += c.bytes_up > 0;
  EXPECT_EQ(exchanges, 3u);
  EXPECT_EQ(r.comm_total_bytes(), 3u * 4 * p * sizeof(float));
}

TEST(FlTrain, SkipsEmptyClientsWithWarning) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  auto clients = make_clients(2, 4, 6);
  clients.push_back({"empty", {}});
  FlConfig fl;
  fl.rounds = 1;
  auto r = fl_train(clients, vit, cfg, fl, 24);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("empty"), std::string::npos);
  EXPECT_THROW(fl_train({}, vit, cfg, fl, 24), ContractError);
}

TEST(FlTrain, Deterministic) {
  auto vit = tiny_vit();
  auto cfg = tiny_train();
  FlConfig fl;
  fl.rounds = 2;
  auto clients = make_clients(2, 5, 7);
  auto a = fl_train(clients, vit, cfg, fl, 25), b = fl_train(clients, vit, cfg, fl, 25);
  EXPECT_TRUE(a.teacher.bit_equal(b.teacher));
  EXPECT_EQ(a.metrics.back().mean_loss, b.metrics.back().mean_loss);
}

TEST(CommLog, CsvFormat) {
  msdino::testing::TempDir dir("comm");
  write_comm_log(dir / "comm.csv", {{0, 8, 8}, {1, 0, 0}});
  std::ifstream in(dir / "comm.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "round,bytes_up,bytes_down\n0,8,8\n1,0,0\n");
}
