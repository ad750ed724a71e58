// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "msdino/metrics.hpp"
#include "test_util.hpp"

using namespace msdino;

namespace {

Tensor<float> image(Rng& rng, std::size_t h, std::size_t w) {
  return msdino::testing::random_tensor<float>(rng, {h, w}, 0.f, 1.f);
}

// Separable Gaussian, moments via E[x^2] - mu^2, long double throughout.
long double ssim_oracle(const Tensor<float>& a, const Tensor<float>& b) {
  const int k = 8;
  long double g[k], gs = 0;
  for (int i = 0; i < k; ++i) gs += g[i] = std::exp(-(i - 3.5L) * (i - 3.5L) / (2 * 1.5L * 1.5L));
  for (auto& v : g) v /= gs;
  const long double c1 = 1e-4L, c2 = 9e-4L;
  const int h = int(a.dim(0)), w = int(a.dim(1));
  long double total = 0;
  for (int y0 = 0; y0 + k <= h; ++y0)
    for (int x0 = 0; x0 + k <= w; ++x0) {
      long double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
          const long double wt = g[y] * g[x];
          const long double va = a.data()[(y0 + y) * w + x0 + x], vb = b.data()[(y0 + y) * w + x0 + x];
          ma += wt * va;
          mb += wt * vb;
          saa += wt * va * va;
          sbb += wt * vb * vb;
          sab += wt * va * vb;
        }
      const long double s = ((2 * ma * mb + c1) * (2 * (sab - ma * mb) + c2)) /
                            ((ma * ma + mb * mb + c1) * ((saa - ma * ma) + (sbb - mb * mb) + c2));
      total += s;
    }
  return total / ((h - k + 1) * (w - k + 1));
}

double auc_oracle(const std::vector<double>& s, const std::vector<int>& l) {
  std::uint64_t twice = 0, p = 0, n = 0;
  for (int v : l) (v ? p : n)++;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
  return double(twice) / (2.0 * double(p) * double(n));
}

}  // namespace

TEST(Mse, Examples) {
  Rng rng(1);
  auto a = image(rng, 9, 7), b = image(rng, 9, 7);
  EXPECT_EQ(mse(a, a), 0.0);
  EXPECT_EQ(mse(Tensor<float>({4, 4}, 0.f), Tensor<float>({4, 4}, 1.f)), 1.0);
  double loop = 0;
  for (std::size_t i = 0; i < 63; ++i) loop += std::pow(double(a.values()[i]) - double(b.values()[i]), 2);
  EXPECT_NEAR(mse(a, b), loop / 63, 1e-9);
  EXPECT_THROW(mse(a, image(rng, 7, 9)), ShapeError);
}

TEST(Ssim, IdentityAndSymmetry) {
  Rng rng(2);
  auto a = image(rng, 16, 16), b = image(rng, 16, 16);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_EQ(ssim(a, b), ssim(b, a));
  EXPECT_LE(ssim(a, b), 1.0);
  EXPECT_GE(ssim(a, b), -1.0);
}

TEST(Ssim, ConstantImagesClosedForm) {
  const double c1 = 1e-4;
  EXPECT_NEAR(ssim(Tensor<float>({8, 8}, 0.f), Tensor<float>({8, 8}, 1.f)), c1 / (1 + c1), 1e-15);
  EXPECT_NEAR(ssim(Tensor<float>({12, 10}, 0.f), Tensor<float>({12, 10}, 1.f)), c1 / (1 + c1), 1e-15);
}

TEST(Ssim, MatchesWindowedOracle) {
  Rng rng(3);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 8 + trial % 9, w = 8 + (trial * 5) % 11;
    auto a = image(rng, h, w), b = image(rng, h, w);
    if (trial % 3 == 0)
      for (std::size_t i = 0; i < b.numel(); ++i) b.data()[i] = 0.7f * a.data()[i] + 0.3f * b.data()[i];
    worst = std::max(worst, double(std::abs(ssim(a, b) - ssim_oracle(a, b))));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(Ssim, Errors) {
  EXPECT_THROW(ssim(Tensor<float>({7, 20}, 0.f), Tensor<float>({7, 20}, 0.f)), ParameterError);
  EXPECT_THROW(ssim(Tensor<float>({8, 8}, 0.f), Tensor<float>({8, 9}, 0.f)), ShapeError);
}

TEST(Auc, Examples) {
  std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  std::vector<int> l{0, 0, 1, 1};
  EXPECT_EQ(auc(s, l), 0.75);
  EXPECT_EQ(auc(std::vector<double>{1, 2, 3, 4}, l), 1.0);
  EXPECT_EQ(auc(std::vector<double>{5, 5, 5, 5}, l), 0.5);
  EXPECT_THROW(auc(s, std::vector<int>{1, 1, 1, 1}), MetricError);
  EXPECT_THROW(auc(s, std::vector<int>{0, 2, 1, 1}), DataError);
  EXPECT_THROW(auc(s, std::vector<int>{0, 1}), ShapeError);
}

TEST(Auc, EqualsPairwiseCountExactly) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 0, 60);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(uniform_index(rng, 0, trial % 2 ? 5 : 1000)) / 7.0;  // odd trials are tie-heavy
      l[i] = int(uniform_index(rng, 0, 1));
    }
    l[0] = 0;
    l[1] = 1;
    EXPECT_EQ(auc(s, l), auc_oracle(s, l)) << "trial " << trial;
  }
}

TEST(Auc, MonotoneTransformInvariant) {
  Rng rng(5);
  std::vector<double> s(50), t(50);
  std::vector<int> l(50);
  for (std::size_t i = 0; i < 50; ++i) {
    s[i] = normal(rng, 1.0);
    t[i] = std::exp(3 * s[i]) + 2;
    l[i] = i % 3 == 0;
  }
  EXPECT_EQ(auc(s, l), auc(t, l));
}

TEST(Bootstrap, ConstantInputHasZeroWidth) {
  std::vector<double> v(40, 0.625);
  auto ci = bootstrap_ci(v, mean_of, 0.05, 1000, 9);
  EXPECT_EQ(ci.lo, 0.625);
  EXPECT_EQ(ci.hi, 0.625);
}

TEST(Bootstrap, DeterministicAndNested) {
  Rng rng(6);
  std::vector<double> v(30);
  for (auto& x : v) x = normal(rng, 1.0);
  auto a = bootstrap_ci(v, mean_of, 0.05, 1000, 3), b = bootstrap_ci(v, mean_of, 0.05, 1000, 3);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  auto narrow = bootstrap_ci(v, mean_of, 0.5, 1000, 3);
  EXPECT_GE(a.hi - a.lo, narrow.hi - narrow.lo);
}

TEST(Bootstrap, CoversPointEstimate) {
  Rng rng(7);
  int covered = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(5 + trial % 40);
    for (auto& x : v) x = std::exp(normal(rng, 1.0));
    const auto ci = bootstrap_ci(v, mean_of, 0.05, 1000, trial);
    const double m = mean_of(v);
    covered += ci.lo <= m && m <= ci.hi;
  }
  EXPECT_GE(covered, 198);
}

TEST(Bootstrap, Errors) {
  EXPECT_THROW(bootstrap_ci(std::vector<double>{}, mean_of, 0.05, 10, 1), ParameterError);
  EXPECT_THROW(bootstrap_ci(std::vector<double>{1.0}, mean_of, 0.0, 10, 1), ParameterError);
  EXPECT_THROW(bootstrap_ci(std::vector<double>{1.0}, mean_of, 1.0, 10, 1), ParameterError);
}

TEST(Bootstrap, IndexedAucSkipsSingleClassResamples) {
  std::vector<double> s{0.1, 0.9, 0.2, 0.8, 0.3, 0.7};
  std::vector<int> l{0, 1, 0, 1, 0, 1};
  auto ci = bootstrap_ci_indexed(
      s.size(),
      [&](const std::vector<std::size_t>& idx) {
        std::vector<double> ss;
        std::vector<int> ll;
        for (auto i : idx) ss.push_back(s[i]), ll.push_back(l[i]);
        return auc(ss, ll);
      },
      0.05, 200, 1);
  EXPECT_EQ(ci.lo, 1.0);
  EXPECT_EQ(ci.hi, 1.0);
}
