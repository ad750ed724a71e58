// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "msdino/error.hpp"
#include "msdino/rng.hpp"
#include "msdino/tensor.hpp"

namespace msdino {

inline void require_same_image_dims(const Tensor<float>& a, const Tensor<float>& b, const char* what) {
  if (a.rank() != 2 || a.dims() != b.dims())
    throw ShapeError(std::string(what) + ": images must be 2-d with equal dims, got " + shape_str(a.dims()) + " and " +
                     shape_str(b.dims()));
}

inline double mse(const Tensor<float>& a, const Tensor<float>& b) {
  require_same_image_dims(a, b, "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = double(a.data()[i]) - double(b.data()[i]);
    s += d * d;
  }
  return s / double(a.numel());
}

struct SsimParams {
  std::size_t window = 8;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

/// Normalised Gaussian weights over a window x window patch, centred on the
/// patch midpoint.
inline std::vector<double> ssim_window(const SsimParams& p) {
  std::vector<double> w(p.window * p.window);
  const double c = (double(p.window) - 1.0) / 2.0;
  double total = 0;
  for (std::size_t y = 0; y < p.window; ++y)
    for (std::size_t x = 0; x < p.window; ++x) {
      const double dy = double(y) - c, dx = double(x) - c;
      total += w[y * p.window + x] = std::exp(-(dx * dx + dy * dy) / (2 * p.sigma * p.sigma));
    }
  for (auto& v : w) v /= total;
  return w;
}

/// Mean SSIM over all window positions (stride 1, no padding).
inline double ssim(const Tensor<float>& a, const Tensor<float>& b, const SsimParams& p = {}) {
  require_same_image_dims(a, b, "ssim");
  const std::size_t h = a.dim(0), wd = a.dim(1), k = p.window;
  if (k == 0 || h < k || wd < k) throw ParameterError("ssim: image smaller than the window");
  const auto w = ssim_window(p);
  const auto av = a.data(), bv = b.data();
  double total = 0;
  for (std::size_t y0 = 0; y0 + k <= h; ++y0)
    for (std::size_t x0 = 0; x0 + k <= wd; ++x0) {
      double ma = 0, mb = 0;
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) {
          const std::size_t i = (y0 + y) * wd + x0 + x;
          ma += w[y * k + x] * av[i];
          mb += w[y * k + x] * bv[i];
        }
      double va = 0, vb = 0, cov = 0;
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) {
          const std::size_t i = (y0 + y) * wd + x0 + x;
          const double da = av[i] - ma, db = bv[i] - mb;
          va += w[y * k + x] * da * da;
          vb += w[y * k + x] * db * db;
          cov += w[y * k + x] * da * db;
        }
      total += ((2 * ma * mb + p.c1) * (2 * cov + p.c2)) / ((ma * ma + mb * mb + p.c1) * (va + vb + p.c2));
    }
  return total / double((h - k + 1) * (wd - k + 1));
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from sorted tie groups in O(n log n).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: score and label counts differ");
  std::uint64_t pos = 0, neg = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("auc: labels must be 0 or 1");
    (l ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) throw MetricError("auc: both classes must be present");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return scores[i] < scores[j]; });
  // twice the Mann-Whitney count, kept integral
  std::uint64_t twice = 0, neg_below = 0;
  for (std::size_t s = 0; s < idx.size();) {
    std::size_t e = s;
    std::uint64_t p = 0, q = 0;
    while (e < idx.size() && scores[idx[e]] == scores[idx[s]]) (labels[idx[e++]] ? p : q)++;
    twice += p * (2 * neg_below + q);
    neg_below += q;
    s = e;
  }
  return double(twice) / (2.0 * double(pos) * double(neg));
}

/// Linear-interpolated quantile of sorted values, q in [0,1].
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ParameterError("quantile: empty input");
  const double pos = q * double(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double f = pos - double(lo);
  return f == 0 ? sorted[lo] : sorted[lo] + f * (sorted[hi] - sorted[lo]);
}

struct Interval {
  double lo = 0;
  double hi = 0;
};

/// Percentile bootstrap over sample indices. `statistic` sees a resample as
/// a list of indices into the original n samples. Resamples for which the
/// statistic is undefined (MetricError) are redrawn.
inline Interval bootstrap_ci_indexed(std::size_t n, const std::function<double(const std::vector<std::size_t>&)>& statistic,
                                     double alpha, std::size_t draws, std::uint64_t seed) {
  if (n == 0) throw ParameterError("bootstrap_ci: empty input");
  if (!(alpha > 0 && alpha < 1)) throw ParameterError("bootstrap_ci: alpha must be in (0,1)");
  if (draws == 0) throw ParameterError("bootstrap_ci: draws must be positive");
  Rng rng = substream(seed, {0x626f6f74ull});
  std::vector<double> stats;
  stats.reserve(draws);
  std::vector<std::size_t> sample(n);
  std::size_t failures = 0;
  while (stats.size() < draws) {
    for (auto& s : sample) s = uniform_index(rng, 0, n - 1);
    try {
      stats.push_back(statistic(sample));
    } catch (const MetricError&) {
      if (++failures > 100 * draws) throw MetricError("bootstrap_ci: statistic undefined on almost every resample");
    }
  }
  std::sort(stats.begin(), stats.end());
  return {quantile_sorted(stats, alpha / 2), quantile_sorted(stats, 1 - alpha / 2)};
}

inline Interval bootstrap_ci(std::span<const double> scores, const std::function<double(std::span<const double>)>& statistic,
                             double alpha, std::size_t draws, std::uint64_t seed) {
  std::vector<double> buf(scores.size());
  return bootstrap_ci_indexed(
      scores.size(),
      [&](const std::vector<std::size_t>& idx) {
        for (std::size_t i = 0; i < idx.size(); ++i) buf[i] = scores[idx[i]];
        return statistic(buf);
      },
      alpha, draws, seed);
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) throw ParameterError("mean: empty input");
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace msdino
