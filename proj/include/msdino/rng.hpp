// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace msdino {

using Rng = std::mt19937_64;

/// Independent generator for a (seed, key...) tuple. Distinct tuples give
/// unrelated streams; equal tuples give identical streams.
inline Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * keys.size());
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// Uniform integer in [lo, hi].
inline std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

template <typename T>
T normal(Rng& rng, T stddev) {
  return static_cast<T>(std::normal_distribution<double>(0.0, static_cast<double>(stddev))(rng));
}

/// Normal draw rejected outside +-2 stddev.
template <typename T>
T truncated_normal(Rng& rng, T stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  double z;
  do {
    z = dist(rng);
  } while (z < -2.0 || z > 2.0);
  return static_cast<T>(z * static_cast<double>(stddev));
}

}  // namespace msdino
