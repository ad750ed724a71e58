// SPDX-License-Identifier: Apache-2.0
#pragma once

// Feature-space permutation. Mappings live only on the client while a bundle
// is being produced; nothing in the library serialises them.

#include <algorithm>
#include <numeric>
#include <vector>

#include "msdino/ops.hpp"
#include "msdino/rng.hpp"

namespace msdino {

struct Permutation {
  std::vector<std::size_t> mapping;

  std::size_t size() const { return mapping.size(); }

  bool is_bijection() const {
    std::vector<std::size_t> sorted = mapping;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted[i] != i) return false;
    return true;
  }

  Permutation inverse() const {
    Permutation inv{std::vector<std::size_t>(mapping.size())};
    for (std::size_t i = 0; i < mapping.size(); ++i) inv.mapping[mapping[i]] = i;
    return inv;
  }

  static Permutation identity(std::size_t n) {
    Permutation p{std::vector<std::size_t>(n)};
    std::iota(p.mapping.begin(), p.mapping.end(), std::size_t{0});
    return p;
  }

  bool operator==(const Permutation&) const = default;
};

/// Uniform Fisher-Yates draw from the substream keyed by (seed, image_index).
inline Permutation sample_permutation(std::uint64_t seed, std::uint64_t image_index, std::size_t tokens) {
  if (tokens == 0) throw ParameterError("sample_permutation: token count must be positive");
  Rng rng = substream(seed, {0x7065726dull, image_index});
  auto p = Permutation::identity(tokens);
  for (std::size_t i = tokens - 1; i > 0; --i) std::swap(p.mapping[i], p.mapping[uniform_index(rng, 0, i)]);
  return p;
}

/// Row i of the result is row p.mapping[i] of `tokens`.
template <typename T>
Tensor<T> permute_tokens(const Tensor<T>& tokens, const Permutation& p) {
  if (tokens.rank() != 2 || tokens.dim(0) != p.size())
    throw ShapeError("permute_tokens: permutation of length " + std::to_string(p.size()) + " for tokens " +
                     shape_str(tokens.dims()));
  if (!p.is_bijection()) throw ParameterError("permute_tokens: mapping is not a bijection");
  return ops::gather_rows(tokens, p.mapping);
}

}  // namespace msdino
