// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "msdino/client.hpp"

namespace msdino {

/// Deterministic shuffle of [0, n) keyed by `epoch_seed`, cut into batches;
/// the final short batch is kept.
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size,
                                                              std::uint64_t epoch_seed) {
  if (batch_size == 0) throw ParameterError("iterate_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = substream(epoch_seed, {0x6261746368ull});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, 0, i - 1)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < order.size(); s += batch_size)
    batches.emplace_back(order.begin() + s, order.begin() + std::min(order.size(), s + batch_size));
  return batches;
}

/// Server memory holding every bundle received in the single upload round.
/// Ingestion is single-writer; after freeze() the store is read-only.
class FeatureStore {
 public:
  /// Appends a bundle. Throws IncompatibleError on T/d mismatch and
  /// DuplicateError on a repeated client id; the store is unchanged on error.
  void ingest(FeatureBundle bundle) { ingest_sized(std::move(bundle), 0); }

  /// Ingests an MSDF file; bytes_received grows by the file size.
  void ingest_file(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    ingest_sized(decode_bundle(bytes), bytes.size());
  }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  std::size_t total_images() const { return index_.size(); }
  std::uint64_t bytes_received() const { return bytes_received_; }
  std::size_t tokens() const { return tokens_; }
  std::size_t dim() const { return dim_; }
  const std::vector<FeatureBundle>& bundles() const { return bundles_; }

  /// Token features of the i-th image in ingestion order.
  const Tensor<float>& image(std::size_t i) const {
    const auto [b, k] = index_.at(i);
    return bundles_[b].images[k].tokens;
  }
  const std::string& client_of(std::size_t i) const { return bundles_[index_.at(i).first].client_id; }

  /// Global image indices for one epoch, see shuffled_batches.
  std::vector<std::vector<std::size_t>> iterate_batches(std::size_t batch_size, std::uint64_t epoch_seed) const {
    return shuffled_batches(total_images(), batch_size, epoch_seed);
  }

 private:
  void ingest_sized(FeatureBundle bundle, std::size_t file_bytes) {
    if (frozen_) throw ContractError("ingest: store is frozen");
    bundle.validate();
    if (!bundles_.empty() && (bundle.tokens != tokens_ || bundle.dim != dim_))
      throw IncompatibleError("ingest: bundle [" + std::to_string(bundle.tokens) + "," + std::to_string(bundle.dim) +
                              "] does not match store [" + std::to_string(tokens_) + "," + std::to_string(dim_) + "]");
    for (const auto& b : bundles_)
      if (b.client_id == bundle.client_id) throw DuplicateError("ingest: duplicate client id " + bundle.client_id);
    tokens_ = bundle.tokens;
    dim_ = bundle.dim;
    bytes_received_ += file_bytes ? file_bytes : bundle_size(bundle);
    const std::size_t b = bundles_.size();
    for (std::size_t k = 0; k < bundle.images.size(); ++k) index_.emplace_back(b, k);
    bundles_.push_back(std::move(bundle));
  }

  std::vector<FeatureBundle> bundles_;
  std::vector<std::pair<std::size_t, std::size_t>> index_;
  std::size_t tokens_ = 0;
  std::size_t dim_ = 0;
  std::uint64_t bytes_received_ = 0;
  bool frozen_ = false;
};

}  // namespace msdino
