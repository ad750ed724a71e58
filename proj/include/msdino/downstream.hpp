// SPDX-License-Identifier: Apache-2.0
#pragma once

// Classification fine-tuning on top of a pretrained backbone and a client's
// own embedder: a linear probe on the CLS output (frozen features) or full
// fine-tuning of embedder, backbone and head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msdino/client.hpp"
#include "msdino/feature_store.hpp"
#include "msdino/metrics.hpp"

namespace msdino {

enum class FinetuneMode { probe, full };

inline FinetuneMode parse_finetune_mode(const std::string& s) {
  if (s == "probe") return FinetuneMode::probe;
  if (s == "full") return FinetuneMode::full;
  throw ParameterError("mode must be probe or full, got '" + s + "'");
}

struct FinetuneConfig {
  FinetuneMode mode = FinetuneMode::probe;
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  int num_classes = 0;  // 0: one more than the largest label
  bool standardize = true;  // probe only: per-dimension z-scoring with training-set statistics
  std::uint64_t seed = 0;
};

struct Classifier {
  ViTConfig vit;
  ParamSet<float> encoder;  // embedder.* and backbone.*
  ParamSet<float> head;     // cls.weight [K' x d], cls.bias; K' = 1 for two classes
  int num_classes = 0;
  std::vector<float> feature_mean;     // empty: features used as they are
  std::vector<float> feature_inv_std;

  bool binary() const { return num_classes == 2; }
};

struct FinetuneHistory {
  std::vector<double> loss;
  std::vector<double> train_accuracy;
};

struct FinetuneResult {
  Classifier model;
  FinetuneHistory history;
};

/// Backbone from a checkpoint; the embedder comes from the checkpoint when it
/// carries one (federated runs), otherwise from `embedder`.
inline ParamSet<float> encoder_from_checkpoint(const io::Checkpoint& ckpt, const ParamSet<float>& embedder) {
  auto out = io::params_from<float>(ckpt, "backbone.");
  if (out.empty()) throw DataError("checkpoint holds no backbone parameters");
  auto emb = io::params_from<float>(ckpt, "embedder.");
  out.merge(emb.empty() ? embedder.clone() : emb);
  return out;
}

/// CLS outputs [n x d] of full, unpermuted token sequences.
inline Tensor<float> cls_features(const ParamSet<float>& encoder, const std::vector<const Tensor<float>*>& images,
                                  const ViTConfig& vit) {
  std::vector<Tensor<float>> rows;
  std::vector<std::vector<std::size_t>> seqs;
  const std::size_t t = vit.tokens();
  for (std::size_t i = 0; i < images.size(); ++i) {
    rows.push_back(embed_patches(*images[i], encoder, vit));
    std::vector<std::size_t> s(t);
    for (std::size_t j = 0; j < t; ++j) s[j] = i * t + j;
    seqs.push_back(std::move(s));
  }
  return encode_sequences(ops::concat_rows(rows), seqs, encoder, vit).cls;
}

/// Mean and inverse standard deviation per column of [n x d].
inline std::pair<std::vector<float>, std::vector<float>> column_stats(const Tensor<float>& x) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x.values()[i * d + j];
  for (auto& v : mu) v /= double(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x.values()[i * d + j] - mu[j];
      var[j] += c * c;
    }
  std::vector<float> mean(d), inv(d);
  for (std::size_t j = 0; j < d; ++j) {
    mean[j] = float(mu[j]);
    inv[j] = float(1.0 / std::sqrt(var[j] / double(n) + 1e-6));
  }
  return {mean, inv};
}

inline Tensor<float> classifier_logits(const Classifier& m, const Tensor<float>& features) {
  if (m.feature_mean.empty()) return ops::linear(features, m.head.at("cls.weight"), m.head.at("cls.bias"));
  const std::size_t d = m.feature_mean.size();
  if (features.rank() != 2 || features.dim(1) != d) throw ShapeError("classifier: feature width mismatch");
  Tensor<float> z(features.dims());
  for (std::size_t i = 0; i < features.dim(0); ++i)
    for (std::size_t j = 0; j < d; ++j)
      z.data()[i * d + j] = (features.values()[i * d + j] - m.feature_mean[j]) * m.feature_inv_std[j];
  return ops::linear(z, m.head.at("cls.weight"), m.head.at("cls.bias"));
}

inline Tensor<float> classification_loss(const Tensor<float>& logits, const std::vector<int>& labels, bool binary) {
  if (binary) {
    std::vector<float> t(labels.begin(), labels.end());
    return ops::bce_with_logits(logits, t);
  }
  return ops::cross_entropy(logits, labels);
}

inline std::vector<int> predicted_classes(const Tensor<float>& logits, bool binary) {
  std::vector<int> out(logits.dim(0));
  const std::size_t k = logits.dim(1);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const float* row = logits.data().data() + r * k;
    out[r] = binary ? int(row[0] > 0) : int(std::max_element(row, row + k) - row);
  }
  return out;
}

inline int checked_num_classes(const std::vector<LabeledImage>& images, int requested) {
  if (images.empty()) throw ParameterError("finetune: no labelled images");
  int top = -1;
  std::set<int> present;
  for (const auto& im : images) {
    if (im.label < 0) throw DataError("finetune: missing or negative label");
    top = std::max(top, im.label);
    present.insert(im.label);
  }
  const int k = requested > 0 ? requested : top + 1;
  if (top >= k) throw DataError("finetune: label " + std::to_string(top) + " outside [0," + std::to_string(k) + ")");
  if (k < 2 || present.size() < 2) throw DataError("finetune: at least two classes must be present");
  return k;
}

inline Classifier init_classifier(const ParamSet<float>& encoder, const ViTConfig& vit, int num_classes,
                                  std::uint64_t seed) {
  Classifier m{vit, encoder.clone(), {}, num_classes, {}, {}};
  Rng rng = substream(seed, {0x636c73ull});
  vit_detail::add_linear(m.head, rng, "cls", num_classes == 2 ? 1 : std::size_t(num_classes), vit.dim);
  return m;
}

namespace downstream_detail {

using BatchFeatures = std::function<Tensor<float>(const std::vector<std::size_t>&)>;

inline FinetuneHistory fit(Classifier& m, ParamSet<float> trained, const std::vector<int>& labels,
                           const FinetuneConfig& cfg, const BatchFeatures& features) {
  FinetuneHistory h;
  AdamWHyper hyper;
  hyper.lr = cfg.lr;
  AdamState<float> opt;
  const std::size_t n = labels.size();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const auto& batch : shuffled_batches(n, cfg.batch_size, substream(cfg.seed, {0x6674ull, e})())) {
      std::vector<int> y;
      for (auto i : batch) y.push_back(labels[i]);
      trained.zero_grad();
      const auto logits = classifier_logits(m, features(batch));
      const auto loss = classification_loss(logits, y, m.binary());
      backward(loss);
      adamw_step(trained, opt, hyper);
      loss_sum += loss.item() * double(batch.size());
      const auto pred = predicted_classes(logits, m.binary());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == y[i];
    }
    h.loss.push_back(loss_sum / double(n));
    h.train_accuracy.push_back(double(correct) / double(n));
  }
  return h;
}

inline void check_finetune_config(const FinetuneConfig& cfg) {
  if (cfg.batch_size == 0 || !(cfg.lr > 0)) throw ParameterError("finetune: batch size and lr must be positive");
}

}  // namespace downstream_detail

/// Linear head trained on fixed features [n x d].
inline FinetuneResult probe_features(const Tensor<float>& features, const std::vector<LabeledImage>& labelled,
                                     const ViTConfig& vit, const FinetuneConfig& cfg) {
  downstream_detail::check_finetune_config(cfg);
  if (features.rank() != 2 || features.dim(0) != labelled.size() || features.dim(1) != vit.dim)
    throw ShapeError("probe: features must be [n x d] with one row per label");
  const int k = checked_num_classes(labelled, cfg.num_classes);
  FinetuneResult res{init_classifier({}, vit, k, cfg.seed), {}};
  res.model.head.set_requires_grad(true);
  std::vector<int> labels;
  for (const auto& im : labelled) labels.push_back(im.label);
  const auto fixed = features.detach();
  if (cfg.standardize && fixed.dim(0) > 1)
    std::tie(res.model.feature_mean, res.model.feature_inv_std) = column_stats(fixed);
  res.history = downstream_detail::fit(res.model, res.model.head, labels, cfg,
                                       [&](const std::vector<std::size_t>& b) { return ops::gather_rows(fixed, b); });
  res.model.head.set_requires_grad(false);
  return res;
}

/// probe: frozen encoder, linear head on CLS. full: encoder and head trained.
inline FinetuneResult finetune(const ParamSet<float>& encoder, const ViTConfig& vit,
                               const std::vector<LabeledImage>& images, const FinetuneConfig& cfg) {
  downstream_detail::check_finetune_config(cfg);
  const int k = checked_num_classes(images, cfg.num_classes);
  std::vector<const Tensor<float>*> all;
  for (const auto& im : images) all.push_back(&im.pixels);
  if (cfg.mode == FinetuneMode::probe) {
    Tensor<float> feats;
    {
      NoGradGuard ng;
      feats = cls_features(encoder, all, vit);
    }
    auto res = probe_features(feats, images, vit, cfg);
    res.model.encoder = encoder.clone();
    res.model.encoder.set_requires_grad(false);
    return res;
  }
  FinetuneResult res{init_classifier(encoder, vit, k, cfg.seed), {}};
  auto& m = res.model;
  m.encoder.set_requires_grad(true);
  m.head.set_requires_grad(true);
  ParamSet<float> trained = m.head;
  trained.merge(m.encoder);
  std::vector<int> labels;
  for (const auto& im : images) labels.push_back(im.label);
  res.history = downstream_detail::fit(m, trained, labels, cfg, [&](const std::vector<std::size_t>& b) {
    std::vector<const Tensor<float>*> imgs;
    for (auto i : b) imgs.push_back(all[i]);
    return cls_features(m.encoder, imgs, vit);
  });
  m.encoder.set_requires_grad(false);
  m.head.set_requires_grad(false);
  return res;
}

struct Predictions {
  std::vector<int> classes;
  std::vector<double> scores;  // positive-class logit (binary) or top logit
};

inline Predictions predict(const Classifier& m, const std::vector<LabeledImage>& images, std::size_t chunk = 64) {
  NoGradGuard ng;
  Predictions out;
  for (std::size_t s = 0; s < images.size(); s += chunk) {
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t i = s; i < std::min(images.size(), s + chunk); ++i) imgs.push_back(&images[i].pixels);
    const auto logits = classifier_logits(m, cls_features(m.encoder, imgs, m.vit));
    const auto cls = predicted_classes(logits, m.binary());
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < cls.size(); ++r) {
      out.classes.push_back(cls[r]);
      out.scores.push_back(logits.values()[r * k + (m.binary() ? 0 : std::size_t(cls[r]))]);
    }
  }
  return out;
}

inline double accuracy(const Predictions& p, const std::vector<LabeledImage>& images) {
  if (images.empty() || p.classes.size() != images.size()) throw ParameterError("accuracy: prediction count mismatch");
  std::size_t c = 0;
  for (std::size_t i = 0; i < images.size(); ++i) c += p.classes[i] == images[i].label;
  return double(c) / double(images.size());
}

struct EvalResult {
  std::string metric;
  double point = 0;
  double ci_lo = 0;
  double ci_hi = 0;
  std::size_t n = 0;
  double alpha = 0.05;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"metric", metric}, {"point", point}, {"ci_lo", ci_lo}, {"ci_hi", ci_hi},
            {"n", n},           {"alpha", alpha}, {"seed", seed}};
  }
};

/// Held-out accuracy or AUC with a percentile bootstrap interval.
inline EvalResult evaluate(const Classifier& m, const std::vector<LabeledImage>& images, const std::string& metric,
                           double alpha = 0.05, std::size_t draws = 1000, std::uint64_t seed = 0) {
  if (images.empty()) throw ParameterError("evaluate: no images");
  for (const auto& im : images)
    if (im.label < 0 || im.label >= m.num_classes) throw DataError("evaluate: label outside the classifier's range");
  const auto p = predict(m, images);
  EvalResult r{metric, 0, 0, 0, images.size(), alpha, seed};
  if (metric == "accuracy") {
    std::vector<double> hit(images.size());
    for (std::size_t i = 0; i < hit.size(); ++i) hit[i] = p.classes[i] == images[i].label;
    r.point = mean_of(hit);
    const auto ci = bootstrap_ci(hit, mean_of, alpha, draws, seed);
    r.ci_lo = ci.lo, r.ci_hi = ci.hi;
  } else if (metric == "auc") {
    if (!m.binary()) throw ParameterError("evaluate: auc needs a two-class classifier");
    std::vector<int> labels;
    for (const auto& im : images) labels.push_back(im.label);
    r.point = auc(p.scores, labels);
    std::vector<double> s;
    std::vector<int> l;
    const auto ci = bootstrap_ci_indexed(
        images.size(),
        [&](const std::vector<std::size_t>& idx) {
          s.clear(), l.clear();
          for (auto i : idx) s.push_back(p.scores[i]), l.push_back(labels[i]);
          return auc(s, l);
        },
        alpha, draws, seed);
    r.ci_lo = ci.lo, r.ci_hi = ci.hi;
  } else {
    throw ParameterError("evaluate: metric must be accuracy or auc, got '" + metric + "'");
  }
  return r;
}

inline void write_results_json(const std::filesystem::path& path, const EvalResult& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path.string());
  out << r.to_json().dump(2) << '\n';
}

/// Stratified subset keeping ceil(fraction * n_c) shuffled images per class.
inline std::vector<LabeledImage> label_subset(const std::vector<LabeledImage>& images, double fraction,
                                              std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw ParameterError("label_subset: fraction must be in (0,1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < images.size(); ++i) by_class[images[i].label].push_back(i);
  std::vector<std::size_t> keep;
  for (auto& [label, idx] : by_class) {
    Rng rng = substream(seed, {0x737562ull, std::uint64_t(label + 1)});
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, 0, i - 1)]);
    const auto n = static_cast<std::size_t>(std::ceil(fraction * double(idx.size()) - 1e-9));
    keep.insert(keep.end(), idx.begin(), idx.begin() + std::min(n, idx.size()));
  }
  std::sort(keep.begin(), keep.end());
  std::vector<LabeledImage> out;
  for (auto i : keep) out.push_back(images[i]);
  return out;
}

}  // namespace msdino
