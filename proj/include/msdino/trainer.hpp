// SPDX-License-Identifier: Apache-2.0
#pragma once

// Server-side self-distillation over stored token features.
//
// A view is a subset of token rows of one image. Global views keep most
// tokens and feed both networks; local views keep a minority and feed only
// the student. Targets are the teacher's centred, sharpened softmax; the
// teacher follows the student by EMA and is never touched by the optimiser.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "msdino/feature_store.hpp"
#include "msdino/vit.hpp"

namespace msdino {

enum class StudentViews { both, local_only };

inline const char* to_string(StudentViews v) { return v == StudentViews::both ? "both" : "local-only"; }

inline StudentViews parse_student_views(const std::string& s) {
  if (s == "both") return StudentViews::both;
  if (s == "local-only") return StudentViews::local_only;
  throw ParameterError("student views must be 'both' or 'local-only', got '" + s + "'");
}

struct RatioRange {
  double lo;
  double hi;
};

struct TrainConfig {
  std::size_t global_views = 2;  // M
  std::size_t local_views = 6;   // N
  RatioRange large_ratio{0.9, 1.0};
  RatioRange small_ratio{0.3, 0.5};
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  double weight_decay = 0.04;
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  double ema_start = 0.996;
  double ema_end = 1.0;
  double center_momentum = 0.9;
  StudentViews student_views = StudentViews::both;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(0 < small_ratio.lo && small_ratio.lo <= small_ratio.hi && small_ratio.hi < large_ratio.lo &&
          large_ratio.lo <= large_ratio.hi && large_ratio.hi <= 1))
      throw ParameterError("TrainConfig: ratios must satisfy 0 < small.lo <= small.hi < large.lo <= large.hi <= 1");
    if (global_views < 1 || local_views < 1) throw ParameterError("TrainConfig: view counts must be >= 1");
    if (!(teacher_temp > 0) || !(student_temp > 0)) throw ParameterError("TrainConfig: temperatures must be > 0");
    if (batch_size < 1) throw ParameterError("TrainConfig: batch_size must be >= 1");
    if (!(center_momentum > 0 && center_momentum < 1))
      throw ParameterError("TrainConfig: center momentum must be in (0,1)");
    if (!(ema_start >= 0 && ema_start <= 1 && ema_end >= 0 && ema_end <= 1))
      throw ParameterError("TrainConfig: EMA momenta must be in [0,1]");
    if (!(lr_max >= 0) || !(lr_min >= 0) || !(weight_decay >= 0))
      throw ParameterError("TrainConfig: lr and weight decay must be >= 0");
  }

  std::size_t pairs_per_image() const {
    return student_views == StudentViews::both ? global_views * (global_views + local_views - 1)
                                               : global_views * local_views;
  }
};

// ---------------------------------------------------------------------------
// Schedules and state updates

/// end + (start - end) * (1 + cos(pi * step / total)) / 2; `end` when total is 0.
inline double cosine_schedule(std::size_t step, std::size_t total, double start, double end) {
  if (total == 0) return end;
  if (step > total) throw ParameterError("cosine_schedule: step beyond total");
  return end + (start - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total)));
}

/// teacher <- lambda * teacher + (1 - lambda) * student, element-wise.
template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double lambda) {
  if (!(lambda >= 0 && lambda <= 1)) throw ParameterError("ema_update: lambda must be in [0,1]");
  if (!teacher.same_shapes(student)) throw ShapeError("ema_update: teacher and student shapes differ");
  const T a = static_cast<T>(lambda), b = static_cast<T>(1.0 - lambda);
  auto s = student.begin();
  for (auto t = teacher.begin(); t != teacher.end(); ++t, ++s) {
    auto tv = t->second.data();
    auto sv = s->second.data();
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = a * tv[i] + b * sv[i];
  }
}

/// center <- m * center + (1 - m) * row mean of `logits` ([rows x K],
/// row-major). Empty input leaves the center unchanged.
template <typename T>
void update_center(Tensor<T>& center, std::span<const T> logits, double m) {
  if (logits.empty()) return;
  if (!(m > 0 && m < 1)) throw ParameterError("update_center: momentum must be in (0,1)");
  const std::size_t k = center.numel();
  if (logits.size() % k != 0) throw ShapeError("update_center: logits width does not match center");
  const std::size_t rows = logits.size() / k;
  std::vector<double> mean(k, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) mean[j] += logits[r * k + j];
  auto c = center.data();
  for (std::size_t j = 0; j < k; ++j) c[j] = static_cast<T>(m * c[j] + (1.0 - m) * mean[j] / double(rows));
}

// ---------------------------------------------------------------------------
// Views

struct ViewSet {
  std::vector<std::vector<std::size_t>> global;  // M subsets
  std::vector<std::vector<std::size_t>> local;   // N subsets
};

inline std::size_t ratio_ceil(double r, std::size_t t) {
  return static_cast<std::size_t>(std::ceil(r * double(t) - 1e-9));
}
inline std::size_t ratio_floor(double r, std::size_t t) {
  return static_cast<std::size_t>(std::floor(r * double(t) + 1e-9));
}

/// k distinct rows drawn uniformly without replacement, kept in row order.
inline std::vector<std::size_t> sample_subset(std::size_t tokens, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(tokens);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[uniform_index(rng, i, tokens - 1)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Global views keep k ~ U[ceil(large.lo*T), floor(large.hi*T)] rows, local
/// views k ~ U[ceil(small.lo*T), floor(small.hi*T)].
inline ViewSet sample_views(std::size_t tokens, const TrainConfig& cfg, Rng& rng) {
  if (tokens < 4) throw ParameterError("sample_views: need at least 4 tokens");
  const std::size_t g_lo = std::max<std::size_t>(1, ratio_ceil(cfg.large_ratio.lo, tokens));
  const std::size_t g_hi = std::min(tokens, ratio_floor(cfg.large_ratio.hi, tokens));
  const std::size_t l_lo = std::max<std::size_t>(1, ratio_ceil(cfg.small_ratio.lo, tokens));
  const std::size_t l_hi = std::min(tokens, ratio_floor(cfg.small_ratio.hi, tokens));
  if (g_lo > g_hi || l_lo > l_hi)
    throw ParameterError("sample_views: " + std::to_string(tokens) + " tokens too few for the sampling ratios");
  ViewSet v;
  for (std::size_t i = 0; i < cfg.global_views; ++i)
    v.global.push_back(sample_subset(tokens, uniform_index(rng, g_lo, g_hi), rng));
  for (std::size_t i = 0; i < cfg.local_views; ++i)
    v.local.push_back(sample_subset(tokens, uniform_index(rng, l_lo, l_hi), rng));
  return v;
}

// ---------------------------------------------------------------------------
// Loss

/// softmax((z - center) / tau_t) per row, outside the tape.
template <typename T>
Tensor<T> teacher_targets(const Tensor<T>& logits, const Tensor<T>& center, double tau_t) {
  NoGradGuard guard;
  if (logits.dim(1) != center.numel()) throw ShapeError("teacher_targets: center width mismatch");
  Tensor<T> shifted(logits.dims());
  const std::size_t k = center.numel();
  for (std::size_t i = 0; i < logits.numel(); ++i) shifted.data()[i] = logits.data()[i] - center.data()[i % k];
  return ops::softmax(shifted, -1, static_cast<T>(tau_t)).detach();
}

/// Mean per-row entropy (nats) of a row-stochastic matrix.
template <typename T>
double mean_row_entropy(const Tensor<T>& probs) {
  const std::size_t rows = probs.dim(0), k = probs.dim(1);
  double h = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const double p = probs.data()[r * k + j];
      if (p > 0) h -= p * std::log(p);
    }
  return h / double(rows);
}

/// Entropy of the mean row minus the mean row entropy. Zero exactly when all
/// rows are identical, which is the collapsed state.
template <typename T>
double teacher_diversity(const Tensor<T>& probs) {
  const std::size_t rows = probs.dim(0), k = probs.dim(1);
  std::vector<double> avg(k, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) avg[j] += probs.data()[r * k + j] / double(rows);
  double h = 0;
  for (double p : avg)
    if (p > 0) h -= p * std::log(p);
  return std::max(0.0, h - mean_row_entropy(probs));
}

/// Cross-entropy between teacher targets and student log-probabilities.
///
/// `student_logits` holds, per image, its M global views followed by its N
/// local views; `targets` holds M rows per image. Each image contributes the
/// mean over its pairs (teacher view g, student view s != g), and the batch
/// loss is the mean over images.
template <typename T>
Tensor<T> dino_loss_from_logits(const Tensor<T>& student_logits, const Tensor<T>& targets, std::size_t images,
                                std::size_t m, std::size_t n, StudentViews mode, double tau_s) {
  const std::size_t views = m + n;
  const std::size_t pairs = mode == StudentViews::both ? m * (views - 1) : m * n;
  if (images == 0 || pairs == 0) throw ContractError("dino_loss: no teacher/student view pairs");
  if (student_logits.rank() != 2 || student_logits.dim(0) != images * views)
    throw ShapeError("dino_loss: expected " + std::to_string(images * views) + " student rows, got " +
                     shape_str(student_logits.dims()));
  if (targets.rank() != 2 || targets.dim(0) != images * m || targets.dim(1) != student_logits.dim(1))
    throw ShapeError("dino_loss: expected " + std::to_string(images * m) + " teacher rows, got " +
                     shape_str(targets.dims()));
  const std::size_t k = student_logits.dim(1);
  const auto logq = ops::log_softmax(student_logits, static_cast<T>(tau_s));
  std::vector<T> w(student_logits.numel(), T(0));
  const double norm = 1.0 / (double(pairs) * double(images));
  for (std::size_t b = 0; b < images; ++b)
    for (std::size_t g = 0; g < m; ++g) {
      const T* p = targets.data().data() + (b * m + g) * k;
      for (std::size_t s = mode == StudentViews::both ? 0 : m; s < views; ++s) {
        if (s == g) continue;
        T* dst = w.data() + (b * views + s) * k;
        for (std::size_t j = 0; j < k; ++j) dst[j] += static_cast<T>(p[j] * norm);
      }
    }
  return ops::scale(ops::weighted_sum(logq, w), T(-1));
}

/// Sequences for the student (M global then N local views per image) and the
/// teacher (global views only) over row-stacked images of `tokens` rows each.
inline void view_sequences(const std::vector<ViewSet>& views, std::size_t tokens,
                           std::vector<std::vector<std::size_t>>& student,
                           std::vector<std::vector<std::size_t>>& teacher) {
  student.clear();
  teacher.clear();
  for (std::size_t b = 0; b < views.size(); ++b) {
    auto shift = [&](std::vector<std::size_t> v) {
      for (auto& r : v) r += b * tokens;
      return v;
    };
    for (const auto& g : views[b].global) {
      student.push_back(shift(g));
      teacher.push_back(shift(g));
    }
    for (const auto& l : views[b].local) student.push_back(shift(l));
  }
}

template <typename T>
struct LossParts {
  Tensor<T> loss;
  Tensor<T> teacher_logits;  // [images*M x K]
  Tensor<T> targets;         // [images*M x K]
};

/// Full loss for a batch of images whose token rows are stacked in
/// `student_src` / `teacher_src` ([images*T x d]). Teacher work is untaped.
template <typename T>
LossParts<T> dino_loss_batch(const ParamSet<T>& student, const ParamSet<T>& teacher, const Tensor<T>& center,
                             const Tensor<T>& student_src, const Tensor<T>& teacher_src,
                             const std::vector<ViewSet>& views, const ViTConfig& vit, const TrainConfig& cfg) {
  std::vector<std::vector<std::size_t>> s_seq, t_seq;
  view_sequences(views, vit.tokens(), s_seq, t_seq);
  const std::size_t m = views.empty() ? 0 : views[0].global.size();
  const std::size_t n = views.empty() ? 0 : views[0].local.size();
  for (const auto& v : views)
    if (v.global.size() != m || v.local.size() != n) throw ContractError("dino_loss: ragged view counts");
  Tensor<T> t_logits;
  {
    NoGradGuard guard;
    if (t_seq.empty()) throw ContractError("dino_loss: no teacher views");
    auto enc = encode_sequences(teacher_src, t_seq, teacher, vit);
    t_logits = dino_head(enc.cls, teacher, vit).detach();
  }
  auto targets = teacher_targets(t_logits, center, cfg.teacher_temp);
  auto s_enc = encode_sequences(student_src, s_seq, student, vit);
  auto s_logits = dino_head(s_enc.cls, student, vit);
  auto loss = dino_loss_from_logits(s_logits, targets, views.size(), m, n, cfg.student_views, cfg.student_temp);
  return {loss, t_logits, targets};
}

/// Single-image loss over stored token features.
template <typename T>
Tensor<T> dino_loss(const ParamSet<T>& student, const ParamSet<T>& teacher, const Tensor<T>& center,
                    const Tensor<T>& tokens, const ViewSet& views, const ViTConfig& vit, const TrainConfig& cfg) {
  return dino_loss_batch(student, teacher, center, tokens, tokens, {views}, vit, cfg).loss;
}

// ---------------------------------------------------------------------------
// Training state

struct DistillState {
  ParamSet<float> student;
  ParamSet<float> teacher;
  Tensor<float> center;  // [K]
  AdamState<float> opt;
  std::size_t step = 0;
};

/// Student initialised from `seed`, teacher an independent copy, zero center.
/// The embedder is included only when the caller trains it (FL clients).
inline DistillState init_distill_state(const ViTConfig& vit, std::uint64_t seed, bool with_embedder) {
  vit.validate();
  auto p = init_params<float>(vit, seed);
  DistillState s;
  if (with_embedder) s.student.merge(p.embedder);
  s.student.merge(p.backbone);
  s.student.merge(p.head);
  s.student.set_requires_grad(true);
  s.teacher = s.student.clone();
  s.teacher.set_requires_grad(false);
  s.center = Tensor<float>({vit.head_out_dim}, 0.f);
  return s;
}

struct StepStats {
  double loss = 0;
  double teacher_entropy = 0;
  double diversity = 0;
};

/// Builds [images*T x d] token rows from a parameter set. Stored features
/// ignore the argument; raw-image sources embed with it.
using TokenSource = std::function<Tensor<float>(const ParamSet<float>&)>;

/// One optimisation step: AdamW on the student, EMA teacher, center update.
inline StepStats distill_step(DistillState& st, const TokenSource& source, const std::vector<ViewSet>& views,
                              const ViTConfig& vit, const TrainConfig& cfg, double lr, double lambda) {
  for (auto& [_, t] : st.student) t.clear_grad();
  Tensor<float> teacher_src;
  {
    NoGradGuard guard;
    teacher_src = source(st.teacher);
  }
  auto student_src = source(st.student);
  auto parts = dino_loss_batch(st.student, st.teacher, st.center, student_src, teacher_src, views, vit, cfg);
  backward(parts.loss);
  AdamWHyper hyper;
  hyper.lr = lr;
  hyper.weight_decay = cfg.weight_decay;
  hyper.decay_vectors = false;
  adamw_step(st.student, st.opt, hyper);
  ema_update(st.teacher, st.student, lambda);
  update_center<float>(st.center, parts.teacher_logits.data(), cfg.center_momentum);
  ++st.step;
  return {parts.loss.item(), mean_row_entropy(parts.targets), teacher_diversity(parts.targets)};
}

inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return substream(seed, {0x65706f6368ull, epoch})();
}

/// Views for one image, keyed so they do not depend on batch composition.
inline ViewSet image_views(std::size_t tokens, const TrainConfig& cfg, std::size_t epoch, std::uint64_t image_key) {
  Rng rng = substream(cfg.seed, {0x76696577ull, epoch, image_key});
  return sample_views(tokens, cfg, rng);
}

// ---------------------------------------------------------------------------
// Server loop

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double teacher_entropy = 0;
  double lr = 0;
  double lambda = 0;
  double diversity = 0;  // mean teacher_diversity over the epoch's steps
  bool collapsed = false;
};

/// Below this diversity (nats) every teacher output in a batch is the same
/// distribution.
inline constexpr double kCollapseDiversity = 1e-9;

struct TrainResult {
  ParamSet<float> student;
  ParamSet<float> teacher;
  Tensor<float> center;
  std::vector<EpochMetrics> metrics;

  bool any_collapse() const {
    return std::any_of(metrics.begin(), metrics.end(), [](const auto& e) { return e.collapsed; });
  }
};

/// Per-epoch accumulator shared by the server loop and the FL baseline.
struct EpochAccumulator {
  double loss = 0, entropy = 0, diversity = 0;
  std::size_t images = 0, steps = 0;

  void add(const StepStats& s, std::size_t batch_images) {
    loss += s.loss * double(batch_images);
    entropy += s.teacher_entropy * double(batch_images);
    diversity += s.diversity;
    images += batch_images;
    ++steps;
  }

  EpochMetrics finish(std::size_t epoch, double lr, double lambda) const {
    EpochMetrics e;
    e.epoch = epoch;
    e.mean_loss = images ? loss / double(images) : 0.0;
    e.teacher_entropy = images ? entropy / double(images) : 0.0;
    e.lr = lr;
    e.lambda = lambda;
    e.diversity = steps ? diversity / double(steps) : 0.0;
    e.collapsed = steps && e.diversity < kCollapseDiversity;
    return e;
  }
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains backbone + head on a frozen store. Deterministic given cfg.seed and
/// `init_seed`.
inline TrainResult train(const FeatureStore& store, const ViTConfig& vit, const TrainConfig& cfg,
                         std::uint64_t init_seed, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  vit.validate();
  if (!store.frozen()) throw ContractError("train: store must be frozen");
  if (store.total_images() == 0) throw ContractError("train: store is empty");
  if (store.tokens() != vit.tokens() || store.dim() != vit.dim)
    throw IncompatibleError("train: store features [" + std::to_string(store.tokens()) + "," +
                            std::to_string(store.dim()) + "] do not match model [" + std::to_string(vit.tokens()) +
                            "," + std::to_string(vit.dim) + "]");
  auto st = init_distill_state(vit, init_seed, false);
  const std::size_t per_epoch = (store.total_images() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  TrainResult out;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochAccumulator acc;
    double lr = 0, lambda = 0;
    for (const auto& batch : store.iterate_batches(cfg.batch_size, epoch_seed(cfg.seed, epoch))) {
      std::vector<Tensor<float>> rows;
      std::vector<ViewSet> views;
      for (auto i : batch) {
        rows.push_back(store.image(i));
        views.push_back(image_views(vit.tokens(), cfg, epoch, i));
      }
      const auto stacked = ops::concat_rows(rows);
      lr = cosine_schedule(st.step, total, cfg.lr_max, cfg.lr_min);
      lambda = cosine_schedule(st.step, total, cfg.ema_start, cfg.ema_end);
      acc.add(distill_step(st, [&](const ParamSet<float>&) { return stacked; }, views, vit, cfg, lr, lambda),
              batch.size());
    }
    out.metrics.push_back(acc.finish(epoch, lr, lambda));
    if (on_epoch) on_epoch(out.metrics.back());
  }
  out.student = std::move(st.student);
  out.teacher = std::move(st.teacher);
  out.center = st.center;
  return out;
}

// ---------------------------------------------------------------------------
// Outputs

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path.string());
  out << "epoch,mean_loss,teacher_entropy,lr,lambda\n";
  char buf[160];
  for (const auto& e : metrics) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.mean_loss, e.teacher_entropy, e.lr,
                  e.lambda);
    out << buf;
  }
}

/// Parameters, center and model config in one MSDC checkpoint.
inline io::Checkpoint make_checkpoint(const ParamSet<float>& params, const Tensor<float>& center,
                                      const ViTConfig& vit) {
  io::Checkpoint ck;
  io::add_params(ck, params);
  ck["state.center"] = io::TensorRecord::from_tensor(center);
  ck["meta.config"] = config_record(vit);
  return ck;
}

/// Writes `<prefix>.student.msdc` and `<prefix>.teacher.msdc`; returns the
/// teacher checkpoint size in bytes.
inline std::size_t write_train_checkpoints(const std::string& prefix, const TrainResult& r, const ViTConfig& vit) {
  io::write_checkpoint(prefix + ".student.msdc", make_checkpoint(r.student, r.center, vit));
  return io::write_checkpoint(prefix + ".teacher.msdc", make_checkpoint(r.teacher, r.center, vit));
}

}  // namespace msdino
