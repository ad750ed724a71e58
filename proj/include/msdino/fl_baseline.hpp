// SPDX-License-Identifier: Apache-2.0
#pragma once

// Federated comparator: every client trains the full network (embedder
// included) on its own raw images, and the server averages student and
// teacher weights. Each client keeps its optimiser state and its center
// locally; only model weights travel.

#include <optional>
#include <string>
#include <vector>

#include "msdino/trainer.hpp"

namespace msdino {

struct ClientData {
  std::string id;
  std::vector<LabeledImage> images;
};

struct FlConfig {
  std::size_t rounds = 30;                 // R
  std::size_t aggregation_interval = 1;    // r
  std::optional<std::size_t> local_steps;  // unset: one pass over the client's data per round

  void validate() const {
    if (aggregation_interval < 1) throw ParameterError("FlConfig: aggregation interval must be >= 1");
  }
};

struct CommRecord {
  std::size_t round = 0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
};

/// Data-count-weighted mean of shape-matched parameter sets. Weights are
/// normalised first, so a single contributor is returned bit-exactly.
inline ParamSet<float> fedavg(const std::vector<const ParamSet<float>*>& states, const std::vector<double>& weights) {
  if (states.empty() || states.size() != weights.size())
    throw ParameterError("fedavg: need one weight per state and at least one state");
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0)) throw ParameterError("fedavg: weights must be >= 0");
    total += w;
  }
  if (!(total > 0)) throw ParameterError("fedavg: weights must not all be zero");
  for (const auto* s : states)
    if (!s->same_shapes(*states[0])) throw ShapeError("fedavg: client parameter shapes differ");
  ParamSet<float> out = states[0]->clone();
  for (auto& [name, t] : out) {
    auto dst = t.data();
    std::vector<double> acc(dst.size(), 0.0);
    for (std::size_t c = 0; c < states.size(); ++c) {
      if (weights[c] == 0) continue;
      const double w = weights[c] / total;
      const auto src = states[c]->at(name).data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * double(src[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i]);
  }
  return out;
}

inline ParamSet<float> fedavg(const std::vector<ParamSet<float>>& states, const std::vector<double>& weights) {
  std::vector<const ParamSet<float>*> ptrs;
  for (const auto& s : states) ptrs.push_back(&s);
  return fedavg(ptrs, weights);
}

/// Seed used by client `index` for shuffling and view sampling.
inline std::uint64_t client_seed(std::uint64_t seed, std::size_t index) {
  return substream(seed, {0x636c69656e74ull, index})();
}

inline std::size_t steps_per_pass(std::size_t images, std::size_t batch_size) {
  return (images + batch_size - 1) / batch_size;
}

/// Runs `local_steps` optimisation steps on raw images. `round` keys the
/// shuffle and views; `total_steps` spans the client's whole schedule.
/// Steps beyond one pass continue with a fresh shuffle.
inline EpochAccumulator local_round(const std::vector<LabeledImage>& images, DistillState& st, const ViTConfig& vit,
                                    const TrainConfig& cfg, std::size_t round, std::size_t local_steps,
                                    std::size_t total_steps) {
  EpochAccumulator acc;
  if (images.empty() || local_steps == 0) return acc;
  const std::size_t per_pass = steps_per_pass(images.size(), cfg.batch_size);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t j = 0; j < local_steps; ++j) {
    const std::size_t pass = j / per_pass;
    const std::size_t key = round + pass * 0x10000;
    if (j % per_pass == 0) batches = shuffled_batches(images.size(), cfg.batch_size, epoch_seed(cfg.seed, key));
    const auto& batch = batches[j % per_pass];
    std::vector<ViewSet> views;
    for (auto i : batch) views.push_back(image_views(vit.tokens(), cfg, key, i));
    TokenSource source = [&](const ParamSet<float>& p) {
      std::vector<Tensor<float>> rows;
      for (auto i : batch) rows.push_back(embed_patches(images[i].pixels, p, vit));
      return ops::concat_rows(rows);
    };
    const double lr = cosine_schedule(std::min(st.step, total_steps), total_steps, cfg.lr_max, cfg.lr_min);
    const double lambda = cosine_schedule(std::min(st.step, total_steps), total_steps, cfg.ema_start, cfg.ema_end);
    acc.add(distill_step(st, source, views, vit, cfg, lr, lambda), batch.size());
  }
  return acc;
}

/// Ordinary (non-federated) training of the full network on one image set,
/// the reference that single-client federation must reproduce.
inline TrainResult train_images(const std::vector<LabeledImage>& images, const ViTConfig& vit, const TrainConfig& cfg,
                                std::uint64_t init_seed) {
  cfg.validate();
  if (images.empty()) throw ContractError("train_images: no images");
  auto st = init_distill_state(vit, init_seed, true);
  const std::size_t per_pass = steps_per_pass(images.size(), cfg.batch_size);
  TrainResult out;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    auto acc = local_round(images, st, vit, cfg, e, per_pass, per_pass * cfg.epochs);
    out.metrics.push_back(acc.finish(e, cosine_schedule(st.step - 1, per_pass * cfg.epochs, cfg.lr_max, cfg.lr_min),
                                     cosine_schedule(st.step - 1, per_pass * cfg.epochs, cfg.ema_start, cfg.ema_end)));
  }
  out.student = std::move(st.student);
  out.teacher = std::move(st.teacher);
  out.center = st.center;
  return out;
}

struct FlResult {
  ParamSet<float> student;  // global, embedder included
  ParamSet<float> teacher;
  std::vector<EpochMetrics> metrics;  // one row per round, image-weighted over clients
  std::vector<CommRecord> comm_log;   // per client link
  std::vector<std::string> warnings;

  std::uint64_t comm_total_bytes() const {
    std::uint64_t t = 0;
    for (const auto& c : comm_log) t += c.bytes_up + c.bytes_down;
    return t;
  }
};

/// R rounds of distribute, local training on every client, and weighted
/// averaging of student and teacher. Client i uses client_seed(cfg.seed, i).
inline FlResult fl_train(const std::vector<ClientData>& clients, const ViTConfig& vit, const TrainConfig& cfg,
                         const FlConfig& fl, std::uint64_t init_seed) {
  cfg.validate();
  fl.validate();
  if (clients.empty()) throw ContractError("fl_train: at least one client required");
  auto global = init_distill_state(vit, init_seed, true);
  FlResult out;
  std::vector<DistillState> local(clients.size());
  std::vector<TrainConfig> ccfg(clients.size(), cfg);
  std::vector<std::size_t> steps(clients.size()), totals(clients.size());
  for (std::size_t c = 0; c < clients.size(); ++c) {
    ccfg[c].seed = client_seed(cfg.seed, c);
    local[c].center = global.center.clone();
    steps[c] = fl.local_steps.value_or(steps_per_pass(clients[c].images.size(), cfg.batch_size));
    totals[c] = steps[c] * fl.rounds;
    if (clients[c].images.empty()) out.warnings.push_back("client " + clients[c].id + " has no images; skipped");
  }
  const std::uint64_t link_bytes = 2ull * global.student.numel() * sizeof(float);
  for (std::size_t round = 0; round < fl.rounds; ++round) {
    EpochAccumulator acc;
    for (std::size_t c = 0; c < clients.size(); ++c) {
      if (clients[c].images.empty()) continue;
      if (round % fl.aggregation_interval == 0) {
        local[c].student = global.student.clone();
        local[c].teacher = global.teacher.clone();
        local[c].student.set_requires_grad(true);
        local[c].teacher.set_requires_grad(false);
      }
      const auto a = local_round(clients[c].images, local[c], vit, ccfg[c], round, steps[c], totals[c]);
      acc.loss += a.loss;
      acc.entropy += a.entropy;
      acc.diversity += a.diversity;
      acc.images += a.images;
      acc.steps += a.steps;
    }
    const bool aggregate = (round + 1) % fl.aggregation_interval == 0 || round + 1 == fl.rounds;
    if (aggregate) {
      std::vector<const ParamSet<float>*> students, teachers;
      std::vector<double> weights;
      for (std::size_t c = 0; c < clients.size(); ++c) {
        if (clients[c].images.empty()) continue;
        students.push_back(&local[c].student);
        teachers.push_back(&local[c].teacher);
        weights.push_back(double(clients[c].images.size()));
      }
      if (!weights.empty()) {
        global.student = fedavg(students, weights);
        global.teacher = fedavg(teachers, weights);
      }
    }
    out.comm_log.push_back({round, aggregate ? link_bytes : 0, aggregate ? link_bytes : 0});
    const std::size_t ref = clients.size() > 0 && !clients[0].images.empty() ? 0 : clients.size() - 1;
    const double lr = cosine_schedule(std::min(local[ref].step, totals[ref]), totals[ref], cfg.lr_max, cfg.lr_min);
    const double lam =
        cosine_schedule(std::min(local[ref].step, totals[ref]), totals[ref], cfg.ema_start, cfg.ema_end);
    out.metrics.push_back(acc.finish(round, lr, lam));
  }
  out.student = std::move(global.student);
  out.teacher = std::move(global.teacher);
  return out;
}

inline void write_comm_log(const std::filesystem::path& path, const std::vector<CommRecord>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path.string());
  out << "round,bytes_up,bytes_down\n";
  for (const auto& r : log) out << r.round << ',' << r.bytes_up << ',' << r.bytes_down << '\n';
}

}  // namespace msdino
