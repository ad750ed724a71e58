// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line front end. `run` never exits the process; it returns the exit
// code and writes one `error: <kind>: <message>` line to `err` on failure.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "msdino/msdino.hpp"

namespace msdino::cli {

inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitContract = 4;
inline constexpr int kExitCheckFailed = 5;

inline int exit_code_for(const std::string& kind) {
  if (kind == "internal") return 1;
  if (kind == "parameter" || kind == "usage") return kExitUsage;
  if (kind == "io" || kind == "format" || kind == "data") return kExitData;
  return kExitContract;
}

/// Permutation seed of a client, derived from its embedder seed.
inline std::uint64_t permutation_seed(std::uint64_t seed) { return substream(seed, {0x7065726d73ull})(); }

/// Model initialisation seed of a training run.
inline std::uint64_t init_seed(std::uint64_t seed) { return substream(seed, {0x696e6974ull})(); }

/// `key = value` lines; `#` starts a comment.
inline std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("config line " + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

namespace detail {

struct TrainFlags {
  TrainConfig cfg;
  ViTConfig vit;
  std::string student_views = "both";

  void add(CLI::App* app, bool with_embedder) {
    app->add_option("--global-views", cfg.global_views, "global views per image (M)");
    app->add_option("--local-views", cfg.local_views, "local views per image (N)");
    app->add_option("--large-ratio-lo", cfg.large_ratio.lo);
    app->add_option("--large-ratio-hi", cfg.large_ratio.hi);
    app->add_option("--small-ratio-lo", cfg.small_ratio.lo);
    app->add_option("--small-ratio-hi", cfg.small_ratio.hi);
    app->add_option("--epochs", cfg.epochs);
    app->add_option("--batch-size", cfg.batch_size);
    app->add_option("--lr", cfg.lr_max, "peak learning rate");
    app->add_option("--lr-min", cfg.lr_min);
    app->add_option("--weight-decay", cfg.weight_decay);
    app->add_option("--teacher-temp", cfg.teacher_temp);
    app->add_option("--student-temp", cfg.student_temp);
    app->add_option("--ema-start", cfg.ema_start);
    app->add_option("--ema-end", cfg.ema_end);
    app->add_option("--center-momentum", cfg.center_momentum);
    app->add_option("--student-views", student_views, "both | local-only");
    app->add_option("--seed", cfg.seed);
    app->add_option("--patch-size", vit.patch_size);
    if (with_embedder) app->add_option("--dim", vit.dim);
    app->add_option("--depth", vit.depth);
    app->add_option("--heads", vit.heads);
    app->add_option("--head-out-dim", vit.head_out_dim, "prototype count K");
    app->add_option("--head-hidden", vit.head_hidden);
    app->add_option("--head-bottleneck", vit.head_bottleneck);
    app->add_option("--mlp-ratio", vit.mlp_ratio);
  }

  TrainConfig config() const {
    TrainConfig c = cfg;
    c.student_views = parse_student_views(student_views);
    c.validate();
    return c;
  }
};

/// Image size for a token count at a given patch size.
inline std::size_t image_size_for(std::size_t tokens, std::size_t patch) {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(double(tokens))));
  if (g * g != tokens) throw DataError("token count " + std::to_string(tokens) + " is not a square grid");
  return g * patch;
}

inline std::size_t square_image_size(const std::vector<LabeledImage>& images) {
  if (images.empty()) throw DataError("image set is empty");
  const auto& d = images[0].pixels.dims();
  if (d[0] != d[1]) throw DataError("images must be square");
  return d[0];
}

inline void require_labels(const std::vector<LabeledImage>& images, const std::string& what) {
  for (const auto& im : images)
    if (im.label < 0) throw DataError(what + ": every image needs a label");
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Single-round self-supervised training on permuted patch features"};
  app.require_subcommand(1);
  std::ostringstream version;
  version << "msdino 1.0.0\nMSDT " << int(io::kTensorVersion) << "\nMSDF " << int(kBundleVersion) << "\nMSDC "
          << int(io::kCheckpointVersion);
  bool show_version = false;
  app.add_flag("--version", show_version, "print format versions");
  std::string config_path;
  app.add_option("--config", config_path, "key=value file; flags take precedence");

  // gen
  auto* gen = app.add_subcommand("gen", "write a labelled synthetic corpus (images.msdt + labels.csv)");
  std::string gen_out;
  std::size_t gen_n = 100, gen_size = 32;
  int gen_classes = 4;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n);
  gen->add_option("--classes", gen_classes);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--image-size", gen_size);

  // client embed
  auto* client = app.add_subcommand("client", "client-side operations");
  client->require_subcommand(1);
  auto* embed = client->add_subcommand("embed", "encrypt an image set into an MSDF bundle");
  std::string embed_images, embed_out, embed_id = "client";
  std::uint64_t embed_seed = 0;
  bool no_permute = false;
  ViTConfig embed_vit;
  embed->add_option("--images", embed_images, "image set directory")->required();
  embed->add_option("--out", embed_out, "bundle path")->required();
  embed->add_option("--client-id", embed_id);
  embed->add_option("--seed", embed_seed, "embedder seed; the permutation seed derives from it");
  embed->add_flag("--no-permute", no_permute, "ship tokens in patch order");
  embed->add_option("--patch-size", embed_vit.patch_size);
  embed->add_option("--dim", embed_vit.dim);

  // server train
  auto* server = app.add_subcommand("server", "server-side operations");
  server->require_subcommand(1);
  auto* strain = server->add_subcommand("train", "train on received bundles");
  std::vector<std::string> bundle_paths;
  std::string train_out, train_metrics;
  detail::TrainFlags sflags;
  strain->add_option("--bundles", bundle_paths, "MSDF files")->required();
  strain->add_option("--out", train_out, "checkpoint prefix")->required();
  strain->add_option("--metrics", train_metrics, "per-epoch CSV");
  sflags.add(strain, false);

  // fl train
  auto* fl = app.add_subcommand("fl", "federated baseline");
  fl->require_subcommand(1);
  auto* ftrain = fl->add_subcommand("train", "FedAvg over per-client image sets");
  std::vector<std::string> client_dirs;
  std::string fl_out, fl_comm, fl_metrics;
  FlConfig flcfg;
  std::size_t local_steps = 0;
  detail::TrainFlags fflags;
  ftrain->add_option("--client-dirs", client_dirs, "one image set directory per client")->required();
  ftrain->add_option("--rounds", flcfg.rounds);
  ftrain->add_option("--interval", flcfg.aggregation_interval, "aggregation interval r");
  auto* steps_opt = ftrain->add_option("--local-steps", local_steps, "steps per round (default: one pass)");
  ftrain->add_option("--out", fl_out, "checkpoint prefix")->required();
  ftrain->add_option("--comm-log", fl_comm, "per-round CSV of one client link");
  ftrain->add_option("--metrics", fl_metrics, "per-round CSV");
  fflags.add(ftrain, true);

  // attack
  auto* attack = app.add_subcommand("attack", "feature-inversion attack on intercepted bundles");
  std::string public_dir, attack_out;
  std::vector<std::string> attack_bundles, originals;
  AttackConfig acfg;
  std::size_t attack_patch = 8;
  std::string decoder = "conv";
  attack->add_option("--public-dir", public_dir, "public image set")->required();
  attack->add_option("--bundles", attack_bundles, "intercepted MSDF files")->required();
  attack->add_option("--out", attack_out, "output directory")->required();
  attack->add_option("--originals", originals, "ground-truth image set per bundle, for metrics");
  attack->add_option("--epochs", acfg.epochs);
  attack->add_option("--batch-size", acfg.batch_size);
  attack->add_option("--lr", acfg.lr);
  attack->add_option("--patch-size", attack_patch);
  attack->add_option("--jigsaw-depth", acfg.jigsaw_depth);
  attack->add_option("--jigsaw-heads", acfg.jigsaw_heads);
  attack->add_option("--decoder", decoder, "conv | identity");
  attack->add_option("--seed", acfg.seed);

  // finetune
  auto* ft = app.add_subcommand("finetune", "probe or fine-tune a checkpoint on labelled images");
  std::string ft_ckpt, ft_images, ft_labels, ft_test, ft_mode = "probe", ft_metric = "accuracy", ft_out;
  std::uint64_t embed_seed_ft = 0;
  FinetuneConfig fcfg;
  double alpha = 0.05;
  std::size_t draws = 1000;
  std::uint64_t eval_seed = 0;
  ft->add_option("--ckpt", ft_ckpt, "MSDC checkpoint")->required();
  ft->add_option("--images", ft_images, "training image set")->required();
  ft->add_option("--labels", ft_labels, "labels CSV overriding the set's own");
  ft->add_option("--mode", ft_mode, "probe | full");
  ft->add_option("--embed-seed", embed_seed_ft, "client embedder seed (ignored if the checkpoint has one)");
  ft->add_option("--epochs", fcfg.epochs);
  ft->add_option("--batch-size", fcfg.batch_size);
  ft->add_option("--lr", fcfg.lr);
  ft->add_option("--num-classes", fcfg.num_classes);
  ft->add_option("--seed", fcfg.seed);
  ft->add_option("--test-images", ft_test, "held-out image set (default: training set)");
  ft->add_option("--metric", ft_metric, "accuracy | auc");
  ft->add_option("--alpha", alpha);
  ft->add_option("--draws", draws, "bootstrap resamples");
  ft->add_option("--eval-seed", eval_seed);
  ft->add_option("--out", ft_out, "results JSON");

  // cost
  auto* cost = app.add_subcommand("cost", "closed-form communication totals");
  CostInputs cin;
  double p_fl = -1;
  std::string unit = "elements";
  cost->add_option("--D", cin.D, "data items")->required();
  cost->add_option("--F", cin.F, "feature units per item")->required();
  cost->add_option("--P", cin.P, "model units")->required();
  cost->add_option("--P-fl", p_fl, "model units per FL exchange (default: --P)");
  cost->add_option("--R", cin.R, "FL rounds");
  cost->add_option("--r", cin.r, "aggregation interval");
  cost->add_option("--unit", unit, "elements | bytes");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "f64 finite-difference check of the full loss");
  std::uint64_t gc_seed = 1;
  double gc_h = 3e-3, gc_tol = 1e-4;
  std::string gc_stencil = "five-point";
  gc->add_option("--seed", gc_seed);
  gc->add_option("--step", gc_h, "finite-difference step");
  gc->add_option("--stencil", gc_stencil, "central | five-point");
  gc->add_option("--tolerance", gc_tol);

  auto fail = [&](const std::string& kind, const std::string& what) {
    std::string msg = what;
    for (auto& c : msg)
      if (c == '\n') c = ' ';
    err << "error: " << kind << ": " << msg << '\n';
    return exit_code_for(kind);
  };

  // --version alone is valid without a subcommand
  for (int i = 1; i < argc; ++i)
    if (std::string(argv[i]) == "--version") {
      out << version.str() << '\n';
      return 0;
    }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    // innermost selected subcommand receives config-file values
    CLI::App* leaf = &app;
    while (!leaf->get_subcommands().empty()) leaf = leaf->get_subcommands().front();
    if (!config_path.empty()) {
      for (const auto& [key, value] : read_config_file(config_path)) {
        auto* opt = leaf->get_option_no_throw("--" + key);
        if (!opt) throw ParameterError("config key '" + key + "' is not an option of " + leaf->get_name());
        if (opt->count() > 0) continue;
        try {
          opt->add_result(value);
          opt->run_callback();
        } catch (const CLI::ParseError& e) {
          throw ParameterError("config key '" + key + "': " + e.what());
        }
      }
    }

    if (leaf == gen) {
      write_image_set(gen_out, generate_synthetic_corpus(gen_seed, gen_n, gen_classes, gen_size));
      out << "wrote " << gen_n << " images to " << gen_out << '\n';
      return 0;
    }

    if (leaf == embed) {
      const auto images = read_image_set(embed_images);
      embed_vit.image_size = detail::square_image_size(images);
      embed_vit.heads = 1;
      embed_vit.validate();
      const auto emb = init_embedder<float>(embed_vit, embed_seed);
      const auto bundle = make_bundle(embed_id, images, emb, embed_vit, permutation_seed(embed_seed), !no_permute);
      const auto bytes = write_bundle(bundle, embed_out);
      out << "wrote " << images.size() << " images (" << bytes << " bytes) to " << embed_out << '\n';
      return 0;
    }

    if (leaf == strain) {
      const auto cfg = sflags.config();
      FeatureStore store;
      for (const auto& p : bundle_paths) store.ingest_file(p);
      store.freeze();
      auto vit = sflags.vit;
      vit.dim = store.dim();
      vit.image_size = detail::image_size_for(store.tokens(), vit.patch_size);
      vit.validate();
      const auto r = train(store, vit, cfg, init_seed(cfg.seed), [&](const EpochMetrics& e) {
        out << "epoch " << e.epoch << " loss " << e.mean_loss << " teacher_entropy " << e.teacher_entropy
            << (e.collapsed ? " COLLAPSED" : "") << '\n';
      });
      write_train_checkpoints(train_out, r, vit);
      if (!train_metrics.empty()) write_metrics_csv(train_metrics, r.metrics);
      out << "received " << store.bytes_received() << " bytes from " << store.bundles().size() << " clients\n";
      if (r.any_collapse()) err << "warning: teacher collapse detected\n";
      return 0;
    }

    if (leaf == ftrain) {
      const auto cfg = fflags.config();
      std::vector<ClientData> clients;
      for (const auto& dir : client_dirs)
        clients.push_back({std::filesystem::path(dir).filename().string(), read_image_set(dir)});
      auto vit = fflags.vit;
      vit.image_size = detail::square_image_size(clients.front().images);
      vit.validate();
      if (steps_opt->count() > 0) flcfg.local_steps = local_steps;
      const auto r = fl_train(clients, vit, cfg, flcfg, init_seed(cfg.seed));
      for (const auto& w : r.warnings) err << "warning: " << w << '\n';
      // the per-client centers stay on the clients
      const Tensor<float> center({vit.head_out_dim});
      io::write_checkpoint(fl_out + ".student.msdc", make_checkpoint(r.student, center, vit));
      io::write_checkpoint(fl_out + ".teacher.msdc", make_checkpoint(r.teacher, center, vit));
      if (!fl_comm.empty()) write_comm_log(fl_comm, r.comm_log);
      if (!fl_metrics.empty()) write_metrics_csv(fl_metrics, r.metrics);
      out << "comm bytes per client link " << r.comm_total_bytes() << '\n';
      return 0;
    }

    if (leaf == attack) {
      if (decoder == "identity")
        acfg.decoder = DecoderKind::identity;
      else if (decoder != "conv")
        throw ParameterError("decoder must be conv or identity, got '" + decoder + "'");
      if (!originals.empty() && originals.size() != attack_bundles.size())
        throw ParameterError("--originals needs one image set per bundle");
      const auto pub = read_image_set(public_dir);
      std::vector<FeatureBundle> bundles;
      for (const auto& p : attack_bundles) bundles.push_back(read_bundle(p));
      ViTConfig vit;
      vit.patch_size = attack_patch;
      vit.image_size = detail::square_image_size(pub);
      vit.dim = bundles.front().dim;
      vit.heads = 1;
      vit.validate();
      const auto r = attack_train(pub, bundles, vit, acfg);
      std::filesystem::create_directories(attack_out);
      nlohmann::json summary = nlohmann::json::array();
      for (std::size_t b = 0; b < bundles.size(); ++b) {
        const auto rec = reconstruct(r.models, bundles[b]);
        const std::string stem = bundles[b].client_id;
        write_reconstructions(std::filesystem::path(attack_out) / (stem + ".recon.msdt"), rec);
        nlohmann::json row{{"client_id", stem}, {"images", rec.size()}, {"permuted", bundles[b].permuted}};
        if (!originals.empty()) {
          const auto orig = read_image_set(originals[b]);
          std::vector<Tensor<float>> targets;
          for (const auto& im : orig) targets.push_back(im.pixels);
          const auto scores = score_reconstructions(rec, targets);
          write_attack_metrics(std::filesystem::path(attack_out) / (stem + ".metrics.csv"), scores);
          const auto [m, s] = mean_mse_ssim(scores);
          row["mean_mse"] = m;
          row["mean_ssim"] = s;
        }
        summary.push_back(row);
      }
      out << summary.dump() << '\n';
      return 0;
    }

    if (leaf == ft) {
      fcfg.mode = parse_finetune_mode(ft_mode);
      const auto ckpt = io::read_checkpoint(ft_ckpt);
      const auto vit = config_from(ckpt);
      auto images = read_image_set(ft_images);
      if (!ft_labels.empty()) {
        const auto labels = read_labels(ft_labels, images.size());
        for (std::size_t i = 0; i < images.size(); ++i) images[i].label = labels[i];
      }
      detail::require_labels(images, "finetune");
      const auto encoder = encoder_from_checkpoint(ckpt, init_embedder<float>(vit, embed_seed_ft));
      const auto r = finetune(encoder, vit, images, fcfg);
      auto test = ft_test.empty() ? images : read_image_set(ft_test);
      detail::require_labels(test, "evaluate");
      const auto res = evaluate(r.model, test, ft_metric, alpha, draws, eval_seed);
      if (!ft_out.empty()) write_results_json(ft_out, res);
      out << res.to_json().dump() << '\n';
      return 0;
    }

    if (leaf == cost) {
      cin.unit = parse_cost_unit(unit);
      if (p_fl >= 0) cin.P_fl = p_fl;
      if (cin.r == 0) throw ParameterError("--r must be >= 1");
      const auto rep = cost_report(cin);
      nlohmann::json j{{"t_fl", rep.t_fl}, {"t_msdino", rep.t_msdino}};
      j["ratio"] = rep.ratio ? nlohmann::json(*rep.ratio) : nlohmann::json(nullptr);
      j["break_even_rounds"] = rep.break_even_rounds ? nlohmann::json(*rep.break_even_rounds) : nlohmann::json(nullptr);
      out << j.dump() << '\n';
      return 0;
    }

    if (leaf == gc) {
      Stencil st;
      if (gc_stencil == "central")
        st = Stencil::central;
      else if (gc_stencil == "five-point")
        st = Stencil::five_point;
      else
        throw ParameterError("stencil must be central or five-point, got '" + gc_stencil + "'");
      const auto v = verify_distillation_gradients(gc_seed, gc_h, st);
      const bool pass = v.report.max_rel_error < gc_tol;
      nlohmann::json j{{"max_rel_error", v.report.max_rel_error}, {"worst_param", v.report.worst_param},
                       {"coordinates", v.report.coordinates},  {"h", gc_h},
                       {"stencil", gc_stencil},                {"loss", v.loss},
                       {"tolerance", gc_tol},                  {"pass", pass}};
      out << j.dump() << '\n';
      if (!pass) {
        err << "error: gradcheck: max relative error " << v.report.max_rel_error << " >= " << gc_tol << '\n';
        return kExitCheckFailed;
      }
      return 0;
    }
    return fail("usage", "no subcommand selected");
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
}

}  // namespace msdino::cli
