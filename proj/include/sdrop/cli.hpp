#pragma once

// `sdrop` command line: train once, sweep widths, prune to a width, evaluate.
// Exit codes: 0 success, 2 configuration / IO errors, 3 width or policy
// errors.

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sdrop/checkpoint.hpp"
#include "sdrop/data.hpp"
#include "sdrop/errors.hpp"
#include "sdrop/evaluate.hpp"
#include "sdrop/network.hpp"
#include "sdrop/prune.hpp"
#include "sdrop/sweep.hpp"
#include "sdrop/train.hpp"

namespace sdrop::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDomain = 3;

/// Where data for train/sweep/eval comes from.
struct DataOptions {
  std::string dataset = "auto";  // mnist | synth | auto (by model input width)
  std::string data_dir;
  std::uint64_t data_seed = 2024;
  std::size_t informative = 8;
  std::size_t val_size = 5000;
};

inline std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

// Synthetic task sizes used by the CLI and the test suites.
inline constexpr std::size_t kSynthTrain = 6000;
inline constexpr std::size_t kSynthVal = 2000;
inline constexpr std::size_t kSynthTest = 4000;

inline Splits load_splits(const DataOptions& opt, const ModelSpec& spec) {
  std::string which = opt.dataset;
  if (which == "auto") which = spec.input_width == 784 ? "mnist" : "synth";
  if (which == "mnist") {
    const std::filesystem::path dir = opt.data_dir;
    for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                          "t10k-labels-idx1-ubyte"}) {
      if (!std::filesystem::exists(dir / f))
        throw IoError("MNIST file not found: '" + (dir / f).string() + "' (set --data-dir or SDROP_MNIST_DIR)");
    }
    return mnist_splits(dir, opt.val_size);
  }
  if (which == "synth") {
    return synth_splits(opt.data_seed, spec.input_width, opt.informative, kSynthTrain, kSynthVal, kSynthTest);
  }
  throw ConfigError("unknown dataset '" + opt.dataset + "' (expected mnist, synth or auto)");
}

inline const Dataset& pick_split(const Splits& s, const std::string& split) {
  if (split == "test") return s.test;
  if (split == "val") return s.val;
  if (split == "train") return s.train;
  throw ConfigError("unknown split '" + split + "'");
}

inline void add_data_options(CLI::App* cmd, DataOptions& opt) {
  cmd->add_option("--dataset", opt.dataset, "mnist, synth, or auto (by model input width)");
  cmd->add_option("--data-dir", opt.data_dir, "directory with the MNIST IDX files")->capture_default_str();
  cmd->add_option("--data-seed", opt.data_seed, "seed of the synthetic task")->capture_default_str();
  cmd->add_option("--informative", opt.informative, "informative coordinates of the synthetic task")
      ->capture_default_str();
  cmd->add_option("--val-size", opt.val_size, "MNIST training images held out for validation")
      ->capture_default_str();
}

inline std::filesystem::path ensure_out_dir(const std::string& dir) {
  std::filesystem::path p = dir;
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

/// Entry point shared by the `sdrop` binary and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structural dropout: train nested-width MLPs, sweep widths, prune, evaluate"};
  app.require_subcommand(1);

  const std::string default_out = env_or("SDROP_OUT_DIR", ".");
  const std::string default_mnist = env_or("SDROP_MNIST_DIR", "data/mnist");

  // train
  struct {
    std::string preset = "mnist";
    std::string spec_path;
    std::optional<double> p;
    TrainConfig cfg;
    bool no_shuffle = false;
    bool no_fast_path = false;
  } tr;
  DataOptions train_data;
  train_data.data_dir = default_mnist;
  std::string train_out = default_out;
  auto* train_cmd = app.add_subcommand("train", "train a model with structural dropout");
  train_cmd->add_option("--preset", tr.preset, "mnist or synth")->capture_default_str();
  train_cmd->add_option("--spec", tr.spec_path, "model spec JSON (overrides --preset)");
  train_cmd->add_option("--p", tr.p, "dropout probability for every structural dropout layer");
  train_cmd->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", tr.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", tr.cfg.learning_rate)->capture_default_str();
  train_cmd->add_option("--seed", tr.cfg.seed, "seed for initialization, shuffling and dropout")
      ->capture_default_str();
  train_cmd->add_flag("--no-shuffle", tr.no_shuffle);
  train_cmd->add_flag("--no-fast-path", tr.no_fast_path, "propagate explicit zeros instead of slicing");
  train_cmd->add_option("--checkpoint-every", tr.cfg.checkpoint_every, "epochs between checkpoints (0: final only)");
  train_cmd->add_option("--out-dir", train_out, "output directory (default $SDROP_OUT_DIR or .)");
  add_data_options(train_cmd, train_data);

  // sweep
  std::string sweep_ckpt, sweep_policy = "best_metric", sweep_out = default_out, sweep_split = "test";
  std::size_t sweep_stride = 1;
  unsigned sweep_threads = 1;
  DataOptions sweep_data;
  sweep_data.data_dir = default_mnist;
  auto* sweep_cmd = app.add_subcommand("sweep", "evaluate every stride-th shared width");
  sweep_cmd->add_option("--checkpoint", sweep_ckpt)->required();
  sweep_cmd->add_option("--stride", sweep_stride)->capture_default_str();
  sweep_cmd->add_option("--policy", sweep_policy, "best_metric | smallest_within:<eps> | max_params:<n>")
      ->capture_default_str();
  sweep_cmd->add_option("--threads", sweep_threads)->capture_default_str();
  sweep_cmd->add_option("--split", sweep_split, "test, val or train")->capture_default_str();
  sweep_cmd->add_option("--out-dir", sweep_out);
  add_data_options(sweep_cmd, sweep_data);

  // prune
  std::string prune_ckpt, prune_out = default_out, prune_name;
  std::size_t prune_width = 0;
  auto* prune_cmd = app.add_subcommand("prune", "write a smaller dropout-free checkpoint");
  prune_cmd->add_option("--checkpoint", prune_ckpt)->required();
  prune_cmd->add_option("--width", prune_width, "shared width k")->required();
  prune_cmd->add_option("--name", prune_name, "output file name (default pruned_k<k>.sdn)");
  prune_cmd->add_option("--out-dir", prune_out);

  // eval
  std::string eval_ckpt, eval_split = "test";
  std::optional<std::size_t> eval_width;
  DataOptions eval_data;
  eval_data.data_dir = default_mnist;
  auto* eval_cmd = app.add_subcommand("eval", "accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--width", eval_width, "shared width k (checkpoints with structural dropout only)");
  eval_cmd->add_option("--split", eval_split, "test, val or train")->capture_default_str();
  add_data_options(eval_cmd, eval_data);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help (selected subcommand's help when one is given) exits 0.
    return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
  }

  auto require_file = [](const std::string& path) {
    if (!std::filesystem::is_regular_file(path)) throw IoError("checkpoint not found: '" + path + "'");
  };

  try {
    if (*train_cmd) {
      ModelSpec spec;
      if (!tr.spec_path.empty()) {
        std::ifstream in(tr.spec_path);
        if (!in) throw IoError("cannot open model spec '" + tr.spec_path + "'");
        try {
          spec = spec_from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError("model spec '" + tr.spec_path + "': " + e.what());
        }
      } else if (tr.preset == "mnist") {
        spec = mnist_preset();
      } else if (tr.preset == "synth") {
        spec = synth_preset();
      } else {
        throw ConfigError("unknown preset '" + tr.preset + "' (expected mnist or synth)");
      }
      if (tr.p) {
        for (auto& layer : spec.layers)
          if (auto* d = std::get_if<DropoutSpec>(&layer)) d->cfg.p = *tr.p;
        validate(spec);
      }
      tr.cfg.shuffle = !tr.no_shuffle;
      tr.cfg.sd_fast_path = !tr.no_fast_path;
      tr.cfg.validate();
      const Splits data = load_splits(train_data, spec);
      const auto dir = ensure_out_dir(train_out);
      tr.cfg.checkpoint_dir = dir;

      std::mt19937_64 init_rng(tr.cfg.seed);
      TrainResult result = train(init(spec, init_rng), data.train, tr.cfg, &data.val);
      save(result.network, dir / "model.sdn");
      result.log.write_csv(dir / "train_log.csv");
      const double val = result.log.epochs.back().val_accuracy.value_or(0.0);
      out << std::fixed << std::setprecision(4) << "val_accuracy=" << val << "\n";
      out << "checkpoint=" << (dir / "model.sdn").string() << "\n";
      return kExitOk;
    }

    if (*sweep_cmd) {
      require_file(sweep_ckpt);
      const Network net = load(sweep_ckpt);
      const auto policy = parse_policy(sweep_policy);
      const SweepPlan plan = make_sweep_plan(net.spec, sweep_stride);
      const Splits data = load_splits(sweep_data, net.spec);
      const auto dir = ensure_out_dir(sweep_out);
      const auto records = sweep(net, pick_split(data, sweep_split), plan, sweep_threads);
      write_report(records, dir / "sweep.csv");
      out << "evaluated_widths=" << records.size() << "\n";
      const std::size_t k = select_width(records, policy);
      for (const auto& r : records) {
        if (r.width != k) continue;
        out << "selected_width=" << r.width << " params=" << r.params << " flops=" << r.flops << std::fixed
            << std::setprecision(4) << " metric=" << r.metric << "\n";
      }
      return kExitOk;
    }

    if (*prune_cmd) {
      require_file(prune_ckpt);
      const Network net = load(prune_ckpt);
      if (!has_dropout(net.spec)) throw ConfigError("checkpoint has no structural dropout layers to prune");
      const PrunedNetwork pruned = prune(net, PruneWidth::all(prune_width));
      for (const auto& w : pruned.warnings) err << "warning: " << w << "\n";
      const auto dir = ensure_out_dir(prune_out);
      const auto path = dir / (prune_name.empty() ? "pruned_k" + std::to_string(prune_width) + ".sdn" : prune_name);
      save(pruned.network, path);
      out << "params_before=" << net.parameter_count() << "\n";
      out << "params_after=" << pruned.network.parameter_count() << "\n";
      out << "checkpoint=" << path.string() << "\n";
      return kExitOk;
    }

    if (*eval_cmd) {
      require_file(eval_ckpt);
      const Network net = load(eval_ckpt);
      if (eval_width && !has_dropout(net.spec))
        throw ConfigError("--width applies only to checkpoints with structural dropout layers");
      const Splits data = load_splits(eval_data, net.spec);
      const PruneWidth w = eval_width ? PruneWidth::all(*eval_width) : PruneWidth::full();
      const EvalResult r = evaluate(net, pick_split(data, eval_split), w);
      out << std::fixed << std::setprecision(4) << "accuracy=" << r.accuracy << "\n";
      return kExitOk;
    }
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace sdrop::cli
