#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sdrop/checkpoint.hpp"
#include "sdrop/data.hpp"
#include "sdrop/errors.hpp"
#include "sdrop/evaluate.hpp"
#include "sdrop/network.hpp"
#include "sdrop/prune.hpp"

namespace sdrop {

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 128;
  double learning_rate = 8e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;
  // Run each step on the sub-network selected by the sampled cutoffs instead
  // of propagating explicit zeros.
  bool sd_fast_path = true;
  // Write `epoch_<n>.sdn` into checkpoint_dir every this many epochs (0: never).
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("train: Adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("train: Adam epsilon must be positive");
  }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  ParameterSet first_moment;
  ParameterSet second_moment;
  std::size_t steps = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Bias-corrected Adam update of `params` in place.
inline void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& state,
                      const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw ShapeError("adam: gradient/parameter count mismatch");
  if (state.steps == 0 && state.first_moment.empty()) {
    state.first_moment = zeros_like(params);
    state.second_moment = zeros_like(params);
  }
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto update = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
    require_same_shape(p, g, "adam");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.data()[i];
      double& mi = m.data()[i];
      double& vi = v.data()[i];
      mi = cfg.beta1 * mi + (1.0 - cfg.beta1) * gi;
      vi = cfg.beta2 * vi + (1.0 - cfg.beta2) * gi * gi;
      p.data()[i] -= cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon);
    }
  };
  for (std::size_t l = 0; l < params.size(); ++l) {
    update(params[l].weight, grads[l].weight, state.first_moment[l].weight, state.second_moment[l].weight);
    if (params[l].has_bias())
      update(params[l].bias, grads[l].bias, state.first_moment[l].bias, state.second_moment[l].bias);
  }
}

// ---------------------------------------------------------------------------
// One optimization step

struct StepResult {
  double loss = 0.0;
  ParameterSet grads;
};

/// Loss and gradients with dropout applied as explicit masks on full-size
/// tensors.
inline StepResult step_dense(const Network& net, const Batch& batch,
                             std::span<const SDDecision> decisions) {
  TrainForward fw = forward_with_decisions(net, batch.inputs, {decisions.begin(), decisions.end()});
  const Var loss = fw.tape.softmax_cross_entropy(fw.logits, batch.labels);
  fw.tape.backward(loss);
  return {fw.tape.value(loss)(0, 0), collect_gradients(fw.tape, fw.params)};
}

/// Same loss and gradients as step_dense, computed on the sliced
/// sub-network: each producer keeps i rows (scale folded in), each consumer
/// i columns. Gradients of dropped rows and columns are exactly zero.
inline StepResult step_fast(const Network& net, const Batch& batch,
                            std::span<const SDDecision> decisions) {
  const auto cfgs = dropout_configs(net.spec);
  if (decisions.size() != cfgs.size()) throw ShapeError("step: one decision per dropout layer required");
  std::vector<std::size_t> ks;
  for (std::size_t i = 0; i < cfgs.size(); ++i)
    ks.push_back(decisions[i].full_pass ? cfgs[i].width : decisions[i].cutoff);
  const PrunePlan plan = plan_prune_exact(net.spec, ks);

  Tape tape;
  const auto vars = bind_parameters(tape, slice_parameters(net.params, plan));
  const Var x = tape.constant(batch.inputs);
  const Var logits = forward_record(tape, plan.spec, vars, x, {});
  const Var loss = tape.softmax_cross_entropy(logits, batch.labels);
  tape.backward(loss);

  // W' = s * W[rows, cols]  =>  dL/dW[rows, cols] = s * dL/dW'.
  StepResult out{tape.value(loss)(0, 0), zeros_like(net.params)};
  for (std::size_t l = 0; l < vars.size(); ++l) {
    const auto& s = plan.linears[l];
    const Tensor& gw = tape.grad(vars[l].weight);
    Tensor& dst = out.grads[l].weight;
    for (std::size_t r = 0; r < s.rows.size(); ++r)
      for (std::size_t c = 0; c < s.cols.size(); ++c) dst(s.rows[r], s.cols[c]) = s.scale * gw(r, c);
    if (vars[l].bias) {
      const Tensor& gb = tape.grad(*vars[l].bias);
      for (std::size_t r = 0; r < s.rows.size(); ++r) out.grads[l].bias(s.rows[r], 0) = s.scale * gb(r, 0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct RunLog {
  struct Step {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    std::vector<std::size_t> cutoffs;  // one per dropout layer; N for a full pass
  };
  struct Epoch {
    std::size_t epoch = 0;
    std::optional<double> val_accuracy;  // full width
    double seconds = 0.0;
  };
  std::vector<Step> steps;
  std::vector<Epoch> epochs;

  /// One row per step; epoch metrics are filled on each epoch's last step.
  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    const std::size_t layers = steps.empty() ? 0 : steps.front().cutoffs.size();
    out << "step,epoch,loss";
    for (std::size_t i = 0; i < layers; ++i) out << ",cutoff_" << i;
    out << ",val_accuracy,epoch_seconds\n";
    out << std::setprecision(10);
    for (std::size_t s = 0; s < steps.size(); ++s) {
      const auto& st = steps[s];
      out << st.step << ',' << st.epoch << ',' << st.loss;
      for (auto c : st.cutoffs) out << ',' << c;
      const bool last = s + 1 == steps.size() || steps[s + 1].epoch != st.epoch;
      out << ',';
      if (last && st.epoch < epochs.size()) {
        const auto& e = epochs[st.epoch];
        if (e.val_accuracy) out << *e.val_accuracy;
        out << ',' << e.seconds;
      } else {
        out << ',';
      }
      out << '\n';
    }
    if (!out) throw IoError("failed writing '" + path.string() + "'");
  }
};

struct TrainResult {
  Network network;
  RunLog log;
};

/// Mini-batch Adam on mean cross-entropy. Every step draws fresh dropout
/// decisions, one per layer shared by the whole batch. Deterministic given
/// `cfg.seed`.
inline TrainResult train(Network net, const Dataset& data, const TrainConfig& cfg,
                         const Dataset* validation = nullptr) {
  cfg.validate();
  net.validate();
  if (data.features() != net.spec.input_width) {
    throw ShapeError("train: dataset has " + std::to_string(data.features()) + " features, model expects " +
                     std::to_string(net.spec.input_width));
  }
  if (data.classes > net.spec.output_width) throw ShapeError("train: more classes than model outputs");
  if (cfg.sd_fast_path) plan_prune_exact(net.spec, resolve_widths(net.spec, {}).k);

  std::mt19937_64 rng(cfg.seed);
  AdamState adam;
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    for (const auto& indices : epoch_batches(data.size(), cfg.batch_size, cfg.shuffle, rng)) {
      const Batch batch = gather(data, indices);
      const auto decisions = sample_decisions(net.spec, rng);
      StepResult sr;
      try {
        sr = cfg.sd_fast_path ? step_fast(net, batch, decisions) : step_dense(net, batch, decisions);
      } catch (const NumericError& e) {
        throw NumericError("train: epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": " + e.what());
      }
      if (!std::isfinite(sr.loss)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step));
      }
      adam_step(net.params, sr.grads, adam, cfg);
      RunLog::Step rec{step, epoch, sr.loss, {}};
      const auto cfgs = dropout_configs(net.spec);
      for (std::size_t i = 0; i < decisions.size(); ++i)
        rec.cutoffs.push_back(decisions[i].full_pass ? cfgs[i].width : decisions[i].cutoff);
      result.log.steps.push_back(std::move(rec));
      ++step;
    }
    RunLog::Epoch ep{epoch, std::nullopt,
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()};
    if (validation) ep.val_accuracy = accuracy(net, *validation);
    result.log.epochs.push_back(ep);
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      save(net, cfg.checkpoint_dir / ("epoch_" + std::to_string(epoch + 1) + ".sdn"));
    }
  }
  result.network = std::move(net);
  return result;
}

}  // namespace sdrop
