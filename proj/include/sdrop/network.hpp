#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "json.hpp"
#include "sdrop/errors.hpp"
#include "sdrop/structural_dropout.hpp"
#include "sdrop/tape.hpp"
#include "sdrop/tensor.hpp"

namespace sdrop {

struct LinearSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = true;
  friend bool operator==(const LinearSpec&, const LinearSpec&) = default;
};

enum class ActivationKind { relu, leaky_relu };

struct ActivationSpec {
  ActivationKind kind = ActivationKind::relu;
  double slope = 0.01;  // leaky_relu only

  /// act(c * z) == c * act(z) for every c > 0. Scale folding relies on it.
  bool positively_homogeneous() const noexcept {
    return kind == ActivationKind::relu || kind == ActivationKind::leaky_relu;
  }
  /// `slope` only matters for leaky_relu.
  friend bool operator==(const ActivationSpec& a, const ActivationSpec& b) {
    return a.kind == b.kind && (a.kind == ActivationKind::relu || a.slope == b.slope);
  }
};

struct DropoutSpec {
  SDConfig cfg;
  friend bool operator==(const DropoutSpec&, const DropoutSpec&) = default;
};

/// Records the current stream under `tag`; the stream passes through.
struct SkipSourceSpec {
  std::string tag;
  friend bool operator==(const SkipSourceSpec&, const SkipSourceSpec&) = default;
};

/// Replaces the stream with the interleave of [stream, saved(tags)...].
/// Interleaving keeps trailing-zero blocks trailing, which concatenation
/// would not.
struct SkipMergeSpec {
  std::vector<std::string> tags;
  std::size_t arity() const noexcept { return tags.size() + 1; }
  friend bool operator==(const SkipMergeSpec&, const SkipMergeSpec&) = default;
};

using LayerSpec = std::variant<LinearSpec, ActivationSpec, DropoutSpec, SkipSourceSpec, SkipMergeSpec>;

struct ModelSpec {
  std::string name = "model";
  std::size_t input_width = 0;
  std::size_t output_width = 0;
  std::vector<LayerSpec> layers;
  // Set on networks produced by pruning: they contain no dropout layers and
  // their merges may interleave branches of different widths.
  bool pruned = false;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

/// Derived facts about a validated spec.
struct SpecShape {
  std::vector<std::size_t> width_after;    // stream width after each layer
  std::vector<std::size_t> linear_layers;  // layer index of each Linear, in order
  std::vector<std::size_t> sd_layers;      // layer index of each dropout, in order

  std::size_t sd_count() const noexcept { return sd_layers.size(); }
};

/// Checks every chaining rule. A spec that passes never raises a shape
/// error in forward passes.
inline SpecShape validate(const ModelSpec& spec) {
  if (spec.input_width == 0) throw ConfigError("model spec: input width must be positive");
  if (spec.output_width == 0) throw ConfigError("model spec: output width must be positive");
  SpecShape shape;
  std::map<std::string, std::size_t> saved;
  std::size_t width = spec.input_width;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const std::string where = "model spec layer " + std::to_string(li) + ": ";
    std::visit(overloaded{
                   [&](const LinearSpec& l) {
                     if (l.in != width) {
                       throw ConfigError(where + "linear expects " + std::to_string(l.in) +
                                         " inputs but the stream has " + std::to_string(width));
                     }
                     if (l.out == 0) throw ConfigError(where + "linear output width is zero");
                     width = l.out;
                     shape.linear_layers.push_back(li);
                   },
                   [&](const ActivationSpec& a) {
                     if (a.kind == ActivationKind::leaky_relu && !std::isfinite(a.slope))
                       throw ConfigError(where + "leaky_relu slope must be finite");
                   },
                   [&](const DropoutSpec& d) {
                     if (spec.pruned) throw ConfigError(where + "pruned models cannot contain dropout");
                     try {
                       d.cfg.validate();
                     } catch (const ConfigError& e) {
                       throw ConfigError(where + e.what());
                     }
                     if (d.cfg.width != width) {
                       throw ConfigError(where + "structural dropout width " +
                                         std::to_string(d.cfg.width) + " but the stream has " +
                                         std::to_string(width));
                     }
                     shape.sd_layers.push_back(li);
                   },
                   [&](const SkipSourceSpec& s) {
                     if (s.tag.empty()) throw ConfigError(where + "skip source needs a tag");
                     if (!saved.emplace(s.tag, width).second)
                       throw ConfigError(where + "duplicate skip tag '" + s.tag + "'");
                   },
                   [&](const SkipMergeSpec& m) {
                     if (m.tags.empty()) throw ConfigError(where + "skip merge needs at least one tag");
                     std::size_t merged = width;
                     for (const auto& tag : m.tags) {
                       auto it = saved.find(tag);
                       if (it == saved.end())
                         throw ConfigError(where + "skip merge references unknown tag '" + tag + "'");
                       if (!spec.pruned && it->second != width) {
                         throw ConfigError(where + "skip merge of width " + std::to_string(it->second) +
                                           " into stream of width " + std::to_string(width));
                       }
                       merged += it->second;
                     }
                     width = merged;
                   },
               },
               spec.layers[li]);
    shape.width_after.push_back(width);
  }
  if (width != spec.output_width) {
    throw ConfigError("model spec: final width " + std::to_string(width) +
                      " does not match output width " + std::to_string(spec.output_width));
  }
  return shape;
}

inline std::vector<SDConfig> dropout_configs(const ModelSpec& spec) {
  std::vector<SDConfig> out;
  for (const auto& layer : spec.layers)
    if (const auto* d = std::get_if<DropoutSpec>(&layer)) out.push_back(d->cfg);
  return out;
}

inline bool has_dropout(const ModelSpec& spec) { return !dropout_configs(spec).empty(); }

// ---------------------------------------------------------------------------
// Presets

/// input -> [Linear -> act -> SD] per hidden width -> Linear -> output.
inline ModelSpec sd_mlp(std::string name, std::size_t input, std::vector<std::size_t> hidden,
                        std::size_t output, double p = 0.5, std::size_t lower_bound = 1,
                        std::size_t group = 1, ActivationSpec act = {}) {
  ModelSpec spec{std::move(name), input, output, {}, false};
  std::size_t width = input;
  for (std::size_t h : hidden) {
    spec.layers.emplace_back(LinearSpec{width, h, true});
    spec.layers.emplace_back(act);
    spec.layers.emplace_back(DropoutSpec{SDConfig{h, p, std::min(lower_bound, h), std::min(group, h)}});
    width = h;
  }
  spec.layers.emplace_back(LinearSpec{width, output, true});
  validate(spec);
  return spec;
}

/// 784 -> 256 -> 256 -> 10 with structural dropout after both hidden ReLUs.
inline ModelSpec mnist_preset(double p = 0.5) {
  return sd_mlp("mnist", 784, {256, 256}, 10, p);
}

/// Two hidden layers as wide as the input, binary output.
inline ModelSpec synth_preset(std::size_t input = 64, double p = 0.5) {
  return sd_mlp("synth", input, {input, input}, 2, p);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const ModelSpec& spec) {
  using nlohmann::json;
  json layers = json::array();
  for (const auto& layer : spec.layers) {
    layers.push_back(std::visit(
        overloaded{
            [](const LinearSpec& l) {
              return json{{"type", "linear"}, {"in", l.in}, {"out", l.out}, {"bias", l.bias}};
            },
            [](const ActivationSpec& a) {
              if (a.kind == ActivationKind::relu) return json{{"type", "relu"}};
              return json{{"type", "leaky_relu"}, {"slope", a.slope}};
            },
            [](const DropoutSpec& d) {
              return json{{"type", "structural_dropout"},
                          {"width", d.cfg.width},
                          {"p", d.cfg.p},
                          {"lower_bound", d.cfg.lower_bound},
                          {"group", d.cfg.group}};
            },
            [](const SkipSourceSpec& s) { return json{{"type", "skip_source"}, {"tag", s.tag}}; },
            [](const SkipMergeSpec& m) {
              return json{{"type", "skip_merge"}, {"tags", m.tags}, {"mode", "interleave"}};
            },
        },
        layer));
  }
  return json{{"name", spec.name},
              {"input_width", spec.input_width},
              {"output_width", spec.output_width},
              {"pruned", spec.pruned},
              {"sd_free", !has_dropout(spec)},
              {"layers", std::move(layers)}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  try {
    ModelSpec spec;
    spec.name = j.value("name", std::string("model"));
    spec.input_width = j.at("input_width").get<std::size_t>();
    spec.output_width = j.at("output_width").get<std::size_t>();
    spec.pruned = j.value("pruned", false);
    for (const auto& l : j.at("layers")) {
      const auto type = l.at("type").get<std::string>();
      if (type == "linear") {
        spec.layers.emplace_back(LinearSpec{l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>(),
                                            l.value("bias", true)});
      } else if (type == "relu") {
        spec.layers.emplace_back(ActivationSpec{ActivationKind::relu, 0.0});
      } else if (type == "leaky_relu") {
        spec.layers.emplace_back(ActivationSpec{ActivationKind::leaky_relu, l.value("slope", 0.01)});
      } else if (type == "structural_dropout") {
        spec.layers.emplace_back(DropoutSpec{SDConfig{l.at("width").get<std::size_t>(), l.value("p", 0.5),
                                                      l.value("lower_bound", std::size_t{1}),
                                                      l.value("group", std::size_t{1})}});
      } else if (type == "skip_source") {
        spec.layers.emplace_back(SkipSourceSpec{l.at("tag").get<std::string>()});
      } else if (type == "skip_merge") {
        if (l.value("mode", std::string("interleave")) != "interleave")
          throw ConfigError("model spec: skip_merge mode must be 'interleave'");
        spec.layers.emplace_back(SkipMergeSpec{l.at("tags").get<std::vector<std::string>>()});
      } else {
        throw ConfigError("model spec: unknown layer type '" + type + "'");
      }
    }
    validate(spec);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model spec JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Parameters

struct LinearParams {
  Tensor weight;  // out x in
  Tensor bias;    // out x 1, empty when the layer has no bias

  bool has_bias() const noexcept { return !bias.empty(); }
  std::size_t count() const noexcept { return weight.size() + bias.size(); }
  friend bool operator==(const LinearParams&, const LinearParams&) = default;
};

/// One entry per Linear layer, in spec order. Also used for gradients.
using ParameterSet = std::vector<LinearParams>;

inline ParameterSet zeros_like(const ParameterSet& params) {
  ParameterSet out;
  out.reserve(params.size());
  for (const auto& p : params) {
    out.push_back({Tensor(p.weight.rows(), p.weight.cols()),
                   p.has_bias() ? Tensor(p.bias.rows(), 1) : Tensor()});
  }
  return out;
}

struct Network {
  ModelSpec spec;
  ParameterSet params;

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params) n += p.count();
    return n;
  }

  /// Checks that the spec is valid and parameter shapes match it.
  void validate() const {
    const SpecShape shape = sdrop::validate(spec);
    if (shape.linear_layers.size() != params.size())
      throw ShapeError("network: parameter count does not match linear layers");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& l = std::get<LinearSpec>(spec.layers[shape.linear_layers[i]]);
      const auto& p = params[i];
      if (p.weight.rows() != l.out || p.weight.cols() != l.in)
        throw ShapeError("network: weight " + std::to_string(i) + " is " + p.weight.shape_string());
      if (l.bias != p.has_bias() || (l.bias && (p.bias.rows() != l.out || p.bias.cols() != 1)))
        throw ShapeError("network: bias " + std::to_string(i) + " does not match its layer");
    }
  }

  friend bool operator==(const Network&, const Network&) = default;
};

/// Fan-in uniform initialization: W ~ U(-s, s), s = sqrt(1 / in); zero bias.
template <class Rng>
Network init(const ModelSpec& spec, Rng& rng) {
  validate(spec);
  Network net{spec, {}};
  for (const auto& layer : spec.layers) {
    const auto* l = std::get_if<LinearSpec>(&layer);
    if (!l) continue;
    const double s = std::sqrt(1.0 / static_cast<double>(l->in));
    std::uniform_real_distribution<double> dist(-s, s);
    LinearParams p{Tensor(l->out, l->in), l->bias ? Tensor(l->out, 1) : Tensor()};
    for (double& w : p.weight.values()) w = dist(rng);
    net.params.push_back(std::move(p));
  }
  return net;
}

// ---------------------------------------------------------------------------
// Widths

/// Evaluation / pruning width for each dropout layer: one shared k, an
/// explicit per-layer list, or full width everywhere.
struct PruneWidth {
  std::optional<std::size_t> shared;
  std::vector<std::size_t> per_layer;

  static PruneWidth full() { return {}; }
  static PruneWidth all(std::size_t k) { return {k, {}}; }
  static PruneWidth each(std::vector<std::size_t> ks) { return {std::nullopt, std::move(ks)}; }
};

struct ResolvedWidths {
  std::vector<std::size_t> k;  // one per dropout layer
  std::vector<std::string> warnings;
};

/// Expands `w` to one width per dropout layer and checks lb <= k <= N.
/// Widths that are not admissible cutoffs of a coarse layer are allowed but
/// reported in `warnings`.
inline ResolvedWidths resolve_widths(const ModelSpec& spec, const PruneWidth& w) {
  const auto cfgs = dropout_configs(spec);
  ResolvedWidths out;
  if (cfgs.empty() && (w.shared || !w.per_layer.empty()))
    throw DomainError("model '" + spec.name + "' has no structural dropout layers to set a width on");
  if (w.shared) {
    out.k.assign(cfgs.size(), *w.shared);
  } else if (!w.per_layer.empty()) {
    if (w.per_layer.size() != cfgs.size()) {
      throw DomainError("expected " + std::to_string(cfgs.size()) + " per-layer widths, got " +
                        std::to_string(w.per_layer.size()));
    }
    out.k = w.per_layer;
  } else {
    for (const auto& c : cfgs) out.k.push_back(c.width);
  }
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    const auto& c = cfgs[i];
    if (out.k[i] < c.lower_bound || out.k[i] > c.width) {
      throw DomainError("width " + std::to_string(out.k[i]) + " outside [" +
                        std::to_string(c.lower_bound) + ", " + std::to_string(c.width) +
                        "] for dropout layer " + std::to_string(i));
    }
    if (!is_admissible(c, out.k[i])) {
      out.warnings.push_back("width " + std::to_string(out.k[i]) +
                             " is not an admissible cutoff of dropout layer " + std::to_string(i) +
                             " (group " + std::to_string(c.group) + ")");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace detail {

inline void check_input(const ModelSpec& spec, const Tensor& x) {
  if (x.rows() != spec.input_width) {
    throw ShapeError("network '" + spec.name + "' expects " + std::to_string(spec.input_width) +
                     " input features, got " + x.shape_string());
  }
}

inline Tensor activate(const ActivationSpec& a, const Tensor& x) {
  return a.kind == ActivationKind::relu ? relu(x) : leaky_relu(x, a.slope);
}

inline Var activate(Tape& tape, const ActivationSpec& a, Var x) {
  return a.kind == ActivationKind::relu ? tape.relu(x) : tape.leaky_relu(x, a.slope);
}

}  // namespace detail

/// Deterministic evaluation with every dropout layer at its width from
/// `widths` (inference transform). Pure function of (params, x, widths).
inline Tensor forward_eval(const Network& net, const Tensor& x, const PruneWidth& widths = {}) {
  detail::check_input(net.spec, x);
  const auto ks = resolve_widths(net.spec, widths).k;
  std::map<std::string, Tensor> saved;
  Tensor h = x;
  std::size_t li = 0, si = 0;
  for (const auto& layer : net.spec.layers) {
    std::visit(overloaded{
                   [&](const LinearSpec&) {
                     const auto& p = net.params[li++];
                     h = matmul(p.weight, h);
                     if (p.has_bias()) h = add_bias(h, p.bias);
                   },
                   [&](const ActivationSpec& a) { h = detail::activate(a, h); },
                   [&](const DropoutSpec& d) { h = apply_test(h, ks[si++], d.cfg.width); },
                   [&](const SkipSourceSpec& s) { saved[s.tag] = h; },
                   [&](const SkipMergeSpec& m) {
                     std::vector<Tensor> parts{h};
                     for (const auto& tag : m.tags) parts.push_back(saved.at(tag));
                     h = interleave_ragged(parts);
                   },
               },
               layer);
  }
  return h;
}

/// Parameters of one Linear as tape leaves.
struct LinearVars {
  Var weight;
  std::optional<Var> bias;
};

inline std::vector<LinearVars> bind_parameters(Tape& tape, const ParameterSet& params) {
  std::vector<LinearVars> vars;
  vars.reserve(params.size());
  for (const auto& p : params) {
    LinearVars v{tape.parameter(p.weight), std::nullopt};
    if (p.has_bias()) v.bias = tape.parameter(p.bias);
    vars.push_back(v);
  }
  return vars;
}

/// Records a forward pass with each dropout layer applying the training
/// transform for its fixed decision.
inline Var forward_record(Tape& tape, const ModelSpec& spec, std::span<const LinearVars> params,
                          Var x, std::span<const SDDecision> decisions) {
  detail::check_input(spec, tape.value(x));
  std::map<std::string, Var> saved;
  Var h = x;
  std::size_t li = 0, si = 0;
  for (const auto& layer : spec.layers) {
    std::visit(overloaded{
                   [&](const LinearSpec&) {
                     const auto& p = params[li++];
                     h = tape.matmul(p.weight, h);
                     if (p.bias) h = tape.add_bias(h, *p.bias);
                   },
                   [&](const ActivationSpec& a) { h = detail::activate(tape, a, h); },
                   [&](const DropoutSpec& d) {
                     if (si >= decisions.size()) throw ShapeError("forward: missing dropout decision");
                     h = apply_train(tape, h, decisions[si++], d.cfg);
                   },
                   [&](const SkipSourceSpec& s) { saved[s.tag] = h; },
                   [&](const SkipMergeSpec& m) {
                     std::vector<Var> parts{h};
                     for (const auto& tag : m.tags) parts.push_back(saved.at(tag));
                     h = tape.interleave(parts);
                   },
               },
               layer);
  }
  return h;
}

struct TrainForward {
  Tape tape;
  Var logits;
  std::vector<LinearVars> params;
  std::vector<SDDecision> decisions;
};

/// Training-mode forward with caller-supplied decisions (one per dropout layer).
inline TrainForward forward_with_decisions(const Network& net, const Tensor& x,
                                           std::vector<SDDecision> decisions) {
  if (decisions.size() != dropout_configs(net.spec).size()) {
    throw ShapeError("forward: " + std::to_string(decisions.size()) + " decisions for " +
                     std::to_string(dropout_configs(net.spec).size()) + " dropout layers");
  }
  TrainForward fw;
  fw.params = bind_parameters(fw.tape, net.params);
  const Var input = fw.tape.constant(x);
  fw.decisions = std::move(decisions);
  fw.logits = forward_record(fw.tape, net.spec, fw.params, input, fw.decisions);
  return fw;
}

template <class Rng>
std::vector<SDDecision> sample_decisions(const ModelSpec& spec, Rng& rng) {
  std::vector<SDDecision> out;
  for (const auto& cfg : dropout_configs(spec)) out.push_back(sample_decision(cfg, rng));
  return out;
}

/// Training-mode forward: every dropout layer samples its own decision.
template <class Rng>
TrainForward forward_train(const Network& net, const Tensor& x, Rng& rng) {
  return forward_with_decisions(net, x, sample_decisions(net.spec, rng));
}

/// Gradients of the recorded leaves, in ParameterSet layout.
inline ParameterSet collect_gradients(Tape& tape, std::span<const LinearVars> vars) {
  ParameterSet grads;
  grads.reserve(vars.size());
  for (const auto& v : vars) {
    grads.push_back({tape.grad(v.weight), v.bias ? tape.grad(*v.bias) : Tensor()});
  }
  return grads;
}

}  // namespace sdrop
