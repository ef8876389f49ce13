#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdrop/errors.hpp"
#include "sdrop/network.hpp"

namespace sdrop {

/// How one Linear layer is cut down: keep `rows` of W (and b) and `cols` of
/// W, then multiply the kept block by `scale`.
struct LinearSlice {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> cols;
  double scale = 1.0;
  bool bias = true;

  std::size_t parameter_count() const noexcept {
    return rows.size() * cols.size() + (bias ? rows.size() : 0);
  }
};

/// Shape-level pruning recipe. Computed from the spec alone, so parameter
/// and cost accounting do not need weights.
struct PrunePlan {
  ModelSpec spec;                  // the pruned, dropout-free spec
  std::vector<LinearSlice> linears;
  std::vector<std::size_t> widths;  // per dropout layer of the source spec
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

inline bool is_prefix(std::span<const std::size_t> live) {
  for (std::size_t i = 0; i < live.size(); ++i)
    if (live[i] != i) return false;
  return true;
}

}  // namespace detail

/// Builds the slicing plan for explicit per-dropout-layer widths `ks`
/// (each in [1, N]; range against the lower bound is the caller's concern).
///
/// Each dropout layer at width k must be fed by `Linear -> [activation]*`
/// with positively homogeneous activations: that Linear keeps its first k
/// output rows and absorbs N/k; the consumer keeps the matching columns.
/// Interleaved merges keep index j*n + t for every live row j of branch t.
inline PrunePlan plan_prune_exact(const ModelSpec& spec, std::span<const std::size_t> ks) {
  const SpecShape shape = validate(spec);
  if (ks.size() != shape.sd_count()) {
    throw DomainError("prune: " + std::to_string(ks.size()) + " widths for " +
                      std::to_string(shape.sd_count()) + " dropout layers");
  }
  const auto& layers = spec.layers;

  if (shape.sd_count() == 0) {
    // Nothing to cut; merges in an already-pruned spec may be ragged, so the
    // index bookkeeping below does not apply.
    PrunePlan plan{spec, {}, {}, {}};
    plan.spec.pruned = true;
    for (std::size_t li : shape.linear_layers) {
      const auto& l = std::get<LinearSpec>(layers[li]);
      plan.linears.push_back({detail::iota_n(l.out), detail::iota_n(l.in), 1.0, l.bias});
    }
    return plan;
  }

  // Producer Linear (by ordinal) feeding each dropout layer.
  std::map<std::size_t, std::size_t> producer_of_sd;   // sd ordinal -> linear ordinal
  std::map<std::size_t, std::size_t> sd_of_producer;   // linear ordinal -> sd ordinal
  {
    std::size_t linear_ordinal = 0;
    for (std::size_t li = 0; li < layers.size(); ++li) {
      if (!std::holds_alternative<LinearSpec>(layers[li])) continue;
      for (std::size_t q = li + 1; q < layers.size(); ++q) {
        if (const auto* a = std::get_if<ActivationSpec>(&layers[q])) {
          if (!a->positively_homogeneous()) break;
          continue;
        }
        if (std::holds_alternative<DropoutSpec>(layers[q])) {
          const auto it = std::find(shape.sd_layers.begin(), shape.sd_layers.end(), q);
          const auto sd = static_cast<std::size_t>(it - shape.sd_layers.begin());
          producer_of_sd[sd] = linear_ordinal;
          sd_of_producer[linear_ordinal] = sd;
        }
        break;
      }
      ++linear_ordinal;
    }
  }

  PrunePlan plan;
  plan.spec = ModelSpec{spec.name, spec.input_width, spec.output_width, {}, true};
  plan.widths.assign(ks.begin(), ks.end());

  struct Stream {
    std::vector<std::size_t> live;  // source indices still present, ascending
    std::size_t full = 0;           // width in the source network
  };
  Stream h{detail::iota_n(spec.input_width), spec.input_width};
  std::map<std::string, Stream> saved;
  std::size_t linear_ordinal = 0, sd_ordinal = 0;

  for (std::size_t li = 0; li < layers.size(); ++li) {
    const std::string where = "prune: layer " + std::to_string(li) + ": ";
    std::visit(
        overloaded{
            [&](const LinearSpec& l) {
              LinearSlice slice;
              slice.cols = h.live;
              slice.bias = l.bias;
              if (auto it = sd_of_producer.find(linear_ordinal); it != sd_of_producer.end()) {
                const std::size_t k = ks[it->second];
                if (k < 1 || k > l.out)
                  throw DomainError(where + "width " + std::to_string(k) + " outside [1, " +
                                    std::to_string(l.out) + "]");
                slice.rows = detail::iota_n(k);
                slice.scale = k == l.out ? 1.0 : normalization(l.out, k);
              } else {
                slice.rows = detail::iota_n(l.out);
              }
              plan.spec.layers.emplace_back(LinearSpec{slice.cols.size(), slice.rows.size(), l.bias});
              h = Stream{slice.rows, l.out};
              plan.linears.push_back(std::move(slice));
              ++linear_ordinal;
            },
            [&](const ActivationSpec& a) { plan.spec.layers.emplace_back(a); },
            [&](const DropoutSpec& d) {
              if (!producer_of_sd.contains(sd_ordinal)) {
                throw PruneError(where + "structural dropout is not fed by a Linear followed only by "
                                         "positively homogeneous activations; cannot fold its scale");
              }
              if (h.live.size() != ks[sd_ordinal] || !detail::is_prefix(h.live) || h.full != d.cfg.width)
                throw PruneError(where + "inconsistent live prefix at structural dropout");
              ++sd_ordinal;
            },
            [&](const SkipSourceSpec& s) {
              saved[s.tag] = h;
              plan.spec.layers.emplace_back(s);
            },
            [&](const SkipMergeSpec& m) {
              std::vector<const Stream*> branches{&h};
              for (const auto& tag : m.tags) branches.push_back(&saved.at(tag));
              const std::size_t n = branches.size();
              std::size_t longest = 0, full = 0;
              for (const Stream* b : branches) {
                if (!detail::is_prefix(b->live)) {
                  throw PruneError(where + "skip merge of a branch whose live features are not a "
                                           "prefix; nested merges of pruned branches are not supported");
                }
                longest = std::max(longest, b->live.size());
                full += b->full;
              }
              Stream merged;
              merged.full = full;
              for (std::size_t j = 0; j < longest; ++j)
                for (std::size_t t = 0; t < n; ++t)
                  if (j < branches[t]->live.size()) merged.live.push_back(j * n + t);
              h = std::move(merged);
              plan.spec.layers.emplace_back(m);
            },
        },
        layers[li]);
  }
  if (h.live.size() != spec.output_width) {
    throw PruneError("prune: a structural dropout reaches the output without a consuming Linear");
  }
  validate(plan.spec);
  return plan;
}

/// Plan for user-facing widths: checks lb <= k <= N and collects
/// non-admissible-width warnings.
inline PrunePlan plan_prune(const ModelSpec& spec, const PruneWidth& widths) {
  ResolvedWidths resolved = resolve_widths(spec, widths);
  PrunePlan plan = plan_prune_exact(spec, resolved.k);
  plan.warnings = std::move(resolved.warnings);
  return plan;
}

/// Cuts `params` per `plan`, folding each scale into the kept rows.
inline ParameterSet slice_parameters(const ParameterSet& params, const PrunePlan& plan) {
  ParameterSet out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = params[i];
    const auto& s = plan.linears[i];
    LinearParams p;
    p.weight = Tensor(s.rows.size(), s.cols.size());
    for (std::size_t r = 0; r < s.rows.size(); ++r) {
      const double* in = src.weight.data() + s.rows[r] * src.weight.cols();
      double* dst = p.weight.data() + r * s.cols.size();
      for (std::size_t c = 0; c < s.cols.size(); ++c) dst[c] = s.scale * in[s.cols[c]];
    }
    if (src.has_bias()) {
      p.bias = Tensor(s.rows.size(), 1);
      for (std::size_t r = 0; r < s.rows.size(); ++r) p.bias(r, 0) = s.scale * src.bias(s.rows[r], 0);
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// A physically smaller, dropout-free network equal to the source network's
/// inference transform at the chosen widths.
struct PrunedNetwork {
  Network network;
  std::vector<std::size_t> widths;
  std::vector<std::string> warnings;
};

inline PrunedNetwork prune(const Network& net, const PruneWidth& widths = {}) {
  PrunePlan plan = plan_prune(net.spec, widths);
  PrunedNetwork out{Network{plan.spec, slice_parameters(net.params, plan)}, plan.widths,
                    std::move(plan.warnings)};
  return out;
}

/// Weights plus biases of the pruned network.
inline std::size_t param_count(const ModelSpec& spec, const PruneWidth& widths = {}) {
  const PrunePlan plan = plan_prune(spec, widths);
  std::size_t n = 0;
  for (const auto& s : plan.linears) n += s.parameter_count();
  return n;
}

/// Multiply-accumulates of one single-sample forward pass of the pruned
/// network (Linear layers only).
inline std::size_t flop_estimate(const ModelSpec& spec, const PruneWidth& widths = {}) {
  const PrunePlan plan = plan_prune(spec, widths);
  std::size_t macs = 0;
  for (const auto& s : plan.linears) macs += s.rows.size() * s.cols.size();
  return macs;
}

}  // namespace sdrop
