#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "sdrop/errors.hpp"
#include "sdrop/tape.hpp"
#include "sdrop/tensor.hpp"

namespace sdrop {

/// Parameters of one structural dropout layer.
///
/// `width` is the feature count N of the layer it follows. In the dropout
/// branch (taken with probability `p`) a cutoff i is drawn uniformly from the
/// admissible set, features at index >= i are zeroed and the survivors are
/// scaled by N / i. `group` > 1 restricts cutoffs to multiples of the group
/// size (coarse dropout); `lower_bound` is the smallest admissible cutoff.
struct SDConfig {
  std::size_t width = 1;
  double p = 0.5;
  std::size_t lower_bound = 1;
  std::size_t group = 1;

  void validate() const {
    if (width < 1) throw ConfigError("structural dropout: width must be >= 1");
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ConfigError("structural dropout: p must lie in [0, 1], got " + std::to_string(p));
    }
    if (lower_bound < 1 || lower_bound > width) {
      throw ConfigError("structural dropout: lower bound " + std::to_string(lower_bound) +
                        " outside [1, " + std::to_string(width) + "]");
    }
    if (group < 1 || group > width) {
      throw ConfigError("structural dropout: group " + std::to_string(group) + " outside [1, " +
                        std::to_string(width) + "]");
    }
  }

  friend bool operator==(const SDConfig&, const SDConfig&) = default;
};

/// Cutoffs the sampler may return: multiples of `group` inside
/// [lower_bound, width], plus `width` itself so the full model stays
/// reachable. Ascending.
inline std::vector<std::size_t> admissible_cutoffs(const SDConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> out;
  for (std::size_t k = cfg.group; k <= cfg.width; k += cfg.group)
    if (k >= cfg.lower_bound) out.push_back(k);
  if (out.empty() || out.back() != cfg.width) out.push_back(cfg.width);
  return out;
}

inline bool is_admissible(const SDConfig& cfg, std::size_t k) {
  if (k < cfg.lower_bound || k > cfg.width) return false;
  return k == cfg.width || k % cfg.group == 0;
}

/// Outcome of sampling one layer for one mini-batch.
struct SDDecision {
  std::size_t cutoff = 0;
  bool full_pass = true;

  static SDDecision full(std::size_t width) { return {width, true}; }
  static SDDecision cut(std::size_t i) { return {i, false}; }

  friend bool operator==(const SDDecision&, const SDDecision&) = default;
};

template <class Rng>
SDDecision sample_decision(const SDConfig& cfg, Rng& rng) {
  if (!std::bernoulli_distribution(cfg.p)(rng)) return SDDecision::full(cfg.width);
  if (cfg.group == 1) {
    return SDDecision::cut(
        std::uniform_int_distribution<std::size_t>(cfg.lower_bound, cfg.width)(rng));
  }
  const auto cutoffs = admissible_cutoffs(cfg);
  return SDDecision::cut(
      cutoffs[std::uniform_int_distribution<std::size_t>(0, cutoffs.size() - 1)(rng)]);
}

inline double normalization(std::size_t width, std::size_t cutoff) {
  return static_cast<double>(width) / static_cast<double>(cutoff);
}

namespace detail {

inline void check_rows(const Tensor& x, std::size_t width) {
  if (x.rows() != width) {
    throw ShapeError("structural dropout: input " + x.shape_string() + " does not have " +
                     std::to_string(width) + " rows");
  }
}

inline void check_decision(const SDDecision& d, const SDConfig& cfg) {
  if (d.full_pass) return;
  if (d.cutoff < 1 || d.cutoff > cfg.width) {
    throw DomainError("structural dropout: cutoff " + std::to_string(d.cutoff) + " outside [1, " +
                      std::to_string(cfg.width) + "]");
  }
}

}  // namespace detail

/// Training-mode transform for a fixed decision.
inline Tensor apply_train(const Tensor& x, const SDDecision& d, const SDConfig& cfg) {
  detail::check_rows(x, cfg.width);
  detail::check_decision(d, cfg);
  if (d.full_pass) return x;
  return scale_prefix_rows(x, d.cutoff, normalization(cfg.width, d.cutoff));
}

/// Recorded variant of apply_train; the gradient uses the same mask and scale.
inline Var apply_train(Tape& tape, Var x, const SDDecision& d, const SDConfig& cfg) {
  detail::check_rows(tape.value(x), cfg.width);
  detail::check_decision(d, cfg);
  if (d.full_pass) return x;
  return tape.scale_prefix_rows(x, d.cutoff, normalization(cfg.width, d.cutoff));
}

/// Deterministic inference transform at width k.
inline Tensor apply_test(const Tensor& x, std::size_t k, std::size_t width) {
  detail::check_rows(x, width);
  if (k < 1 || k > width) {
    throw DomainError("structural dropout: width " + std::to_string(k) + " outside [1, " +
                      std::to_string(width) + "]");
  }
  if (k == width) return x;
  return scale_prefix_rows(x, k, normalization(width, k));
}

}  // namespace sdrop
