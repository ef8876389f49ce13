#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "sdrop/data.hpp"
#include "sdrop/network.hpp"

namespace sdrop {

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;  // mean cross-entropy
};

/// Inference-mode metrics over `ds`, evaluated in chunks of `chunk` samples.
inline EvalResult evaluate(const Network& net, const Dataset& ds, const PruneWidth& widths = {},
                           std::size_t chunk = 2000) {
  if (ds.size() == 0) throw ShapeError("evaluate: empty dataset");
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < ds.size(); at += chunk) {
    const std::size_t end = std::min(ds.size(), at + chunk);
    idx.resize(end - at);
    std::iota(idx.begin(), idx.end(), at);
    const Batch b = gather(ds, idx);
    const Tensor logits = forward_eval(net, b.inputs, widths);
    const auto pred = argmax_columns(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
    loss += softmax_cross_entropy(logits, b.labels).loss * static_cast<double>(idx.size());
  }
  const auto n = static_cast<double>(ds.size());
  return {static_cast<double>(correct) / n, loss / n};
}

inline double accuracy(const Network& net, const Dataset& ds, const PruneWidth& widths = {}) {
  return evaluate(net, ds, widths).accuracy;
}

}  // namespace sdrop
