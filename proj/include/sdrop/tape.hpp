#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdrop/tensor.hpp"

namespace sdrop {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so the
/// recording order is a topological order and backward is a single reverse
/// sweep. One tape per forward pass; not thread-safe.
class Tape {
 public:
  /// A leaf whose gradient is wanted (a parameter).
  Var parameter(Tensor value) { return push(std::move(value), true, {}, nullptr); }

  /// A leaf that is not differentiated (inputs, fixed data).
  Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() target with respect to `v`. Nodes that
  /// received no gradient report zeros of the value's shape.
  const Tensor& grad(Var v) {
    Node& node = nodes_.at(v.id);
    ensure_grad(node);
    return node.grad;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    return push(sdrop::matmul(value(a), value(b)), any_grad({a, b}), {a.id, b.id},
                [](Tape& t, Node& self) {
                  const std::size_t ia = self.inputs[0], ib = self.inputs[1];
                  if (t.nodes_[ia].requires_grad)
                    t.accumulate(ia, matmul_nt(self.grad, t.nodes_[ib].value));
                  if (t.nodes_[ib].requires_grad)
                    t.accumulate(ib, matmul_tn(t.nodes_[ia].value, self.grad));
                });
  }

  Var add_bias(Var x, Var bias) {
    return push(sdrop::add_bias(value(x), value(bias)), any_grad({x, bias}), {x.id, bias.id},
                [](Tape& t, Node& self) {
                  if (t.nodes_[self.inputs[0]].requires_grad) t.accumulate(self.inputs[0], self.grad);
                  if (t.nodes_[self.inputs[1]].requires_grad)
                    t.accumulate(self.inputs[1], row_sums(self.grad));
                });
  }

  Var relu(Var x) { return rectifier(x, sdrop::relu(value(x)), 0.0); }

  Var leaky_relu(Var x, double slope) {
    return rectifier(x, sdrop::leaky_relu(value(x), slope), slope);
  }

  /// Rows [0, keep) scaled by `factor`, the rest zeroed. The gradient applies
  /// the same mask and scale.
  Var scale_prefix_rows(Var x, std::size_t keep, double factor) {
    return push(sdrop::scale_prefix_rows(value(x), keep, factor), any_grad({x}), {x.id},
                [keep, factor](Tape& t, Node& self) {
                  t.accumulate(self.inputs[0], sdrop::scale_prefix_rows(self.grad, keep, factor));
                });
  }

  Var scale(Var x, double factor) {
    return push(sdrop::scaled(value(x), factor), any_grad({x}), {x.id},
                [factor](Tape& t, Node& self) {
                  t.accumulate(self.inputs[0], sdrop::scaled(self.grad, factor));
                });
  }

  Var transpose(Var x) {
    return push(sdrop::transpose(value(x)), any_grad({x}), {x.id}, [](Tape& t, Node& self) {
      t.accumulate(self.inputs[0], sdrop::transpose(self.grad));
    });
  }

  /// Scalar (1x1) sum of all elements.
  Var sum(Var x) {
    return push(Tensor(1, 1, sdrop::sum(value(x))), any_grad({x}), {x.id},
                [](Tape& t, Node& self) {
                  const Tensor& in = t.nodes_[self.inputs[0]].value;
                  t.accumulate(self.inputs[0], Tensor(in.rows(), in.cols(), self.grad(0, 0)));
                });
  }

  /// Ragged round-robin merge; equal-height inputs give the plain interleave.
  Var interleave(std::span<const Var> inputs) {
    std::vector<Tensor> values;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> heights;
    bool needs = false;
    for (Var v : inputs) {
      values.push_back(value(v));
      ids.push_back(v.id);
      heights.push_back(value(v).rows());
      needs = needs || requires_grad(v);
    }
    Tensor merged = interleave_ragged(values);
    return push(std::move(merged), needs, std::move(ids),
                [heights = std::move(heights)](Tape& t, Node& self) {
                  auto parts = deinterleave_ragged(self.grad, heights);
                  for (std::size_t i = 0; i < parts.size(); ++i)
                    if (t.nodes_[self.inputs[i]].requires_grad) t.accumulate(self.inputs[i], parts[i]);
                });
  }

  /// Scalar mean cross-entropy of logits[C x B] against class labels.
  Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> labels) {
    CrossEntropy ce = sdrop::softmax_cross_entropy(value(logits), labels);
    return push(Tensor(1, 1, ce.loss), any_grad({logits}), {logits.id},
                [g = std::move(ce.grad)](Tape& t, Node& self) {
                  t.accumulate(self.inputs[0], sdrop::scaled(g, self.grad(0, 0)));
                });
  }

  /// Reverse sweep from a scalar node. Clears gradients from earlier sweeps.
  void backward(Var loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value.rows() != 1 || root.value.cols() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + root.value.shape_string());
    }
    for (Node& n : nodes_) n.grad = Tensor();
    root.grad = Tensor(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backprop || !node.requires_grad || node.grad.empty()) continue;
      node.backprop(*this, node);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    std::function<void(Tape&, Node&)> backprop;
  };

  Var push(Tensor value, bool requires_grad, std::vector<std::size_t> inputs,
           std::function<void(Tape&, Node&)> backprop) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(inputs),
                          std::move(backprop)});
    return Var{nodes_.size() - 1};
  }

  // Gradient is `slope` where the input was negative, 1 where positive. At 0
  // the ReLU subgradient 0 is used.
  Var rectifier(Var x, Tensor out, double slope) {
    return push(std::move(out), any_grad({x}), {x.id}, [slope](Tape& t, Node& self) {
      const Tensor& in = t.nodes_[self.inputs[0]].value;
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = in.data()[i];
        if (v < 0.0 || (v == 0.0 && slope == 0.0)) g.data()[i] *= slope;
      }
      t.accumulate(self.inputs[0], g);
    });
  }

  bool any_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (nodes_.at(v.id).requires_grad) return true;
    return false;
  }

  void ensure_grad(Node& node) {
    if (node.grad.empty() && !node.value.empty())
      node.grad = Tensor(node.value.rows(), node.value.cols());
  }

  void accumulate(std::size_t id, const Tensor& g) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.grad.empty()) {
      node.grad = g;
      return;
    }
    require_same_shape(node.grad, g, "gradient accumulation");
    for (std::size_t i = 0; i < g.size(); ++i) node.grad.data()[i] += g.data()[i];
  }

  std::vector<Node> nodes_;
};

}  // namespace sdrop
