#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sdrop/errors.hpp"

namespace sdrop {

/// Dense row-major matrix of doubles. Column vectors are N x 1.
///
/// Batches are stored feature-major: an activation for B samples of width N
/// is an N x B tensor, so a Linear layer is `W * x` and structural dropout
/// acts on leading rows.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      std::ostringstream msg;
      msg << "tensor data length " << data_.size() << " does not match shape "
          << rows_ << "x" << cols_;
      throw ShapeError(msg.str());
    }
  }

  /// Nested-list literal, one inner list per row.
  Tensor(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw ShapeError("ragged tensor literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Tensor column(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(n, 1, std::move(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool same_shape(const Tensor& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMajor> map(Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

inline Eigen::Map<const RowMajor> map(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

}  // namespace detail

inline bool all_finite(const Tensor& t) noexcept {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](double v) { return std::isfinite(v); });
}

inline void ensure_finite(const Tensor& t, const char* op) {
  if (!all_finite(t)) {
    throw NumericError(std::string(op) + " produced a non-finite value (" +
                       t.shape_string() + ")");
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() +
                     " vs " + b.shape_string());
  }
}

/// a[m x k] * b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + a.shape_string() +
                     " x " + b.shape_string());
  }
  Tensor out(a.rows(), b.cols());
  if (a.cols() > 0) detail::map(out).noalias() = detail::map(a) * detail::map(b);
  ensure_finite(out, "matmul");
  return out;
}

/// aᵀ * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dimensions disagree, " + a.shape_string() +
                     "ᵀ x " + b.shape_string());
  }
  Tensor out(a.cols(), b.cols());
  if (a.rows() > 0) detail::map(out).noalias() = detail::map(a).transpose() * detail::map(b);
  ensure_finite(out, "matmul_tn");
  return out;
}

/// a * bᵀ without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions disagree, " + a.shape_string() +
                     " x " + b.shape_string() + "ᵀ");
  }
  Tensor out(a.rows(), b.rows());
  if (a.cols() > 0) detail::map(out).noalias() = detail::map(a) * detail::map(b).transpose();
  ensure_finite(out, "matmul_nt");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

/// Adds the column vector `bias` to every column of `x`.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.cols() != 1 || bias.rows() != x.rows()) {
    throw ShapeError("add_bias: bias " + bias.shape_string() + " does not fit input " +
                     x.shape_string());
  }
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double b = bias(r, 0);
    double* row = out.data() + r * x.cols();
    for (std::size_t c = 0; c < x.cols(); ++c) row[c] += b;
  }
  ensure_finite(out, "add_bias");
  return out;
}

/// Sum over columns: the gradient of add_bias with respect to the bias.
inline Tensor row_sums(const Tensor& x) {
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* row = x.data() + r * x.cols();
    double acc = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) acc += row[c];
    out(r, 0) = acc;
  }
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor leaky_relu(const Tensor& x, double slope) {
  Tensor out = x;
  for (double& v : out.values()) v = v < 0.0 ? slope * v : v;
  ensure_finite(out, "leaky_relu");
  return out;
}

inline Tensor scaled(const Tensor& x, double factor) {
  Tensor out = x;
  for (double& v : out.values()) v *= factor;
  ensure_finite(out, "scale");
  return out;
}

inline double sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return acc;
}

/// Keeps rows [0, keep), multiplies them by `factor`, zeroes the rest.
/// This is the shared arithmetic of structural dropout in both modes.
inline Tensor scale_prefix_rows(const Tensor& x, std::size_t keep, double factor) {
  if (keep > x.rows()) {
    throw ShapeError("scale_prefix_rows: keep " + std::to_string(keep) +
                     " exceeds row count of " + x.shape_string());
  }
  Tensor out(x.rows(), x.cols());
  const std::size_t live = keep * x.cols();
  if (factor == 1.0) {
    std::copy_n(x.data(), live, out.data());
  } else {
    for (std::size_t i = 0; i < live; ++i) out.data()[i] = factor * x.data()[i];
  }
  ensure_finite(out, "scale_prefix_rows");
  return out;
}

/// Round-robin merge by feature: output row j*n + t is row j of input t.
/// All inputs must share one shape.
inline Tensor interleave(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw ShapeError("interleave: no inputs");
  const Tensor& first = inputs.front();
  for (const Tensor& t : inputs) require_same_shape(first, t, "interleave");
  const std::size_t n = inputs.size();
  const std::size_t cols = first.cols();
  Tensor out(first.rows() * n, cols);
  for (std::size_t j = 0; j < first.rows(); ++j) {
    for (std::size_t t = 0; t < n; ++t) {
      std::copy_n(inputs[t].data() + j * cols, cols, out.data() + (j * n + t) * cols);
    }
  }
  return out;
}

/// Interleave of inputs with possibly different row counts: for j = 0, 1, ...
/// emits row j of every input that still has one, in input order. With equal
/// row counts this is `interleave`. Used by pruned networks, whose merge
/// branches may keep different prefixes.
inline Tensor interleave_ragged(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw ShapeError("interleave: no inputs");
  const std::size_t cols = inputs.front().cols();
  std::size_t total = 0;
  std::size_t longest = 0;
  for (const Tensor& t : inputs) {
    if (t.cols() != cols) {
      throw ShapeError("interleave: batch mismatch " + inputs.front().shape_string() +
                       " vs " + t.shape_string());
    }
    total += t.rows();
    longest = std::max(longest, t.rows());
  }
  Tensor out(total, cols);
  std::size_t row = 0;
  for (std::size_t j = 0; j < longest; ++j) {
    for (const Tensor& t : inputs) {
      if (j >= t.rows()) continue;
      std::copy_n(t.data() + j * cols, cols, out.data() + row * cols);
      ++row;
    }
  }
  return out;
}

/// Inverse routing of interleave_ragged: splits rows back to their inputs.
inline std::vector<Tensor> deinterleave_ragged(const Tensor& merged,
                                               std::span<const std::size_t> row_counts) {
  const std::size_t cols = merged.cols();
  std::vector<Tensor> parts;
  parts.reserve(row_counts.size());
  std::size_t longest = 0;
  std::size_t total = 0;
  for (std::size_t n : row_counts) {
    parts.emplace_back(n, cols);
    longest = std::max(longest, n);
    total += n;
  }
  if (total != merged.rows()) {
    throw ShapeError("deinterleave: row counts do not sum to " + merged.shape_string());
  }
  std::size_t row = 0;
  for (std::size_t j = 0; j < longest; ++j) {
    for (std::size_t t = 0; t < parts.size(); ++t) {
      if (j >= row_counts[t]) continue;
      std::copy_n(merged.data() + row * cols, cols, parts[t].data() + j * cols);
      ++row;
    }
  }
  return parts;
}

/// Gathers the listed rows, in order.
inline Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw ShapeError("select_rows: index out of range");
    std::copy_n(x.data() + rows[i] * x.cols(), x.cols(), out.data() + i * x.cols());
  }
  return out;
}

/// Gathers the listed columns, in order.
inline Tensor select_cols(const Tensor& x, std::span<const std::size_t> cols) {
  Tensor out(x.rows(), cols.size());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (cols[i] >= x.cols()) throw ShapeError("select_cols: index out of range");
      out(r, i) = x(r, cols[i]);
    }
  }
  return out;
}

struct CrossEntropy {
  double loss = 0.0;
  Tensor grad;  // d loss / d logits, same shape as logits
};

/// Mean over the batch of -log softmax(logits[:, b])[labels[b]], computed
/// with max-subtraction. Also returns the gradient with respect to logits.
inline CrossEntropy softmax_cross_entropy(const Tensor& logits,
                                          std::span<const std::uint32_t> labels) {
  const std::size_t classes = logits.rows();
  const std::size_t batch = logits.cols();
  if (labels.size() != batch) {
    throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for " +
                     logits.shape_string() + " logits");
  }
  if (batch == 0) throw ShapeError("cross entropy: empty batch");
  CrossEntropy result{0.0, Tensor(classes, batch)};
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw ShapeError("cross entropy: label " + std::to_string(labels[b]) +
                       " out of range for " + std::to_string(classes) + " classes");
    }
    double top = logits(0, b);
    for (std::size_t c = 1; c < classes; ++c) top = std::max(top, logits(c, b));
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(logits(c, b) - top);
    const double log_denom = std::log(denom);
    result.loss += (log_denom - (logits(labels[b], b) - top)) * inv_batch;
    for (std::size_t c = 0; c < classes; ++c) {
      const double prob = std::exp(logits(c, b) - top - log_denom);
      result.grad(c, b) = (prob - (c == labels[b] ? 1.0 : 0.0)) * inv_batch;
    }
  }
  if (!std::isfinite(result.loss)) throw NumericError("cross entropy is not finite");
  return result;
}

/// Index of the largest logit in each column.
inline std::vector<std::uint32_t> argmax_columns(const Tensor& logits) {
  std::vector<std::uint32_t> out(logits.cols(), 0);
  for (std::size_t b = 0; b < logits.cols(); ++b) {
    double best = logits(0, b);
    for (std::size_t c = 1; c < logits.rows(); ++c) {
      if (logits(c, b) > best) {
        best = logits(c, b);
        out[b] = static_cast<std::uint32_t>(c);
      }
    }
  }
  return out;
}

}  // namespace sdrop
