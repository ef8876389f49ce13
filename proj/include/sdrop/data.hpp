#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdrop/errors.hpp"
#include "sdrop/tensor.hpp"

namespace sdrop {

enum class Split { train, val, test };

/// Labeled samples, one per column of `inputs` (D x M).
struct Dataset {
  Tensor inputs;
  std::vector<std::uint32_t> labels;
  std::size_t classes = 0;
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t features() const noexcept { return inputs.rows(); }

  void validate() const {
    if (inputs.cols() != labels.size()) {
      throw ShapeError("dataset: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(inputs.cols()) + " samples");
    }
    for (auto l : labels)
      if (l >= classes) throw ShapeError("dataset: label " + std::to_string(l) + " >= class count");
    if (!all_finite(inputs)) throw NumericError("dataset: non-finite input");
  }
};

// ---------------------------------------------------------------------------
// IDX (big-endian header, unsigned-byte payload)

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::string& bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
  return v;
}

inline void put_be32(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

}  // namespace detail

/// Reads an IDX image/label pair. Pixels are scaled to [0, 1] and each
/// image is flattened row-major into one column.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, Split split = Split::train) {
  const std::string images = detail::read_file(images_path);
  const std::string labels = detail::read_file(labels_path);

  if (images.size() < 16) throw FormatError("idx images '" + images_path.string() + "': truncated header");
  if (detail::be32(images, 0) != kIdxImagesMagic)
    throw FormatError("idx images '" + images_path.string() + "': bad magic");
  if (labels.size() < 8) throw FormatError("idx labels '" + labels_path.string() + "': truncated header");
  if (detail::be32(labels, 0) != kIdxLabelsMagic)
    throw FormatError("idx labels '" + labels_path.string() + "': bad magic");

  const std::size_t count = detail::be32(images, 4);
  const std::size_t rows = detail::be32(images, 8);
  const std::size_t cols = detail::be32(images, 12);
  const std::size_t label_count = detail::be32(labels, 4);
  if (count != label_count) {
    throw FormatError("idx: " + std::to_string(count) + " images but " + std::to_string(label_count) +
                      " labels");
  }
  const std::size_t features = rows * cols;
  if (images.size() != 16 + count * features)
    throw FormatError("idx images '" + images_path.string() + "': payload length mismatch");
  if (labels.size() != 8 + count)
    throw FormatError("idx labels '" + labels_path.string() + "': payload length mismatch");

  Dataset ds{Tensor(features, count), std::vector<std::uint32_t>(count), 0, split};
  for (std::size_t m = 0; m < count; ++m) {
    const auto* px = reinterpret_cast<const unsigned char*>(images.data() + 16 + m * features);
    for (std::size_t f = 0; f < features; ++f) ds.inputs(f, m) = px[f] / 255.0;
    ds.labels[m] = static_cast<unsigned char>(labels[8 + m]);
  }
  std::uint32_t top = 0;
  for (auto l : ds.labels) top = std::max(top, l);
  ds.classes = count == 0 ? 0 : top + 1;
  return ds;
}

/// Writes `images` (one row-major rows*cols byte block per sample) and
/// `labels` as an IDX pair. Test-fixture helper.
inline void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      std::span<const std::uint8_t> images, std::size_t rows, std::size_t cols,
                      std::span<const std::uint8_t> labels) {
  if (images.size() != labels.size() * rows * cols)
    throw ShapeError("write_idx: image bytes do not match label count");
  std::string img;
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(labels.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  img.append(reinterpret_cast<const char*>(images.data()), images.size());
  std::string lab;
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.append(reinterpret_cast<const char*>(labels.data()), labels.size());
  for (auto [path, bytes] : {std::pair{images_path, &img}, std::pair{labels_path, &lab}}) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes->data(), static_cast<std::streamsize>(bytes->size()));
  }
}

/// MNIST from a directory holding the four canonical IDX files.
inline Dataset load_mnist(const std::filesystem::path& dir, Split split) {
  const bool test = split == Split::test;
  return load_idx(dir / (test ? "t10k-images-idx3-ubyte" : "train-images-idx3-ubyte"),
                  dir / (test ? "t10k-labels-idx1-ubyte" : "train-labels-idx1-ubyte"), split);
}

// ---------------------------------------------------------------------------
// Synthetic ordered task

/// Labeling rule of the synthetic task: label = [w . x_S > 0].
struct SynthRule {
  std::vector<std::size_t> coords;  // S, distinct
  std::vector<double> weights;      // w, one per coordinate of S

  /// Label of sample `m` (column m of a D x M input tensor).
  std::uint32_t label(const Tensor& inputs, std::size_t m) const {
    double score = 0.0;
    for (std::size_t j = 0; j < coords.size(); ++j) score += weights[j] * inputs(coords[j], m);
    return score > 0.0 ? 1u : 0u;
  }
};

/// Draws S as `informative` distinct coordinates of `features` and w ~ N(0, 1).
template <class Rng>
SynthRule synth_rule(Rng& rng, std::size_t features, std::size_t informative) {
  if (informative > features || informative == 0)
    throw ConfigError("synth_ordered: informative count must lie in [1, features]");
  std::normal_distribution<double> normal(0.0, 1.0);
  SynthRule rule{std::vector<std::size_t>(features), std::vector<double>(informative)};
  std::iota(rule.coords.begin(), rule.coords.end(), std::size_t{0});
  std::shuffle(rule.coords.begin(), rule.coords.end(), rng);
  rule.coords.resize(informative);
  for (double& v : rule.weights) v = normal(rng);
  return rule;
}

/// Binary task with a known number of informative coordinates.
///
/// Every coordinate is i.i.d. N(0, 1). The rule (synth_rule) is drawn
/// first, then the samples, all from `rng`. The D - d coordinates outside
/// the rule are pure noise and do not affect labels.
template <class Rng>
Dataset synth_ordered(Rng& rng, std::size_t samples, std::size_t features, std::size_t informative) {
  const SynthRule rule = synth_rule(rng, features, informative);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds{Tensor(features, samples), std::vector<std::uint32_t>(samples), 2, Split::train};
  for (std::size_t m = 0; m < samples; ++m) {
    for (std::size_t f = 0; f < features; ++f) ds.inputs(f, m) = normal(rng);
    ds.labels[m] = rule.label(ds.inputs, m);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting and batching

/// Samples [begin, end) as a new dataset.
inline Dataset slice(const Dataset& ds, std::size_t begin, std::size_t end, Split split) {
  if (begin > end || end > ds.size()) throw ShapeError("dataset slice out of range");
  Dataset out{Tensor(ds.features(), end - begin), {}, ds.classes, split};
  for (std::size_t f = 0; f < ds.features(); ++f)
    std::copy_n(ds.inputs.data() + f * ds.size() + begin, end - begin,
                out.inputs.data() + f * (end - begin));
  out.labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    ds.labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

/// First `head` samples and the remainder (tagged `tail_split`).
inline std::pair<Dataset, Dataset> split_tail(const Dataset& ds, std::size_t head, Split tail_split) {
  if (head > ds.size()) throw ShapeError("dataset split larger than dataset");
  return {slice(ds, 0, head, ds.split), slice(ds, head, ds.size(), tail_split)};
}

/// Sample indices for one epoch, partitioned into batches of `batch_size`
/// (last batch may be short). Order is the identity when `shuffle` is false.
template <class Rng>
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t samples, std::size_t batch_size,
                                                    bool shuffle, Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (batch_size > samples) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                      std::to_string(samples));
  }
  std::vector<std::size_t> order(samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < samples; at += batch_size) {
    const std::size_t end = std::min(samples, at + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

struct Batch {
  Tensor inputs;  // D x B
  std::vector<std::uint32_t> labels;
};

inline Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch b{Tensor(ds.features(), indices.size()), std::vector<std::uint32_t>(indices.size())};
  const std::size_t m = ds.size();
  for (std::size_t f = 0; f < ds.features(); ++f) {
    const double* src = ds.inputs.data() + f * m;
    double* dst = b.inputs.data() + f * indices.size();
    for (std::size_t i = 0; i < indices.size(); ++i) dst[i] = src[indices[i]];
  }
  for (std::size_t i = 0; i < indices.size(); ++i) b.labels[i] = ds.labels.at(indices[i]);
  return b;
}

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Canonical MNIST split: the last `val_size` training images are held out
/// for validation; the t10k files are the test set.
inline Splits mnist_splits(const std::filesystem::path& dir, std::size_t val_size = 5000) {
  Dataset full = load_mnist(dir, Split::train);
  if (val_size >= full.size()) throw ConfigError("validation slice larger than the training set");
  auto [train, val] = split_tail(full, full.size() - val_size, Split::val);
  return {std::move(train), std::move(val), load_mnist(dir, Split::test)};
}

/// One synth_ordered draw of n_train + n_val + n_test samples, cut in that
/// order, so all three splits share the labeling rule.
inline Splits synth_splits(std::uint64_t seed, std::size_t features, std::size_t informative,
                           std::size_t n_train, std::size_t n_val, std::size_t n_test) {
  std::mt19937_64 rng(seed);
  const Dataset all = synth_ordered(rng, n_train + n_val + n_test, features, informative);
  return {slice(all, 0, n_train, Split::train), slice(all, n_train, n_train + n_val, Split::val),
          slice(all, n_train + n_val, all.size(), Split::test)};
}

}  // namespace sdrop
