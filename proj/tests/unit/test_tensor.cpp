#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "sdrop/tensor.hpp"
#include "support/oracles.hpp"

namespace sdrop {
namespace {

TEST(Tensor, LiteralAndAccess) {
  const Tensor t{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 0), 4.0);
  EXPECT_EQ(t.shape_string(), "2x3");
  EXPECT_THROW((Tensor{{1, 2}, {3}}), ShapeError);
  EXPECT_THROW(Tensor(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, MatmulMatchesNaiveLoops) {
  std::mt19937_64 rng(7);
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + trial % 7, k = 1 + (trial * 3) % 11, n = 1 + (trial * 5) % 9;
    const Tensor a = testing::random_tensor(rng, m, k), b = testing::random_tensor(rng, k, n);
    EXPECT_LE(testing::max_rel_diff(matmul(a, b), testing::naive_matmul(a, b)), 1e-14);
    EXPECT_LE(testing::max_rel_diff(matmul_tn(transpose(a), b), testing::naive_matmul(a, b)), 1e-14);
    EXPECT_LE(testing::max_rel_diff(matmul_nt(a, transpose(b)), testing::naive_matmul(a, b)), 1e-14);
  }
}

TEST(Tensor, MatmulShapeAndFiniteness) {
  EXPECT_THROW(matmul(Tensor(2, 3), Tensor(2, 3)), ShapeError);
  const Tensor huge{{std::numeric_limits<double>::max(), std::numeric_limits<double>::max()}};
  EXPECT_THROW(matmul(huge, Tensor{{2.0}, {2.0}}), NumericError);
}

TEST(Tensor, BiasAndRowSums) {
  const Tensor x{{1, 2}, {3, 4}};
  const Tensor y = add_bias(x, Tensor::column({10, 20}));
  EXPECT_EQ(y, (Tensor{{11, 12}, {23, 24}}));
  EXPECT_EQ(row_sums(x), Tensor::column({3, 7}));
  EXPECT_THROW(add_bias(x, Tensor::column({1, 2, 3})), ShapeError);
}

TEST(Tensor, Activations) {
  const Tensor x{{-2, 0, 3}};
  EXPECT_EQ(relu(x), (Tensor{{0, 0, 3}}));
  EXPECT_EQ(leaky_relu(x, 0.1), (Tensor{{-0.2, 0, 3}}));
}

TEST(Tensor, ScalePrefixRows) {
  const Tensor x{{1, 2}, {3, 4}, {5, 6}};
  EXPECT_EQ(scale_prefix_rows(x, 2, 1.5), (Tensor{{1.5, 3}, {4.5, 6}, {0, 0}}));
  EXPECT_EQ(scale_prefix_rows(x, 3, 1.0), x);
  EXPECT_EQ(scale_prefix_rows(x, 0, 2.0), Tensor(3, 2));
  EXPECT_THROW(scale_prefix_rows(x, 4, 1.0), ShapeError);
}

TEST(Tensor, InterleaveRoundRobin) {
  const std::vector<Tensor> parts{Tensor::column({1, 2, 3}), Tensor::column({10, 20, 30})};
  EXPECT_EQ(interleave(parts), Tensor::column({1, 10, 2, 20, 3, 30}));
  EXPECT_EQ(interleave_ragged(parts), interleave(parts));
  const std::vector<Tensor> ragged{Tensor::column({1, 2, 3}), Tensor::column({10})};
  EXPECT_EQ(interleave_ragged(ragged), Tensor::column({1, 10, 2, 3}));
  const std::vector<std::size_t> counts{3, 1};
  EXPECT_EQ(deinterleave_ragged(interleave_ragged(ragged), counts), ragged);
  const std::vector<Tensor> mismatched{Tensor(2, 1), Tensor(3, 1)};
  EXPECT_THROW(interleave(mismatched), ShapeError);
}

// Rows beyond n*k of an interleave of prefix-sparse inputs are all zero.
TEST(Tensor, InterleaveKeepsTrailingZerosProperty) {
  std::mt19937_64 rng(11);
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 4, width = 1 + trial % 17;
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, width)(rng);
    std::vector<Tensor> parts;
    for (std::size_t t = 0; t < n; ++t) parts.push_back(scale_prefix_rows(testing::random_tensor(rng, width, 3), k, 2.0));
    const Tensor merged = interleave(parts);
    for (std::size_t r = n * k; r < merged.rows(); ++r)
      for (std::size_t c = 0; c < merged.cols(); ++c) ASSERT_EQ(merged(r, c), 0.0);
  }
}

TEST(Tensor, SelectRowsCols) {
  const Tensor x{{1, 2, 3}, {4, 5, 6}};
  const std::vector<std::size_t> rows{1}, cols{2, 0};
  EXPECT_EQ(select_rows(x, rows), (Tensor{{4, 5, 6}}));
  EXPECT_EQ(select_cols(x, cols), (Tensor{{3, 1}, {6, 4}}));
}

TEST(Tensor, CrossEntropyMatchesLongDoubleOracle) {
  std::mt19937_64 rng(3);
  for (std::size_t trial = 0; trial < 30; ++trial) {
    const Tensor logits = testing::random_tensor(rng, 5, 7, -30.0, 30.0);
    std::vector<std::uint32_t> labels(7);
    for (auto& l : labels) l = static_cast<std::uint32_t>(rng() % 5);
    const CrossEntropy ce = softmax_cross_entropy(logits, labels);
    EXPECT_NEAR(ce.loss, testing::naive_cross_entropy(logits, labels), 1e-12 * std::max(1.0, ce.loss));
    // Gradient columns sum to zero.
    for (std::size_t b = 0; b < 7; ++b) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) s += ce.grad(c, b);
      EXPECT_NEAR(s, 0.0, 1e-15);
    }
  }
}

TEST(Tensor, CrossEntropyIsStableForLargeLogits) {
  const Tensor logits{{1000.0}, {-1000.0}};
  const std::vector<std::uint32_t> labels{1};
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).loss, 2000.0, 1e-9);
  const std::vector<std::uint32_t> bad{2};
  EXPECT_THROW(softmax_cross_entropy(logits, bad), ShapeError);
}

TEST(Tensor, ArgmaxPicksFirstMaximum) {
  const Tensor logits{{1, 5}, {3, 5}, {3, 0}};
  EXPECT_EQ(argmax_columns(logits), (std::vector<std::uint32_t>{1, 0}));
}

}  // namespace
}  // namespace sdrop
