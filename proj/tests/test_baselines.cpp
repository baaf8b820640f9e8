#include <gtest/gtest.h>

#include <algorithm>

#include "mbcset/baselines.hpp"
#include "mbcset/mbc.hpp"
#include "oracles.hpp"

namespace mbcset {
namespace {

DeepSetsParams make_deepsets(Rng& rng, std::size_t d, AggMode pool) {
  const std::size_t phi[] = {d, 12, 12};
  const std::size_t rho[] = {12, 6, 3};
  return random_deepsets(rng, phi, pool, rho);
}

void expect_consistent(const Matrix& got, const Matrix& want, AggMode mode) {
  if (mode == AggMode::Max || mode == AggMode::Min) {
    EXPECT_EQ(got, want) << to_string(mode);
  } else {
    EXPECT_LE(max_relative_discrepancy(got, want), 1e-9) << to_string(mode);
  }
}

TEST(DeepSets, IdentityPipelineIsColumnSums) {
  Rng rng(1);
  DeepSetsParams p;
  p.d = 4;
  p.pool = AggMode::Sum;
  const Matrix X = oracle::random_matrix(rng, 10, 4);
  EXPECT_EQ(deepsets_encode(X, p), Matrix::row_vector(column_sums(X)));
  p.phi = {{{Matrix::identity(4), std::nullopt}, Activation::Identity}};
  p.rho = {{{Matrix::identity(4), std::nullopt}, Activation::Identity}};
  EXPECT_EQ(deepsets_encode(X, p), Matrix::row_vector(column_sums(X)));
}

TEST(DeepSets, MatchesDirectComputation) {
  Rng rng(2);
  const DeepSetsParams p = make_deepsets(rng, 3, AggMode::Max);
  const Matrix X = oracle::random_matrix(rng, 7, 3);
  const Matrix features = apply_dense(p.phi, X);
  Matrix pooled(1, features.cols(), -1e300);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    for (std::size_t j = 0; j < features.cols(); ++j) pooled(0, j) = std::max(pooled(0, j), features(i, j));
  }
  EXPECT_EQ(deepsets_encode(X, p), apply_dense(p.rho, pooled));
}

TEST(DeepSets, MiniBatchConsistent) {
  Rng rng(3);
  for (AggMode mode : kAllAggModes) {
    const DeepSetsParams p = make_deepsets(rng, 5, mode);
    const Matrix X = oracle::random_matrix(rng, 90, 5);
    const Matrix full = deepsets_encode(X, p);
    for (std::size_t parts : verification_part_counts(rng, 90, 100)) {
      expect_consistent(deepsets_encode(split_rows(X, random_partition(rng, 90, parts)), p), full, mode);
    }
  }
}

TEST(DeepSets, PermutationInvariant) {
  Rng rng(4);
  for (AggMode mode : kAllAggModes) {
    const DeepSetsParams p = make_deepsets(rng, 2, mode);
    const Matrix X = oracle::random_matrix(rng, 40, 2);
    const Matrix full = deepsets_encode(X, p);
    for (int trial = 0; trial < 20; ++trial) {
      expect_consistent(deepsets_encode(permute_rows(X, random_permutation(rng, 40)), p), full, mode);
    }
  }
}

TEST(DeepSets, EmptyAndMisconfigured) {
  Rng rng(5);
  const DeepSetsParams p = make_deepsets(rng, 2, AggMode::Sum);
  EXPECT_THROW(deepsets_encode(std::vector<Matrix>{}, p), EmptySetError);
  DeepSetsParams bad = p;
  bad.rho.front().map.weight = Matrix(5, 6);
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(SoftmaxPool, SingletonReplicatesValue) {
  Rng rng(6);
  const SoftmaxPoolParams p = random_softmax_pool(rng, 3, 4, 5);
  const Matrix x = oracle::random_matrix(rng, 1, 4);
  const Matrix v = apply_linear(p.proj_v, x);
  const Matrix out = softmax_pool_full(x, p);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t m = 0; m < 5; ++m) EXPECT_EQ(out(k, m), v(0, m));
  }
}

TEST(SoftmaxPool, IdenticalRowsGiveMeanValue) {
  Rng rng(7);
  const SoftmaxPoolParams p = random_softmax_pool(rng, 2, 3, 4);
  const Matrix x = oracle::random_matrix(rng, 1, 3);
  Matrix X(6, 3);
  for (std::size_t i = 0; i < 6; ++i) std::copy(x.data().begin(), x.data().end(), X.row(i).begin());
  const Matrix attn = softmax_pool_attention(X, p);
  for (double a : attn.data()) EXPECT_EQ(a, 1.0 / 6.0);
  const Matrix v = apply_linear(p.proj_v, x);
  const Matrix out = softmax_pool_full(X, p);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t m = 0; m < 4; ++m) EXPECT_NEAR(out(k, m), v(0, m), 1e-15 * (1 + std::abs(v(0, m))));
  }
}

TEST(SoftmaxPool, AttentionRowsSumToOne) {
  Rng rng(8);
  const SoftmaxPoolParams p = random_softmax_pool(rng, 4, 3, 6);
  const Matrix attn = softmax_pool_attention(oracle::random_matrix(rng, 200, 3, 2.0), p);
  ASSERT_EQ(attn.rows(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    long double s = 0.0L;
    for (double a : attn.row(k)) s += a;
    EXPECT_NEAR(static_cast<double>(s), 1.0, 1e-15);
  }
  EXPECT_THROW(softmax_pool_attention(Matrix(0, 3), p), EmptySetError);
}

TEST(SoftmaxPool, TrivialPartitionIsBitwiseFull) {
  Rng rng(9);
  const SoftmaxPoolParams p = random_softmax_pool(rng, 3, 2, 4);
  const Matrix X = oracle::random_matrix(rng, 20, 2);
  for (AggMode mode : kAllAggModes) {
    EXPECT_EQ(softmax_pool_minibatch(std::span<const Matrix>(&X, 1), p, mode), softmax_pool_full(X, p));
  }
}

TEST(SoftmaxPool, EqualContentPartitionsAgreeExactly) {
  // Integer-valued inputs and value weights keep every product and sum exact.
  Rng rng(10);
  SoftmaxPoolParams p = random_softmax_pool(rng, 2, 3, 3);
  p.proj_v.weight = Matrix::from_rows({{1, 2, 0}, {-1, 3, 1}, {2, 0, -2}});
  Matrix X(8, 3);
  for (std::size_t i = 0; i < 8; ++i) {
    X(i, 0) = 3;
    X(i, 1) = -1;
    X(i, 2) = 2;
  }
  const std::vector<Matrix> halves = split_rows(X, {{0, 1, 2, 3}, {4, 5, 6, 7}});
  EXPECT_EQ(max_relative_discrepancy(softmax_pool_minibatch(halves, p, AggMode::Mean), softmax_pool_full(X, p)),
            0.0);
}

// Census of the partitioned-vs-full gap over random instances split into two
// unequal parts.
TEST(SoftmaxPool, PartitionedEvaluationIsInconsistent) {
  Rng rng(11);
  std::vector<double> gaps;
  for (int trial = 0; trial < 1000; ++trial) {
    const SoftmaxPoolParams p = random_softmax_pool(rng, 4, 4, 8);
    const std::size_t n = 16 + static_cast<std::size_t>(rng.next_below(49));
    const Matrix X = oracle::random_matrix(rng, n, 4);
    // Shuffled split with the smaller part strictly below n / 2.
    const std::size_t cut = 1 + static_cast<std::size_t>(rng.next_below((n - 1) / 2));
    const auto order = random_permutation(rng, n);
    const std::vector<std::vector<std::size_t>> idx{{order.begin(), order.begin() + cut},
                                                    {order.begin() + cut, order.end()}};
    const auto parts = split_rows(X, idx);
    gaps.push_back(max_relative_discrepancy(softmax_pool_minibatch(parts, p, AggMode::Mean), softmax_pool_full(X, p)));
  }
  std::sort(gaps.begin(), gaps.end());
  const double median = gaps[gaps.size() / 2];
  const auto above = std::count_if(gaps.begin(), gaps.end(), [](double g) { return g >= 1e-3; });
  EXPECT_GE(median, 1e-3);
  EXPECT_GE(above, 950);
  RecordProperty("median_gap", std::to_string(median));
}

}  // namespace
}  // namespace mbcset
