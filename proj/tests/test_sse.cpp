#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mbcset/mbc.hpp"
#include "mbcset/sse.hpp"
#include "oracles.hpp"

namespace mbcset {
namespace {

SSEParams make_params(Rng& rng, std::size_t K, std::size_t h, std::size_t d, std::size_t d_hat,
                      SlotMode slots = SlotMode::Deterministic, bool bias = false) {
  return random_sse_layer(rng, {K, h, d, d_hat, AggMode::Sum, slots, bias}).params;
}

int mode_index(AggMode m) { return static_cast<int>(m); }

TEST(SampleSlots, DeterministicPassThrough) {
  Rng rng(1);
  const SSEParams p = make_params(rng, 3, 4, 2, 5);
  EXPECT_EQ(sample_slots(p.slot_config, 99).slots, *p.slot_config.deterministic_slots);
  EXPECT_FALSE(sample_slots(p.slot_config, 99).seed.has_value());
  EXPECT_THROW(sample_slots(p.slot_config, 99, 4), ParameterError);
  EXPECT_NO_THROW(sample_slots(p.slot_config, 99, 3));
}

TEST(SampleSlots, DegenerateSigmaGivesMu) {
  SlotConfig c;
  c.K = 6;
  c.h = 3;
  c.mu = std::vector<double>{0.25, -1.5, 3.0};
  c.log_sigma = std::vector<double>(3, -690.0);
  const Matrix s = sample_slots(c, 5).slots;
  for (std::size_t k = 0; k < 6; ++k) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(s(k, j), (*c.mu)[j]);
  }
}

TEST(SampleSlots, SeedDeterminismAndPrefixSharing) {
  SlotConfig c;
  c.K = 7;
  c.h = 5;
  c.mu = std::vector<double>(5, 0.5);
  c.log_sigma = std::vector<double>{0.0, 0.1, -0.2, 0.3, 0.0};
  const Matrix a = sample_slots(c, 123).slots;
  EXPECT_EQ(a, sample_slots(c, 123).slots);
  EXPECT_NE(a, sample_slots(c, 124).slots);
  const Matrix b = sample_slots(c, 123, 9).slots;
  ASSERT_EQ(b.rows(), 9u);
  for (std::size_t k = 0; k < 7; ++k) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(b(k, j), a(k, j));
  }
}

TEST(SlotConfig, ValidationErrors) {
  SlotConfig c;
  c.K = 2;
  c.h = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c.mode = SlotMode::Deterministic;
  c.deterministic_slots = Matrix(3, 2);
  EXPECT_THROW(c.validate(), ConfigError);
  c.K = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AttentionLogits, ZeroInputGivesZeros) {
  Rng rng(2);
  const SSEParams p = make_params(rng, 3, 4, 5, 6);
  const Matrix slots = layer_norm(p.slot_norm, *p.slot_config.deterministic_slots);
  const Matrix m = attention_logits(Matrix(4, 5), slots, p);
  EXPECT_EQ(m, Matrix(4, 3));
}

TEST(AttentionLogits, IdentityProjectionsGiveScaledDot) {
  SSEParams p;
  p.d = 3;
  p.d_hat = 3;
  p.slot_config.mode = SlotMode::Deterministic;
  p.slot_config.K = 1;
  p.slot_config.h = 3;
  p.slot_config.deterministic_slots = Matrix::from_rows({{0.5, -1.0, 2.0}});
  p.slot_norm = LayerNormParams::unit(3);
  p.proj_q = p.proj_k = p.proj_v = {Matrix::identity(3), std::nullopt};
  const Matrix x = Matrix::from_rows({{1.0, 2.0, 3.0}});
  const Matrix m = attention_logits(x, *p.slot_config.deterministic_slots, p);
  EXPECT_NEAR(m(0, 0), (0.5 - 2.0 + 6.0) / std::sqrt(3.0), 1e-15);
}

TEST(AttentionLogits, RowsMatchPerElementOracle) {
  Rng rng(3);
  const SSEParams p = make_params(rng, 3, 5, 4, 7);
  const Matrix X = oracle::random_matrix(rng, 6, 4);
  const Matrix slots = layer_norm(p.slot_norm, *p.slot_config.deterministic_slots);
  const Matrix M = attention_logits(X, slots, p);
  const Matrix query = oracle::naive_matmul(slots, p.proj_q.weight);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto row = oracle::logit_row(X.row(i), p.proj_k.weight, query, p.d_hat);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(M(i, k), row[k]);
  }
  EXPECT_THROW(attention_logits(Matrix(2, 3), slots, p), ShapeError);
}

TEST(AttentionWeights, ZeroAndVeryNegativeLogits) {
  const Matrix mid = attention_weights(Matrix(3, 2));
  for (double v : mid.data()) EXPECT_EQ(v, 0.5 + 1e-8);
  const Matrix low = attention_weights(Matrix(3, 2, -1e3));
  for (double v : low.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_NEAR(v, 1e-8, 1e-20);
  }
}

TEST(AttentionWeights, RowPermutationCommutes) {
  Rng rng(4);
  const Matrix M = oracle::random_matrix(rng, 8, 5, 4.0);
  const auto perm = random_permutation(rng, 8);
  EXPECT_EQ(attention_weights(permute_rows(M, perm)), permute_rows(attention_weights(M), perm));
}

TEST(SlotNormalize, SingleSlotIsAllOnes) {
  Rng rng(5);
  const Matrix attn = attention_weights(oracle::random_matrix(rng, 10, 1, 5.0));
  const Matrix w = slot_normalize(attn);
  for (double v : w.data()) EXPECT_EQ(v, 1.0);
}

TEST(SlotNormalize, UniformRow) {
  const Matrix w = slot_normalize(Matrix(2, 3, 0.7));
  for (double v : w.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-16);
}

TEST(SlotNormalize, RowsSumToOne) {
  Rng rng(6);
  for (std::size_t K : {4u, 8u, 64u}) {
    const Matrix w = slot_normalize(attention_weights(oracle::random_matrix(rng, 50, K, 3.0)));
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double s = 0.0;
      for (double v : w.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-15) << "K=" << K;
    }
  }
}

TEST(SlotNormalize, RejectsNonPositive) {
  EXPECT_THROW(slot_normalize(Matrix::from_rows({{0.5, 0.0}})), NumericError);
  EXPECT_THROW(slot_normalize(Matrix::from_rows({{0.5, -0.1}})), NumericError);
}

TEST(EncodeBatch, SingleSlotSumIsColumnSums) {
  Rng rng(7);
  SSEParams p = make_params(rng, 1, 4, 3, 3);
  p.proj_v = {Matrix::identity(3), std::nullopt};
  const Matrix X = oracle::random_matrix(rng, 9, 3);
  const auto part = encode_batch(X, sample_slots(p.slot_config, 0), p, AggMode::Sum);
  EXPECT_EQ(part.count, 9u);
  EXPECT_EQ(part.values, Matrix::row_vector(column_sums(X)));
}

TEST(EncodeBatch, SingletonAgreesAcrossModes) {
  Rng rng(8);
  const SSEParams p = make_params(rng, 4, 3, 2, 5);
  const Matrix x = oracle::random_matrix(rng, 1, 2);
  const SlotSample s = sample_slots(p.slot_config, 0);
  const Matrix sum = encode_batch(x, s, p, AggMode::Sum).values;
  for (AggMode m : kAllAggModes) EXPECT_EQ(encode_batch(x, s, p, m).values, sum);
}

TEST(EncodeBatch, SumMatchesTripleLoop) {
  Rng rng(9);
  const SSEParams p = make_params(rng, 5, 4, 3, 6);
  const Matrix X = oracle::random_matrix(rng, 11, 3);
  const PreparedSlots slots = prepare_slots(sample_slots(p.slot_config, 0), p);
  const Matrix W = slot_normalize(attention_weights(attention_logits(X, slots.slots_normed, p)));
  const Matrix V = apply_linear(p.proj_v, X);
  EXPECT_EQ(encode_batch(X, slots, p, AggMode::Sum).values,
            oracle::naive_matmul(oracle::naive_transpose(W), V));
}

TEST(EncodeBatch, Errors) {
  Rng rng(10);
  const SSEParams p = make_params(rng, 2, 2, 3, 2);
  const SlotSample s = sample_slots(p.slot_config, 0);
  EXPECT_THROW(encode_batch(Matrix(0, 3), s, p, AggMode::Sum), ParameterError);
  EXPECT_THROW(encode_batch(Matrix(2, 4), s, p, AggMode::Sum), ShapeError);
  Matrix bad(1, 3);
  bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(encode_batch(bad, s, p, AggMode::Sum), NumericError);
}

TEST(EncodeFull, MatchesPerElementOracle) {
  Rng rng(11);
  for (AggMode mode : kAllAggModes) {
    const SSEParams p = make_params(rng, 4, 5, 3, 6);
    const Matrix X = oracle::random_matrix(rng, 20, 3);
    const Matrix slots = layer_norm(p.slot_norm, *p.slot_config.deterministic_slots);
    const Matrix want = oracle::per_element_encoding(X, slots, p.proj_q.weight, p.proj_k.weight,
                                                     p.proj_v.weight, mode_index(mode));
    EXPECT_LE(max_relative_discrepancy(encode_full(X, p, mode, 0), want), 1e-12) << to_string(mode);
  }
}

PartialEncoding random_partial(Rng& rng, std::size_t K, std::size_t dh, std::size_t count) {
  return {oracle::random_matrix(rng, K, dh), count};
}

TEST(AggregateState, IdentityLaws) {
  Rng rng(12);
  for (AggMode mode : kAllAggModes) {
    const auto p = random_partial(rng, 3, 4, 5);
    const AggregateState s = merge(init_state(mode, 3, 4), p);
    EXPECT_EQ(s.partial, p.values);
    EXPECT_EQ(s.count, 5u);
    const AggregateState direct{mode, p.values, 5};
    const AggregateState both = merge_states(init_state(mode, 3, 4), direct);
    EXPECT_EQ(both.partial, direct.partial);
    EXPECT_EQ(merge_states(direct, init_state(mode, 3, 4)).partial, direct.partial);
  }
  const AggregateState max0 = init_state(AggMode::Max, 2, 2);
  for (double v : max0.partial.data()) EXPECT_EQ(v, -std::numeric_limits<double>::infinity());
  const AggregateState min0 = init_state(AggMode::Min, 2, 2);
  for (double v : min0.partial.data()) EXPECT_EQ(v, std::numeric_limits<double>::infinity());
}

TEST(AggregateState, ZeroPartialInSumMode) {
  Rng rng(13);
  const auto p = random_partial(rng, 2, 3, 4);
  const AggregateState s = merge(merge(init_state(AggMode::Sum, 2, 3), p), {Matrix(2, 3), 6});
  EXPECT_EQ(s.partial, p.values);
  EXPECT_EQ(s.count, 10u);
}

TEST(AggregateState, CommutativeAndAssociative) {
  Rng rng(14);
  for (AggMode mode : kAllAggModes) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto a = random_partial(rng, 3, 5, 2);
      const auto b = random_partial(rng, 3, 5, 3);
      const auto c = random_partial(rng, 3, 5, 1);
      const auto d = random_partial(rng, 3, 5, 7);
      const AggregateState i = init_state(mode, 3, 5);
      const AggregateState ab = merge(merge(i, a), b);
      const AggregateState ba = merge(merge(i, b), a);
      const AggregateState cd = merge(merge(i, c), d);
      const AggregateState tree = merge_states(ab, cd);
      const AggregateState seq = merge(merge(ab, c), d);
      EXPECT_EQ(ab.count, 5u);
      EXPECT_EQ(tree.count, 13u);
      EXPECT_EQ(seq.count, 13u);
      if (mode == AggMode::Max || mode == AggMode::Min) {
        EXPECT_EQ(ab.partial, ba.partial);
        EXPECT_EQ(tree.partial, seq.partial);
        EXPECT_EQ(merge_states(ab, cd).partial, merge_states(cd, ab).partial);
      } else {
        EXPECT_LE(max_relative_discrepancy(ab.partial, ba.partial), 1e-12);
        EXPECT_LE(max_relative_discrepancy(tree.partial, seq.partial), 1e-12);
        EXPECT_LE(max_relative_discrepancy(merge_states(ab, cd).partial, merge_states(cd, ab).partial),
                  1e-12);
      }
    }
  }
}

TEST(AggregateState, SplitPartialMatchesWhole) {
  Rng rng(15);
  const SSEParams p = make_params(rng, 3, 4, 2, 5);
  const PreparedSlots slots = prepare_slots(sample_slots(p.slot_config, 0), p);
  const Matrix X = oracle::random_matrix(rng, 12, 2);
  const std::vector<std::size_t> lo{0, 1, 2, 3, 4}, hi{5, 6, 7, 8, 9, 10, 11};
  const AggregateState whole = merge(init_state(AggMode::Sum, 3, 5), encode_batch(X, slots, p, AggMode::Sum));
  const AggregateState a = merge(init_state(AggMode::Sum, 3, 5), encode_batch(select_rows(X, lo), slots, p, AggMode::Sum));
  const AggregateState b = merge(init_state(AggMode::Sum, 3, 5), encode_batch(select_rows(X, hi), slots, p, AggMode::Sum));
  const AggregateState split = merge_states(a, b);
  EXPECT_EQ(split.count, whole.count);
  EXPECT_LE(max_relative_discrepancy(split.partial, whole.partial), 1e-12);
}

TEST(AggregateState, ModeAndShapeMismatch) {
  EXPECT_THROW(merge_states(init_state(AggMode::Sum, 2, 2), init_state(AggMode::Max, 2, 2)), ParameterError);
  EXPECT_THROW(merge(init_state(AggMode::Sum, 2, 2), {Matrix(2, 3), 1}), ShapeError);
  EXPECT_THROW(init_state(AggMode::Sum, 0, 2), ParameterError);
}

TEST(Finalize, PassThroughAndErrors) {
  Rng rng(16);
  const Matrix P = oracle::random_matrix(rng, 3, 2);
  EXPECT_EQ(finalize({AggMode::Sum, P, 4}), P);
  EXPECT_EQ(finalize({AggMode::Max, P, 4}), P);
  for (AggMode mode : kAllAggModes) EXPECT_THROW(finalize(init_state(mode, 2, 2)), EmptySetError);
}

TEST(Finalize, MeanOverIdenticalElements) {
  Rng rng(17);
  const SSEParams p = make_params(rng, 3, 4, 2, 5);
  const Matrix x = oracle::random_matrix(rng, 1, 2);
  Matrix X(40, 2);
  for (std::size_t i = 0; i < 40; ++i) std::copy(x.data().begin(), x.data().end(), X.row(i).begin());
  const Matrix single = encode_full(x, p, AggMode::Sum, 0);
  EXPECT_LE(max_relative_discrepancy(encode_full(X, p, AggMode::Mean, 0), single), 1e-12);
  // A singleton partial finalizes to its own contribution under Mean.
  EXPECT_EQ(encode_full(x, p, AggMode::Mean, 0), single);
}

TEST(Finalize, MeanIsSumOverCountExactly) {
  Rng rng(18);
  const SSEParams p = make_params(rng, 4, 3, 3, 4);
  const Matrix X = oracle::random_matrix(rng, 23, 3);
  Matrix want = encode_full(X, p, AggMode::Sum, 0);
  for (double& v : want.data()) v /= 23.0;
  EXPECT_EQ(encode_full(X, p, AggMode::Mean, 0), want);
}

TEST(EncodeFull, EmptySetAndTrivialPartition) {
  Rng rng(19);
  const SSEParams p = make_params(rng, 3, 3, 2, 4, SlotMode::Random);
  EXPECT_THROW(encode_full(Matrix(0, 2), p, AggMode::Sum, 1), EmptySetError);
  const Matrix X = oracle::random_matrix(rng, 15, 2);
  for (AggMode mode : kAllAggModes) {
    EXPECT_EQ(encode_partitioned(std::span<const Matrix>(&X, 1), p, mode, 3), encode_full(X, p, mode, 3));
  }
}

void expect_consistent(const Matrix& got, const Matrix& want, AggMode mode) {
  if (mode == AggMode::Max || mode == AggMode::Min) {
    EXPECT_EQ(got, want) << to_string(mode);
  } else {
    EXPECT_LE(max_relative_discrepancy(got, want), 1e-9) << to_string(mode);
  }
}

TEST(EncodeFull, TwoWayAndSingletonPartitions) {
  Rng rng(20);
  for (AggMode mode : kAllAggModes) {
    const SSEParams p = make_params(rng, 5, 4, 3, 6, SlotMode::Random, true);
    const Matrix X = oracle::random_matrix(rng, 37, 3);
    const Matrix full = encode_full(X, p, mode, 7);
    for (int trial = 0; trial < 10; ++trial) {
      const auto parts = split_rows(X, random_partition(rng, 37, 2));
      expect_consistent(encode_partitioned(parts, p, mode, 7), full, mode);
    }
    expect_consistent(encode_partitioned(chunk_rows(X, 1), p, mode, 7), full, mode);
  }
}

// Mini-batch consistency over 100 partitions per instance, p = 1 and p = n
// included.
TEST(SseProperties, MiniBatchConsistency) {
  Rng rng(21);
  const std::size_t ns[] = {1, 2, 17, 300};
  const std::size_t ds[] = {1, 8, 32};
  const std::size_t Ks[] = {1, 8, 64};
  int instance = 0;
  for (std::size_t n : ns) {
    for (AggMode mode : kAllAggModes) {
      const std::size_t d = ds[instance % 3];
      const std::size_t K = Ks[(instance / 3) % 3];
      ++instance;
      const SSEParams p = make_params(rng, K, 8, d, 8, SlotMode::Random);
      const Matrix X = oracle::random_matrix(rng, n, d);
      const Matrix full = encode_full(X, p, mode, 42);
      for (std::size_t parts : verification_part_counts(rng, n, 100)) {
        const auto batches = split_rows(X, random_partition(rng, n, parts));
        expect_consistent(encode_partitioned(batches, p, mode, 42), full, mode);
      }
    }
  }
}

TEST(SseProperties, InputPermutationInvariance) {
  Rng rng(22);
  for (AggMode mode : kAllAggModes) {
    const SSEParams p = make_params(rng, 6, 5, 4, 7, SlotMode::Random);
    const Matrix X = oracle::random_matrix(rng, 64, 4);
    const Matrix full = encode_full(X, p, mode, 9);
    for (int trial = 0; trial < 20; ++trial) {
      expect_consistent(encode_full(permute_rows(X, random_permutation(rng, 64)), p, mode, 9), full, mode);
    }
  }
}

TEST(SseProperties, SlotPermutationEquivarianceIsBitwise) {
  Rng rng(23);
  for (AggMode mode : kAllAggModes) {
    const SSEParams p = make_params(rng, 7, 5, 3, 4, SlotMode::Deterministic, true);
    const Matrix X = oracle::random_matrix(rng, 30, 3);
    const Matrix base = encode_full(X, p, mode, 0);
    for (int trial = 0; trial < 20; ++trial) {
      const auto perm = random_permutation(rng, 7);
      SSEParams q = p;
      q.slot_config.deterministic_slots = permute_rows(*p.slot_config.deterministic_slots, perm);
      EXPECT_EQ(encode_full(X, q, mode, 0), permute_rows(base, perm)) << to_string(mode);
    }
  }
}

TEST(SseProperties, SingleSlotDegeneracy) {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const SSEParams p = make_params(rng, 1, 3, 4, 5, trial % 2 ? SlotMode::Random : SlotMode::Deterministic,
                                    trial % 3 == 0);
    const Matrix X = oracle::random_matrix(rng, 13, 4);
    const Matrix want = Matrix::row_vector(column_sums(apply_linear(p.proj_v, X)));
    EXPECT_EQ(encode_full(X, p, AggMode::Sum, static_cast<std::uint64_t>(trial)), want);
  }
}

TEST(SseProperties, BatchOrderInvariance) {
  Rng rng(25);
  for (AggMode mode : kAllAggModes) {
    const SSEParams p = make_params(rng, 4, 4, 2, 3, SlotMode::Random);
    const Matrix X = oracle::random_matrix(rng, 50, 2);
    auto batches = split_rows(X, random_partition(rng, 50, 6));
    const Matrix first = encode_partitioned(batches, p, mode, 5);
    for (int trial = 0; trial < 10; ++trial) {
      const auto order = random_permutation(rng, batches.size());
      std::vector<Matrix> shuffled;
      for (std::size_t i : order) shuffled.push_back(batches[i]);
      expect_consistent(encode_partitioned(shuffled, p, mode, 5), first, mode);
    }
  }
}

TEST(SseProperties, FrozenSlotsIgnoreSeed) {
  Rng rng(26);
  const SSEParams p = make_params(rng, 3, 4, 2, 3, SlotMode::Random);
  const Matrix X = oracle::random_matrix(rng, 10, 2);
  EXPECT_EQ(encode_full(X, p, AggMode::Sum, 1, SlotDraw::FreezeMean),
            encode_full(X, p, AggMode::Sum, 2, SlotDraw::FreezeMean));
  EXPECT_NE(encode_full(X, p, AggMode::Sum, 1), encode_full(X, p, AggMode::Sum, 2));
}

}  // namespace
}  // namespace mbcset
