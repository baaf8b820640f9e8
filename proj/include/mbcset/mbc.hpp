#pragma once

// Partition generation and the partitioned-vs-full consistency check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mbcset/encoder.hpp"
#include "mbcset/error.hpp"
#include "mbcset/tensor.hpp"

namespace mbcset {

/// max_ij |a - b| / (1 + |b|), with b the reference.
inline double max_relative_discrepancy(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("discrepancy: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    worst = std::max(worst, std::abs(x - y) / (1.0 + std::abs(y)));
  }
  return worst;
}

/// Index lists of a uniformly shuffled split of 0..n-1 into p nonempty parts
/// with random sizes.
inline std::vector<std::vector<std::size_t>> random_partition(Rng& rng, std::size_t n, std::size_t p) {
  if (n == 0 || p == 0 || p > n) throw ParameterError("random_partition: need 1 <= p <= n");
  const auto order = random_permutation(rng, n);
  // p - 1 distinct cut points in 1..n-1.
  auto cuts_perm = random_permutation(rng, n - 1);
  std::vector<std::size_t> cuts(cuts_perm.begin(), cuts_perm.begin() + (p - 1));
  for (auto& c : cuts) c += 1;
  std::sort(cuts.begin(), cuts.end());
  cuts.push_back(n);
  std::vector<std::vector<std::size_t>> parts;
  std::size_t start = 0;
  for (std::size_t cut : cuts) {
    parts.emplace_back(order.begin() + start, order.begin() + cut);
    start = cut;
  }
  return parts;
}

inline std::vector<Matrix> split_rows(const Matrix& X, const std::vector<std::vector<std::size_t>>& parts) {
  std::vector<Matrix> out;
  out.reserve(parts.size());
  for (const auto& idx : parts) out.push_back(select_rows(X, idx));
  return out;
}

/// Contiguous chunks of at most `chunk` rows, in order.
inline std::vector<Matrix> chunk_rows(const Matrix& X, std::size_t chunk) {
  if (chunk == 0) throw ParameterError("chunk_rows: chunk must be positive");
  std::vector<Matrix> out;
  for (std::size_t start = 0; start < X.rows(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(X.rows(), start + chunk); ++i) idx.push_back(i);
    out.push_back(select_rows(X, idx));
  }
  return out;
}

/// Part counts for a verification run: always 1 and n, the rest random.
inline std::vector<std::size_t> verification_part_counts(Rng& rng, std::size_t n, std::size_t trials) {
  std::vector<std::size_t> counts;
  if (trials == 0) return counts;
  counts.push_back(1);
  if (trials > 1) counts.push_back(n);
  while (counts.size() < trials) counts.push_back(1 + static_cast<std::size_t>(rng.next_below(n)));
  return counts;
}

struct MbcReport {
  std::size_t partitions_checked = 0;
  double max_discrepancy = 0.0;
  bool bitwise_equal = true;  // every partitioned result == full result
  double tolerance = 0.0;
  bool passed = true;
};

/// Tolerance the consistency contract promises: summation reassociation for
/// Sum/Mean, none for Max/Min.
inline double default_mbc_tolerance(AggMode mode) {
  return mode == AggMode::Sum || mode == AggMode::Mean ? 1e-9 : 0.0;
}

inline AggMode first_layer_mode(const Encoder& e) {
  if (const auto* s = std::get_if<EncoderStack>(&e)) return s->layers.front().mode;
  if (const auto* d = std::get_if<DeepSetsParams>(&e)) return d->pool;
  return AggMode::Mean;
}

/// Compares `trials` random partitions (always including p = 1 and p = n)
/// against the single-pass encoding.
inline MbcReport verify_mbc(const Encoder& e, const Matrix& X, std::size_t trials,
                            std::uint64_t seed, double tolerance) {
  if (X.rows() == 0) throw EmptySetError("verify_mbc: empty set");
  Rng rng(seed);
  const Matrix full = encode(e, X, seed);
  MbcReport report;
  report.tolerance = tolerance;
  for (std::size_t p : verification_part_counts(rng, X.rows(), trials)) {
    const auto parts = split_rows(X, random_partition(rng, X.rows(), p));
    const Matrix got = encode(e, parts, seed);
    report.max_discrepancy = std::max(report.max_discrepancy, max_relative_discrepancy(got, full));
    report.bitwise_equal = report.bitwise_equal && got == full;
    ++report.partitions_checked;
  }
  report.passed = tolerance == 0.0 ? report.bitwise_equal : report.max_discrepancy <= tolerance;
  return report;
}

}  // namespace mbcset
