#pragma once

// Test-only reference computations, written independently of the library
// kernels they check.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mbcset/tensor.hpp"

namespace mbcset::oracle {

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  }
  return out;
}

inline Matrix naive_transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = scale * rng.next_normal();
  return m;
}

// Row vector x (1 x d) times W (d x e), ascending accumulation.
inline std::vector<double> row_times(std::span<const double> x, const Matrix& W) {
  std::vector<double> out(W.cols(), 0.0);
  for (std::size_t j = 0; j < W.cols(); ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) s += x[c] * W(c, j);
    out[j] = s;
  }
  return out;
}

// Logit row for one element against prepared queries, scaled afterwards.
inline std::vector<double> logit_row(std::span<const double> x, const Matrix& Wk,
                                     const Matrix& query, std::size_t d_hat) {
  const std::vector<double> key = row_times(x, Wk);
  std::vector<double> out(query.rows());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_hat));
  for (std::size_t k = 0; k < query.rows(); ++k) {
    double s = 0.0;
    for (std::size_t c = 0; c < key.size(); ++c) s += key[c] * query(k, c);
    out[k] = s * scale;
  }
  return out;
}

// Single-pass encoding of biasless-projection SSE, written element by
// element: the mode is applied directly across per-element contributions.
inline Matrix per_element_encoding(const Matrix& X, const Matrix& slots_normed, const Matrix& Wq,
                                   const Matrix& Wk, const Matrix& Wv, int mode /*0 sum 1 mean 2 max 3 min*/) {
  const std::size_t K = slots_normed.rows();
  const std::size_t dh = Wv.cols();
  Matrix query(K, dh);
  for (std::size_t k = 0; k < K; ++k) {
    const auto q = row_times(slots_normed.row(k), Wq);
    for (std::size_t m = 0; m < dh; ++m) query(k, m) = q[m];
  }
  const double init = mode == 2 ? -INFINITY : mode == 3 ? INFINITY : 0.0;
  Matrix out(K, dh, init);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    const auto logits = logit_row(X.row(i), Wk, query, dh);
    std::vector<double> a(K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      a[k] = 1.0 / (1.0 + std::exp(-logits[k])) + 1e-8;
      total += a[k];
    }
    const auto v = row_times(X.row(i), Wv);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t m = 0; m < dh; ++m) {
        const double c = a[k] / total * v[m];
        if (mode <= 1) out(k, m) += c;
        else if (mode == 2) out(k, m) = std::max(out(k, m), c);
        else out(k, m) = std::min(out(k, m), c);
      }
    }
  }
  if (mode == 1) {
    for (double& v : out.data()) v /= static_cast<double>(X.rows());
  }
  return out;
}

}  // namespace mbcset::oracle
