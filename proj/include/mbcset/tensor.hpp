#pragma once

// Dense row-major matrices of doubles and the handful of kernels the set
// encoders need. All reductions accumulate in ascending index order so that
// results are reproducible bit for bit; build with -ffp-contract=off.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mbcset/error.hpp"

namespace mbcset {

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer for matrix");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  // Element-wise ==, so -0.0 and 0.0 compare equal.
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline void require_finite(const Matrix& m, const char* what) {
  if (!all_finite(m.data())) throw NumericError(std::string(what) + " contains non-finite entries");
}

/// a·b with each output entry accumulated over the inner index in ascending
/// order, starting from +0.0.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a) + " times " + shape_string(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

/// a·bᵀ, same accumulation order as matmul.
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_transposed: " + shape_string(a) + " times transpose of " +
                     shape_string(b));
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

inline std::vector<double> column_sums(const Matrix& a) {
  std::vector<double> out(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += a(i, j);
  }
  return out;
}

inline Matrix permute_rows(const Matrix& a, std::span<const std::size_t> perm) {
  if (perm.size() != a.rows()) throw ShapeError("permute_rows: permutation length mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto src = a.row(perm[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix select_rows(const Matrix& a, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.rows()) throw ShapeError("select_rows: index out of range");
    auto src = a.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix vstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("vstack: column mismatch");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Matrix(rows, cols, std::move(data));
}

// Row-wise affine map. weight is d_in x d_out; an absent bias means a purely
// linear projection.
struct LinearMap {
  Matrix weight;
  std::optional<std::vector<double>> bias;

  std::size_t in_dim() const noexcept { return weight.rows(); }
  std::size_t out_dim() const noexcept { return weight.cols(); }
};

inline Matrix apply_linear(const LinearMap& m, const Matrix& x) {
  if (x.cols() != m.in_dim()) {
    throw ShapeError("apply_linear: input " + shape_string(x) + " vs weight " +
                     shape_string(m.weight));
  }
  Matrix out = matmul(x, m.weight);
  if (m.bias) {
    const auto& b = *m.bias;
    if (b.size() != m.out_dim()) throw ShapeError("apply_linear: bias length mismatch");
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto row = out.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
  }
  return out;
}

inline constexpr double kDefaultLayerNormEpsilon = 1e-5;

struct LayerNormParams {
  std::vector<double> gain;
  std::vector<double> bias;
  double epsilon = kDefaultLayerNormEpsilon;

  static LayerNormParams unit(std::size_t width, double epsilon = kDefaultLayerNormEpsilon) {
    return {std::vector<double>(width, 1.0), std::vector<double>(width, 0.0), epsilon};
  }
};

struct RowMoments {
  double mean;
  double inv_std;  // 1 / sqrt(var + eps)
};

inline RowMoments row_moments(std::span<const double> row, double epsilon) {
  const double n = static_cast<double>(row.size());
  double sum = 0.0;
  for (double v : row) sum += v;
  const double mean = sum / n;
  double sq = 0.0;
  for (double v : row) sq += (v - mean) * (v - mean);
  const double var = sq / n;
  return {mean, 1.0 / std::sqrt(var + epsilon)};
}

/// Per-row normalization with population variance, then gain and bias.
inline Matrix layer_norm(const LayerNormParams& p, const Matrix& x) {
  if (p.gain.size() != x.cols() || p.bias.size() != x.cols()) {
    throw ShapeError("layer_norm: width " + std::to_string(x.cols()) + " vs params " +
                     std::to_string(p.gain.size()));
  }
  if (!(p.epsilon > 0.0)) throw ParameterError("layer_norm: epsilon must be positive");
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const RowMoments mom = row_moments(in, p.epsilon);
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = (in[j] - mom.mean) * mom.inv_std * p.gain[j] + p.bias[j];
    }
  }
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = sigmoid(in[i]);
  return out;
}

// Counter-based generator: draw i is a pure function of (seed, i), which keeps
// sequences reproducible and lets callers reason about shared prefixes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() { return mix(seed_ ^ mix(counter_++ + 0x632be59bd9b4e019ULL)); }

  /// Uniform on (0, 1].
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  /// Uniform integer in [0, bound).
  std::uint64_t next_below(std::uint64_t bound) {
    if (bound == 0) throw ParameterError("next_below: bound must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % bound;
  }

  /// Box-Muller, cosine branch only: every normal consumes exactly two
  /// uniforms, so draw j always comes from counters 2j and 2j+1.
  double next_normal() {
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// Rows i.i.d. from N(mu, diag(sigma^2)), drawn in row-major order.
inline Matrix sample_gaussian(Rng& rng, std::size_t rows, std::size_t cols,
                              std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != cols || sigma.size() != cols) {
    throw ShapeError("sample_gaussian: mu/sigma length must equal cols");
  }
  for (double s : sigma) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ParameterError("sample_gaussian: sigma must be positive");
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = mu[j] + sigma[j] * rng.next_normal();
  }
  return out;
}

inline Matrix standard_normal(Rng& rng, std::size_t rows, std::size_t cols) {
  const std::vector<double> zeros(cols, 0.0);
  const std::vector<double> ones(cols, 1.0);
  return sample_gaussian(rng, rows, cols, zeros, ones);
}

/// Fisher-Yates with the counter RNG (std::shuffle is implementation-defined).
inline std::vector<std::size_t> random_permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

}  // namespace mbcset
