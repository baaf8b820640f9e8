#pragma once

// Reference encoders. DeepSets pooling is mini-batch consistent; the
// softmax pooling block normalizes attention over the element axis and is
// not, which is exactly what softmax_pool_minibatch exposes.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mbcset/error.hpp"
#include "mbcset/sse.hpp"
#include "mbcset/tensor.hpp"

namespace mbcset {

enum class Activation { Identity, Relu };

inline std::string_view to_string(Activation a) { return a == Activation::Relu ? "relu" : "identity"; }

inline Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::Relu;
  if (text == "identity") return Activation::Identity;
  throw ParameterError("unknown activation '" + std::string(text) + "'");
}

struct DenseLayer {
  LinearMap map;
  Activation act = Activation::Identity;
};

inline Matrix relu(Matrix x) {
  for (double& v : x.data()) v = v > 0.0 ? v : 0.0;
  return x;
}

inline Matrix apply_dense(const std::vector<DenseLayer>& layers, Matrix x) {
  for (const auto& layer : layers) {
    x = apply_linear(layer.map, x);
    if (layer.act == Activation::Relu) x = relu(std::move(x));
  }
  return x;
}

inline void validate_dense_chain(const std::vector<DenseLayer>& layers, std::size_t in,
                                 const char* name) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& m = layers[i].map;
    if (m.in_dim() != in) {
      throw ConfigError(std::string(name) + " layer " + std::to_string(i + 1) + " expects width " +
                        std::to_string(m.in_dim()) + ", got " + std::to_string(in));
    }
    if (m.bias && m.bias->size() != m.out_dim()) {
      throw ConfigError(std::string(name) + " layer " + std::to_string(i + 1) + " bias length");
    }
    in = m.out_dim();
  }
}

struct DeepSetsParams {
  std::size_t d = 1;
  std::vector<DenseLayer> phi;  // row-wise feature extractor
  AggMode pool = AggMode::Mean;
  std::vector<DenseLayer> rho;  // head applied to the pooled vector

  std::size_t pooled_dim() const { return phi.empty() ? d : phi.back().map.out_dim(); }
  std::size_t output_dim() const { return rho.empty() ? pooled_dim() : rho.back().map.out_dim(); }

  void validate() const {
    if (d < 1) throw ConfigError("deepsets: input width must be >= 1");
    validate_dense_chain(phi, d, "phi");
    validate_dense_chain(rho, pooled_dim(), "rho");
  }
};

/// Pooled phi features of one batch, as a 1 x pooled_dim partial.
inline PartialEncoding deepsets_partial(const Matrix& X, const DeepSetsParams& params) {
  if (X.rows() == 0) throw ParameterError("deepsets: empty batch");
  if (X.cols() != params.d) throw ShapeError("deepsets: batch width mismatch");
  require_finite(X, "batch");
  const Matrix features = apply_dense(params.phi, X);
  // A column of ones turns pool_contributions into plain pooling over rows.
  const Matrix ones(X.rows(), 1, 1.0);
  return {pool_contributions(ones, features, params.pool).values, X.rows()};
}

inline AggregateState deepsets_init(const DeepSetsParams& params) {
  return init_state(params.pool, 1, params.pooled_dim());
}

inline Matrix deepsets_head(const DeepSetsParams& params, const AggregateState& state) {
  return apply_dense(params.rho, finalize(state));
}

inline Matrix deepsets_encode(std::span<const Matrix> batches, const DeepSetsParams& params) {
  params.validate();
  AggregateState state = deepsets_init(params);
  for (const auto& batch : batches) {
    if (batch.rows() == 0) continue;
    state = merge(state, deepsets_partial(batch, params));
  }
  if (!state.initialized()) throw EmptySetError("deepsets: empty set");
  return deepsets_head(params, state);
}

inline Matrix deepsets_encode(const Matrix& X, const DeepSetsParams& params) {
  return deepsets_encode(std::span<const Matrix>(&X, 1), params);
}

struct SoftmaxPoolParams {
  Matrix query;  // K x d_hat seed vectors
  LinearMap proj_k;
  LinearMap proj_v;

  std::size_t d() const { return proj_k.in_dim(); }
  std::size_t d_hat() const { return query.cols(); }

  void validate() const {
    if (query.rows() < 1 || query.cols() < 1) throw ConfigError("softmax pool: empty query");
    if (proj_k.out_dim() != d_hat() || proj_v.out_dim() != d_hat() || proj_v.in_dim() != d()) {
      throw ConfigError("softmax pool: projection shapes do not match query width");
    }
  }
};

/// Softmax over each row, max-shifted. The normalizer is a compensated sum
/// so long rows still sum to 1 within a few ulps.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    const double peak = *std::max_element(in.begin(), in.end());
    auto o = out.row(r);
    double total = 0.0;
    double carry = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - peak);
      const double t = total + o[j];
      carry += std::abs(total) >= std::abs(o[j]) ? (total - t) + o[j] : (o[j] - t) + total;
      total = t;
    }
    total += carry;
    for (double& v : o) v /= total;
  }
  return out;
}

/// K x n attention, normalized over the elements.
inline Matrix softmax_pool_attention(const Matrix& X, const SoftmaxPoolParams& params) {
  if (X.rows() == 0) throw EmptySetError("softmax pool: empty set");
  if (X.cols() != params.d()) throw ShapeError("softmax pool: input width mismatch");
  return softmax_rows(scaled_logits(params.query, apply_linear(params.proj_k, X), params.d_hat()));
}

inline Matrix softmax_pool_full(const Matrix& X, const SoftmaxPoolParams& params) {
  params.validate();
  return matmul(softmax_pool_attention(X, params), apply_linear(params.proj_v, X));
}

/// Encodes every partition on its own and merges the per-partition outputs
/// with `combine` (each output counts once for Mean). Not equal to
/// softmax_pool_full in general.
inline Matrix softmax_pool_minibatch(std::span<const Matrix> partitions,
                                     const SoftmaxPoolParams& params, AggMode combine) {
  params.validate();
  AggregateState state = init_state(combine, params.query.rows(), params.d_hat());
  for (const auto& part : partitions) {
    if (part.rows() == 0) continue;
    state = merge(state, PartialEncoding{softmax_pool_full(part, params), 1});
  }
  if (!state.initialized()) throw EmptySetError("softmax pool: empty set");
  return finalize(state);
}

}  // namespace mbcset
