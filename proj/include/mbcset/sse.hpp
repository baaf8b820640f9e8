#pragma once

// Slot Set Encoder: sigmoid attention of set elements against K slots,
// normalized over the slot axis, pooled into a K x d_hat encoding. Every step
// before pooling is row-local in the set elements, so encoding disjoint
// batches and merging their partial encodings reproduces the full-set pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mbcset/error.hpp"
#include "mbcset/tensor.hpp"

namespace mbcset {

enum class AggMode { Sum, Mean, Max, Min };

inline std::string_view to_string(AggMode mode) {
  switch (mode) {
    case AggMode::Sum: return "sum";
    case AggMode::Mean: return "mean";
    case AggMode::Max: return "max";
    case AggMode::Min: return "min";
  }
  return "sum";
}

inline AggMode parse_agg_mode(std::string_view text) {
  if (text == "sum") return AggMode::Sum;
  if (text == "mean") return AggMode::Mean;
  if (text == "max") return AggMode::Max;
  if (text == "min") return AggMode::Min;
  throw ParameterError("unknown aggregation mode '" + std::string(text) + "'");
}

inline constexpr AggMode kAllAggModes[] = {AggMode::Sum, AggMode::Mean, AggMode::Max,
                                           AggMode::Min};

enum class SlotMode { Deterministic, Random };

// How random slots are realized at encode time.
enum class SlotDraw {
  Sample,      // draw from N(mu, diag(sigma^2)) with the session seed
  FreezeMean,  // every slot equals mu
};

struct SlotConfig {
  SlotMode mode = SlotMode::Random;
  std::size_t K = 1;
  std::size_t h = 1;
  std::optional<Matrix> deterministic_slots;
  std::optional<std::vector<double>> mu;
  std::optional<std::vector<double>> log_sigma;

  void validate() const {
    if (K < 1 || h < 1) throw ConfigError("slot config: K and h must be >= 1");
    if (mode == SlotMode::Deterministic) {
      if (!deterministic_slots) throw ConfigError("deterministic slots missing");
      if (deterministic_slots->rows() != K || deterministic_slots->cols() != h) {
        throw ConfigError("deterministic slots have shape " + shape_string(*deterministic_slots) +
                          ", expected " + std::to_string(K) + "x" + std::to_string(h));
      }
    } else {
      if (!mu || !log_sigma) throw ConfigError("random slots need mu and log_sigma");
      if (mu->size() != h || log_sigma->size() != h) {
        throw ConfigError("mu/log_sigma length must equal h = " + std::to_string(h));
      }
    }
  }
};

struct SlotSample {
  Matrix slots;
  std::optional<std::uint64_t> seed;  // nullopt: deterministic or frozen slots
};

/// Standard-normal draws behind a random slot sample; slots are
/// mu + exp(log_sigma) * eps row by row.
inline Matrix slot_noise(std::uint64_t seed, std::size_t K, std::size_t h) {
  Rng rng(seed);
  return standard_normal(rng, K, h);
}

inline std::vector<double> slot_sigma(const SlotConfig& config) {
  std::vector<double> sigma(config.log_sigma->size());
  for (std::size_t j = 0; j < sigma.size(); ++j) sigma[j] = std::exp((*config.log_sigma)[j]);
  return sigma;
}

/// K may be overridden for random slots only.
inline SlotSample sample_slots(const SlotConfig& config, std::uint64_t seed,
                               std::optional<std::size_t> k_override = std::nullopt) {
  config.validate();
  const std::size_t K = k_override.value_or(config.K);
  if (config.mode == SlotMode::Deterministic) {
    if (K != config.K) {
      throw ParameterError("deterministic slots cannot change K from " + std::to_string(config.K) +
                           " to " + std::to_string(K));
    }
    return {*config.deterministic_slots, std::nullopt};
  }
  if (K < 1) throw ParameterError("slot count must be >= 1");
  Rng rng(seed);
  return {sample_gaussian(rng, K, config.h, *config.mu, slot_sigma(config)), seed};
}

inline SlotSample freeze_slots(const SlotConfig& config,
                               std::optional<std::size_t> k_override = std::nullopt) {
  config.validate();
  if (config.mode == SlotMode::Deterministic) return sample_slots(config, 0, k_override);
  const std::size_t K = k_override.value_or(config.K);
  Matrix slots(K, config.h);
  for (std::size_t k = 0; k < K; ++k) {
    std::copy(config.mu->begin(), config.mu->end(), slots.row(k).begin());
  }
  return {std::move(slots), std::nullopt};
}

inline SlotSample draw_slots(const SlotConfig& config, std::uint64_t seed, SlotDraw draw,
                             std::optional<std::size_t> k_override = std::nullopt) {
  return draw == SlotDraw::FreezeMean ? freeze_slots(config, k_override)
                                      : sample_slots(config, seed, k_override);
}

struct SSEParams {
  SlotConfig slot_config;
  LayerNormParams slot_norm;
  LinearMap proj_q;  // h -> d_hat
  LinearMap proj_k;  // d -> d_hat
  LinearMap proj_v;  // d -> d_hat
  std::size_t d = 1;
  std::size_t d_hat = 1;

  void validate() const {
    slot_config.validate();
    const std::size_t h = slot_config.h;
    if (slot_norm.gain.size() != h || slot_norm.bias.size() != h) {
      throw ConfigError("slot LayerNorm width must equal h = " + std::to_string(h));
    }
    if (!(slot_norm.epsilon > 0.0)) throw ConfigError("slot LayerNorm epsilon must be positive");
    auto check = [&](const LinearMap& m, std::size_t in, const char* name) {
      if (m.in_dim() != in || m.out_dim() != d_hat) {
        throw ConfigError(std::string(name) + " has shape " + shape_string(m.weight) +
                          ", expected " + std::to_string(in) + "x" + std::to_string(d_hat));
      }
      if (m.bias && m.bias->size() != d_hat) throw ConfigError(std::string(name) + " bias length");
    };
    check(proj_q, h, "proj_q");
    check(proj_k, d, "proj_k");
    check(proj_v, d, "proj_v");
  }
};

// Slots after LayerNorm and their q projection; computed once per session and
// shared by every batch.
struct PreparedSlots {
  Matrix slots_normed;
  Matrix query;  // K x d_hat
};

inline PreparedSlots prepare_slots(const Matrix& slots, const SSEParams& params) {
  if (slots.cols() != params.slot_config.h) {
    throw ShapeError("slots have width " + std::to_string(slots.cols()) + ", expected h = " +
                     std::to_string(params.slot_config.h));
  }
  Matrix normed = layer_norm(params.slot_norm, slots);
  Matrix query = apply_linear(params.proj_q, normed);
  return {std::move(normed), std::move(query)};
}

inline PreparedSlots prepare_slots(const SlotSample& sample, const SSEParams& params) {
  return prepare_slots(sample.slots, params);
}

/// Rebuilds the q projection for already-normalized slots (session reload).
inline PreparedSlots prepare_normed_slots(Matrix slots_normed, const SSEParams& params) {
  if (slots_normed.cols() != params.slot_config.h) throw ShapeError("normalized slots width");
  Matrix query = apply_linear(params.proj_q, slots_normed);
  return {std::move(slots_normed), std::move(query)};
}

inline double attention_scale(std::size_t d_hat) { return 1.0 / std::sqrt(static_cast<double>(d_hat)); }

inline Matrix scaled_logits(const Matrix& keys, const Matrix& query, std::size_t d_hat) {
  Matrix m = matmul_transposed(keys, query);
  const double s = attention_scale(d_hat);
  for (double& v : m.data()) v *= s;
  return m;
}

/// M = k(X) q(S)ᵀ / sqrt(d_hat), n x K.
inline Matrix attention_logits(const Matrix& X, const Matrix& slots_normed, const SSEParams& params) {
  if (X.cols() != params.d) {
    throw ShapeError("attention_logits: input width " + std::to_string(X.cols()) + ", expected d = " +
                     std::to_string(params.d));
  }
  if (slots_normed.cols() != params.slot_config.h) throw ShapeError("attention_logits: slot width");
  return scaled_logits(apply_linear(params.proj_k, X), apply_linear(params.proj_q, slots_normed),
                       params.d_hat);
}

inline constexpr double kAttentionStabilizer = 1e-8;

inline Matrix attention_weights(const Matrix& logits) {
  Matrix attn = sigmoid(logits);
  for (double& v : attn.data()) v += kAttentionStabilizer;
  return attn;
}

/// Sum of one attention row, accumulated in ascending value order so the
/// result does not depend on slot order.
inline double slot_row_total(std::span<const double> row, std::vector<double>& scratch) {
  scratch.assign(row.begin(), row.end());
  std::sort(scratch.begin(), scratch.end());
  double total = 0.0;
  for (double v : scratch) total += v;
  return total;
}

/// Divides each row by its sum over the slot axis.
inline Matrix slot_normalize(const Matrix& attn) {
  Matrix w(attn.rows(), attn.cols());
  std::vector<double> scratch;
  for (std::size_t i = 0; i < attn.rows(); ++i) {
    auto in = attn.row(i);
    for (double v : in) {
      if (!(v > 0.0)) throw NumericError("slot_normalize: attention entries must be positive");
    }
    const double total = slot_row_total(in, scratch);
    auto out = w.row(i);
    for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] / total;
  }
  return w;
}

struct PooledContributions {
  Matrix values;                     // K x d_hat
  std::vector<std::size_t> winner;   // Max/Min: selected element per (k, m), row-major
};

/// Pools the per-element contributions C_i[k, m] = W[i, k] * V[i, m] over i.
/// Sum and Mean accumulate in ascending i (so the result equals Wᵀ·V bit for
/// bit); Max and Min keep the lowest index on ties.
inline PooledContributions pool_contributions(const Matrix& W, const Matrix& V, AggMode mode) {
  if (W.rows() != V.rows()) throw ShapeError("pool: weight and value row counts differ");
  if (W.rows() == 0) throw ParameterError("pool: empty batch");
  const std::size_t n = W.rows();
  const std::size_t K = W.cols();
  const std::size_t dh = V.cols();
  PooledContributions out{Matrix(K, dh), {}};
  if (mode == AggMode::Sum || mode == AggMode::Mean) {
    for (std::size_t i = 0; i < n; ++i) {
      auto v = V.row(i);
      for (std::size_t k = 0; k < K; ++k) {
        const double w = W(i, k);
        auto o = out.values.row(k);
        for (std::size_t m = 0; m < dh; ++m) o[m] += w * v[m];
      }
    }
    return out;
  }
  const bool take_max = mode == AggMode::Max;
  out.winner.assign(K * dh, 0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < dh; ++m) {
      double best = W(0, k) * V(0, m);
      std::size_t arg = 0;
      for (std::size_t i = 1; i < n; ++i) {
        const double c = W(i, k) * V(i, m);
        if (take_max ? c > best : c < best) {
          best = c;
          arg = i;
        }
      }
      out.values(k, m) = best;
      out.winner[k * dh + m] = arg;
    }
  }
  return out;
}

struct PartialEncoding {
  Matrix values;
  std::size_t count = 0;
};

inline PartialEncoding encode_batch(const Matrix& X, const PreparedSlots& slots,
                                    const SSEParams& params, AggMode mode) {
  if (X.rows() == 0) throw ParameterError("encode_batch: empty batch");
  if (X.cols() != params.d) {
    throw ShapeError("encode_batch: batch width " + std::to_string(X.cols()) + ", expected d = " +
                     std::to_string(params.d));
  }
  require_finite(X, "batch");
  const Matrix logits = scaled_logits(apply_linear(params.proj_k, X), slots.query, params.d_hat);
  const Matrix W = slot_normalize(attention_weights(logits));
  const Matrix V = apply_linear(params.proj_v, X);
  return {pool_contributions(W, V, mode).values, X.rows()};
}

inline PartialEncoding encode_batch(const Matrix& X, const SlotSample& sample,
                                    const SSEParams& params, AggMode mode) {
  return encode_batch(X, prepare_slots(sample, params), params, mode);
}

struct AggregateState {
  AggMode mode = AggMode::Sum;
  Matrix partial;
  std::size_t count = 0;

  bool initialized() const noexcept { return count > 0; }
};

inline double identity_element(AggMode mode) {
  switch (mode) {
    case AggMode::Max: return -std::numeric_limits<double>::infinity();
    case AggMode::Min: return std::numeric_limits<double>::infinity();
    default: return 0.0;
  }
}

inline AggregateState init_state(AggMode mode, std::size_t K, std::size_t d_hat) {
  if (K < 1 || d_hat < 1) throw ParameterError("init_state: K and d_hat must be >= 1");
  return {mode, Matrix(K, d_hat, identity_element(mode)), 0};
}

namespace detail {

inline Matrix combine_values(AggMode mode, const Matrix& a, const Matrix& b) {
  Matrix out = a;
  auto o = out.data();
  auto in = b.data();
  switch (mode) {
    case AggMode::Sum:
    case AggMode::Mean:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += in[i];
      break;
    case AggMode::Max:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(o[i], in[i]);
      break;
    case AggMode::Min:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::min(o[i], in[i]);
      break;
  }
  return out;
}

}  // namespace detail

inline AggregateState merge(const AggregateState& state, const PartialEncoding& partial) {
  if (state.partial.rows() != partial.values.rows() || state.partial.cols() != partial.values.cols()) {
    throw ShapeError("merge: state " + shape_string(state.partial) + " vs partial " +
                     shape_string(partial.values));
  }
  // The empty state is the identity; copying keeps merge(init, p) == p exact.
  if (state.count == 0) return {state.mode, partial.values, partial.count};
  return {state.mode, detail::combine_values(state.mode, state.partial, partial.values),
          state.count + partial.count};
}

inline AggregateState merge_states(const AggregateState& a, const AggregateState& b) {
  if (a.mode != b.mode) {
    throw ParameterError("merge_states: mode " + std::string(to_string(a.mode)) + " vs " +
                         std::string(to_string(b.mode)));
  }
  if (a.partial.rows() != b.partial.rows() || a.partial.cols() != b.partial.cols()) {
    throw ShapeError("merge_states: shape mismatch");
  }
  if (b.count == 0) return a;
  return merge(a, PartialEncoding{b.partial, b.count});
}

inline Matrix finalize(const AggregateState& state) {
  if (state.count == 0) throw EmptySetError("finalize: no elements have been aggregated");
  if (state.mode != AggMode::Mean) return state.partial;
  Matrix out = state.partial;
  const double n = static_cast<double>(state.count);
  for (double& v : out.data()) v /= n;
  return out;
}

/// Single-pass reference: one slot sample, the whole set as one batch.
inline Matrix encode_full(const Matrix& X, const SSEParams& params, AggMode mode,
                          std::uint64_t seed, SlotDraw draw = SlotDraw::Sample) {
  if (X.rows() == 0) throw EmptySetError("encode_full: empty set");
  const PreparedSlots slots = prepare_slots(draw_slots(params.slot_config, seed, draw), params);
  AggregateState state = init_state(mode, slots.query.rows(), params.d_hat);
  state = merge(state, encode_batch(X, slots, params, mode));
  return finalize(state);
}

/// Streaming path: batches in arrival order, merged into one state.
inline Matrix encode_partitioned(std::span<const Matrix> batches, const SSEParams& params,
                                 AggMode mode, std::uint64_t seed, SlotDraw draw = SlotDraw::Sample) {
  const PreparedSlots slots = prepare_slots(draw_slots(params.slot_config, seed, draw), params);
  AggregateState state = init_state(mode, slots.query.rows(), params.d_hat);
  for (const auto& batch : batches) {
    if (batch.rows() == 0) continue;
    state = merge(state, encode_batch(batch, slots, params, mode));
  }
  return finalize(state);
}

}  // namespace mbcset
