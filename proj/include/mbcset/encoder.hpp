#pragma once

// Uniform access to the three encoder families: encoding a partitioned set,
// enumerating trainable parameters in a fixed order, and random construction.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "mbcset/baselines.hpp"
#include "mbcset/error.hpp"
#include "mbcset/hierarchy.hpp"
#include "mbcset/sse.hpp"
#include "mbcset/tensor.hpp"

namespace mbcset {

using Encoder = std::variant<EncoderStack, DeepSetsParams, SoftmaxPoolParams>;

enum class EncoderKind { Sse, DeepSets, SoftmaxPool };

inline EncoderKind kind_of(const Encoder& e) { return static_cast<EncoderKind>(e.index()); }

inline std::string_view to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::Sse: return "sse";
    case EncoderKind::DeepSets: return "deepsets";
    case EncoderKind::SoftmaxPool: return "softmax_pool";
  }
  return "sse";
}

inline EncoderKind parse_encoder_kind(std::string_view text) {
  if (text == "sse") return EncoderKind::Sse;
  if (text == "deepsets") return EncoderKind::DeepSets;
  if (text == "softmax_pool") return EncoderKind::SoftmaxPool;
  throw ParameterError("unknown encoder kind '" + std::string(text) + "'");
}

/// Softmax pooling is the only family without the consistency guarantee.
inline bool is_mini_batch_consistent(EncoderKind kind) { return kind != EncoderKind::SoftmaxPool; }

inline std::size_t input_dim(const Encoder& e) {
  return std::visit(
      [](const auto& enc) -> std::size_t {
        using T = std::decay_t<decltype(enc)>;
        if constexpr (std::is_same_v<T, EncoderStack>) return enc.input_dim();
        else if constexpr (std::is_same_v<T, DeepSetsParams>) return enc.d;
        else return enc.d();
      },
      e);
}

inline OutputShape output_shape(const Encoder& e) {
  return std::visit(
      [](const auto& enc) -> OutputShape {
        using T = std::decay_t<decltype(enc)>;
        if constexpr (std::is_same_v<T, EncoderStack>) return validate_stack(enc);
        else if constexpr (std::is_same_v<T, DeepSetsParams>) return {1, enc.output_dim()};
        else return {enc.query.rows(), enc.d_hat()};
      },
      e);
}

inline void validate(const Encoder& e) {
  std::visit(
      [](const auto& enc) {
        using T = std::decay_t<decltype(enc)>;
        if constexpr (std::is_same_v<T, EncoderStack>) validate_stack(enc);
        else enc.validate();
      },
      e);
}

/// Encodes a set delivered as batches. Softmax pooling merges per-batch
/// outputs with `softmax_combine`, which is where it departs from the
/// full-set result.
inline Matrix encode(const Encoder& e, std::span<const Matrix> batches, std::uint64_t seed,
                     AggMode softmax_combine = AggMode::Mean) {
  return std::visit(
      [&](const auto& enc) -> Matrix {
        using T = std::decay_t<decltype(enc)>;
        if constexpr (std::is_same_v<T, EncoderStack>) return encode_stream(enc, batches, seed);
        else if constexpr (std::is_same_v<T, DeepSetsParams>) return deepsets_encode(batches, enc);
        else return softmax_pool_minibatch(batches, enc, softmax_combine);
      },
      e);
}

inline Matrix encode(const Encoder& e, const Matrix& X, std::uint64_t seed) {
  return encode(e, std::span<const Matrix>(&X, 1), seed);
}

namespace detail {

template <class Visitor>
void visit_linear(const std::string& prefix, auto& map, Visitor& f) {
  f(prefix + ".weight", map.weight.data());
  if (map.bias) f(prefix + ".bias", std::span(*map.bias));
}

template <class Visitor>
void visit_dense(const std::string& prefix, auto& layers, Visitor& f) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    visit_linear(prefix + "." + std::to_string(i), layers[i].map, f);
  }
}

}  // namespace detail

/// Calls f(name, span) for every trainable array in a fixed canonical order.
/// The taped forward passes create parameter leaves in this same order.
template <class EncoderT, class Visitor>
  requires std::is_same_v<std::remove_const_t<EncoderT>, Encoder>
void visit_params(EncoderT& e, Visitor&& f) {
  std::visit(
      [&](auto& enc) {
        using T = std::decay_t<decltype(enc)>;
        if constexpr (std::is_same_v<T, EncoderStack>) {
          for (std::size_t t = 0; t < enc.layers.size(); ++t) {
            auto& p = enc.layers[t].params;
            const std::string pre = "layer" + std::to_string(t);
            if (p.slot_config.mode == SlotMode::Deterministic) {
              f(pre + ".slots", p.slot_config.deterministic_slots->data());
            } else {
              f(pre + ".mu", std::span(*p.slot_config.mu));
              f(pre + ".log_sigma", std::span(*p.slot_config.log_sigma));
            }
            f(pre + ".norm.gain", std::span(p.slot_norm.gain));
            f(pre + ".norm.bias", std::span(p.slot_norm.bias));
            detail::visit_linear(pre + ".q", p.proj_q, f);
            detail::visit_linear(pre + ".k", p.proj_k, f);
            detail::visit_linear(pre + ".v", p.proj_v, f);
          }
        } else if constexpr (std::is_same_v<T, DeepSetsParams>) {
          detail::visit_dense("phi", enc.phi, f);
          detail::visit_dense("rho", enc.rho, f);
        } else {
          f(std::string("query"), enc.query.data());
          detail::visit_linear("k", enc.proj_k, f);
          detail::visit_linear("v", enc.proj_v, f);
        }
      },
      e);
}

inline std::size_t parameter_count(const Encoder& e) {
  std::size_t n = 0;
  visit_params(e, [&](const std::string&, auto values) { n += values.size(); });
  return n;
}

inline std::vector<double> flatten_params(const Encoder& e) {
  std::vector<double> flat;
  visit_params(e, [&](const std::string&, auto values) {
    flat.insert(flat.end(), values.begin(), values.end());
  });
  return flat;
}

inline void assign_params(Encoder& e, std::span<const double> flat) {
  if (flat.size() != parameter_count(e)) throw ShapeError("assign_params: length mismatch");
  std::size_t offset = 0;
  visit_params(e, [&](const std::string&, std::span<double> values) {
    std::copy(flat.begin() + offset, flat.begin() + offset + values.size(), values.begin());
    offset += values.size();
  });
}

inline std::vector<std::string> parameter_names(const Encoder& e) {
  std::vector<std::string> names;
  visit_params(e, [&](const std::string& name, auto values) {
    for (std::size_t i = 0; i < values.size(); ++i) names.push_back(name + "[" + std::to_string(i) + "]");
  });
  return names;
}

// ---------------------------------------------------------------------------
// Random construction

inline LinearMap random_linear(Rng& rng, std::size_t in, std::size_t out, bool with_bias = false) {
  // Scaled so that outputs have roughly unit variance for unit-variance inputs.
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix w(in, out);
  for (double& v : w.data()) v = scale * rng.next_normal();
  LinearMap m{std::move(w), std::nullopt};
  if (with_bias) {
    std::vector<double> b(out);
    for (double& v : b) v = 0.1 * rng.next_normal();
    m.bias = std::move(b);
  }
  return m;
}

struct SseLayerSpec {
  std::size_t K = 1;
  std::size_t h = 8;
  std::size_t d = 1;
  std::size_t d_hat = 8;
  AggMode mode = AggMode::Sum;
  SlotMode slot_mode = SlotMode::Random;
  bool bias = false;
};

inline StackLayer random_sse_layer(Rng& rng, const SseLayerSpec& spec) {
  SSEParams p;
  p.d = spec.d;
  p.d_hat = spec.d_hat;
  p.slot_config.mode = spec.slot_mode;
  p.slot_config.K = spec.K;
  p.slot_config.h = spec.h;
  if (spec.slot_mode == SlotMode::Deterministic) {
    p.slot_config.deterministic_slots = standard_normal(rng, spec.K, spec.h);
  } else {
    std::vector<double> mu(spec.h);
    for (double& v : mu) v = rng.next_normal();
    p.slot_config.mu = std::move(mu);
    p.slot_config.log_sigma = std::vector<double>(spec.h, 0.0);
  }
  p.slot_norm = LayerNormParams::unit(spec.h);
  p.proj_q = random_linear(rng, spec.h, spec.d_hat, spec.bias);
  p.proj_k = random_linear(rng, spec.d, spec.d_hat, spec.bias);
  p.proj_v = random_linear(rng, spec.d, spec.d_hat, spec.bias);
  return {std::move(p), spec.mode};
}

inline EncoderStack random_stack(Rng& rng, std::span<const SseLayerSpec> specs) {
  EncoderStack stack;
  for (const auto& s : specs) stack.layers.push_back(random_sse_layer(rng, s));
  validate_stack(stack);
  return stack;
}

/// Hidden widths list every layer boundary, e.g. {d, 64, 64} builds d->64->64.
inline std::vector<DenseLayer> random_dense(Rng& rng, std::span<const std::size_t> widths,
                                            bool relu_between, bool with_bias) {
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    layers.push_back({random_linear(rng, widths[i], widths[i + 1], with_bias),
                      relu_between && !last ? Activation::Relu : Activation::Identity});
  }
  return layers;
}

inline DeepSetsParams random_deepsets(Rng& rng, std::span<const std::size_t> phi_widths,
                                      AggMode pool, std::span<const std::size_t> rho_widths,
                                      bool with_bias = true) {
  DeepSetsParams p;
  p.d = phi_widths.front();
  p.phi = random_dense(rng, phi_widths, true, with_bias);
  p.pool = pool;
  p.rho = random_dense(rng, rho_widths, true, with_bias);
  p.validate();
  return p;
}

inline SoftmaxPoolParams random_softmax_pool(Rng& rng, std::size_t K, std::size_t d,
                                             std::size_t d_hat) {
  SoftmaxPoolParams p{standard_normal(rng, K, d_hat), random_linear(rng, d, d_hat),
                      random_linear(rng, d, d_hat)};
  p.validate();
  return p;
}

}  // namespace mbcset
