#pragma once

// Stacks of slot set encoders. Layer 1 streams over the raw set; every later
// layer encodes the previous layer's finalized K x d_hat slot matrix as a set.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mbcset/error.hpp"
#include "mbcset/sse.hpp"
#include "mbcset/tensor.hpp"

namespace mbcset {

struct StackLayer {
  SSEParams params;
  AggMode mode = AggMode::Sum;
};

struct EncoderStack {
  std::vector<StackLayer> layers;
  SlotDraw draw = SlotDraw::Sample;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().params.d; }
};

struct OutputShape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  friend bool operator==(const OutputShape&, const OutputShape&) = default;
};

inline OutputShape validate_stack(const EncoderStack& stack, bool require_single_vector = false) {
  if (stack.layers.empty()) throw ConfigError("encoder stack has no layers");
  for (std::size_t t = 0; t < stack.layers.size(); ++t) {
    try {
      stack.layers[t].params.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("layer " + std::to_string(t + 1) + ": " + e.what());
    }
    if (t > 0) {
      const auto& prev = stack.layers[t - 1].params;
      const auto& cur = stack.layers[t].params;
      if (cur.d != prev.d_hat) {
        throw ConfigError("layers " + std::to_string(t) + " -> " + std::to_string(t + 1) +
                          ": output width d_hat = " + std::to_string(prev.d_hat) +
                          " does not match input width d = " + std::to_string(cur.d));
      }
    }
  }
  const auto& last = stack.layers.back().params;
  if (require_single_vector && last.slot_config.K != 1) {
    throw ConfigError("final layer must have K = 1 for a single-vector encoding, got K = " +
                      std::to_string(last.slot_config.K));
  }
  return {last.slot_config.K, last.d_hat};
}

/// Slot seed for layer t (0-based); layer 0 uses the session seed.
inline std::uint64_t layer_seed(std::uint64_t seed, std::size_t layer) { return seed + layer; }

inline PreparedSlots prepare_layer_slots(const EncoderStack& stack, std::size_t layer,
                                         std::uint64_t seed) {
  const auto& params = stack.layers.at(layer).params;
  return prepare_slots(draw_slots(params.slot_config, layer_seed(seed, layer), stack.draw), params);
}

/// Runs layers 2..T on layer 1's finalized slots.
inline Matrix apply_upper_layers(const EncoderStack& stack, Matrix slots, std::uint64_t seed) {
  for (std::size_t t = 1; t < stack.layers.size(); ++t) {
    const auto& layer = stack.layers[t];
    slots = encode_full(slots, layer.params, layer.mode, layer_seed(seed, t), stack.draw);
  }
  return slots;
}

// Bounded-memory streaming encoder: holds only layer 1's K x d_hat partial and
// the element count.
class StreamEncoder {
 public:
  StreamEncoder(const EncoderStack& stack, std::uint64_t seed)
      : stack_((validate_stack(stack), &stack)), seed_(seed),
        slots_(prepare_layer_slots(stack, 0, seed)),
        state_(init_state(stack.layers.front().mode, slots_.query.rows(),
                          stack.layers.front().params.d_hat)) {}

  // Resumes from persisted slots and state.
  StreamEncoder(const EncoderStack& stack, std::uint64_t seed, PreparedSlots slots,
                AggregateState state)
      : stack_((validate_stack(stack), &stack)), seed_(seed), slots_(std::move(slots)),
        state_(std::move(state)) {}

  void ingest(const Matrix& batch) {
    if (batch.rows() == 0) return;
    const auto& first = stack_->layers.front();
    state_ = merge(state_, encode_batch(batch, slots_, first.params, first.mode));
  }

  const AggregateState& state() const noexcept { return state_; }
  const PreparedSlots& slots() const noexcept { return slots_; }

  Matrix finalize() const { return apply_upper_layers(*stack_, mbcset::finalize(state_), seed_); }

 private:
  const EncoderStack* stack_;
  std::uint64_t seed_;
  PreparedSlots slots_;
  AggregateState state_;
};

inline Matrix encode_stream(const EncoderStack& stack, std::span<const Matrix> batches,
                            std::uint64_t seed) {
  validate_stack(stack);
  StreamEncoder encoder(stack, seed);
  for (const auto& batch : batches) encoder.ingest(batch);
  if (!encoder.state().initialized()) throw EmptySetError("encode_stream: no elements in stream");
  return encoder.finalize();
}

inline Matrix encode_stream(const EncoderStack& stack, const Matrix& X, std::uint64_t seed) {
  return encode_stream(stack, std::span<const Matrix>(&X, 1), seed);
}

}  // namespace mbcset
