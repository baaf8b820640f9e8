#pragma once

// Gradients for every encoder family, a central-difference checker, Adam with
// decoupled weight decay, and mini-batch training on a synthetic
// cluster-centroid task: each support set is encoded and the encoding is
// regressed onto the cluster mean.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mbcset/autodiff.hpp"
#include "mbcset/encoder.hpp"
#include "mbcset/error.hpp"
#include "mbcset/mbc.hpp"
#include "mbcset/tensor.hpp"

namespace mbcset {

// One loss evaluation: several sets, each delivered as batches, and one
// target row per set (the flattened K_T x d_hat_T encoding it should match).
struct SetInstance {
  std::vector<std::vector<Matrix>> sets;
  Matrix targets;
};

namespace detail {

inline void check_instance(const Encoder& e, const SetInstance& inst) {
  if (inst.sets.empty()) throw ParameterError("loss: no sets in instance");
  if (inst.targets.rows() != inst.sets.size()) throw ShapeError("loss: one target row per set required");
  const OutputShape shape = output_shape(e);
  if (inst.targets.cols() != shape.rows * shape.cols) {
    throw ShapeError("loss: target width " + std::to_string(inst.targets.cols()) +
                     " does not match encoding size " + std::to_string(shape.rows * shape.cols));
  }
}

inline double squared_distance(const Matrix& a, std::span<const double> target) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double r = a.data()[i] - target[i];
    acc += r * r;
  }
  return acc;
}

struct TapedLinear {
  Var w;
  std::optional<Var> b;
};

inline TapedLinear bind_linear(Tape& t, const LinearMap& m) {
  TapedLinear out{t.parameter(m.weight.data(), m.weight.rows(), m.weight.cols()), std::nullopt};
  if (m.bias) out.b = t.parameter(*m.bias, 1, m.bias->size());
  return out;
}

inline Var apply(Tape& t, const TapedLinear& m, Var x) { return t.linear(x, m.w, m.b); }

struct TapedSseLayer {
  std::optional<Var> slots;
  std::optional<Var> mu;
  std::optional<Var> log_sigma;
  Var gain;
  Var bias;
  TapedLinear q, k, v;
};

struct TapedDense {
  TapedLinear map;
  Activation act;
};

// Leaves are created in visit_params order.
struct TapedParams {
  std::vector<TapedSseLayer> sse;
  std::vector<TapedDense> phi, rho;
  std::optional<Var> query;
  std::optional<TapedLinear> soft_k, soft_v;
};

inline TapedParams bind_params(Tape& t, const Encoder& e) {
  TapedParams out;
  std::visit(
      [&](const auto& enc) {
        using T = std::decay_t<decltype(enc)>;
        if constexpr (std::is_same_v<T, EncoderStack>) {
          for (const auto& layer : enc.layers) {
            const auto& p = layer.params;
            TapedSseLayer tl;
            if (p.slot_config.mode == SlotMode::Deterministic) {
              const Matrix& s = *p.slot_config.deterministic_slots;
              tl.slots = t.parameter(s.data(), s.rows(), s.cols());
            } else {
              tl.mu = t.parameter(*p.slot_config.mu, 1, p.slot_config.h);
              tl.log_sigma = t.parameter(*p.slot_config.log_sigma, 1, p.slot_config.h);
            }
            tl.gain = t.parameter(p.slot_norm.gain, 1, p.slot_config.h);
            tl.bias = t.parameter(p.slot_norm.bias, 1, p.slot_config.h);
            tl.q = bind_linear(t, p.proj_q);
            tl.k = bind_linear(t, p.proj_k);
            tl.v = bind_linear(t, p.proj_v);
            out.sse.push_back(tl);
          }
        } else if constexpr (std::is_same_v<T, DeepSetsParams>) {
          for (const auto& l : enc.phi) out.phi.push_back({bind_linear(t, l.map), l.act});
          for (const auto& l : enc.rho) out.rho.push_back({bind_linear(t, l.map), l.act});
        } else {
          out.query = t.parameter(enc.query.data(), enc.query.rows(), enc.query.cols());
          out.soft_k = bind_linear(t, enc.proj_k);
          out.soft_v = bind_linear(t, enc.proj_v);
        }
      },
      e);
  return out;
}

inline Var taped_slots(Tape& t, const TapedSseLayer& tl, const SSEParams& p, std::uint64_t seed,
                       SlotDraw draw) {
  if (tl.slots) return *tl.slots;
  const std::size_t K = p.slot_config.K;
  const std::size_t h = p.slot_config.h;
  Matrix noise = draw == SlotDraw::FreezeMean ? Matrix(K, h) : slot_noise(seed, K, h);
  return t.reparameterize(*tl.mu, *tl.log_sigma, std::move(noise));
}

inline Var merge_and_finalize(Tape& t, const std::vector<Var>& partials, std::size_t count,
                              AggMode mode) {
  Var state = partials.front();
  for (std::size_t i = 1; i < partials.size(); ++i) state = t.merge(state, partials[i], mode);
  if (mode == AggMode::Mean) state = t.divide(state, static_cast<double>(count));
  return state;
}

inline Var taped_sse_layer(Tape& t, const TapedSseLayer& tl, const StackLayer& layer,
                           const std::vector<Var>& batches, std::uint64_t seed, SlotDraw draw) {
  const SSEParams& p = layer.params;
  const Var slots = taped_slots(t, tl, p, seed, draw);
  const Var normed = t.layer_norm(slots, tl.gain, tl.bias, p.slot_norm.epsilon);
  const Var query = apply(t, tl.q, normed);
  std::vector<Var> partials;
  std::size_t count = 0;
  for (Var x : batches) {
    const Var keys = apply(t, tl.k, x);
    const Var logits = t.scale(t.matmul_transposed(keys, query), attention_scale(p.d_hat));
    const Var weights = t.slot_normalize(t.attention_weights(logits));
    const Var values = apply(t, tl.v, x);
    partials.push_back(t.pool(weights, values, layer.mode));
    count += t.value(x).rows();
  }
  return merge_and_finalize(t, partials, count, layer.mode);
}

inline Var taped_dense(Tape& t, const std::vector<TapedDense>& layers, Var x) {
  for (const auto& l : layers) {
    x = apply(t, l.map, x);
    if (l.act == Activation::Relu) x = t.relu(x);
  }
  return x;
}

}  // namespace detail

/// Records the encoding of one batched set on the tape.
inline Var taped_encode(Tape& t, const detail::TapedParams& tp, const Encoder& e,
                        const std::vector<Matrix>& batches, std::uint64_t seed) {
  std::vector<Var> inputs;
  for (const auto& b : batches) {
    if (b.rows() > 0) inputs.push_back(t.constant(b));
  }
  if (inputs.empty()) throw EmptySetError("encode: empty set");
  return std::visit(
      [&](const auto& enc) -> Var {
        using T = std::decay_t<decltype(enc)>;
        if constexpr (std::is_same_v<T, EncoderStack>) {
          Var x = detail::taped_sse_layer(t, tp.sse[0], enc.layers[0], inputs, seed, enc.draw);
          for (std::size_t l = 1; l < enc.layers.size(); ++l) {
            x = detail::taped_sse_layer(t, tp.sse[l], enc.layers[l], {x}, layer_seed(seed, l), enc.draw);
          }
          return x;
        } else if constexpr (std::is_same_v<T, DeepSetsParams>) {
          std::vector<Var> partials;
          std::size_t count = 0;
          for (Var x : inputs) {
            const Var features = detail::taped_dense(t, tp.phi, x);
            const std::size_t n = t.value(x).rows();
            partials.push_back(t.pool(t.constant(Matrix(n, 1, 1.0)), features, enc.pool));
            count += n;
          }
          return detail::taped_dense(t, tp.rho, detail::merge_and_finalize(t, partials, count, enc.pool));
        } else {
          std::vector<Var> outputs;
          for (Var x : inputs) {
            const Var keys = detail::apply(t, *tp.soft_k, x);
            const Var logits = t.scale(t.matmul_transposed(*tp.query, keys), attention_scale(enc.d_hat()));
            const Var values = detail::apply(t, *tp.soft_v, x);
            outputs.push_back(t.matmul(t.softmax_rows(logits), values));
          }
          return detail::merge_and_finalize(t, outputs, outputs.size(), AggMode::Mean);
        }
      },
      e);
}

/// Mean over sets of the squared Euclidean distance between the flattened
/// encoding and its target. Computed without a tape.
inline double evaluate_loss(const Encoder& e, const SetInstance& inst, std::uint64_t seed) {
  detail::check_instance(e, inst);
  double total = 0.0;
  for (std::size_t c = 0; c < inst.sets.size(); ++c) {
    total += detail::squared_distance(encode(e, inst.sets[c], seed), inst.targets.row(c));
  }
  return total / static_cast<double>(inst.sets.size());
}

/// Same loss recorded on `tape`; parameter leaves follow visit_params order.
inline Var forward_loss(Tape& tape, const Encoder& e, const SetInstance& inst, std::uint64_t seed) {
  detail::check_instance(e, inst);
  const detail::TapedParams tp = detail::bind_params(tape, e);
  std::vector<Var> terms;
  for (std::size_t c = 0; c < inst.sets.size(); ++c) {
    const Var enc = taped_encode(tape, tp, e, inst.sets[c], seed);
    terms.push_back(tape.squared_distance(enc, Matrix::row_vector(inst.targets.row(c))));
  }
  return tape.divide(tape.sum_scalars(terms), static_cast<double>(inst.sets.size()));
}

struct LossGradient {
  double loss = 0.0;
  std::vector<double> gradient;
  std::vector<std::size_t> signature;
};

inline LossGradient loss_and_gradient(const Encoder& e, const SetInstance& inst, std::uint64_t seed) {
  Tape tape;
  const Var loss = forward_loss(tape, e, inst, seed);
  tape.backward(loss);
  return {tape.value(loss)(0, 0), tape.parameter_gradient(), tape.selection_signature()};
}

inline std::vector<std::size_t> selection_signature(const Encoder& e, const SetInstance& inst,
                                                    std::uint64_t seed) {
  Tape tape;
  forward_loss(tape, e, inst, seed);
  return tape.selection_signature();
}

// ---------------------------------------------------------------------------
// Gradient check

/// Relative error with a floor on the denominator: gradients smaller than the
/// floor are compared in absolute terms, where central differences cannot
/// resolve a relative error.
inline constexpr double kGradCheckFloor = 1e-3;

inline double gradient_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> worst;           // largest errors first
  std::vector<std::string> nondifferentiable;  // kinks within +-step, excluded
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

inline GradCheckReport grad_check(const Encoder& e, const SetInstance& inst, std::uint64_t seed,
                                  double step = 1e-5, double tolerance = 1e-6,
                                  std::size_t worst_count = 5) {
  if (!(step > 0.0)) throw ParameterError("grad_check: step must be positive");
  const LossGradient base = loss_and_gradient(e, inst, seed);
  const std::vector<std::string> names = parameter_names(e);
  Encoder probe = e;
  std::vector<double> theta = flatten_params(e);
  GradCheckReport report;
  report.tolerance = tolerance;
  std::vector<GradCheckEntry> entries;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double original = theta[j];
    theta[j] = original + step;
    assign_params(probe, theta);
    const double plus = evaluate_loss(probe, inst, seed);
    const bool same_plus = selection_signature(probe, inst, seed) == base.signature;
    theta[j] = original - step;
    assign_params(probe, theta);
    const double minus = evaluate_loss(probe, inst, seed);
    const bool same_minus = selection_signature(probe, inst, seed) == base.signature;
    theta[j] = original;
    if (!same_plus || !same_minus) {
      report.nondifferentiable.push_back(names[j]);
      continue;
    }
    const double numeric = (plus - minus) / (2.0 * step);
    GradCheckEntry entry{names[j], j, base.gradient[j], numeric,
                         gradient_relative_error(base.gradient[j], numeric)};
    report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
    entries.push_back(std::move(entry));
    ++report.checked;
  }
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
  entries.resize(std::min(entries.size(), worst_count));
  report.worst = std::move(entries);
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainState {
  std::vector<double> params;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  std::size_t step = 0;
  AdamConfig adam;
  Rng rng{0};

  TrainState(std::vector<double> initial, AdamConfig config, std::uint64_t seed)
      : params(std::move(initial)), adam_m(params.size(), 0.0), adam_v(params.size(), 0.0),
        adam(config), rng(seed) {}
};

/// One Adam step; weight decay shrinks the parameters directly instead of
/// entering the gradient.
inline void adam_step(TrainState& s, std::span<const double> grad) {
  if (grad.size() != s.params.size()) throw ShapeError("adam_step: gradient length mismatch");
  ++s.step;
  const AdamConfig& c = s.adam;
  const double t = static_cast<double>(s.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    s.adam_m[i] = c.beta1 * s.adam_m[i] + (1.0 - c.beta1) * grad[i];
    s.adam_v[i] = c.beta2 * s.adam_v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = s.adam_m[i] / correction1;
    const double v_hat = s.adam_v[i] / correction2;
    const double update = m_hat / (std::sqrt(v_hat) + c.epsilon);
    s.params[i] = s.params[i] - c.lr * c.weight_decay * s.params[i] - c.lr * update;
  }
}

// ---------------------------------------------------------------------------
// Synthetic cluster-centroid task

enum class TargetKind {
  ClusterMean,  // the true center the support set was drawn around
  SetMean,      // the empirical mean of the encoded elements
};

struct CentroidTask {
  std::size_t way = 5;     // classes per episode
  std::size_t shot = 256;  // support set size per class
  std::size_t d = 4;
  std::size_t query = 16;  // query points per class, for accuracy only
  double spread = 1.0;     // within-cluster standard deviation
  double separation = 3.0; // standard deviation of cluster centers
  TargetKind target = TargetKind::ClusterMean;

  void validate() const {
    if (way < 2) throw ParameterError("centroid task: way must be >= 2");
    if (shot < 1) throw ParameterError("centroid task: shot must be >= 1");
    if (d < 1) throw ParameterError("centroid task: d must be >= 1");
    if (!(spread > 0.0) || !(separation > 0.0)) throw ParameterError("centroid task: scales must be positive");
  }
};

struct Episode {
  std::vector<Matrix> support;  // way sets of shot x d
  Matrix centers;               // way x d
  Matrix queries;               // (way * query) x d
  std::vector<std::size_t> labels;
};

inline Episode sample_episode(const CentroidTask& task, Rng& rng) {
  task.validate();
  Episode ep;
  ep.centers = Matrix(task.way, task.d);
  for (double& v : ep.centers.data()) v = task.separation * rng.next_normal();
  const std::vector<double> sigma(task.d, task.spread);
  for (std::size_t c = 0; c < task.way; ++c) {
    ep.support.push_back(sample_gaussian(rng, task.shot, task.d, ep.centers.row(c), sigma));
  }
  std::vector<Matrix> queries;
  for (std::size_t c = 0; c < task.way; ++c) {
    queries.push_back(sample_gaussian(rng, task.query, task.d, ep.centers.row(c), sigma));
    ep.labels.insert(ep.labels.end(), task.query, c);
  }
  ep.queries = vstack(queries);
  return ep;
}

inline std::vector<double> row_mean(const Matrix& X) {
  std::vector<double> m = column_sums(X);
  for (double& v : m) v /= static_cast<double>(X.rows());
  return m;
}

/// Builds the loss instance for given per-class element subsets, each split
/// into batches of at most `chunk` rows (0: one batch).
inline SetInstance make_instance(const Episode& ep, const CentroidTask& task,
                                 const std::vector<Matrix>& subsets, std::size_t chunk = 0) {
  SetInstance inst;
  inst.targets = Matrix(subsets.size(), task.d);
  for (std::size_t c = 0; c < subsets.size(); ++c) {
    inst.sets.push_back(chunk == 0 ? std::vector<Matrix>{subsets[c]} : chunk_rows(subsets[c], chunk));
    const std::vector<double> target =
        task.target == TargetKind::ClusterMean ? std::vector<double>(ep.centers.row(c).begin(), ep.centers.row(c).end())
                                               : row_mean(subsets[c]);
    std::copy(target.begin(), target.end(), inst.targets.row(c).begin());
  }
  return inst;
}

/// Random `size`-element subsets of every support set.
inline std::vector<Matrix> sample_subsets(const Episode& ep, std::size_t size, Rng& rng) {
  std::vector<Matrix> out;
  for (const auto& s : ep.support) {
    auto perm = random_permutation(rng, s.rows());
    perm.resize(std::min(size, s.rows()));
    out.push_back(select_rows(s, perm));
  }
  return out;
}

/// Leading `size` rows of every support set (rows are i.i.d., so this is a
/// random subset and nested across sizes).
inline std::vector<Matrix> leading_subsets(const Episode& ep, std::size_t size) {
  std::vector<Matrix> out;
  for (const auto& s : ep.support) {
    std::vector<std::size_t> idx(std::min(size, s.rows()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    out.push_back(select_rows(s, idx));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t subset = 16;  // elements per support set seen at each step
  AdamConfig adam;
  std::size_t eval_every = 100;
  std::size_t eval_episodes = 8;
  std::uint64_t seed = 1;
};

struct HistoryRow {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean training loss since the previous row
  double eval_loss_full = 0.0;
  double eval_loss_partitioned = 0.0;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  TrainState state;
};

inline constexpr std::uint64_t kEvalSalt = 0x5eed0fe7a1ULL;

struct HeldOut {
  std::vector<Episode> episodes;
  std::uint64_t slot_seed;
};

inline HeldOut make_held_out(const CentroidTask& task, std::size_t episodes, std::uint64_t seed) {
  Rng rng(seed ^ kEvalSalt);
  HeldOut h{{}, rng.next_u64()};
  for (std::size_t i = 0; i < episodes; ++i) h.episodes.push_back(sample_episode(task, rng));
  return h;
}

struct SetSizeEval {
  std::size_t set_size = 0;
  double loss_full = 0.0;         // each set encoded in one pass
  double loss_partitioned = 0.0;  // same sets streamed in chunks
  double accuracy = 0.0;          // nearest-predicted-centroid query accuracy
};

inline double centroid_accuracy(const Encoder& e, const Episode& ep, const std::vector<Matrix>& subsets,
                                std::uint64_t seed) {
  std::vector<Matrix> centroids;
  for (const auto& s : subsets) centroids.push_back(encode(e, s, seed));
  if (centroids.front().size() != ep.queries.cols()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t correct = 0;
  for (std::size_t q = 0; q < ep.queries.rows(); ++q) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double dist = detail::squared_distance(centroids[c], ep.queries.row(q));
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    correct += best == ep.labels[q] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(ep.queries.rows());
}

inline SetSizeEval evaluate_at_size(const Encoder& e, const CentroidTask& task, const HeldOut& held,
                                    std::size_t size, std::size_t chunk) {
  SetSizeEval out;
  out.set_size = size;
  for (const auto& ep : held.episodes) {
    const auto subsets = leading_subsets(ep, size);
    out.loss_full += evaluate_loss(e, make_instance(ep, task, subsets), held.slot_seed);
    out.loss_partitioned += evaluate_loss(e, make_instance(ep, task, subsets, chunk), held.slot_seed);
    out.accuracy += centroid_accuracy(e, ep, subsets, held.slot_seed);
  }
  const double n = static_cast<double>(held.episodes.size());
  out.loss_full /= n;
  out.loss_partitioned /= n;
  out.accuracy /= n;
  return out;
}

inline std::vector<SetSizeEval> evaluate_set_sizes(const Encoder& e, const CentroidTask& task,
                                                   std::span<const std::size_t> sizes,
                                                   std::size_t episodes, std::uint64_t seed,
                                                   std::size_t chunk) {
  const HeldOut held = make_held_out(task, episodes, seed);
  std::vector<SetSizeEval> rows;
  for (std::size_t s : sizes) rows.push_back(evaluate_at_size(e, task, held, s, chunk));
  return rows;
}

/// Trains on random `subset`-element slices of each support set. Random
/// slots are resampled at every step from the state's seed stream.
inline TrainResult train_minibatch(Encoder& encoder, const CentroidTask& task, const TrainConfig& config) {
  task.validate();
  validate(encoder);
  if (config.subset < 1 || config.subset >= task.shot) {
    throw ParameterError("train: subset size must satisfy 1 <= subset < set size (" +
                         std::to_string(config.subset) + " vs " + std::to_string(task.shot) + ")");
  }
  TrainResult result{{}, TrainState(flatten_params(encoder), config.adam, config.seed)};
  TrainState& state = result.state;
  const HeldOut held = make_held_out(task, config.eval_episodes, config.seed);
  double window = 0.0;
  std::size_t window_n = 0;
  auto record = [&](std::size_t step) {
    const SetSizeEval ev = evaluate_at_size(encoder, task, held, task.shot, config.subset);
    result.history.push_back({step, window_n ? window / static_cast<double>(window_n) : ev.loss_full,
                              ev.loss_full, ev.loss_partitioned});
    window = 0.0;
    window_n = 0;
  };
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const Episode ep = sample_episode(task, state.rng);
    const SetInstance inst = make_instance(ep, task, sample_subsets(ep, config.subset, state.rng));
    const std::uint64_t slot_seed = state.rng.next_u64();
    const LossGradient lg = loss_and_gradient(encoder, inst, slot_seed);
    if (!std::isfinite(lg.loss)) throw TrainingError("loss is not finite", step);
    if (!all_finite(lg.gradient)) throw TrainingError("gradient is not finite", step);
    adam_step(state, lg.gradient);
    assign_params(encoder, state.params);
    window += lg.loss;
    ++window_n;
    if (config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps)) record(step);
  }
  return result;
}

}  // namespace mbcset
