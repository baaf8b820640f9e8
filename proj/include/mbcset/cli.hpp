#pragma once

// Command implementations behind the mbcset executable. Each command takes
// its options as a struct, writes results to `out`, diagnostics to `err`, and
// returns the process exit status.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mbcset/encoder.hpp"
#include "mbcset/error.hpp"
#include "mbcset/io.hpp"
#include "mbcset/mbc.hpp"
#include "mbcset/store.hpp"
#include "mbcset/training.hpp"

namespace mbcset::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;  // a check ran and did not pass
inline constexpr int kExitError = 2;   // usage, data, or state error

// ---------------------------------------------------------------------------
// Model construction

struct SseShape {
  std::size_t d = 4;
  std::size_t K = 4;
  std::size_t h = 8;
  std::size_t d_hat = 8;
  std::size_t depth = 1;     // streaming layer plus depth - 1 upper layers, d_hat doubling
  std::size_t readout = 0;   // nonzero: final K = 1 layer of this width in Sum mode
  AggMode mode = AggMode::Mean;
  SlotMode slots = SlotMode::Random;
  bool bias = false;
};

inline EncoderStack build_sse(Rng& rng, const SseShape& s) {
  if (s.depth < 1) throw ParameterError("depth must be >= 1");
  std::vector<SseLayerSpec> specs;
  std::size_t in = s.d;
  std::size_t width = s.d_hat;
  for (std::size_t t = 0; t < s.depth; ++t) {
    specs.push_back({s.K, s.h, in, width, t == 0 ? s.mode : AggMode::Mean, s.slots, s.bias});
    in = width;
    width *= 2;
  }
  if (s.readout > 0) specs.push_back({1, s.h, in, s.readout, AggMode::Sum, s.slots, s.bias});
  return random_stack(rng, specs);
}

/// phi: d -> hidden -> hidden (relu between), rho: hidden -> out.
inline DeepSetsParams build_deepsets(Rng& rng, std::size_t d, std::size_t hidden, std::size_t out,
                                     AggMode pool) {
  const std::size_t phi[] = {d, hidden, hidden};
  const std::size_t rho[] = {hidden, out};
  return random_deepsets(rng, phi, pool, rho);
}

struct MakeModelOptions {
  std::string kind = "sse";
  SseShape sse;
  std::size_t hidden = 12;  // deepsets
  std::size_t out_dim = 0;  // deepsets head width; 0 means d
  std::uint64_t seed = 1;
  std::string out;
};

inline ModelFile make_model(const MakeModelOptions& o) {
  Rng rng(o.seed);
  ModelFile m{EncoderStack{}, {}, {}};
  m.task.d = o.sse.d;
  switch (parse_encoder_kind(o.kind)) {
    case EncoderKind::Sse: m.encoder = build_sse(rng, o.sse); break;
    case EncoderKind::DeepSets:
      m.encoder = build_deepsets(rng, o.sse.d, o.hidden, o.out_dim ? o.out_dim : o.sse.d, o.sse.mode);
      break;
    case EncoderKind::SoftmaxPool: m.encoder = random_softmax_pool(rng, o.sse.K, o.sse.d, o.sse.d_hat); break;
  }
  return m;
}

inline int cmd_make_model(const MakeModelOptions& o, std::ostream& out, std::ostream&) {
  const std::string text = serialize_model(make_model(o));
  if (o.out.empty()) out << text;
  else atomic_write(o.out, text);
  return kExitOk;
}

inline ModelFile load_model(const std::string& path) { return parse_model(read_file(path)); }

// ---------------------------------------------------------------------------
// Streaming sessions

namespace detail {

// The model with the session's first-layer aggregation in place.
inline Encoder with_first_mode(Encoder e, AggMode mode) {
  if (auto* s = std::get_if<EncoderStack>(&e)) s->layers.front().mode = mode;
  if (auto* d = std::get_if<DeepSetsParams>(&e)) d->pool = mode;
  return e;
}

inline void require_streamable(const Encoder& e) {
  if (kind_of(e) == EncoderKind::SoftmaxPool) {
    throw SessionError("softmax_pool has no streaming state; its per-batch outputs do not merge consistently");
  }
}

inline void require_fingerprint(const SessionFile& s, const Encoder& e) {
  const std::string fp = model_fingerprint(e);
  if (s.model_fingerprint != fp) {
    throw SessionError("session was created for model " + s.model_fingerprint + ", got model " + fp);
  }
}

}  // namespace detail

struct InitOptions {
  std::string model;
  std::string session;
  std::uint64_t seed = 0;
  std::optional<AggMode> mode;
};

inline SessionFile new_session(const Encoder& e, std::uint64_t seed, std::optional<AggMode> mode) {
  detail::require_streamable(e);
  validate(e);
  SessionFile s;
  s.model_fingerprint = model_fingerprint(e);
  s.kind = kind_of(e);
  s.seed = seed;
  const AggMode m = mode.value_or(first_layer_mode(e));
  if (const auto* stack = std::get_if<EncoderStack>(&e)) {
    const auto& first = stack->layers.front().params;
    const SlotSample sample = draw_slots(first.slot_config, layer_seed(seed, 0), stack->draw);
    s.slots = sample.slots;
    s.slots_normed = layer_norm(first.slot_norm, sample.slots);
    s.state = init_state(m, sample.slots.rows(), first.d_hat);
  } else {
    s.state = init_state(m, 1, std::get<DeepSetsParams>(e).pooled_dim());
  }
  return s;
}

inline int cmd_init(const InitOptions& o, std::ostream&, std::ostream& err) {
  const ModelFile model = load_model(o.model);
  const SessionFile s = new_session(model.encoder, o.seed, o.mode);
  FileLock lock(o.session);
  atomic_write(o.session, serialize_session(s));
  err << "initialized session " << o.session << " (" << to_string(s.state.mode) << ", seed " << o.seed
      << ")\n";
  return kExitOk;
}

/// Folds one batch into a session state.
inline SessionFile ingest_batch(const Encoder& e, SessionFile s, const Matrix& batch) {
  detail::require_streamable(e);
  detail::require_fingerprint(s, e);
  if (batch.rows() == 0) throw DataError("batch is empty");
  if (batch.cols() != input_dim(e)) {
    throw DataError("batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                    std::to_string(input_dim(e)));
  }
  if (const auto* stack = std::get_if<EncoderStack>(&e)) {
    if (!s.slots_normed) throw SessionError("session has no slots");
    const auto& first = stack->layers.front().params;
    const PreparedSlots slots = prepare_normed_slots(*s.slots_normed, first);
    s.state = merge(s.state, encode_batch(batch, slots, first, s.state.mode));
  } else {
    const auto& ds = std::get<DeepSetsParams>(e);
    DeepSetsParams run = ds;
    run.pool = s.state.mode;
    s.state = merge(s.state, deepsets_partial(batch, run));
  }
  return s;
}

inline Matrix finalize_session(const Encoder& e, const SessionFile& s) {
  detail::require_streamable(e);
  detail::require_fingerprint(s, e);
  const Encoder run = detail::with_first_mode(e, s.state.mode);
  if (const auto* stack = std::get_if<EncoderStack>(&run)) {
    return apply_upper_layers(*stack, finalize(s.state), s.seed);
  }
  return deepsets_head(std::get<DeepSetsParams>(run), s.state);
}

struct IngestOptions {
  std::string model;
  std::string session;
  std::vector<std::string> batches;
};

inline int cmd_ingest(const IngestOptions& o, std::ostream&, std::ostream& err) {
  const ModelFile model = load_model(o.model);
  FileLock lock(o.session);
  SessionFile s = parse_session(read_file(o.session));
  for (const auto& path : o.batches) {
    Matrix batch;
    try {
      batch = parse_batch_csv(read_file(path), input_dim(model.encoder));
    } catch (const DataError& e) {
      throw DataError(path + ": " + e.what());
    }
    s = ingest_batch(model.encoder, std::move(s), batch);
    atomic_write(o.session, serialize_session(s));
    err << "ingested " << batch.rows() << " rows from " << path << " (total " << s.state.count << ")\n";
  }
  return kExitOk;
}

struct FinalizeOptions {
  std::string model;
  std::string session;
  std::string out;
};

inline int cmd_finalize(const FinalizeOptions& o, std::ostream& out, std::ostream&) {
  const ModelFile model = load_model(o.model);
  const SessionFile s = parse_session(read_file(o.session));
  const std::string row = format_csv_row(finalize_session(model.encoder, s).data()) + "\n";
  if (o.out.empty()) out << row;
  else atomic_write(o.out, row);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Consistency checks

struct VerifyOptions {
  std::string model;
  std::string data;
  std::size_t partitions = 100;
  std::uint64_t seed = 0;
  std::optional<double> tolerance;
};

inline int cmd_verify_mbc(const VerifyOptions& o, std::ostream& out, std::ostream& err) {
  const ModelFile model = load_model(o.model);
  const Matrix X = parse_batch_csv(read_file(o.data), input_dim(model.encoder));
  if (X.rows() == 0) throw DataError(o.data + ": no rows");
  if (o.partitions < 1) throw ParameterError("--partitions must be >= 1");
  const AggMode mode = first_layer_mode(model.encoder);
  const double tol = o.tolerance.value_or(default_mbc_tolerance(mode));
  const MbcReport r = verify_mbc(model.encoder, X, o.partitions, o.seed, tol);
  out << "encoder_kind,mode,partitions,max_discrepancy,tolerance,result\n"
      << to_string(kind_of(model.encoder)) << ',' << to_string(mode) << ',' << r.partitions_checked << ','
      << format_double(r.max_discrepancy) << ',' << format_double(tol) << ','
      << (r.passed ? "pass" : "fail") << '\n';
  if (!r.passed) err << "mini-batch consistency violated: max discrepancy " << r.max_discrepancy << '\n';
  return r.passed ? kExitOk : kExitFailed;
}

struct DemoOptions {
  std::size_t instances = 100;
  std::size_t n = 64;
  std::size_t d = 4;
  std::uint64_t seed = 0;
  std::string out;
};

/// Partitioned-vs-full discrepancy of fresh random encoders of every kind as
/// the number of partitions grows.
inline std::string demo_inconsistency(const DemoOptions& o, std::ostream& err) {
  if (o.n < 16) throw ParameterError("demo-inconsistency needs n >= 16");
  Rng rng(o.seed);
  std::ostringstream csv;
  csv << "instance,partitions,sse,deepsets,softmax_pool\n";
  const std::size_t counts[] = {1, 2, 4, 8, 16};
  std::vector<double> soft_gaps;
  double worst_consistent = 0.0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    SseShape shape;
    shape.d = o.d;
    const Encoder encoders[] = {build_sse(rng, shape), build_deepsets(rng, o.d, 12, o.d, AggMode::Mean),
                                random_softmax_pool(rng, 4, o.d, 8)};
    Matrix X(o.n, o.d);
    for (double& v : X.data()) v = rng.next_normal();
    const std::uint64_t slot_seed = rng.next_u64();
    for (std::size_t p : counts) {
      const auto parts = split_rows(X, random_partition(rng, o.n, p));
      csv << i << ',' << p;
      for (std::size_t k = 0; k < 3; ++k) {
        const double gap = max_relative_discrepancy(encode(encoders[k], parts, slot_seed),
                                                    encode(encoders[k], X, slot_seed));
        csv << ',' << format_double(gap);
        if (k == 2 && p > 1) soft_gaps.push_back(gap);
        if (k < 2) worst_consistent = std::max(worst_consistent, gap);
      }
      csv << '\n';
    }
  }
  if (!soft_gaps.empty()) {
    std::sort(soft_gaps.begin(), soft_gaps.end());
    err << "softmax_pool median discrepancy " << soft_gaps[soft_gaps.size() / 2]
        << "; sse/deepsets worst " << worst_consistent << '\n';
  }
  return csv.str();
}

inline int cmd_demo_inconsistency(const DemoOptions& o, std::ostream& out, std::ostream& err) {
  const std::string csv = demo_inconsistency(o, err);
  if (o.out.empty()) out << csv;
  else atomic_write(o.out, csv);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Training and evaluation

namespace detail {

inline void require_centroid_shape(const ModelFile& m) {
  const OutputShape shape = output_shape(m.encoder);
  if (input_dim(m.encoder) != m.task.d || shape.rows * shape.cols != m.task.d) {
    throw ConfigError("centroid task needs an encoder mapping d = " + std::to_string(m.task.d) +
                      " inputs to a " + std::to_string(m.task.d) + "-wide encoding");
  }
}

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream csv;
  csv << "step,train_loss,eval_loss_full,eval_loss_partitioned\n";
  for (const auto& r : rows) {
    csv << r.step << ',' << format_double(r.train_loss) << ',' << format_double(r.eval_loss_full) << ','
        << format_double(r.eval_loss_partitioned) << '\n';
  }
  return csv.str();
}

}  // namespace detail

struct TrainOptions {
  std::string model;
  std::string out;      // trained model
  std::string history;  // CSV; empty means stdout
  std::optional<std::size_t> steps;
  std::optional<std::size_t> subset;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

inline int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  ModelFile m = load_model(o.model);
  if (o.steps) m.train.steps = *o.steps;
  if (o.subset) m.train.subset = *o.subset;
  if (o.lr) m.train.adam.lr = *o.lr;
  if (o.seed) m.train.seed = *o.seed;
  detail::require_centroid_shape(m);
  const TrainResult r = train_minibatch(m.encoder, m.task, m.train);
  if (!o.out.empty()) atomic_write(o.out, serialize_model(m));
  const std::string csv = detail::history_csv(r.history);
  if (o.history.empty()) out << csv;
  else atomic_write(o.history, csv);
  if (!r.history.empty()) {
    err << "trained " << m.train.steps << " steps; held-out loss " << r.history.back().eval_loss_full << '\n';
  }
  return kExitOk;
}

struct GradcheckOptions {
  std::string model;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-6;
  std::size_t sets = 2;
  std::size_t n = 8;
  std::size_t partitions = 2;
};

inline SetInstance random_instance(const Encoder& e, std::size_t sets, std::size_t n, std::size_t partitions,
                                   Rng& rng) {
  if (sets < 1 || n < 1 || partitions < 1 || partitions > n) {
    throw ParameterError("need sets >= 1 and 1 <= partitions <= n");
  }
  SetInstance inst;
  const OutputShape shape = output_shape(e);
  for (std::size_t s = 0; s < sets; ++s) {
    Matrix X(n, input_dim(e));
    for (double& v : X.data()) v = rng.next_normal();
    inst.sets.push_back(split_rows(X, random_partition(rng, n, partitions)));
  }
  inst.targets = Matrix(sets, shape.rows * shape.cols);
  for (double& v : inst.targets.data()) v = rng.next_normal();
  return inst;
}

inline int cmd_gradcheck(const GradcheckOptions& o, std::ostream& out, std::ostream& err) {
  const ModelFile m = load_model(o.model);
  Rng rng(o.seed);
  const SetInstance inst = random_instance(m.encoder, o.sets, o.n, o.partitions, rng);
  const GradCheckReport r = grad_check(m.encoder, inst, rng.next_u64(), o.step, o.tolerance);
  out << "parameter,analytic,numeric,rel_error\n";
  for (const auto& w : r.worst) {
    out << w.name << ',' << format_double(w.analytic) << ',' << format_double(w.numeric) << ','
        << format_double(w.rel_error) << '\n';
  }
  err << "checked " << r.checked << " coordinates, max relative error " << r.max_rel_error << " (tolerance "
      << r.tolerance << ")\n";
  for (const auto& name : r.nondifferentiable) err << "non-differentiable, excluded: " << name << '\n';
  return r.passed ? kExitOk : kExitFailed;
}

struct EvalOptions {
  std::string model;
  std::uint64_t seed = 0;
  std::size_t episodes = 8;
  std::vector<std::size_t> sizes;  // empty: doubling from the training subset to the set size
  std::optional<std::size_t> chunk;
  std::string out;
};

inline std::vector<std::size_t> default_sizes(const ModelFile& m) {
  std::vector<std::size_t> sizes;
  for (std::size_t s = std::max<std::size_t>(1, m.train.subset); s < m.task.shot; s *= 2) sizes.push_back(s);
  sizes.push_back(m.task.shot);
  return sizes;
}

inline std::string eval_csv(const std::vector<SetSizeEval>& rows) {
  std::ostringstream csv;
  csv << "set_size,loss_full,loss_partitioned,accuracy\n";
  for (const auto& r : rows) {
    csv << r.set_size << ',' << format_double(r.loss_full) << ',' << format_double(r.loss_partitioned) << ','
        << format_double(r.accuracy) << '\n';
  }
  return csv.str();
}

inline int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream&) {
  const ModelFile m = load_model(o.model);
  detail::require_centroid_shape(m);
  const auto sizes = o.sizes.empty() ? default_sizes(m) : o.sizes;
  for (std::size_t s : sizes) {
    if (s < 1 || s > m.task.shot) throw ParameterError("evaluation sizes must lie in 1..set size");
  }
  const std::size_t chunk = o.chunk.value_or(std::max<std::size_t>(1, m.train.subset));
  const std::string csv = eval_csv(evaluate_set_sizes(m.encoder, m.task, sizes, o.episodes, o.seed, chunk));
  if (o.out.empty()) out << csv;
  else atomic_write(o.out, csv);
  return kExitOk;
}

struct SweepOptions {
  std::string axis = "g";  // g, K, h, depth
  std::vector<std::string> values;  // empty: the axis default
  SseShape base;
  CentroidTask task;
  TrainConfig train;
  std::size_t episodes = 8;
  std::string out;
};

inline std::vector<std::string> default_sweep_values(const std::string& axis) {
  if (axis == "g") return {"sum", "mean", "max", "min"};
  if (axis == "K") return {"1", "2", "4", "8", "16"};
  if (axis == "h") return {"2", "4", "8", "16", "32"};
  if (axis == "depth") return {"1", "2", "3", "4", "5", "6"};
  throw ParameterError("unknown sweep axis '" + axis + "' (expected g, K, h, or depth)");
}

/// Trains one centroid model per axis value from the same seed and reports
/// held-out full-set loss per evaluated set size, one column per value.
inline std::string sweep(const SweepOptions& o, std::ostream& err) {
  const auto defaults = default_sweep_values(o.axis);
  const auto& values = o.values.empty() ? defaults : o.values;
  std::vector<std::size_t> sizes;
  for (std::size_t s = std::max<std::size_t>(1, o.train.subset); s < o.task.shot; s *= 2) sizes.push_back(s);
  sizes.push_back(o.task.shot);
  std::vector<std::vector<SetSizeEval>> columns;
  for (const auto& v : values) {
    SseShape shape = o.base;
    shape.d = o.task.d;
    shape.readout = o.task.d;
    try {
      if (o.axis == "g") shape.mode = parse_agg_mode(v);
      else if (o.axis == "K") shape.K = std::stoull(v);
      else if (o.axis == "h") shape.h = std::stoull(v);
      else shape.depth = std::stoull(v);
    } catch (const std::logic_error&) {
      throw ParameterError("bad sweep value '" + v + "'");
    }
    Rng rng(o.train.seed);
    Encoder e = build_sse(rng, shape);
    const TrainResult r = train_minibatch(e, o.task, o.train);
    err << o.axis << '=' << v << ": final held-out loss " << r.history.back().eval_loss_full << '\n';
    columns.push_back(evaluate_set_sizes(e, o.task, sizes, o.episodes, o.train.seed + 1, o.train.subset));
  }
  std::ostringstream csv;
  csv << "set_size";
  for (const auto& v : values) csv << ",loss_" << o.axis << '_' << v;
  csv << '\n';
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    csv << sizes[i];
    for (const auto& col : columns) csv << ',' << format_double(col[i].loss_full);
    csv << '\n';
  }
  return csv.str();
}

inline int cmd_sweep(const SweepOptions& o, std::ostream& out, std::ostream& err) {
  const std::string csv = sweep(o, err);
  if (o.out.empty()) out << csv;
  else atomic_write(o.out, csv);
  return kExitOk;
}

}  // namespace mbcset::cli
