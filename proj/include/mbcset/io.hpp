#pragma once

// Line-oriented text formats. Every float is written with 17 significant
// digits so doubles survive a round trip exactly; infinities are the literal
// tokens `inf` / `-inf`. Writers are canonical: load followed by save
// reproduces the file byte for byte.

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mbcset/encoder.hpp"
#include "mbcset/error.hpp"
#include "mbcset/training.hpp"

namespace mbcset {

inline constexpr int kFormatVersion = 1;

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) throw NumericError("cannot serialize NaN");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::optional<double> parse_double(std::string_view token) {
  if (token.empty()) return std::nullopt;
  const std::string s(token);
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Writer / reader primitives

class TextWriter {
 public:
  void line(std::string_view key) { out_ << key << '\n'; }

  template <class T>
  void kv(std::string_view key, const T& value) {
    out_ << key << ' ' << value << '\n';
  }

  void kv_double(std::string_view key, double v) { out_ << key << ' ' << format_double(v) << '\n'; }

  void matrix(std::string_view name, const Matrix& m) {
    out_ << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t j = 0; j < m.cols(); ++j) {
        if (j) out_ << ' ';
        out_ << format_double(m(i, j));
      }
      out_ << '\n';
    }
  }

  void vector(std::string_view name, const std::vector<double>& v) {
    matrix(name, Matrix::row_vector(v));
  }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

class TextReader {
 public:
  explicit TextReader(std::string_view text) {
    std::size_t start = 0;
    while (start <= text.size()) {
      const std::size_t end = text.find('\n', start);
      const std::string_view raw = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
      lines_.emplace_back(raw);
      if (end == std::string_view::npos) break;
      start = end + 1;
    }
  }

  std::size_t line_number() const noexcept { return pos_ + 1; }

  bool at_end() {
    skip_blank();
    return pos_ >= lines_.size();
  }

  std::vector<std::string> peek() {
    skip_blank();
    if (pos_ >= lines_.size()) return {};
    return split(lines_[pos_]);
  }

  std::vector<std::string> next() {
    skip_blank();
    if (pos_ >= lines_.size()) throw ParseError("unexpected end of file", pos_ + 1);
    return split(lines_[pos_++]);
  }

  /// Reads `key value...` and returns the values.
  std::vector<std::string> expect(std::string_view key, std::size_t values) {
    const std::size_t ln = line_number_after_blank();
    auto tokens = next();
    if (tokens.empty() || tokens[0] != key) {
      throw ParseError("expected '" + std::string(key) + "', found '" + (tokens.empty() ? "" : tokens[0]) + "'", ln);
    }
    if (tokens.size() != values + 1) {
      throw ParseError("'" + std::string(key) + "' expects " + std::to_string(values) + " value(s)", ln);
    }
    tokens.erase(tokens.begin());
    return tokens;
  }

  std::string expect_string(std::string_view key) { return expect(key, 1)[0]; }

  std::size_t expect_size(std::string_view key) {
    const std::size_t ln = line_number_after_blank();
    return to_size(expect(key, 1)[0], ln);
  }

  std::uint64_t expect_u64(std::string_view key) {
    const std::size_t ln = line_number_after_blank();
    const std::string t = expect(key, 1)[0];
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(t.c_str(), &end, 10);
    if (t.empty() || t[0] == '-' || end != t.c_str() + t.size() || errno == ERANGE) {
      throw ParseError("'" + std::string(key) + "' is not an unsigned integer", ln);
    }
    return v;
  }

  double expect_double(std::string_view key) {
    const std::size_t ln = line_number_after_blank();
    const auto v = parse_double(expect(key, 1)[0]);
    if (!v || !std::isfinite(*v)) throw ParseError("'" + std::string(key) + "' is not a finite number", ln);
    return *v;
  }

  Matrix expect_matrix(std::string_view name, bool allow_infinite = false) {
    const std::size_t header = line_number_after_blank();
    auto tokens = next();
    if (tokens.size() != 4 || tokens[0] != "matrix" || tokens[1] != name) {
      throw ParseError("expected 'matrix " + std::string(name) + " ROWS COLS'", header);
    }
    const std::size_t rows = to_size(tokens[2], header);
    const std::size_t cols = to_size(tokens[3], header);
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t ln = line_number_after_blank();
      auto fields = next();
      if (fields.size() != cols) {
        throw ParseError("matrix " + std::string(name) + " row " + std::to_string(i) + " has " +
                             std::to_string(fields.size()) + " fields, expected " + std::to_string(cols),
                         ln);
      }
      for (std::size_t j = 0; j < cols; ++j) {
        const auto v = parse_double(fields[j]);
        if (!v || (!allow_infinite && !std::isfinite(*v))) {
          throw ParseError("matrix " + std::string(name) + " field " + std::to_string(j + 1) +
                               " is not a valid number: '" + fields[j] + "'",
                           ln);
        }
        m(i, j) = *v;
      }
    }
    return m;
  }

  std::vector<double> expect_vector(std::string_view name, std::size_t length) {
    const std::size_t ln = line_number_after_blank();
    Matrix m = expect_matrix(name);
    if (m.rows() != 1 || m.cols() != length) {
      throw ParseError(std::string(name) + " must be 1x" + std::to_string(length), ln);
    }
    return {m.data().begin(), m.data().end()};
  }

  bool next_is(std::string_view key) {
    const auto t = peek();
    return !t.empty() && t[0] == key;
  }

  bool next_is_matrix(std::string_view name) {
    const auto t = peek();
    return t.size() >= 2 && t[0] == "matrix" && t[1] == name;
  }

  std::size_t line_number_after_blank() {
    skip_blank();
    return pos_ + 1;
  }

 private:
  static std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    std::string t;
    while (in >> t) out.push_back(t);
    return out;
  }

  static std::size_t to_size(const std::string& t, std::size_t ln) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(t.c_str(), &end, 10);
    if (t.empty() || t[0] == '-' || end != t.c_str() + t.size() || errno == ERANGE) {
      throw ParseError("'" + t + "' is not a count", ln);
    }
    return static_cast<std::size_t>(v);
  }

  void skip_blank() {
    while (pos_ < lines_.size() && lines_[pos_].find_first_not_of(" \t\r") == std::string::npos) ++pos_;
  }

  std::vector<std::string> lines_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Model files

struct ModelFile {
  Encoder encoder;
  CentroidTask task;
  TrainConfig train;
};

namespace detail {

inline void write_linear(TextWriter& w, std::string_view prefix, const LinearMap& m) {
  w.matrix(std::string(prefix) + "_weight", m.weight);
  if (m.bias) w.vector(std::string(prefix) + "_bias", *m.bias);
}

inline LinearMap read_linear(TextReader& r, std::string_view prefix, std::size_t in, std::size_t out) {
  const std::size_t ln = r.line_number_after_blank();
  LinearMap m{r.expect_matrix(std::string(prefix) + "_weight"), std::nullopt};
  if (m.weight.rows() != in || m.weight.cols() != out) {
    throw ParseError(std::string(prefix) + "_weight must be " + std::to_string(in) + "x" + std::to_string(out), ln);
  }
  if (r.next_is_matrix(std::string(prefix) + "_bias")) m.bias = r.expect_vector(std::string(prefix) + "_bias", out);
  return m;
}

inline void write_dense(TextWriter& w, std::string_view name, const std::vector<DenseLayer>& layers) {
  w.kv(std::string(name) + "_layers", layers.size());
  for (const auto& l : layers) {
    w.kv("activation", to_string(l.act));
    write_linear(w, "dense", l.map);
  }
}

inline std::vector<DenseLayer> read_dense(TextReader& r, std::string_view name, std::size_t in) {
  const std::size_t count = r.expect_size(std::string(name) + "_layers");
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t ln = r.line_number_after_blank();
    DenseLayer l;
    try {
      l.act = parse_activation(r.expect_string("activation"));
    } catch (const ParameterError& e) {
      throw ParseError(e.what(), ln);
    }
    const std::size_t wl = r.line_number_after_blank();
    const auto header = r.peek();
    if (header.size() != 4) throw ParseError("expected dense weight matrix", wl);
    char* end = nullptr;
    const std::size_t out = std::strtoull(header[3].c_str(), &end, 10);
    l.map = read_linear(r, "dense", in, out);
    in = out;
    layers.push_back(std::move(l));
  }
  return layers;
}

template <class F>
auto as_parse_error(TextReader& r, F&& f) {
  const std::size_t ln = r.line_number_after_blank();
  try {
    return f();
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(e.what(), ln);
  }
}

inline std::string_view to_string(SlotMode m) { return m == SlotMode::Random ? "random" : "deterministic"; }
inline std::string_view to_string(SlotDraw d) { return d == SlotDraw::Sample ? "sample" : "freeze_mean"; }
inline std::string_view to_string(TargetKind t) { return t == TargetKind::ClusterMean ? "cluster_mean" : "set_mean"; }

}  // namespace detail

/// Canonical encoder section; also the fingerprint input.
inline std::string serialize_encoder(const Encoder& e) {
  TextWriter w;
  w.kv("encoder_kind", to_string(kind_of(e)));
  std::visit(
      [&](const auto& enc) {
        using T = std::decay_t<decltype(enc)>;
        if constexpr (std::is_same_v<T, EncoderStack>) {
          w.kv("slot_draw", detail::to_string(enc.draw));
          w.kv("layer_count", enc.layers.size());
          for (std::size_t t = 0; t < enc.layers.size(); ++t) {
            const auto& p = enc.layers[t].params;
            w.kv("layer", t);
            w.kv("mode", to_string(enc.layers[t].mode));
            w.kv("slot_mode", detail::to_string(p.slot_config.mode));
            w.kv("K", p.slot_config.K);
            w.kv("h", p.slot_config.h);
            w.kv("d", p.d);
            w.kv("d_hat", p.d_hat);
            w.kv_double("norm_epsilon", p.slot_norm.epsilon);
            if (p.slot_config.mode == SlotMode::Deterministic) {
              w.matrix("slots", *p.slot_config.deterministic_slots);
            } else {
              w.vector("mu", *p.slot_config.mu);
              w.vector("log_sigma", *p.slot_config.log_sigma);
            }
            w.vector("norm_gain", p.slot_norm.gain);
            w.vector("norm_bias", p.slot_norm.bias);
            detail::write_linear(w, "q", p.proj_q);
            detail::write_linear(w, "k", p.proj_k);
            detail::write_linear(w, "v", p.proj_v);
          }
        } else if constexpr (std::is_same_v<T, DeepSetsParams>) {
          w.kv("d", enc.d);
          w.kv("pool", to_string(enc.pool));
          detail::write_dense(w, "phi", enc.phi);
          detail::write_dense(w, "rho", enc.rho);
        } else {
          w.matrix("query", enc.query);
          detail::write_linear(w, "k", enc.proj_k);
          detail::write_linear(w, "v", enc.proj_v);
        }
      },
      e);
  return w.str();
}

inline std::string model_fingerprint(const Encoder& e) { return hex64(fnv1a64(serialize_encoder(e))); }

inline std::string serialize_model(const ModelFile& m) {
  TextWriter w;
  w.kv("format_version", kFormatVersion);
  std::string text = w.str() + serialize_encoder(m.encoder);
  TextWriter t;
  t.kv("task_way", m.task.way);
  t.kv("task_shot", m.task.shot);
  t.kv("task_d", m.task.d);
  t.kv("task_query", m.task.query);
  t.kv_double("task_spread", m.task.spread);
  t.kv_double("task_separation", m.task.separation);
  t.kv("task_target", detail::to_string(m.task.target));
  t.kv("train_steps", m.train.steps);
  t.kv("train_subset", m.train.subset);
  t.kv_double("train_lr", m.train.adam.lr);
  t.kv_double("train_weight_decay", m.train.adam.weight_decay);
  t.kv("train_eval_every", m.train.eval_every);
  t.kv("train_eval_episodes", m.train.eval_episodes);
  t.kv("train_seed", m.train.seed);
  return text + t.str();
}

namespace detail {

inline Encoder parse_encoder(TextReader& r) {
  const std::size_t kind_line = r.line_number_after_blank();
  EncoderKind kind;
  try {
    kind = parse_encoder_kind(r.expect_string("encoder_kind"));
  } catch (const ParameterError& e) {
    throw ParseError(e.what(), kind_line);
  }
  if (kind == EncoderKind::Sse) {
    EncoderStack stack;
    const std::size_t draw_line = r.line_number_after_blank();
    const std::string draw = r.expect_string("slot_draw");
    if (draw == "sample") stack.draw = SlotDraw::Sample;
    else if (draw == "freeze_mean") stack.draw = SlotDraw::FreezeMean;
    else throw ParseError("unknown slot_draw '" + draw + "'", draw_line);
    const std::size_t count = r.expect_size("layer_count");
    for (std::size_t t = 0; t < count; ++t) {
      const std::size_t layer_line = r.line_number_after_blank();
      if (r.expect_size("layer") != t) throw ParseError("layers out of order", layer_line);
      StackLayer layer;
      layer.mode = as_parse_error(r, [&] { return parse_agg_mode(r.expect_string("mode")); });
      auto& p = layer.params;
      const std::size_t sm_line = r.line_number_after_blank();
      const std::string sm = r.expect_string("slot_mode");
      if (sm == "random") p.slot_config.mode = SlotMode::Random;
      else if (sm == "deterministic") p.slot_config.mode = SlotMode::Deterministic;
      else throw ParseError("unknown slot_mode '" + sm + "'", sm_line);
      p.slot_config.K = r.expect_size("K");
      p.slot_config.h = r.expect_size("h");
      p.d = r.expect_size("d");
      p.d_hat = r.expect_size("d_hat");
      p.slot_norm.epsilon = r.expect_double("norm_epsilon");
      const std::size_t h = p.slot_config.h;
      if (p.slot_config.mode == SlotMode::Deterministic) {
        p.slot_config.deterministic_slots = r.expect_matrix("slots");
      } else {
        p.slot_config.mu = r.expect_vector("mu", h);
        p.slot_config.log_sigma = r.expect_vector("log_sigma", h);
      }
      p.slot_norm.gain = r.expect_vector("norm_gain", h);
      p.slot_norm.bias = r.expect_vector("norm_bias", h);
      p.proj_q = read_linear(r, "q", h, p.d_hat);
      p.proj_k = read_linear(r, "k", p.d, p.d_hat);
      p.proj_v = read_linear(r, "v", p.d, p.d_hat);
      stack.layers.push_back(std::move(layer));
    }
    as_parse_error(r, [&] { return validate_stack(stack); });
    return stack;
  }
  if (kind == EncoderKind::DeepSets) {
    DeepSetsParams p;
    p.d = r.expect_size("d");
    p.pool = as_parse_error(r, [&] { return parse_agg_mode(r.expect_string("pool")); });
    p.phi = read_dense(r, "phi", p.d);
    p.rho = read_dense(r, "rho", p.pooled_dim());
    as_parse_error(r, [&] { p.validate(); return 0; });
    return p;
  }
  SoftmaxPoolParams p;
  p.query = r.expect_matrix("query");
  const std::size_t ln = r.line_number_after_blank();
  const auto header = r.peek();
  if (header.size() != 4) throw ParseError("expected k_weight matrix", ln);
  const std::size_t d = std::strtoull(header[2].c_str(), nullptr, 10);
  p.proj_k = read_linear(r, "k", d, p.query.cols());
  p.proj_v = read_linear(r, "v", d, p.query.cols());
  as_parse_error(r, [&] { p.validate(); return 0; });
  return p;
}

}  // namespace detail

inline ModelFile parse_model(std::string_view text) {
  TextReader r(text);
  const std::size_t ln = r.line_number_after_blank();
  if (r.expect_size("format_version") != static_cast<std::size_t>(kFormatVersion)) {
    throw ParseError("unsupported format_version", ln);
  }
  ModelFile m{detail::parse_encoder(r), {}, {}};
  // The task/training block is optional; missing keys keep their defaults.
  auto opt_size = [&](std::string_view key, std::size_t& dst) { if (r.next_is(key)) dst = r.expect_size(key); };
  auto opt_double = [&](std::string_view key, double& dst) { if (r.next_is(key)) dst = r.expect_double(key); };
  opt_size("task_way", m.task.way);
  opt_size("task_shot", m.task.shot);
  opt_size("task_d", m.task.d);
  opt_size("task_query", m.task.query);
  opt_double("task_spread", m.task.spread);
  opt_double("task_separation", m.task.separation);
  if (r.next_is("task_target")) {
    const std::size_t tl = r.line_number_after_blank();
    const std::string t = r.expect_string("task_target");
    if (t == "cluster_mean") m.task.target = TargetKind::ClusterMean;
    else if (t == "set_mean") m.task.target = TargetKind::SetMean;
    else throw ParseError("unknown task_target '" + t + "'", tl);
  }
  opt_size("train_steps", m.train.steps);
  opt_size("train_subset", m.train.subset);
  opt_double("train_lr", m.train.adam.lr);
  opt_double("train_weight_decay", m.train.adam.weight_decay);
  opt_size("train_eval_every", m.train.eval_every);
  opt_size("train_eval_episodes", m.train.eval_episodes);
  if (r.next_is("train_seed")) m.train.seed = r.expect_u64("train_seed");
  if (!r.at_end()) {
    const std::size_t extra = r.line_number_after_blank();
    throw ParseError("unexpected content '" + r.peek()[0] + "'", extra);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Session files: the streaming state between process invocations. Raw set
// elements are never stored.

struct SessionFile {
  std::string model_fingerprint;
  EncoderKind kind = EncoderKind::Sse;
  std::uint64_t seed = 0;
  std::optional<Matrix> slots;         // sse: sampled slots
  std::optional<Matrix> slots_normed;  // sse: after LayerNorm, what batches see
  AggregateState state;
};

inline std::string serialize_session(const SessionFile& s) {
  TextWriter w;
  w.kv("format_version", kFormatVersion);
  w.kv("model_fingerprint", s.model_fingerprint);
  w.kv("encoder_kind", to_string(s.kind));
  w.kv("seed", s.seed);
  w.kv("mode", to_string(s.state.mode));
  w.kv("count", s.state.count);
  if (s.slots) w.matrix("slots", *s.slots);
  if (s.slots_normed) w.matrix("slots_normed", *s.slots_normed);
  w.matrix("partial", s.state.partial);
  return w.str();
}

inline SessionFile parse_session(std::string_view text) {
  TextReader r(text);
  const std::size_t ln = r.line_number_after_blank();
  if (r.expect_size("format_version") != static_cast<std::size_t>(kFormatVersion)) {
    throw ParseError("unsupported format_version", ln);
  }
  SessionFile s;
  s.model_fingerprint = r.expect_string("model_fingerprint");
  s.kind = detail::as_parse_error(r, [&] { return parse_encoder_kind(r.expect_string("encoder_kind")); });
  s.seed = r.expect_u64("seed");
  s.state.mode = detail::as_parse_error(r, [&] { return parse_agg_mode(r.expect_string("mode")); });
  s.state.count = r.expect_size("count");
  if (r.next_is_matrix("slots")) s.slots = r.expect_matrix("slots");
  if (r.next_is_matrix("slots_normed")) s.slots_normed = r.expect_matrix("slots_normed");
  s.state.partial = r.expect_matrix("partial", true);
  if (!r.at_end()) throw ParseError("unexpected trailing content", r.line_number_after_blank());
  return s;
}

// ---------------------------------------------------------------------------
// Batch files: headerless CSV, one element per line.

inline Matrix parse_batch_csv(std::string_view text, std::optional<std::size_t> expected_dim = std::nullopt) {
  std::vector<double> data;
  std::size_t cols = expected_dim.value_or(0);
  std::size_t rows = 0;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    std::vector<double> row;
    std::size_t field_start = 0;
    while (true) {
      const std::size_t comma = line.find(',', field_start);
      std::string_view field = line.substr(field_start, comma == std::string_view::npos ? std::string_view::npos : comma - field_start);
      const auto first = field.find_first_not_of(" \t\r");
      const auto last = field.find_last_not_of(" \t\r");
      field = first == std::string_view::npos ? std::string_view{} : field.substr(first, last - first + 1);
      const auto v = parse_double(field);
      if (!v || !std::isfinite(*v)) {
        throw DataError("line " + std::to_string(line_no) + ", field " + std::to_string(row.size() + 1) +
                        ": not a finite number: '" + std::string(field) + "'");
      }
      row.push_back(*v);
      if (comma == std::string_view::npos) break;
      field_start = comma + 1;
    }
    if (cols == 0) cols = row.size();
    if (row.size() != cols) {
      throw DataError("line " + std::to_string(line_no) + ": " + std::to_string(row.size()) +
                      " fields, expected " + std::to_string(cols));
    }
    data.insert(data.end(), row.begin(), row.end());
    ++rows;
  }
  return Matrix(rows, cols, std::move(data));
}

inline std::string format_csv_row(std::span<const double> values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_double(values[i]);
  }
  return out;
}

inline std::string format_batch_csv(const Matrix& X) {
  std::string out;
  for (std::size_t i = 0; i < X.rows(); ++i) out += format_csv_row(X.row(i)) + '\n';
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace mbcset
