#pragma once

// Matrix-valued reverse-mode tape. Each op computes its forward value with the
// same library kernel the untaped encoders use, so taped and untaped forward
// values agree bit for bit; the backward closures implement the adjoints.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mbcset/baselines.hpp"
#include "mbcset/error.hpp"
#include "mbcset/sse.hpp"
#include "mbcset/tensor.hpp"

namespace mbcset {

struct Var {
  std::size_t id = 0;
};

// Backward closures refer to the tape itself, so a tape stays where it was
// created.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), nullptr); }

  /// Trainable leaf; gradients are reported in creation order.
  Var parameter(std::span<const double> values, std::size_t rows, std::size_t cols) {
    Var v = push(Matrix(rows, cols, std::vector<double>(values.begin(), values.end())), nullptr);
    params_.push_back(v.id);
    return v;
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // x·W (+ b), b a 1 x d_out row.
  Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
    LinearMap map{value(w), std::nullopt};
    if (b) {
      auto bv = value(*b).data();
      map.bias = std::vector<double>(bv.begin(), bv.end());
    }
    Var out = push(apply_linear(map, value(x)), nullptr);
    node(out).back = [=, this] {
      const Matrix& g = grad(out);
      accumulate(x, mbcset::matmul_transposed(g, value(w)));
      accumulate(w, mbcset::matmul(transpose(value(x)), g));
      if (b) accumulate(*b, Matrix::row_vector(column_sums(g)));
    };
    return out;
  }

  Var matmul(Var a, Var b) {
    Var out = push(mbcset::matmul(value(a), value(b)), nullptr);
    node(out).back = [=, this] {
      const Matrix& g = grad(out);
      accumulate(a, mbcset::matmul_transposed(g, value(b)));
      accumulate(b, mbcset::matmul(transpose(value(a)), g));
    };
    return out;
  }

  // a·bᵀ
  Var matmul_transposed(Var a, Var b) {
    Var out = push(mbcset::matmul_transposed(value(a), value(b)), nullptr);
    node(out).back = [=, this] {
      const Matrix& g = grad(out);
      accumulate(a, mbcset::matmul(g, value(b)));
      accumulate(b, mbcset::matmul(transpose(g), value(a)));
    };
    return out;
  }

  Var scale(Var a, double s) {
    Matrix v = value(a);
    for (double& x : v.data()) x *= s;
    Var out = push(std::move(v), nullptr);
    node(out).back = [=, this] {
      Matrix g = grad(out);
      for (double& x : g.data()) x *= s;
      accumulate(a, g);
    };
    return out;
  }

  Var divide(Var a, double denom) {
    Matrix v = value(a);
    for (double& x : v.data()) x /= denom;
    Var out = push(std::move(v), nullptr);
    node(out).back = [=, this] {
      Matrix g = grad(out);
      for (double& x : g.data()) x /= denom;
      accumulate(a, g);
    };
    return out;
  }

  // sigmoid(M) + 1e-8
  Var attention_weights(Var logits) {
    Var out = push(mbcset::attention_weights(value(logits)), nullptr);
    node(out).back = [=, this] {
      const Matrix s = sigmoid(value(logits));
      Matrix g = grad(out);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double si = s.data()[i];
        g.data()[i] *= si * (1.0 - si);
      }
      accumulate(logits, g);
    };
    return out;
  }

  Var slot_normalize(Var attn) {
    Var out = push(mbcset::slot_normalize(value(attn)), nullptr);
    node(out).back = [=, this] {
      const Matrix& a = value(attn);
      const Matrix& w = value(out);
      const Matrix& g = grad(out);
      Matrix ga(a.rows(), a.cols());
      std::vector<double> scratch;
      for (std::size_t i = 0; i < a.rows(); ++i) {
        const double total = slot_row_total(a.row(i), scratch);
        // Written against the normalized row so K = 1 yields exactly zero.
        double dot = 0.0;
        for (std::size_t l = 0; l < a.cols(); ++l) dot += g(i, l) * w(i, l);
        for (std::size_t j = 0; j < a.cols(); ++j) ga(i, j) = (g(i, j) - dot) / total;
      }
      accumulate(attn, ga);
    };
    return out;
  }

  Var layer_norm(Var x, Var gain, Var bias, double epsilon) {
    LayerNormParams p{as_vector(value(gain)), as_vector(value(bias)), epsilon};
    Var out = push(mbcset::layer_norm(p, value(x)), nullptr);
    node(out).back = [=, this] {
      const Matrix& in = value(x);
      const Matrix& g = grad(out);
      auto gv = value(gain).data();
      const std::size_t w = in.cols();
      Matrix gx(in.rows(), w);
      Matrix ggain(1, w), gbias(1, w);
      std::vector<double> xhat(w), dxhat(w);
      for (std::size_t i = 0; i < in.rows(); ++i) {
        const RowMoments mom = row_moments(in.row(i), epsilon);
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
          xhat[j] = (in(i, j) - mom.mean) * mom.inv_std;
          dxhat[j] = g(i, j) * gv[j];
          ggain(0, j) += g(i, j) * xhat[j];
          gbias(0, j) += g(i, j);
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[j];
        }
        mean_d /= static_cast<double>(w);
        mean_dx /= static_cast<double>(w);
        for (std::size_t j = 0; j < w; ++j) {
          gx(i, j) = mom.inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
      }
      accumulate(x, gx);
      accumulate(gain, ggain);
      accumulate(bias, gbias);
    };
    return out;
  }

  // mu + exp(log_sigma) * noise, mu and log_sigma 1 x h rows.
  Var reparameterize(Var mu, Var log_sigma, Matrix noise) {
    const Matrix& m = value(mu);
    const Matrix& ls = value(log_sigma);
    if (m.cols() != noise.cols() || ls.cols() != noise.cols()) throw ShapeError("reparameterize: width");
    Matrix s(noise.rows(), noise.cols());
    std::vector<double> sigma(noise.cols());
    for (std::size_t j = 0; j < sigma.size(); ++j) sigma[j] = std::exp(ls(0, j));
    for (std::size_t k = 0; k < noise.rows(); ++k) {
      for (std::size_t j = 0; j < noise.cols(); ++j) s(k, j) = m(0, j) + sigma[j] * noise(k, j);
    }
    Var out = push(std::move(s), nullptr);
    node(out).back = [=, this, noise = std::move(noise)] {
      const Matrix& g = grad(out);
      Matrix gmu(1, g.cols()), gls(1, g.cols());
      for (std::size_t k = 0; k < g.rows(); ++k) {
        for (std::size_t j = 0; j < g.cols(); ++j) {
          gmu(0, j) += g(k, j);
          gls(0, j) += g(k, j) * sigma[j] * noise(k, j);
        }
      }
      accumulate(mu, gmu);
      accumulate(log_sigma, gls);
    };
    return out;
  }

  // Pools C_i[k, m] = W[i, k] V[i, m] over elements i.
  Var pool(Var weights, Var values, AggMode mode) {
    PooledContributions pooled = pool_contributions(value(weights), value(values), mode);
    std::vector<std::size_t> winner = pooled.winner;
    Var out = push(std::move(pooled.values), nullptr);
    node(out).choices = winner;
    node(out).back = [=, this] {
      const Matrix& W = value(weights);
      const Matrix& V = value(values);
      const Matrix& g = grad(out);
      if (mode == AggMode::Sum || mode == AggMode::Mean) {
        accumulate(weights, mbcset::matmul_transposed(V, g));
        accumulate(values, mbcset::matmul(W, g));
        return;
      }
      Matrix gW(W.rows(), W.cols()), gV(V.rows(), V.cols());
      const std::size_t dh = V.cols();
      for (std::size_t k = 0; k < W.cols(); ++k) {
        for (std::size_t m = 0; m < dh; ++m) {
          const std::size_t i = winner[k * dh + m];
          gW(i, k) += g(k, m) * V(i, m);
          gV(i, m) += g(k, m) * W(i, k);
        }
      }
      accumulate(weights, gW);
      accumulate(values, gV);
    };
    return out;
  }

  // Element-wise combine of two partial encodings; ties go to `state`.
  Var merge(Var state, Var partial, AggMode mode) {
    const Matrix& a = value(state);
    const Matrix& b = value(partial);
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("merge: shape mismatch");
    Matrix v = detail::combine_values(mode, a, b);
    std::vector<std::size_t> pick;
    if (mode == AggMode::Max || mode == AggMode::Min) {
      pick.resize(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data()[i], y = b.data()[i];
        pick[i] = (mode == AggMode::Max ? x < y : y < x) ? 1 : 0;
      }
    }
    Var out = push(std::move(v), nullptr);
    node(out).choices = pick;
    node(out).back = [=, this] {
      const Matrix& g = grad(out);
      if (pick.empty()) {
        accumulate(state, g);
        accumulate(partial, g);
        return;
      }
      Matrix ga(g.rows(), g.cols()), gb(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.size(); ++i) (pick[i] ? gb : ga).data()[i] = g.data()[i];
      accumulate(state, ga);
      accumulate(partial, gb);
    };
    return out;
  }

  Var relu(Var a) {
    Var out = push(mbcset::relu(value(a)), nullptr);
    std::vector<std::size_t> mask(value(a).size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = value(a).data()[i] > 0.0 ? 1 : 0;
    node(out).choices = mask;
    node(out).back = [=, this] {
      Matrix g = grad(out);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!mask[i]) g.data()[i] = 0.0;
      }
      accumulate(a, g);
    };
    return out;
  }

  Var softmax_rows(Var logits) {
    Var out = push(mbcset::softmax_rows(value(logits)), nullptr);
    node(out).back = [=, this] {
      const Matrix& s = value(out);
      const Matrix& g = grad(out);
      Matrix gl(s.rows(), s.cols());
      for (std::size_t r = 0; r < s.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < s.cols(); ++j) dot += g(r, j) * s(r, j);
        for (std::size_t j = 0; j < s.cols(); ++j) gl(r, j) = s(r, j) * (g(r, j) - dot);
      }
      accumulate(logits, gl);
    };
    return out;
  }

  /// 1x1: sum over entries of (a - target)^2 in row-major order.
  Var squared_distance(Var a, const Matrix& target) {
    const Matrix& v = value(a);
    if (v.size() != target.size()) throw ShapeError("squared_distance: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double r = v.data()[i] - target.data()[i];
      acc += r * r;
    }
    Var out = push(Matrix(1, 1, acc), nullptr);
    node(out).back = [=, this] {
      const double g = grad(out)(0, 0);
      const Matrix& cur = value(a);
      Matrix ga(cur.rows(), cur.cols());
      for (std::size_t i = 0; i < cur.size(); ++i) {
        ga.data()[i] = 2.0 * (cur.data()[i] - target.data()[i]) * g;
      }
      accumulate(a, ga);
    };
    return out;
  }

  /// 1x1 sum of 1x1 scalars, ascending from +0.0.
  Var sum_scalars(std::span<const Var> terms) {
    double acc = 0.0;
    for (Var t : terms) acc += value(t)(0, 0);
    std::vector<Var> ids(terms.begin(), terms.end());
    Var out = push(Matrix(1, 1, acc), nullptr);
    node(out).back = [=, this] {
      const Matrix& g = grad(out);
      for (Var t : ids) accumulate(t, g);
    };
    return out;
  }

  void backward(Var output) {
    if (value(output).size() != 1) throw ShapeError("backward: output must be a scalar");
    for (auto& n : nodes_) n.grad = Matrix(n.value.rows(), n.value.cols());
    nodes_[output.id].grad(0, 0) = 1.0;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      if (nodes_[i].back) nodes_[i].back();
    }
  }

  /// Gradients of all parameter leaves, concatenated in creation order.
  std::vector<double> parameter_gradient() const {
    std::vector<double> out;
    for (std::size_t id : params_) {
      const auto g = nodes_[id].grad.data();
      if (g.empty()) {
        out.insert(out.end(), nodes_[id].value.size(), 0.0);
      } else {
        out.insert(out.end(), g.begin(), g.end());
      }
    }
    return out;
  }

  std::size_t parameter_size() const {
    std::size_t n = 0;
    for (std::size_t id : params_) n += nodes_[id].value.size();
    return n;
  }

  /// Every discrete choice made in the forward pass (max/min winners, merge
  /// picks, rectifier masks). Two evaluations with equal signatures lie on
  /// the same smooth piece of the loss.
  std::vector<std::size_t> selection_signature() const {
    std::vector<std::size_t> sig;
    for (const auto& n : nodes_) sig.insert(sig.end(), n.choices.begin(), n.choices.end());
    return sig;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void()> back;
    std::vector<std::size_t> choices;
  };

  Node& node(Var v) { return nodes_[v.id]; }

  Var push(Matrix value, std::function<void()> back) {
    nodes_.push_back({std::move(value), Matrix(), std::move(back), {}});
    return {nodes_.size() - 1};
  }

  void accumulate(Var v, const Matrix& g) {
    Matrix& dst = nodes_[v.id].grad;
    if (dst.rows() != g.rows() || dst.cols() != g.cols()) throw ShapeError("gradient shape mismatch");
    auto d = dst.data();
    auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }

  static std::vector<double> as_vector(const Matrix& m) {
    return std::vector<double>(m.data().begin(), m.data().end());
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> params_;
};

}  // namespace mbcset
