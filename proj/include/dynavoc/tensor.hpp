#pragma once

// Dense double-precision tensors with define-by-run reverse-mode autodiff.
// The graph is rebuilt on every forward pass: each op links its result node
// to the input nodes and records a closure that routes gradients backwards.
// Tensors are immutable after construction except for gradient accumulation,
// so a finished graph can be walked by exactly one backward() call.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "dynavoc/util.hpp"

namespace dynavoc {

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenRowMat>;
using EigenConstMap = Eigen::Map<const EigenRowMat>;

namespace autograd {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// RAII switch that disables graph construction (inference / finite
// differences). Nested guards restore the previous state.
struct NoGradGuard {
  bool previous;
  NoGradGuard() : previous(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = previous; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace autograd

struct TensorNode {
  std::vector<long> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Receives the node itself; reads this->grad, accumulates into parents.
  std::function<void(TensorNode&)> backward_fn;

  long size() const {
    long n = 1;
    for (long d : shape) n *= d;
    return n;
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor from_values(std::vector<long> shape, std::vector<double> values,
                            bool requires_grad = false) {
    auto node = std::make_shared<TensorNode>();
    long n = 1;
    for (long d : shape) {
      // Row dimension 0 is allowed so an empty sequence embeds to an empty
      // matrix; negative dimensions never are.
      if (d < 0) throw std::invalid_argument("tensor dimensions must be non-negative");
      n *= d;
    }
    if (n != static_cast<long>(values.size()))
      throw std::invalid_argument("value count does not match shape");
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    for (double v : node->value)
      if (!std::isfinite(v)) throw NumericError("non-finite value in tensor literal");
    return Tensor(std::move(node));
  }

  static Tensor full(std::vector<long> shape, double fill, bool requires_grad = false) {
    long n = 1;
    for (long d : shape) n *= d;
    return from_values(std::move(shape), std::vector<double>(n, fill), requires_grad);
  }

  static Tensor zeros(std::vector<long> shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor scalar_value(double v) { return from_values({1}, {v}); }

  static Tensor randn(std::vector<long> shape, std::mt19937_64& rng, double stddev,
                      bool requires_grad = false) {
    long n = 1;
    for (long d : shape) n *= d;
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    return from_values(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<long>& shape() const { return node_->shape; }
  long size() const { return node_->size(); }
  long rank() const { return static_cast<long>(node_->shape.size()); }
  long rows() const { return node_->shape.at(0); }
  long cols() const {
    if (rank() == 1) return node_->shape[0];
    return node_->shape.at(1);
  }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  double item() const {
    if (size() != 1) throw std::invalid_argument("item() requires a scalar tensor");
    return node_->value[0];
  }
  double at(long r, long c) const { return node_->value[r * cols() + c]; }

  void clear_grad() { node_->grad.clear(); }

  // Deep copy of the values only; the copy is a fresh leaf.
  Tensor clone(bool requires_grad) const {
    return from_values(node_->shape, node_->value, requires_grad);
  }

  std::shared_ptr<TensorNode> node() const { return node_; }
  TensorNode& mut_node() const { return *node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline void check_finite(const TensorNode& node, const char* op) {
  for (double v : node.value)
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value produced by ") + op);
}

inline Tensor make_result(std::vector<long> shape, std::vector<double> value,
                          std::vector<Tensor> inputs,
                          std::function<void(TensorNode&)> backward, const char* op) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  check_finite(*node, op);
  bool track = autograd::grad_mode();
  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad = any_grad || t.requires_grad();
  if (track && any_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline void accumulate(TensorNode& target, const double* src, long n) {
  auto& g = target.grad_buffer();
  for (long i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitive ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul requires rank-2 tensors");
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul inner dimensions disagree");
  const long m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  {
    EigenConstMap am(a.values().data(), m, k);
    EigenConstMap bm(b.values().data(), k, n);
    EigenMap om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](TensorNode& self) {
        EigenConstMap gy(self.grad.data(), m, n);
        if (an->requires_grad) {
          EigenConstMap bm(bn->value.data(), k, n);
          EigenMap ga(an->grad_buffer().data(), m, k);
          ga.noalias() += gy * bm.transpose();
        }
        if (bn->requires_grad) {
          EigenConstMap am(an->value.data(), m, k);
          EigenMap gb(bn->grad_buffer().data(), k, n);
          gb.noalias() += am.transpose() * gy;
        }
      },
      "matmul");
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose requires rank-2");
  const long r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) out[j * r + i] = x.values()[i * c + j];
  auto xn = x.node();
  return detail::make_result(
      {c, r}, std::move(out), {x},
      [xn, r, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long j = 0; j < c; ++j)
          for (long i = 0; i < r; ++i) g[i * c + j] += self.grad[j * r + i];
      },
      "transpose");
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd,
                          const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  const long n = a.size();
  std::vector<double> out(n);
  for (long i = 0; i < n; ++i) out[i] = fwd(a.values()[i], b.values()[i]);
  auto an = a.node();
  auto bn = b.node();
  return make_result(
      a.shape(), std::move(out), {a, b},
      [an, bn, n, bwd](TensorNode& self) {
        for (long i = 0; i < n; ++i) {
          auto [da, db] = bwd(an->value[i], bn->value[i]);
          if (an->requires_grad) an->grad_buffer()[i] += self.grad[i] * da;
          if (bn->requires_grad) bn->grad_buffer()[i] += self.grad[i] * db;
        }
      },
      op);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::elementwise_binary(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair<double, double>{1.0, 1.0}; }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::elementwise_binary(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair<double, double>{1.0, -1.0}; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::elementwise_binary(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair<double, double>{y, x}; }, "mul");
}

inline Tensor scale(const Tensor& x, double c) {
  const long n = x.size();
  std::vector<double> out(n);
  for (long i = 0; i < n; ++i) out[i] = c * x.values()[i];
  auto xn = x.node();
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [xn, n, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < n; ++i) g[i] += c * self.grad[i];
      },
      "scale");
}

// x: [n x d], v: [d]; adds v to every row (bias add).
inline Tensor add_row_broadcast(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.size() != x.cols())
    throw std::invalid_argument("add_row_broadcast: incompatible shapes");
  const long r = x.rows(), c = x.cols();
  std::vector<double> out(x.values());
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) out[i * c + j] += v.values()[j];
  auto xn = x.node();
  auto vn = v.node();
  return detail::make_result(
      {r, c}, std::move(out), {x, v},
      [xn, vn, r, c](TensorNode& self) {
        if (xn->requires_grad) detail::accumulate(*xn, self.grad.data(), r * c);
        if (vn->requires_grad) {
          auto& g = vn->grad_buffer();
          for (long i = 0; i < r; ++i)
            for (long j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
      },
      "add_row_broadcast");
}

inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  const long n = x.size();
  std::vector<double> out(n);
  for (long i = 0; i < n; ++i) {
    double v = x.values()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  auto xn = x.node();
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [xn, n](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < n; ++i) {
          double v = xn->value[i];
          double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
          g[i] += self.grad[i] * (cdf + v * pdf);
        }
      },
      "gelu");
}

namespace detail {

// Shared softmax forward over one row segment [begin, begin+len).
inline void softmax_span(const double* in, double* out, long len) {
  double mx = in[0];
  for (long j = 1; j < len; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (long j = 0; j < len; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (long j = 0; j < len; ++j) out[j] /= z;
}

}  // namespace detail

// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("softmax_rows requires rank-2");
  const long r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  for (long i = 0; i < r; ++i)
    detail::softmax_span(x.values().data() + i * c, out.data() + i * c, c);
  auto xn = x.node();
  return detail::make_result(
      {r, c}, std::move(out), {x},
      [xn, r, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < r; ++i) {
          const double* p = self.value.data() + i * c;
          const double* gy = self.grad.data() + i * c;
          double dot = 0.0;
          for (long j = 0; j < c; ++j) dot += p[j] * gy[j];
          for (long j = 0; j < c; ++j) g[i * c + j] += p[j] * (gy[j] - dot);
        }
      },
      "softmax_rows");
}

inline Tensor log_softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("log_softmax_rows requires rank-2");
  const long r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  for (long i = 0; i < r; ++i) {
    const double* in = x.values().data() + i * c;
    double mx = in[0];
    for (long j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (long j = 0; j < c; ++j) z += std::exp(in[j] - mx);
    double lz = mx + std::log(z);
    for (long j = 0; j < c; ++j) out[i * c + j] = in[j] - lz;
  }
  auto xn = x.node();
  return detail::make_result(
      {r, c}, std::move(out), {x},
      [xn, r, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < r; ++i) {
          const double* ly = self.value.data() + i * c;
          const double* gy = self.grad.data() + i * c;
          double gsum = 0.0;
          for (long j = 0; j < c; ++j) gsum += gy[j];
          for (long j = 0; j < c; ++j)
            g[i * c + j] += gy[j] - std::exp(ly[j]) * gsum;
        }
      },
      "log_softmax_rows");
}

// Softmax over the lower triangle of a square score matrix: row i attends to
// columns 0..i only; masked entries come out exactly zero.
inline Tensor causal_softmax_rows(const Tensor& x) {
  if (x.rank() != 2 || x.rows() != x.cols())
    throw std::invalid_argument("causal_softmax_rows requires a square matrix");
  const long n = x.rows();
  std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
  for (long i = 0; i < n; ++i)
    detail::softmax_span(x.values().data() + i * n, out.data() + i * n, i + 1);
  auto xn = x.node();
  return detail::make_result(
      {n, n}, std::move(out), {x},
      [xn, n](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < n; ++i) {
          const double* p = self.value.data() + i * n;
          const double* gy = self.grad.data() + i * n;
          double dot = 0.0;
          for (long j = 0; j <= i; ++j) dot += p[j] * gy[j];
          for (long j = 0; j <= i; ++j) g[i * n + j] += p[j] * (gy[j] - dot);
        }
      },
      "causal_softmax_rows");
}

// Per-row layer normalization with learned gain/bias.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                              double eps = 1e-5) {
  if (x.rank() != 2 || gain.size() != x.cols() || bias.size() != x.cols())
    throw std::invalid_argument("layer_norm_rows: incompatible shapes");
  const long r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  auto rstd = std::make_shared<std::vector<double>>(r);
  auto mean = std::make_shared<std::vector<double>>(r);
  for (long i = 0; i < r; ++i) {
    const double* in = x.values().data() + i * c;
    double mu = 0.0;
    for (long j = 0; j < c; ++j) mu += in[j];
    mu /= c;
    double var = 0.0;
    for (long j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= c;
    double rs = 1.0 / std::sqrt(var + eps);
    (*mean)[i] = mu;
    (*rstd)[i] = rs;
    for (long j = 0; j < c; ++j)
      out[i * c + j] = gain.values()[j] * (in[j] - mu) * rs + bias.values()[j];
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_result(
      {r, c}, std::move(out), {x, gain, bias},
      [xn, gn, bn, r, c, mean, rstd](TensorNode& self) {
        std::vector<double> xhat(c), dxhat(c);
        for (long i = 0; i < r; ++i) {
          const double* in = xn->value.data() + i * c;
          const double* gy = self.grad.data() + i * c;
          double mu = (*mean)[i], rs = (*rstd)[i];
          double m1 = 0.0, m2 = 0.0;
          for (long j = 0; j < c; ++j) {
            xhat[j] = (in[j] - mu) * rs;
            dxhat[j] = gy[j] * gn->value[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
          }
          m1 /= c;
          m2 /= c;
          if (xn->requires_grad) {
            auto& g = xn->grad_buffer();
            for (long j = 0; j < c; ++j)
              g[i * c + j] += rs * (dxhat[j] - m1 - xhat[j] * m2);
          }
          if (gn->requires_grad) {
            auto& g = gn->grad_buffer();
            for (long j = 0; j < c; ++j) g[j] += gy[j] * xhat[j];
          }
          if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (long j = 0; j < c; ++j) g[j] += gy[j];
          }
        }
      },
      "layer_norm_rows");
}

// Row lookup: out[i] = table[ids[i]]. Gradients scatter-add back.
inline Tensor gather_rows(const Tensor& table, const std::vector<long>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("gather_rows requires rank-2 table");
  const long rows = table.rows(), c = table.cols();
  const long n = static_cast<long>(ids.size());
  std::vector<double> out(static_cast<std::size_t>(n) * c);
  for (long i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= rows)
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(rows) + " rows");
    std::copy_n(table.values().data() + ids[i] * c, c, out.data() + i * c);
  }
  auto tn = table.node();
  auto idcopy = std::make_shared<std::vector<long>>(ids);
  return detail::make_result(
      {n, c}, std::move(out), {table},
      [tn, idcopy, c](TensorNode& self) {
        if (!tn->requires_grad) return;
        auto& g = tn->grad_buffer();
        for (std::size_t i = 0; i < idcopy->size(); ++i)
          for (long j = 0; j < c; ++j)
            g[(*idcopy)[i] * c + j] += self.grad[i * c + j];
      },
      "gather_rows");
}

struct RowRef {
  Tensor source;
  long row = 0;
};

// Builds an [n x d] matrix whose row i is sources[i].source[sources[i].row].
// This is how mixed sequences are assembled: static rows come from the
// embedding table, phrase rows from encoder outputs.
inline Tensor compose_rows(const std::vector<RowRef>& sources) {
  if (sources.empty()) throw std::invalid_argument("compose_rows: no sources");
  const long c = sources.front().source.cols();
  const long n = static_cast<long>(sources.size());
  std::vector<double> out(static_cast<std::size_t>(n) * c);
  std::vector<Tensor> inputs;
  for (long i = 0; i < n; ++i) {
    const Tensor& t = sources[i].source;
    if (t.rank() != 2 || t.cols() != c)
      throw std::invalid_argument("compose_rows: column mismatch");
    if (sources[i].row < 0 || sources[i].row >= t.rows())
      throw std::out_of_range("compose_rows: row index out of range");
    std::copy_n(t.values().data() + sources[i].row * c, c, out.data() + i * c);
    inputs.push_back(t);
  }
  auto refs = std::make_shared<std::vector<std::pair<std::shared_ptr<TensorNode>, long>>>();
  refs->reserve(sources.size());
  for (const RowRef& s : sources) refs->emplace_back(s.source.node(), s.row);
  return detail::make_result(
      {n, c}, std::move(out), std::move(inputs),
      [refs, c](TensorNode& self) {
        for (std::size_t i = 0; i < refs->size(); ++i) {
          auto& [src, row] = (*refs)[i];
          if (!src->requires_grad) continue;
          auto& g = src->grad_buffer();
          for (long j = 0; j < c; ++j) g[row * c + j] += self.grad[i * c + j];
        }
      },
      "compose_rows");
}

inline Tensor slice_rows(const Tensor& x, long start, long len) {
  if (x.rank() != 2 || start < 0 || len <= 0 || start + len > x.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  const long c = x.cols();
  std::vector<double> out(x.values().begin() + start * c,
                          x.values().begin() + (start + len) * c);
  auto xn = x.node();
  return detail::make_result(
      {len, c}, std::move(out), {x},
      [xn, start, len, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < len * c; ++i) g[start * c + i] += self.grad[i];
      },
      "slice_rows");
}

inline Tensor slice_cols(const Tensor& x, long start, long len) {
  if (x.rank() != 2 || start < 0 || len <= 0 || start + len > x.cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  const long r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<std::size_t>(r) * len);
  for (long i = 0; i < r; ++i)
    std::copy_n(x.values().data() + i * c + start, len, out.data() + i * len);
  auto xn = x.node();
  return detail::make_result(
      {r, len}, std::move(out), {x},
      [xn, start, len, r, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < r; ++i)
          for (long j = 0; j < len; ++j)
            g[i * c + start + j] += self.grad[i * len + j];
      },
      "slice_cols");
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("concat_rows: column mismatch");
  const long ra = a.rows(), rb = b.rows(), c = a.cols();
  std::vector<double> out;
  out.reserve((ra + rb) * c);
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(
      {ra + rb, c}, std::move(out), {a, b},
      [an, bn, ra, rb, c](TensorNode& self) {
        if (an->requires_grad) detail::accumulate(*an, self.grad.data(), ra * c);
        if (bn->requires_grad)
          detail::accumulate(*bn, self.grad.data() + ra * c, rb * c);
      },
      "concat_rows");
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const long r = parts.front().rows();
  long c = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.rows() != r)
      throw std::invalid_argument("concat_cols: row mismatch");
    c += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  long off = 0;
  for (const Tensor& p : parts) {
    const long pc = p.cols();
    for (long i = 0; i < r; ++i)
      std::copy_n(p.values().data() + i * pc, pc, out.data() + i * c + off);
    off += pc;
  }
  auto nodes = std::make_shared<std::vector<std::shared_ptr<TensorNode>>>();
  for (const Tensor& p : parts) nodes->push_back(p.node());
  return detail::make_result(
      {r, c}, std::move(out), parts,
      [nodes, r, c](TensorNode& self) {
        long off = 0;
        for (auto& pn : *nodes) {
          const long pc = pn->size() / r;
          if (pn->requires_grad) {
            auto& g = pn->grad_buffer();
            for (long i = 0; i < r; ++i)
              for (long j = 0; j < pc; ++j)
                g[i * pc + j] += self.grad[i * c + off + j];
          }
          off += pc;
        }
      },
      "concat_cols");
}

// out[i] = x[i, cols[i]]; one picked entry per row.
inline Tensor take_per_row(const Tensor& x, const std::vector<long>& cols) {
  if (x.rank() != 2 || static_cast<long>(cols.size()) != x.rows())
    throw std::invalid_argument("take_per_row: need one column per row");
  const long r = x.rows(), c = x.cols();
  std::vector<double> out(r);
  for (long i = 0; i < r; ++i) {
    if (cols[i] < 0 || cols[i] >= c)
      throw std::out_of_range("take_per_row: column out of range");
    out[i] = x.values()[i * c + cols[i]];
  }
  auto xn = x.node();
  auto colcopy = std::make_shared<std::vector<long>>(cols);
  return detail::make_result(
      {r}, std::move(out), {x},
      [xn, colcopy, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < colcopy->size(); ++i)
          g[i * c + (*colcopy)[i]] += self.grad[i];
      },
      "take_per_row");
}

inline Tensor sum_rows(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("sum_rows requires rank-2");
  const long r = x.rows(), c = x.cols();
  std::vector<double> out(r, 0.0);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) out[i] += x.values()[i * c + j];
  auto xn = x.node();
  return detail::make_result(
      {r}, std::move(out), {x},
      [xn, r, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < r; ++i)
          for (long j = 0; j < c; ++j) g[i * c + j] += self.grad[i];
      },
      "sum_rows");
}

inline Tensor sum_all(const Tensor& x) {
  const long n = x.size();
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto xn = x.node();
  return detail::make_result(
      {1}, {s}, {x},
      [xn, n](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (long i = 0; i < n; ++i) g[i] += self.grad[0];
      },
      "sum_all");
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / x.size()); }

// ---------------------------------------------------------------------------
// backward + gradient checking
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradient accumulation is additive,
// so a tensor consumed by several ops receives the sum of all contributions.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward requires a scalar loss");
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; recursion would overflow on long chains.
  std::vector<std::shared_ptr<TensorNode>> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<std::shared_ptr<TensorNode>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && visited.insert(parent.get()).second)
        stack.emplace_back(std::move(parent), 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode& node = **it;
    if (node.backward_fn && !node.grad.empty()) node.backward_fn(node);
  }
}

// Compares the analytic gradient of a deterministic scalar function against
// central finite differences, coordinate by coordinate. Returns the worst
// relative error with denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Tensor(const Tensor&)>& fn,
                         const Tensor& point, double step) {
  Tensor p = point.clone(true);
  Tensor loss = fn(p);
  if (loss.size() != 1)
    throw std::invalid_argument("grad_check requires a scalar-valued function");
  backward(loss);
  std::vector<double> analytic(p.size(), 0.0);
  if (!p.grad().empty()) analytic = p.grad();

  autograd::NoGradGuard guard;
  std::vector<double> base = point.values();
  double worst = 0.0;
  for (long i = 0; i < point.size(); ++i) {
    std::vector<double> lo = base, hi = base;
    hi[i] += step;
    lo[i] -= step;
    double fhi = fn(Tensor::from_values(point.shape(), hi)).item();
    double flo = fn(Tensor::from_values(point.shape(), lo)).item();
    double numeric = (fhi - flo) / (2.0 * step);
    double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace dynavoc
