#pragma once

// Reverse-mode automatic differentiation over dense double arrays.
//
// A Tape owns an append-only list of nodes. Every operation appends one node holding
// its forward value and a closure that pushes the output adjoint back into its inputs.
// Node ids increase strictly from inputs to outputs, so a reverse sweep over ids is a
// valid topological order.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pgt/errors.hpp"
#include "pgt/tensor.hpp"

namespace pgt::ad {

enum class OpKind {
  leaf,
  matmul,
  transpose,
  add,
  sub,
  mul,
  div,
  scale,
  shift,
  sin,
  exp,
  log,
  square,
  gelu,
  tanh,
  softplus,
  softmax_rows,
  layernorm_rows,
  rowwise_sum,
  sum,
  mean,
  reshape,
  slice_rows,
  slice_cols,
  concat_cols,
  concat_rows,
  tile_rows,
};

inline std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::scale: return "scale";
    case OpKind::shift: return "shift";
    case OpKind::sin: return "sin";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::gelu: return "gelu";
    case OpKind::tanh: return "tanh";
    case OpKind::softplus: return "softplus";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::layernorm_rows: return "layernorm_rows";
    case OpKind::rowwise_sum: return "rowwise_sum";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::tile_rows: return "tile_rows";
  }
  return "?";
}

// Logits at or below the threshold are treated as -inf by softmax_rows. Attention
// biases write kMaskSentinel so that arithmetic on masked logits stays finite.
inline constexpr double kMaskSentinel = -1e9;
inline constexpr double kMaskThreshold = -1e8;
inline constexpr double kLayerNormEps = 1e-5;

inline bool is_masked_logit(double v) { return v <= kMaskThreshold; }

namespace testing_hooks {
// When set, softmax_rows leaks a small weight into masked entries. Exists only so the
// invariant checker can be shown to catch a broken softmax.
inline std::atomic<bool> leaky_softmax{false};
}  // namespace testing_hooks

using NodeId = std::size_t;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  NodeId id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), requires_grad, OpKind::leaf, {}, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(Tensor value, OpKind op, std::vector<NodeId> inputs, BackwardFn backward) {
    bool rg = false;
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) throw InputError("node input refers to a future node");
      rg = rg || nodes_[in].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), rg, op, std::move(inputs), rg ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  OpKind op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  // Adjoints from a previous sweep are discarded, never accumulated into.
  // With retain_interior=false only leaf adjoints survive the sweep.
  void backward(Var root, bool retain_interior = true) {
    if (root.value().rank() != 0) {
      throw RankError("backward root must be a scalar, got shape " + shape_str(root.shape()));
    }
    grads_.clear();
    grads_.resize(nodes_.size());
    if (!nodes_[root.id()].requires_grad) return;
    grads_[root.id()] = Tensor::scalar(1.0);
    for (NodeId id = root.id() + 1; id-- > 0;) {
      if (!grads_[id]) continue;
      Node& n = nodes_[id];
      if (n.backward) n.backward(*this, *grads_[id]);
      if (!retain_interior && n.op != OpKind::leaf) grads_[id].reset();
    }
  }

  bool has_grad(Var v) const { return v.id() < grads_.size() && grads_[v.id()].has_value(); }

  const Tensor& grad(Var v) const {
    if (!has_grad(v)) throw InputError("node " + std::to_string(v.id()) + " has no adjoint");
    return *grads_[v.id()];
  }

  // Accumulation buffer for an input adjoint; nullptr when the input does not need one.
  Tensor* grad_slot(NodeId id) {
    if (!nodes_[id].requires_grad) return nullptr;
    auto& slot = grads_[id];
    if (!slot) slot.emplace(nodes_[id].value.shape(), 0.0);
    return &*slot;
  }

  bool depends_on_op(Var root, OpKind op) const {
    std::vector<bool> seen(nodes_.size(), false);
    std::vector<NodeId> stack{root.id()};
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      if (seen[id]) continue;
      seen[id] = true;
      if (nodes_[id].op == op) return true;
      for (NodeId in : nodes_[id].inputs) stack.push_back(in);
    }
    return false;
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad;
    OpKind op;
    std::vector<NodeId> inputs;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // deque keeps value references stable while appending
  std::vector<std::optional<Tensor>> grads_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_mat(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw InputError("operands recorded on different tapes");
  return a.tape();
}

inline void require_rank2(const Tensor& t, std::string_view what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got shape " + shape_str(t.shape()));
  }
}

inline bool is_suffix(const Shape& part, const Shape& full) {
  return part.size() <= full.size() && std::equal(part.begin(), part.end(), full.end() - part.size());
}

// Trailing-dimension broadcasting: one operand's shape must be a suffix of the other's
// (a scalar is the empty suffix). The shorter operand repeats over the leading dims.
inline Shape broadcast_shape(const Shape& a, const Shape& b, OpKind op) {
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw DimensionError(std::string(op_name(op)) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not trailing-aligned");
}

template <class Fwd, class Bwd>
Var binary_op(Var a, Var b, OpKind kind, Fwd fwd, Bwd bwd) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(broadcast_shape(av.shape(), bv.shape(), kind));
  const std::size_t n = out.size(), na = av.size(), nb = bv.size();
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  } else if (na == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % nb]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i % na], bv[i]);
  }
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(std::move(out), kind, {ia, ib}, [ia, ib, bwd](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    Tensor* gx = t.grad_slot(ia);
    Tensor* gy = t.grad_slot(ib);
    const std::size_t n = g.size(), nx = x.size(), ny = y.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t jx = nx == n ? i : i % nx;
      const std::size_t jy = ny == n ? i : i % ny;
      double dx = 0.0, dy = 0.0;
      bwd(x[jx], y[jy], g[i], dx, dy);
      if (gx) (*gx)[jx] += dx;
      if (gy) (*gy)[jy] += dy;
    }
  });
}

// bwd(x, y, g) returns dL/dx given input x, output y and output adjoint g.
template <class Fwd, class Bwd>
Var unary_op(Var x, OpKind kind, Fwd fwd, Bwd bwd) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const NodeId ix = x.id();
  const NodeId iy = x.tape().size();
  return x.tape().record(std::move(out), kind, {ix}, [ix, iy, bwd](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(ix);
    if (!gx) return;
    const Tensor& xv = t.value(ix);
    const Tensor& yv = t.value(iy);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += bwd(xv[i], yv[i], g[i]);
  });
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  return detail::binary_op(
      a, b, OpKind::add, [](double x, double y) { return x + y; },
      [](double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = g;
      });
}

inline Var sub(Var a, Var b) {
  return detail::binary_op(
      a, b, OpKind::sub, [](double x, double y) { return x - y; },
      [](double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = -g;
      });
}

inline Var mul(Var a, Var b) {
  return detail::binary_op(
      a, b, OpKind::mul, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& dx, double& dy) {
        dx = g * y;
        dy = g * x;
      });
}

inline Var div(Var a, Var b) {
  for (double v : b.value().data()) {
    if (v == 0.0) throw DomainError("div: zero divisor");
  }
  return detail::binary_op(
      a, b, OpKind::div, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& dx, double& dy) {
        dx = g / y;
        dy = -g * x / (y * y);
      });
}

inline Var scale(Var x, double c) {
  return detail::unary_op(
      x, OpKind::scale, [c](double v) { return c * v; }, [c](double, double, double g) { return c * g; });
}

inline Var shift(Var x, double c) {
  return detail::unary_op(
      x, OpKind::shift, [c](double v) { return v + c; }, [](double, double, double g) { return g; });
}

inline Var sin(Var x) {
  return detail::unary_op(
      x, OpKind::sin, [](double v) { return std::sin(v); },
      [](double v, double, double g) { return g * std::cos(v); });
}

inline Var exp(Var x) {
  return detail::unary_op(
      x, OpKind::exp, [](double v) { return std::exp(v); }, [](double, double y, double g) { return g * y; });
}

inline Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive operand " + std::to_string(v));
  }
  return detail::unary_op(
      x, OpKind::log, [](double v) { return std::log(v); }, [](double v, double, double g) { return g / v; });
}

inline Var square(Var x) {
  return detail::unary_op(
      x, OpKind::square, [](double v) { return v * v; }, [](double v, double, double g) { return 2.0 * v * g; });
}

// Exact form x * Phi(x) with the Gaussian CDF.
inline Var gelu(Var x) {
  return detail::unary_op(
      x, OpKind::gelu, [](double v) { return v * detail::normal_cdf(v); },
      [](double v, double, double g) { return g * (detail::normal_cdf(v) + v * detail::normal_pdf(v)); });
}

inline Var tanh(Var x) {
  return detail::unary_op(
      x, OpKind::tanh, [](double v) { return std::tanh(v); },
      [](double, double y, double g) { return g * (1.0 - y * y); });
}

inline Var softplus(Var x) {
  return detail::unary_op(
      x, OpKind::softplus, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double, double g) { return g / (1.0 + std::exp(-v)); });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator*(double c, Var x) { return scale(x, c); }
inline Var operator*(Var x, double c) { return scale(x, c); }
inline Var operator+(Var x, double c) { return shift(x, c); }
inline Var operator-(Var x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(av.shape()) + " @ " +
                         shape_str(bv.shape()));
  }
  Tensor out(Shape{av.rows(), bv.cols()});
  detail::as_mat(out).noalias() = detail::as_mat(av) * detail::as_mat(bv);
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(std::move(out), OpKind::matmul, {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_slot(ia)) {
      detail::as_mat(*ga).noalias() += detail::as_mat(g) * detail::as_mat(t.value(ib)).transpose();
    }
    if (Tensor* gb = t.grad_slot(ib)) {
      detail::as_mat(*gb).noalias() += detail::as_mat(t.value(ia)).transpose() * detail::as_mat(g);
    }
  });
}

inline Var transpose(Var x) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "transpose");
  Tensor out(Shape{xv.cols(), xv.rows()});
  detail::as_mat(out) = detail::as_mat(xv).transpose();
  const NodeId ix = x.id();
  return x.tape().record(std::move(out), OpKind::transpose, {ix}, [ix](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) detail::as_mat(*gx) += detail::as_mat(g).transpose();
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

// Softmax over each row. Entries at or below kMaskThreshold (including -inf) get weight
// exactly 0; a row with no other entries is an error.
inline Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 1 && xv.rank() != 2) {
    throw DimensionError("softmax_rows expects rank 1 or 2, got " + shape_str(xv.shape()));
  }
  const std::size_t m = xv.rank() == 2 ? xv.rows() : 1;
  const std::size_t n = xv.rank() == 2 ? xv.cols() : xv.size();
  const bool leaky = testing_hooks::leaky_softmax.load(std::memory_order_relaxed);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = xv.data().data() + r * n;
    double* o = out.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (!is_masked_logit(in[c])) mx = std::max(mx, in[c]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw DegenerateRowError("softmax_rows: row " + std::to_string(r) + " has no admissible entries");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (is_masked_logit(in[c])) {
        o[c] = leaky ? std::exp(-10.0) : 0.0;
      } else {
        o[c] = std::exp(in[c] - mx);
      }
      total += o[c];
    }
    const double inv = 1.0 / total;
    for (std::size_t c = 0; c < n; ++c) o[c] *= inv;
  }
  const NodeId ix = x.id();
  const NodeId iy = x.tape().size();
  return x.tape().record(std::move(out), OpKind::softmax_rows, {ix}, [ix, iy, m, n](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(ix);
    if (!gx) return;
    const Tensor& y = t.value(iy);
    for (std::size_t r = 0; r < m; ++r) {
      const double* yr = y.data().data() + r * n;
      const double* gr = g.data().data() + r * n;
      double* dx = gx->data().data() + r * n;
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += gr[c] * yr[c];
      for (std::size_t c = 0; c < n; ++c) dx[c] += yr[c] * (gr[c] - s);
    }
  });
}

// Per-row standardization (population variance + kLayerNormEps). Learnable scale and
// shift are applied by the caller.
inline Var layernorm_rows(Var x) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "layernorm_rows");
  const std::size_t m = xv.rows(), d = xv.cols();
  if (d < 2) throw DimensionError("layernorm_rows needs at least 2 columns, got " + shape_str(xv.shape()));
  Tensor out(xv.shape());
  std::vector<double> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) out(r, c) = (in[c] - mu) * rstd[r];
  }
  const NodeId ix = x.id();
  const NodeId iy = x.tape().size();
  return x.tape().record(std::move(out), OpKind::layernorm_rows, {ix},
                         [ix, iy, m, d, rstd = std::move(rstd)](Tape& t, const Tensor& g) {
                           Tensor* gx = t.grad_slot(ix);
                           if (!gx) return;
                           const Tensor& y = t.value(iy);
                           const double inv_d = 1.0 / static_cast<double>(d);
                           for (std::size_t r = 0; r < m; ++r) {
                             double gm = 0.0, gy = 0.0;
                             for (std::size_t c = 0; c < d; ++c) {
                               gm += g(r, c);
                               gy += g(r, c) * y(r, c);
                             }
                             gm *= inv_d;
                             gy *= inv_d;
                             for (std::size_t c = 0; c < d; ++c) {
                               (*gx)(r, c) += rstd[r] * (g(r, c) - gm - y(r, c) * gy);
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const NodeId ix = x.id();
  return x.tape().record(Tensor::scalar(s), OpKind::sum, {ix}, [ix](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      const double gv = g[0];
      for (double& v : gx->data()) v += gv;
    }
  });
}

inline Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const NodeId ix = x.id();
  return x.tape().record(Tensor::scalar(s / n), OpKind::mean, {ix}, [ix, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      const double gv = g[0] / n;
      for (double& v : gx->data()) v += gv;
    }
  });
}

// [m x n] -> [m x 1]
inline Var rowwise_sum(Var x) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "rowwise_sum");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(Shape{m, 1});
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += xv(r, c);
    out[r] = s;
  }
  const NodeId ix = x.id();
  return x.tape().record(std::move(out), OpKind::rowwise_sum, {ix}, [ix, m, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) (*gx)(r, c) += g[r];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Var reshape(Var x, Shape shape) {
  const Tensor& xv = x.value();
  if (numel(shape) != xv.size()) {
    throw DimensionError("reshape: " + shape_str(xv.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor out(std::move(shape), xv.storage());
  const NodeId ix = x.id();
  return x.tape().record(std::move(out), OpKind::reshape, {ix}, [ix](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "slice_rows");
  if (begin > end || end > xv.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                         shape_str(xv.shape()));
  }
  const std::size_t n = xv.cols();
  Tensor out(Shape{end - begin, n},
             std::vector<double>(xv.storage().begin() + static_cast<std::ptrdiff_t>(begin * n),
                                 xv.storage().begin() + static_cast<std::ptrdiff_t>(end * n)));
  const NodeId ix = x.id();
  return x.tape().record(std::move(out), OpKind::slice_rows, {ix}, [ix, begin, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      double* dst = gx->data().data() + begin * n;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "slice_cols");
  if (begin > end || end > xv.cols()) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                         shape_str(xv.shape()));
  }
  const std::size_t m = xv.rows(), w = end - begin;
  Tensor out(Shape{m, w});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < w; ++c) out(r, c) = xv(r, begin + c);
  }
  const NodeId ix = x.id();
  return x.tape().record(std::move(out), OpKind::slice_cols, {ix}, [ix, begin, m, w](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < w; ++c) (*gx)(r, begin + c) += g(r, c);
      }
    }
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InputError("concat_cols of nothing");
  Tape& tape = parts[0].tape();
  const std::size_t m = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p);
    const Tensor& v = p.value();
    detail::require_rank2(v, "concat_cols");
    if (v.rows() != m) {
      throw DimensionError("concat_cols: row counts differ (" + shape_str(parts[0].shape()) + " vs " +
                           shape_str(v.shape()) + ")");
    }
    ids.push_back(p.id());
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor out(Shape{m, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
    }
    off += v.cols();
  }
  return tape.record(std::move(out), OpKind::concat_cols, ids, [ids, widths, m](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gx = t.grad_slot(ids[k])) {
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < widths[k]; ++c) (*gx)(r, c) += g(r, off + c);
        }
      }
      off += widths[k];
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InputError("concat_rows of nothing");
  Tape& tape = parts[0].tape();
  const std::size_t n = parts[0].value().cols();
  std::vector<NodeId> ids;
  std::vector<double> data;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p);
    const Tensor& v = p.value();
    detail::require_rank2(v, "concat_rows");
    if (v.cols() != n) {
      throw DimensionError("concat_rows: column counts differ (" + shape_str(parts[0].shape()) + " vs " +
                           shape_str(v.shape()) + ")");
    }
    ids.push_back(p.id());
    data.insert(data.end(), v.storage().begin(), v.storage().end());
    rows += v.rows();
  }
  return tape.record(Tensor(Shape{rows, n}, std::move(data)), OpKind::concat_rows, ids,
                     [ids](Tape& t, const Tensor& g) {
                       std::size_t off = 0;
                       for (NodeId id : ids) {
                         const std::size_t len = t.value(id).size();
                         if (Tensor* gx = t.grad_slot(id)) {
                           for (std::size_t i = 0; i < len; ++i) (*gx)[i] += g[off + i];
                         }
                         off += len;
                       }
                     });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

// [n] or [1 x n] -> [m x n]
inline Var tile_rows(Var x, std::size_t m) {
  const Tensor& xv = x.value();
  if (!(xv.rank() == 1 || (xv.rank() == 2 && xv.rows() == 1))) {
    throw DimensionError("tile_rows expects a row vector, got " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.size();
  Tensor out(Shape{m, n});
  for (std::size_t r = 0; r < m; ++r) {
    std::copy(xv.storage().begin(), xv.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const NodeId ix = x.id();
  return x.tape().record(std::move(out), OpKind::tile_rows, {ix}, [ix, m, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) (*gx)[c] += g(r, c);
      }
    }
  });
}

}  // namespace pgt::ad
