#pragma once

// Tape-based reverse-mode differentiation over small dense tensors.
//
// A Graph owns every node created while evaluating a loss. Node ids are
// assigned in creation order, so the tape is already topologically sorted and
// backward() is a single reverse sweep. Each Graph is independent; there is no
// global state, so separate graphs may live on separate threads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "coordrl/diffcore/tensor.hpp"

namespace coordrl::ad {

class Graph;

/// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }
  Var parameter(Tensor value) { return push(std::move(value), true, {}); }

  /// Records an op. `requires_grad` is inherited from the inputs.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated for a node; zeros if the node was not reached.
  Tensor grad(Var v) const {
    const auto& n = nodes_[v.id];
    if (n.grad.size() == n.value.size() && n.grad.shape() == n.value.shape()) return n.grad;
    return Tensor(n.value.shape());
  }

  /// Adds `g` into the gradient of node `id`; no-op for constants.
  void accumulate(std::size_t id, const Tensor& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    ensure_grad(n);
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Mutable gradient buffer for in-place accumulation inside backward fns.
  /// Returns nullptr for nodes that do not require gradients.
  Tensor* grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    ensure_grad(n);
    return &n.grad;
  }

  void backward(Var loss) {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
    if (nodes_[loss.id].value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_string(nodes_[loss.id].value.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    if (!nodes_[loss.id].requires_grad) return;
    ensure_grad(nodes_[loss.id]);
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      // Copy: the backward fn may touch other nodes' grads but never its own.
      const Tensor g = n.grad;
      n.backward(*this, g);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  static void ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape())
      n.grad = Tensor(n.value.shape());
  }

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

inline void require_same_graph(const Var& a, const Var& b) {
  if (a.graph != b.graph) throw std::invalid_argument("vars from different graphs");
}

template <class F, class DF>
Var unary(Var x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, df](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    const Tensor& xv = g.value(xi);
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += dout[i] * df(xv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense layers

/// y = weight * x + bias. x may be a vector [in] or a row batch [n x in];
/// weight is [out x in], bias is [out].
inline Var linear(Var x, Var weight, Var bias) {
  detail::require_same_graph(x, weight);
  detail::require_same_graph(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (wv.rank() != 2) throw ShapeError("linear: weight must be a matrix");
  const std::size_t out_dim = wv.shape()[0], in_dim = wv.shape()[1];
  if (bv.rank() != 1 || bv.size() != out_dim)
    throw ShapeError("linear: bias shape " + shape_string(bv.shape()) + " does not match weight " +
                     shape_string(wv.shape()));
  if (xv.rank() < 1 || xv.rank() > 2 || xv.cols() != in_dim)
    throw ShapeError("linear: input shape " + shape_string(xv.shape()) +
                     " does not match weight " + shape_string(wv.shape()));
  const bool batched = xv.rank() == 2;
  const std::size_t n = xv.rows();
  Tensor out(batched ? Shape{n, out_dim} : Shape{out_dim});
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.data().data() + r * in_dim;
    double* yr = out.data().data() + r * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = wv.data().data() + o * in_dim;
      double acc = 0.0;
      for (std::size_t i = 0; i < in_dim; ++i) acc += wr[i] * xr[i];
      yr[o] = acc + bv[o];
    }
  }
  const std::size_t xi = x.id, wi = weight.id, bi = bias.id;
  return x.graph->record(std::move(out), {x, weight, bias},
                         [xi, wi, bi, n, in_dim, out_dim](Graph& g, const Tensor& dout) {
                           const Tensor& xv = g.value(xi);
                           const Tensor& wv = g.value(wi);
                           if (Tensor* gx = g.grad_buffer(xi)) {
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t o = 0; o < out_dim; ++o) {
                                 const double d = dout[r * out_dim + o];
                                 if (d == 0.0) continue;
                                 const double* wr = wv.data().data() + o * in_dim;
                                 double* gr = gx->data().data() + r * in_dim;
                                 for (std::size_t i = 0; i < in_dim; ++i) gr[i] += d * wr[i];
                               }
                           }
                           if (Tensor* gw = g.grad_buffer(wi)) {
                             for (std::size_t r = 0; r < n; ++r) {
                               const double* xr = xv.data().data() + r * in_dim;
                               for (std::size_t o = 0; o < out_dim; ++o) {
                                 const double d = dout[r * out_dim + o];
                                 if (d == 0.0) continue;
                                 double* gr = gw->data().data() + o * in_dim;
                                 for (std::size_t i = 0; i < in_dim; ++i) gr[i] += d * xr[i];
                               }
                             }
                           }
                           if (Tensor* gb = g.grad_buffer(bi)) {
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t o = 0; o < out_dim; ++o)
                                 (*gb)[o] += dout[r * out_dim + o];
                           }
                         });
}

enum class Activation { tanh, relu };

inline Var tanh(Var x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); },
      [](double v) {
        const double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

/// Subgradient 0 at the kink.
inline Var relu(Var x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var activation(Var x, Activation kind) {
  return kind == Activation::tanh ? tanh(x) : relu(x);
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var exp(Var x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

inline Var log(Var x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

inline Var square(Var x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

/// Subgradient 0 at the origin.
inline Var abs(Var x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var scale(Var x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double) { return c; });
}

inline Var add_scalar(Var x, double c) {
  return detail::unary(
      x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

/// max(x, floor); gradient 0 wherever x <= floor.
inline Var clamp_min(Var x, double floor) {
  return detail::unary(
      x, [floor](double v) { return v > floor ? v : floor; },
      [floor](double v) { return v > floor ? 1.0 : 0.0; });
}

/// Clamps into [lo, hi]; gradient 1 strictly inside, 0 elsewhere.
inline Var clip(Var x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F f, DA da, DB db) {
  detail::require_same_graph(a, b);
  detail::require_same_shape(a, b, name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  const std::size_t ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi, da, db](Graph& g, const Tensor& dout) {
    const Tensor& av = g.value(ai);
    const Tensor& bv = g.value(bi);
    if (Tensor* ga = g.grad_buffer(ai))
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += dout[i] * da(av[i], bv[i]);
    if (Tensor* gb = g.grad_buffer(bi))
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] += dout[i] * db(av[i], bv[i]);
  });
}

inline Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

/// Elementwise minimum; ties route the gradient to `a`.
inline Var minimum(Var a, Var b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

/// x - c and x * c with a constant tensor c of the same shape.
inline Var sub_const(Var x, const Tensor& c) {
  if (x.shape() != c.shape()) throw ShapeError("sub_const: shape mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c[i];
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi](Graph& g, const Tensor& dout) {
    g.accumulate(xi, dout);
  });
}

inline Var mul_const(Var x, const Tensor& c) {
  if (x.shape() != c.shape()) throw ShapeError("mul_const: shape mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, c](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < c.size(); ++i) (*gx)[i] += dout[i] * c[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(Var x) {
  const Tensor& xv = x.value();
  double acc = 0.0;
  for (double v : xv.data()) acc += v;
  const std::size_t xi = x.id;
  return x.graph->record(Tensor::scalar(acc), {x}, [xi](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    for (auto& v : gx->data()) v += dout[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Weighted total sum_i w_i x_i with constant weights.
inline Var dot_const(Var x, const Tensor& w) {
  if (x.value().size() != w.size()) throw ShapeError("dot_const: size mismatch");
  const Tensor& xv = x.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += w[i] * xv[i];
  const std::size_t xi = x.id;
  return x.graph->record(Tensor::scalar(acc), {x}, [xi, w](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < w.size(); ++i) (*gx)[i] += dout[0] * w[i];
  });
}

/// Sums each row of [n x k] into [n].
inline Var sum_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), k = xv.cols();
  Tensor out(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) acc += xv[r * k + c];
    out[r] = acc;
  }
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, n, k](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < k; ++c) (*gx)[r * k + c] += dout[r];
  });
}

inline Var reshape(Var x, Shape shape) {
  if (num_elements(shape) != x.value().size())
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  Tensor out(std::move(shape), x.value().values());
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < dout.size(); ++i) (*gx)[i] += dout[i];
  });
}

/// Repeats a vector [n] into the columns of [n x k].
inline Var broadcast_cols(Var v, std::size_t k) {
  const Tensor& vv = v.value();
  if (vv.rank() != 1) throw ShapeError("broadcast_cols: expects a vector");
  const std::size_t n = vv.size();
  Tensor out(Shape{n, k});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < k; ++c) out[r * k + c] = vv[r];
  const std::size_t vi = v.id;
  return v.graph->record(std::move(out), {v}, [vi, n, k](Graph& g, const Tensor& dout) {
    Tensor* gv = g.grad_buffer(vi);
    if (!gv) return;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < k; ++c) (*gv)[r] += dout[r * k + c];
  });
}

/// Selects rows of a matrix (duplicates allowed); vectors are treated as [n x 1].
inline Var select_rows(Var x, std::span<const std::size_t> idx) {
  const Tensor& xv = x.value();
  const std::size_t k = xv.rank() == 2 ? xv.cols() : 1;
  const std::size_t n = xv.rank() == 2 ? xv.rows() : xv.size();
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  for (auto r : rows)
    if (r >= n) throw ShapeError("select_rows: index out of range");
  Tensor out(xv.rank() == 2 ? Shape{rows.size(), k} : Shape{rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < k; ++c) out[i * k + c] = xv[rows[i] * k + c];
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, rows, k](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < k; ++c) (*gx)[rows[i] * k + c] += dout[i * k + c];
  });
}

/// out[i] = x[i, idx[i]] for a matrix [n x k].
inline Var gather(Var x, std::span<const std::size_t> idx) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || idx.size() != xv.rows()) throw ShapeError("gather: shape mismatch");
  const std::size_t k = xv.cols();
  std::vector<std::size_t> cols(idx.begin(), idx.end());
  Tensor out(Shape{cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= k) throw ShapeError("gather: index out of range");
    out[i] = xv[i * k + cols[i]];
  }
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, cols, k](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < cols.size(); ++i) (*gx)[i * k + cols[i]] += dout[i];
  });
}

/// Row-wise log-softmax, stabilized by subtracting the row max.
inline Var log_softmax(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1 || xv.rank() > 2 || xv.cols() == 0)
    throw ShapeError("log_softmax: expects a nonempty vector or matrix");
  const std::size_t n = xv.rows(), k = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data().data() + r * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(row[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < k; ++c) out[r * k + c] = row[c] - lse;
  }
  const std::size_t xi = x.id;
  const std::size_t yi = x.graph->size();  // id the output node will receive
  return x.graph->record(std::move(out), {x}, [xi, yi, n, k](Graph& g, const Tensor& dout) {
    Tensor* gx = g.grad_buffer(xi);
    if (!gx) return;
    const Tensor& y = g.value(yi);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += dout[r * k + c];
      for (std::size_t c = 0; c < k; ++c)
        (*gx)[r * k + c] += dout[r * k + c] - std::exp(y[r * k + c]) * s;
    }
  });
}

/// Sums scalars.
inline Var add_all(std::span<const Var> terms) {
  if (terms.empty()) throw std::invalid_argument("add_all: no terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace coordrl::ad
