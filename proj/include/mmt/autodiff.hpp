// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation over dense Tensors.
//
// A Graph records every operation in insertion order. Each node owns (or, for
// parameter leaves, references) its forward value and lazily allocates a
// gradient buffer of the same shape. Graph::backward walks the tape in
// reverse insertion order and runs every recorded backward rule exactly once;
// rules add into the gradient buffers of their inputs, so a value consumed by
// several operations receives the sum of the per-path gradients.
#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmt/errors.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

namespace kernels {

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf that owns its value and never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  // Leaf that owns its value and accumulates a gradient.
  Var variable(Tensor value) { return push(std::move(value), true, nullptr); }

  // Leaf referencing external storage (model parameters). The referenced
  // tensor must outlive the graph and stay unmodified until backward is done.
  Var parameter(const Tensor& value, bool requires_grad = true) {
    Node& n = nodes_.emplace_back();
    n.external = &value;
    n.requires_grad = requires_grad;
    return {this, nodes_.size() - 1};
  }

  // Records an operation. `requires_grad` should be true iff any input does.
  Var record(Tensor value, bool requires_grad, BackwardFn backward) {
    return push(std::move(value), requires_grad, std::move(backward));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  const Tensor& value(Var v) const { return value(v.id); }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  // Gradient buffer, allocated as zeros on first access.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != value(id).shape()) n.grad = Tensor(value(id).shape());
    return n.grad;
  }
  Tensor& grad(Var v) { return grad(v.id); }

  std::size_t size() const { return nodes_.size(); }

  // Number of backward rules executed by the most recent backward().
  std::size_t backward_calls() const { return backward_calls_; }

  // Seeds d(root)/d(root) = 1 (root must be a single element) and propagates.
  void backward(Var root) {
    if (value(root).size() != 1) {
      throw DimensionError("backward: root must hold one element, got shape " +
                           shape_str(value(root).shape()));
    }
    grad(root).fill(1.0);
    backward_calls_ = 0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
      ++backward_calls_;
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::size_t backward_calls_ = 0;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline Graph& graph_of(Var a) {
  if (!a.graph) throw Error("operation on an unbound Var");
  return *a.graph;
}

inline Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw Error("operands belong to different graphs");
  return graph_of(a);
}

inline bool any_grad(Graph& g, std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (g.requires_grad(v)) return true;
  return false;
}

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// a[m x k] * b[k x n]
inline Var matmul(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  return g.record(std::move(out), detail::any_grad(g, {a, b}),
                  [a, b, m, k, n](Graph& gr, std::size_t self) {
                    const Tensor& dc = gr.grad(self);
                    if (gr.requires_grad(a))
                      kernels::gemm_nt(dc.data(), gr.value(b).data(), gr.grad(a).data(), m, n, k);
                    if (gr.requires_grad(b))
                      kernels::gemm_tn(gr.value(a).data(), dc.data(), gr.grad(b).data(), m, k, n);
                  });
}

// a[m x k] * b[n x k]^T
inline Var matmul_nt(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: cannot multiply " + shape_str(av.shape()) +
                         " by transpose of " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm_nt(av.data(), bv.data(), out.data(), m, k, n);
  return g.record(std::move(out), detail::any_grad(g, {a, b}),
                  [a, b, m, k, n](Graph& gr, std::size_t self) {
                    const Tensor& dc = gr.grad(self);
                    // dA = dC * B, dB = dC^T * A
                    if (gr.requires_grad(a))
                      kernels::gemm_nn(dc.data(), gr.value(b).data(), gr.grad(a).data(), m, n, k);
                    if (gr.requires_grad(b))
                      kernels::gemm_tn(dc.data(), gr.value(a).data(), gr.grad(b).data(), m, n, k);
                  });
}

// x[m x k] * w[k x n] + bias[n] (bias broadcast over rows)
inline Var linear(Var x, Var w, Var bias) {
  Graph& g = detail::graph_of(x, w);
  detail::graph_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.rows() || bv.rank() != 1 ||
      bv.dim(0) != wv.cols()) {
    throw DimensionError("linear: incompatible shapes " + shape_str(xv.shape()) + ", " +
                         shape_str(wv.shape()) + ", " + shape_str(bv.shape()));
  }
  const std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i)
    std::copy(bv.data(), bv.data() + n, out.data() + i * n);
  kernels::gemm_nn(xv.data(), wv.data(), out.data(), m, k, n);
  return g.record(std::move(out), detail::any_grad(g, {x, w, bias}),
                  [x, w, bias, m, k, n](Graph& gr, std::size_t self) {
                    const Tensor& dc = gr.grad(self);
                    if (gr.requires_grad(x))
                      kernels::gemm_nt(dc.data(), gr.value(w).data(), gr.grad(x).data(), m, n, k);
                    if (gr.requires_grad(w))
                      kernels::gemm_tn(gr.value(x).data(), dc.data(), gr.grad(w).data(), m, k, n);
                    if (gr.requires_grad(bias)) {
                      Tensor& db = gr.grad(bias);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) db[j] += dc[i * n + j];
                    }
                  });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  Tensor out = av;
  detail::add_into(out, bv);
  return g.record(std::move(out), detail::any_grad(g, {a, b}),
                  [a, b](Graph& gr, std::size_t self) {
                    const Tensor& d = gr.grad(self);
                    if (gr.requires_grad(a)) detail::add_into(gr.grad(a), d);
                    if (gr.requires_grad(b)) detail::add_into(gr.grad(b), d);
                  });
}

inline Var scale(Var a, double s) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  return g.record(std::move(out), g.requires_grad(a), [a, s](Graph& gr, std::size_t self) {
    const Tensor& d = gr.grad(self);
    Tensor& da = gr.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) da[i] += s * d[i];
  });
}

inline Var relu(Var a) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return g.record(std::move(out), g.requires_grad(a), [a](Graph& gr, std::size_t self) {
    const Tensor& d = gr.grad(self);
    const Tensor& x = gr.value(a);
    Tensor& da = gr.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x[i] > 0.0) da[i] += d[i];
  });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  for (double& v : out.storage()) v = sigmoid_value(v);
  return g.record(std::move(out), g.requires_grad(a), [a](Graph& gr, std::size_t self) {
    const Tensor& d = gr.grad(self);
    const Tensor& y = gr.value(self);
    Tensor& da = gr.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i] * y[i] * (1.0 - y[i]);
  });
}

namespace detail {

// Splits `shape` around `axis` into (outer, extent, inner) strides.
inline void axis_split(const Shape& shape, std::size_t axis, std::size_t& outer,
                       std::size_t& extent, std::size_t& inner) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  extent = shape[axis];
}

}  // namespace detail

// Numerically stable softmax along `axis` (max subtracted before exp).
inline Tensor softmax_value(const Tensor& x, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::axis_split(x.shape(), axis, outer, extent, inner);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, x[base + e * inner]);
      double sum = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        const double v = std::exp(x[base + e * inner] - mx);
        y[base + e * inner] = v;
        sum += v;
      }
      for (std::size_t e = 0; e < extent; ++e) y[base + e * inner] /= sum;
    }
  }
  return y;
}

inline Var softmax(Var a, std::size_t axis) {
  Graph& g = detail::graph_of(a);
  Tensor out = softmax_value(a.value(), axis);
  return g.record(std::move(out), g.requires_grad(a), [a, axis](Graph& gr, std::size_t self) {
    const Tensor& d = gr.grad(self);
    const Tensor& y = gr.value(self);
    Tensor& da = gr.grad(a);
    std::size_t outer, extent, inner;
    detail::axis_split(y.shape(), axis, outer, extent, inner);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * extent * inner + in;
        double dot = 0.0;
        for (std::size_t e = 0; e < extent; ++e) dot += d[base + e * inner] * y[base + e * inner];
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t idx = base + e * inner;
          da[idx] += y[idx] * (d[idx] - dot);
        }
      }
    }
  });
}

// Normalizes every vector along the last axis to zero mean and unit variance
// (biased variance, eps inside the square root), then applies gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = detail::graph_of(x, gain);
  detail::graph_of(x, bias);
  const Tensor& xv = x.value();
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  if (xv.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = xv.shape().back();
  if (gain.value().shape() != Shape{d} || bias.value().shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(d) +
                         "], got " + shape_str(gain.value().shape()) + " and " +
                         shape_str(bias.value().shape()));
  }
  const std::size_t rows = xv.size() / std::max<std::size_t>(d, 1);
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return g.record(
      std::move(out), detail::any_grad(g, {x, gain, bias}),
      [x, gain, bias, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& gv = gr.value(gain);
        if (gr.requires_grad(gain)) {
          Tensor& dg = gr.grad(gain);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * xhat[r * d + j];
        }
        if (gr.requires_grad(bias)) {
          Tensor& db = gr.grad(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
        }
        if (gr.requires_grad(x)) {
          Tensor& dx = gr.grad(x);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[r * d + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[r * d + j] * gv[j];
              dx[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

// Mean over one axis; the axis is removed from the result shape.
inline Var mean_over_axis(Var a, std::size_t axis) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = a.value();
  std::size_t outer, extent, inner;
  detail::axis_split(av.shape(), axis, outer, extent, inner);
  if (extent == 0) throw DimensionError("mean_over_axis: empty axis");
  Shape out_shape = av.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  const double inv = 1.0 / static_cast<double>(extent);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t in = 0; in < inner; ++in)
        out[o * inner + in] += av[(o * extent + e) * inner + in] * inv;
  return g.record(std::move(out), g.requires_grad(a),
                  [a, outer, extent, inner, inv](Graph& gr, std::size_t self) {
                    const Tensor& d = gr.grad(self);
                    Tensor& da = gr.grad(a);
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t e = 0; e < extent; ++e)
                        for (std::size_t in = 0; in < inner; ++in)
                          da[(o * extent + e) * inner + in] += d[o * inner + in] * inv;
                  });
}

inline Var reshape(Var a, Shape shape) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  return g.record(std::move(out), g.requires_grad(a), [a](Graph& gr, std::size_t self) {
    detail::add_into(gr.grad(a), gr.grad(self));
  });
}

// Columns [begin, end) of a matrix.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = a.value();
  require_matrix(av, "slice_cols");
  if (begin > end || end > av.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(av.shape()));
  }
  const std::size_t m = av.rows(), n = av.cols(), w = end - begin;
  Tensor out = Tensor::matrix(m, w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy(av.data() + i * n + begin, av.data() + i * n + end, out.data() + i * w);
  return g.record(std::move(out), g.requires_grad(a),
                  [a, begin, m, n, w](Graph& gr, std::size_t self) {
                    const Tensor& d = gr.grad(self);
                    Tensor& da = gr.grad(a);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < w; ++j) da[i * n + begin + j] += d[i * w + j];
                  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Graph& g = detail::graph_of(parts.front());
  const std::size_t m = parts.front().value().rows();
  std::size_t n = 0;
  bool needs_grad = false;
  for (Var p : parts) {
    detail::graph_of(parts.front(), p);
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != m) {
      throw DimensionError("concat_cols: row count mismatch " + shape_str(p.value().shape()));
    }
    n += p.value().cols();
    needs_grad = needs_grad || g.requires_grad(p);
  }
  Tensor out = Tensor::matrix(m, n);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy(pv.data() + i * pv.cols(), pv.data() + (i + 1) * pv.cols(),
                out.data() + i * n + off);
    off += pv.cols();
  }
  return g.record(std::move(out), needs_grad, [parts, m, n](Graph& gr, std::size_t self) {
    const Tensor& d = gr.grad(self);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t w = gr.value(p).cols();
      if (gr.requires_grad(p)) {
        Tensor& dp = gr.grad(p);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) dp[i * w + j] += d[i * n + off + j];
      }
      off += w;
    }
  });
}

// Gathers the listed rows of a matrix (rows may repeat).
inline Var select_rows(Var a, std::vector<std::size_t> rows) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = a.value();
  require_matrix(av, "select_rows");
  const std::size_t n = av.cols();
  Tensor out = Tensor::matrix(rows.size(), n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows()) throw DimensionError("select_rows: row index out of range");
    std::copy(av.data() + rows[i] * n, av.data() + (rows[i] + 1) * n, out.data() + i * n);
  }
  return g.record(std::move(out), g.requires_grad(a),
                  [a, rows = std::move(rows), n](Graph& gr, std::size_t self) {
                    const Tensor& d = gr.grad(self);
                    Tensor& da = gr.grad(a);
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      for (std::size_t j = 0; j < n; ++j) da[rows[i] * n + j] += d[i * n + j];
                  });
}

inline Var sum(Var a) {
  Graph& g = detail::graph_of(a);
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return g.record(Tensor({1}, std::vector<double>{s}), g.requires_grad(a),
                  [a](Graph& gr, std::size_t self) {
                    const double d = gr.grad(self)[0];
                    for (double& v : gr.grad(a).storage()) v += d;
                  });
}

inline Var sum_squares(Var a) {
  Graph& g = detail::graph_of(a);
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  return g.record(Tensor({1}, std::vector<double>{s}), g.requires_grad(a),
                  [a](Graph& gr, std::size_t self) {
                    const double d = gr.grad(self)[0];
                    const Tensor& x = gr.value(a);
                    Tensor& da = gr.grad(a);
                    for (std::size_t i = 0; i < x.size(); ++i) da[i] += 2.0 * x[i] * d;
                  });
}

// Inverted dropout: zeroes each entry with probability `rate` and scales the
// survivors by 1/(1-rate). The mask is drawn from `rng` at record time.
template <typename Rng>
Var dropout(Var a, double rate, Rng& rng) {
  Graph& g = detail::graph_of(a);
  if (rate <= 0.0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> mask(a.value().size());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = keep(rng) ? s : 0.0;
    out[i] *= mask[i];
  }
  return g.record(std::move(out), g.requires_grad(a),
                  [a, mask = std::move(mask)](Graph& gr, std::size_t self) {
                    const Tensor& d = gr.grad(self);
                    Tensor& da = gr.grad(a);
                    for (std::size_t i = 0; i < d.size(); ++i) da[i] += mask[i] * d[i];
                  });
}

// Identity in the forward pass whose backward rule scales the gradient by
// `factor`. Only used to build negative controls for the gradient checker.
inline Var faulty_identity(Var a, double factor) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  return g.record(std::move(out), g.requires_grad(a), [a, factor](Graph& gr, std::size_t self) {
    const Tensor& d = gr.grad(self);
    Tensor& da = gr.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) da[i] += factor * d[i];
  });
}

}  // namespace mmt
