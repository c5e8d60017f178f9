#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "stackcap/tensor.hpp"

namespace stackcap {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  inline const Tensor& value() const;
  inline bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Dynamic reverse-mode tape. Built fresh for every forward pass; nodes are
/// appended in evaluation order, so the node order is topological.
///
/// A tape is single-threaded. Independent tapes may be used concurrently.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    require_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op result. `backward` receives the tape and this node's id and
  /// accumulates into parents via accumulate(). It is dropped when no parent
  /// needs a gradient.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward,
             const char* op_name) {
    require_finite(value, op_name);
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    if (!needs) {
      parents.clear();
      backward = nullptr;
    }
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward), needs});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Gradient buffer of `id` during backward. Only valid inside a BackwardFn.
  const Tensor& grad_of(std::size_t id) const { return grads_[id]; }

  /// Zero-initialized gradient buffer for a parent, or nullptr if the parent
  /// does not take gradients.
  Tensor* accumulate(std::size_t id) {
    if (!nodes_[id].requires_grad) return nullptr;
    Tensor& g = grads_[id];
    if (g.empty()) g = Tensor(nodes_[id].value.shape(), 0.0);
    return &g;
  }

  /// Runs reverse accumulation from a scalar loss. A tape can be consumed once.
  void backward(Var loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    if (value(loss.id()).size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_string(value(loss.id()).shape()));
    }
    consumed_ = true;
    grads_.assign(nodes_.size(), Tensor{});
    if (!nodes_[loss.id()].requires_grad) return;
    grads_[loss.id()] = Tensor(value(loss.id()).shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || grads_[i].empty()) continue;
      n.backward(*this, i);
    }
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      if (!grads_[i].empty()) require_finite(grads_[i], "gradient");
    }
  }

  /// Gradient w.r.t. a node after backward(); zeros when unreachable.
  Tensor gradient(Var v) const {
    if (!consumed_) throw std::logic_error("gradient: call backward() first");
    const Tensor& g = grads_[v.id()];
    if (g.empty()) return Tensor(value(v.id()).shape(), 0.0);
    return g;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
  return *a.tape();
}

[[noreturn]] inline void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                   " and " + shape_string(b.shape()));
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Four partial sums so the loop vectorizes without reassociation flags.
inline double dot(const double* x, const double* y, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) s0 += x[i] * y[i];
  return (s0 + s1) + (s2 + s3);
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename F>
Var unary(Var a, const char* name, F&& f, std::function<double(double x, double y)> dydx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape()->record(
      std::move(y), {a.id()},
      [ai = a.id(), dydx = std::move(dydx)](Tape& t, std::size_t self) {
        Tensor* ga = t.accumulate(ai);
        const Tensor& g = t.grad_of(self);
        const Tensor& x = t.value(ai);
        const Tensor& y = t.value(self);
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * dydx(x[i], y[i]);
      },
      name);
}

}  // namespace detail

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (x.cols() != w.rows()) detail::shape_mismatch("matmul", x, w);
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  Tensor y({m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* yr = y.ptr() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double xip = x(i, p);
      if (xip != 0.0) detail::axpy(xip, w.ptr() + p * n, yr, n);
    }
  }
  return tape.record(
      std::move(y), {a.id(), b.id()},
      [ai = a.id(), bi = b.id(), m, k, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& x = t.value(ai);
        const Tensor& w = t.value(bi);
        if (Tensor* gx = t.accumulate(ai)) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* gr = g.ptr() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              (*gx)(i, p) += detail::dot(gr, w.ptr() + p * n, n);
            }
          }
        }
        if (Tensor* gw = t.accumulate(bi)) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* gr = g.ptr() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double xip = x(i, p);
              if (xip != 0.0) detail::axpy(xip, gr, gw->ptr() + p * n, n);
            }
          }
        }
      },
      "matmul");
}

/// Elementwise sum. `b` may also be a single row broadcast over a's rows.
inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  const bool broadcast = !(x.size() == z.size() && same_shape(x, z));
  if (broadcast && !(z.rows() == 1 && z.cols() == x.cols())) detail::shape_mismatch("add", x, z);
  Tensor y = x;
  const std::size_t n = x.cols();
  if (broadcast) {
    for (std::size_t r = 0; r < x.rows(); ++r) detail::axpy(1.0, z.ptr(), y.ptr() + r * n, n);
  } else {
    detail::axpy(1.0, z.ptr(), y.ptr(), y.size());
  }
  return tape.record(
      std::move(y), {a.id(), b.id()},
      [ai = a.id(), bi = b.id(), broadcast, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        if (Tensor* ga = t.accumulate(ai)) detail::axpy(1.0, g.ptr(), ga->ptr(), g.size());
        if (Tensor* gb = t.accumulate(bi)) {
          if (broadcast) {
            for (std::size_t r = 0; r < g.rows(); ++r) detail::axpy(1.0, g.ptr() + r * n, gb->ptr(), n);
          } else {
            detail::axpy(1.0, g.ptr(), gb->ptr(), g.size());
          }
        }
      },
      "add");
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (!(x.size() == z.size() && same_shape(x, z))) detail::shape_mismatch("sub", x, z);
  Tensor y = x;
  detail::axpy(-1.0, z.ptr(), y.ptr(), y.size());
  return tape.record(
      std::move(y), {a.id(), b.id()},
      [ai = a.id(), bi = b.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        if (Tensor* ga = t.accumulate(ai)) detail::axpy(1.0, g.ptr(), ga->ptr(), g.size());
        if (Tensor* gb = t.accumulate(bi)) detail::axpy(-1.0, g.ptr(), gb->ptr(), g.size());
      },
      "sub");
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (!(x.size() == z.size() && same_shape(x, z))) detail::shape_mismatch("mul", x, z);
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= z[i];
  return tape.record(
      std::move(y), {a.id(), b.id()},
      [ai = a.id(), bi = b.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& x = t.value(ai);
        const Tensor& z = t.value(bi);
        if (Tensor* ga = t.accumulate(ai)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * z[i];
        }
        if (Tensor* gb = t.accumulate(bi)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * x[i];
        }
      },
      "mul");
}

inline Var scale(Var a, double s) {
  Tensor y = a.value();
  for (double& v : y.data()) v *= s;
  return a.tape()->record(
      std::move(y), {a.id()},
      [ai = a.id(), s](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        detail::axpy(s, g.ptr(), t.accumulate(ai)->ptr(), g.size());
      },
      "scale");
}

inline Var tanh(Var a) {
  return detail::unary(a, "tanh", [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, "sigmoid", [](double x) { return detail::sigmoid(x); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var log(Var a) {
  return detail::unary(a, "log", [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

/// Row-wise softmax with max subtraction.
inline Var softmax(Var a) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.ptr() + r * n;
    double* yr = y.ptr() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  return a.tape()->record(
      std::move(y), {a.id()},
      [ai = a.id(), n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& y = t.value(self);
        Tensor* ga = t.accumulate(ai);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const double* gr = g.ptr() + r * n;
          const double* yr = y.ptr() + r * n;
          const double gy = detail::dot(gr, yr, n);
          double* out = ga->ptr() + r * n;
          for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - gy);
        }
      },
      "softmax");
}

/// Row-wise log-softmax.
inline Var log_softmax(Var a) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.ptr() + r * n;
    double* yr = y.ptr() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] - lz;
  }
  return a.tape()->record(
      std::move(y), {a.id()},
      [ai = a.id(), n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& y = t.value(self);
        Tensor* ga = t.accumulate(ai);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const double* gr = g.ptr() + r * n;
          const double* yr = y.ptr() + r * n;
          double gs = 0.0;
          for (std::size_t j = 0; j < n; ++j) gs += gr[j];
          double* out = ga->ptr() + r * n;
          for (std::size_t j = 0; j < n; ++j) out[j] += gr[j] - std::exp(yr[j]) * gs;
        }
      },
      "log_softmax");
}

/// Column-wise concatenation; all parts must share the row count.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape& tape = *parts.front().tape();
  const std::size_t rows = parts.front().value().rows();
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape() != &tape) throw std::invalid_argument("concat: operands live on different tapes");
    if (p.value().rows() != rows) detail::shape_mismatch("concat", parts.front().value(), p.value());
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    total += p.value().cols();
  }
  Tensor y({rows, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(x.ptr() + r * x.cols(), x.cols(), y.ptr() + r * total + offset);
    }
    offset += x.cols();
  }
  return tape.record(
      std::move(y), ids,
      [ids, widths, total](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (Tensor* gp = t.accumulate(ids[k])) {
            for (std::size_t r = 0; r < g.rows(); ++r) {
              detail::axpy(1.0, g.ptr() + r * total + offset, gp->ptr() + r * widths[k], widths[k]);
            }
          }
          offset += widths[k];
        }
      },
      "concat");
}

inline Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

/// Columns [begin, end) of every row.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (begin >= end || end > x.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for shape " + shape_string(x.shape()));
  }
  const std::size_t w = end - begin, n = x.cols();
  Tensor y({x.rows(), w});
  for (std::size_t r = 0; r < x.rows(); ++r) std::copy_n(x.ptr() + r * n + begin, w, y.ptr() + r * w);
  return a.tape()->record(
      std::move(y), {a.id()},
      [ai = a.id(), begin, w, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor* ga = t.accumulate(ai);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          detail::axpy(1.0, g.ptr() + r * w, ga->ptr() + r * n + begin, w);
        }
      },
      "slice_cols");
}

/// Mean over consecutive groups of `group` rows: [B*group, n] -> [B, n].
inline Var mean_rows(Var a, std::size_t group) {
  const Tensor& x = a.value();
  if (group == 0 || x.rows() % group != 0) {
    throw ShapeError("mean_rows: group " + std::to_string(group) + " does not divide shape " +
                     shape_string(x.shape()));
  }
  const std::size_t b = x.rows() / group, n = x.cols();
  Tensor y({b, n}, 0.0);
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t r = 0; r < x.rows(); ++r) detail::axpy(inv, x.ptr() + r * n, y.ptr() + (r / group) * n, n);
  return a.tape()->record(
      std::move(y), {a.id()},
      [ai = a.id(), group, n, inv](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor* ga = t.accumulate(ai);
        for (std::size_t r = 0; r < ga->rows(); ++r) {
          detail::axpy(inv, g.ptr() + (r / group) * n, ga->ptr() + r * n, n);
        }
      },
      "mean_rows");
}

/// Sum of every element -> shape [1].
inline Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape()->record(
      Tensor::scalar(s), {a.id()},
      [ai = a.id()](Tape& t, std::size_t self) {
        const double g = t.grad_of(self)[0];
        for (double& v : t.accumulate(ai)->data()) v += g;
      },
      "sum");
}

/// Gathers rows of `table` by index: [V, d], ids -> [len(ids), d].
inline Var index_select(Var table, std::vector<std::size_t> ids) {
  const Tensor& w = table.value();
  const std::size_t n = w.cols();
  Tensor y({ids.size(), n});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= w.rows()) {
      throw std::out_of_range("index_select: id " + std::to_string(ids[r]) + " out of range for " +
                              std::to_string(w.rows()) + " rows");
    }
    std::copy_n(w.ptr() + ids[r] * n, n, y.ptr() + r * n);
  }
  return table.tape()->record(
      std::move(y), {table.id()},
      [ti = table.id(), ids = std::move(ids), n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor* gt = t.accumulate(ti);
        for (std::size_t r = 0; r < ids.size(); ++r) detail::axpy(1.0, g.ptr() + r * n, gt->ptr() + ids[r] * n, n);
      },
      "index_select");
}

/// Picks one column per row: [m, n], cols[m] -> [m, 1].
inline Var pick(Var a, std::vector<std::size_t> cols) {
  const Tensor& x = a.value();
  if (cols.size() != x.rows()) {
    throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for shape " + shape_string(x.shape()));
  }
  const std::size_t n = x.cols();
  Tensor y({x.rows(), 1});
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (cols[r] >= n) throw std::out_of_range("pick: column out of range");
    y[r] = x(r, cols[r]);
  }
  return a.tape()->record(
      std::move(y), {a.id()},
      [ai = a.id(), cols = std::move(cols), n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor* ga = t.accumulate(ai);
        for (std::size_t r = 0; r < cols.size(); ++r) (*ga)[r * n + cols[r]] += g[r];
      },
      "pick");
}

/// Adds row b of `rows` to each of the `group` rows of block b in `a`:
/// [B*group, n] + [B, n] -> [B*group, n].
inline Var add_repeated(Var a, Var rows) {
  Tape& tape = detail::same_tape(a, rows);
  const Tensor& x = a.value();
  const Tensor& z = rows.value();
  if (z.cols() != x.cols() || z.rows() == 0 || x.rows() % z.rows() != 0) {
    detail::shape_mismatch("add_repeated", x, z);
  }
  const std::size_t group = x.rows() / z.rows(), n = x.cols();
  Tensor y = x;
  for (std::size_t r = 0; r < x.rows(); ++r) detail::axpy(1.0, z.ptr() + (r / group) * n, y.ptr() + r * n, n);
  return tape.record(
      std::move(y), {a.id(), rows.id()},
      [ai = a.id(), zi = rows.id(), group, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        if (Tensor* ga = t.accumulate(ai)) detail::axpy(1.0, g.ptr(), ga->ptr(), g.size());
        if (Tensor* gz = t.accumulate(zi)) {
          for (std::size_t r = 0; r < g.rows(); ++r) detail::axpy(1.0, g.ptr() + r * n, gz->ptr() + (r / group) * n, n);
        }
      },
      "add_repeated");
}

/// Per-block convex combination: weights [B, G], values [B*G, n] -> [B, n],
/// out_b = sum_g weights[b,g] * values[b*G + g].
inline Var weighted_sum(Var weights, Var values) {
  Tape& tape = detail::same_tape(weights, values);
  const Tensor& w = weights.value();
  const Tensor& v = values.value();
  const std::size_t b = w.rows(), group = w.cols(), n = v.cols();
  if (v.rows() != b * group) detail::shape_mismatch("weighted_sum", w, v);
  Tensor y({b, n}, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t g = 0; g < group; ++g) detail::axpy(w(i, g), v.ptr() + (i * group + g) * n, y.ptr() + i * n, n);
  }
  return tape.record(
      std::move(y), {weights.id(), values.id()},
      [wi = weights.id(), vi = values.id(), b, group, n](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad_of(self);
        const Tensor& w = t.value(wi);
        const Tensor& v = t.value(vi);
        if (Tensor* gw = t.accumulate(wi)) {
          for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t g = 0; g < group; ++g) {
              (*gw)(i, g) += detail::dot(gy.ptr() + i * n, v.ptr() + (i * group + g) * n, n);
            }
          }
        }
        if (Tensor* gv = t.accumulate(vi)) {
          for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t g = 0; g < group; ++g) {
              detail::axpy(w(i, g), gy.ptr() + i * n, gv->ptr() + (i * group + g) * n, n);
            }
          }
        }
      },
      "weighted_sum");
}

inline Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape()->record(
      std::move(y), {a.id()},
      [ai = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        detail::axpy(1.0, g.ptr(), t.accumulate(ai)->ptr(), g.size());
      },
      "reshape");
}

/// Same value, cut from the gradient graph.
inline Var detach(Var a) { return a.tape()->constant(a.value()); }

// Generic entry point over the primitive kinds.

enum class OpKind { matmul, add, mul, tanh, sigmoid, softmax, concat, mean, index_select, log, sum };

/// Applies `kind` to `inputs`. For index_select the second input carries the
/// row ids as values; `mean` averages over rows, giving one row.
inline Var forward_op(OpKind kind, std::span<const Var> inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) throw std::invalid_argument("forward_op: wrong number of inputs");
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::tanh: need(1); return tanh(inputs[0]);
    case OpKind::sigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::softmax: need(1); return softmax(inputs[0]);
    case OpKind::concat: return concat(inputs);
    case OpKind::mean: need(1); return mean_rows(inputs[0], inputs[0].value().rows());
    case OpKind::index_select: {
      need(2);
      std::vector<std::size_t> ids;
      for (double v : inputs[1].value().data()) {
        if (v < 0 || v != std::floor(v)) throw std::out_of_range("index_select: non-integral id");
        ids.push_back(static_cast<std::size_t>(v));
      }
      return index_select(inputs[0], std::move(ids));
    }
    case OpKind::log: need(1); return log(inputs[0]);
    case OpKind::sum: need(1); return sum(inputs[0]);
  }
  throw std::invalid_argument("forward_op: unknown kind");
}

}  // namespace stackcap
