#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>

#include "sma/common.hpp"

namespace sma {

// Reverse-mode autodiff tensor. A Tensor is a cheap handle to a graph node
// holding the value, an optional gradient buffer, and the vector-Jacobian
// product of the op that produced it. backward() walks the graph once in
// reverse topological order; gradients accumulate on every node with
// requires_grad set.
template <class S>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(Node&)> vjp;  // reads grad, accumulates into parents
    const char* op = "leaf";
  };

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<S> data) {
    if (numel(shape) != data.size())
      throw shape_error("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    return t;
  }

  static Tensor zeros(Shape shape) {
    std::vector<S> d(numel(shape), S(0));
    return from(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, S v) {
    std::vector<S> d(numel(shape), v);
    return from(std::move(shape), std::move(d));
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<S> d(numel(shape));
    for (auto& x : d) x = static_cast<S>(rng.normal() * scale);
    return from(std::move(shape), std::move(d));
  }

  // fan-in uniform init, +-sqrt(1/fan_in)
  static Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<S> d(numel(shape));
    for (auto& x : d) x = static_cast<S>(rng.uniform(-bound, bound));
    return from(std::move(shape), std::move(d));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape[i]; }
  std::size_t ndim() const { return n_->shape.size(); }

  const std::vector<S>& data() const { return n_->value; }
  std::vector<S>& data() { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    n_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<S>& grad() const { return n_->grad; }
  std::vector<S>& grad_buffer() {
    if (n_->grad.empty()) n_->grad.assign(n_->value.size(), S(0));
    return n_->grad;
  }
  void zero_grad() { n_->grad.clear(); }

  S item() const {
    if (size() != 1) throw value_error("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  Node* node() const { return n_.get(); }

  // Graph construction helper: result node wired to its parents.
  static Tensor make_op(const char* op, Shape shape, std::vector<S> value,
                        std::vector<Tensor> parents, std::function<void(Node&)> vjp) {
    Tensor t = from(std::move(shape), std::move(value));
    t.n_->op = op;
    bool need = false;
    for (const auto& p : parents) need = need || p.requires_grad();
    if (need) {
      t.n_->requires_grad = true;
      t.n_->parents = std::move(parents);
      t.n_->vjp = std::move(vjp);
    }
    if (finite_checks()) t.assert_finite(op);
    return t;
  }

  void assert_finite(const char* where) const {
    for (S v : n_->value)
      if (!std::isfinite(static_cast<double>(v)))
        throw value_error(std::string("non-finite value produced by op '") + where + "'");
  }

  // Accumulate g into this node's gradient buffer.
  void accumulate_grad(const std::vector<S>& g) {
    auto& buf = grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  friend void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw value_error("backward requires a scalar loss tensor");
    if (!loss.requires_grad())
      throw value_error("backward on a tensor with no recorded graph");
    // DFS topological order over parents.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.n_.get(), 0}};
    seen.insert(loss.n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].n_.get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    loss.n_->grad.assign(1, S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->vjp && !n->grad.empty()) n->vjp(*n);
    }
  }

 private:
  std::shared_ptr<Node> n_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

namespace detail {
template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "add");
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<S>::make_op("add", a.shape(), std::move(out), {a, b},
                            [a, b](typename Tensor<S>::Node& n) mutable {
                              if (a.requires_grad()) a.accumulate_grad(n.grad);
                              if (b.requires_grad()) b.accumulate_grad(n.grad);
                            });
}

template <class S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor<S>::make_op("sub", a.shape(), std::move(out), {a, b},
                            [a, b](typename Tensor<S>::Node& n) mutable {
                              if (a.requires_grad()) a.accumulate_grad(n.grad);
                              if (b.requires_grad()) {
                                auto& g = b.grad_buffer();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
                              }
                            });
}

template <class S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<S>::make_op(
      "mul", a.shape(), std::move(out), {a, b}, [a, b](typename Tensor<S>::Node& n) mutable {
        if (a.requires_grad()) {
          auto& g = a.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b.data()[i];
        }
        if (b.requires_grad()) {
          auto& g = b.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * a.data()[i];
        }
      });
}

template <class S>
Tensor<S> scale(Tensor<S> a, S c) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return Tensor<S>::make_op("scale", a.shape(), std::move(out), {a},
                            [a, c](typename Tensor<S>::Node& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
                            });
}

template <class S>
Tensor<S> sum(Tensor<S> a) {
  S acc = 0;
  for (S v : a.data()) acc += v;
  return Tensor<S>::make_op("sum", {1}, {acc}, {a}, [a](typename Tensor<S>::Node& n) mutable {
    if (!a.requires_grad()) return;
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

template <class S>
Tensor<S> mean(Tensor<S> a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> relu(Tensor<S> a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
  return Tensor<S>::make_op("relu", a.shape(), std::move(out), {a},
                            [a](typename Tensor<S>::Node& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                if (a.data()[i] > S(0)) g[i] += n.grad[i];
                            });
}

namespace detail {
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }
inline double norm_pdf(double x) { return 0.3989422804014326779 * std::exp(-0.5 * x * x); }
}  // namespace detail

// exact Gaussian GELU, x * Phi(x)
template <class S>
Tensor<S> gelu(Tensor<S> a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = static_cast<double>(a.data()[i]);
    out[i] = static_cast<S>(x * detail::norm_cdf(x));
  }
  return Tensor<S>::make_op("gelu", a.shape(), std::move(out), {a},
                            [a](typename Tensor<S>::Node& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                double x = static_cast<double>(a.data()[i]);
                                double d = detail::norm_cdf(x) + x * detail::norm_pdf(x);
                                g[i] += n.grad[i] * static_cast<S>(d);
                              }
                            });
}

template <class S>
Tensor<S> sigmoid(Tensor<S> a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = static_cast<double>(a.data()[i]);
    out[i] = static_cast<S>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                   : std::exp(x) / (1.0 + std::exp(x)));
  }
  Tensor<S> t = Tensor<S>::make_op("sigmoid", a.shape(), std::move(out), {a}, nullptr);
  if (t.requires_grad()) {
    std::vector<S> y = t.data();
    t.node()->vjp = [a, y](typename Tensor<S>::Node& n) mutable {
      if (!a.requires_grad()) return;
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * y[i] * (S(1) - y[i]);
    };
  }
  return t;
}

// softmax along one axis, max-subtracted for stability
template <class S>
Tensor<S> softmax(Tensor<S> a, std::size_t axis) {
  if (axis >= a.ndim())
    throw shape_error("softmax: axis " + std::to_string(axis) + " out of range for " +
                      shape_str(a.shape()));
  const Shape& sh = a.shape();
  std::size_t n_axis = sh[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  std::vector<S> out(a.size());
  const auto& x = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * n_axis * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n_axis; ++k)
        mx = std::max(mx, static_cast<double>(x[base + k * inner]));
      double z = 0;
      for (std::size_t k = 0; k < n_axis; ++k) {
        double e = std::exp(static_cast<double>(x[base + k * inner]) - mx);
        out[base + k * inner] = static_cast<S>(e);
        z += e;
      }
      for (std::size_t k = 0; k < n_axis; ++k)
        out[base + k * inner] = static_cast<S>(static_cast<double>(out[base + k * inner]) / z);
    }
  Tensor<S> t = Tensor<S>::make_op("softmax", a.shape(), std::move(out), {a}, nullptr);
  if (t.requires_grad()) {
    std::vector<S> y = t.data();
    t.node()->vjp = [a, y, n_axis, inner, outer](typename Tensor<S>::Node& n) mutable {
      if (!a.requires_grad()) return;
      auto& g = a.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          std::size_t base = o * n_axis * inner + in;
          S dot = 0;
          for (std::size_t k = 0; k < n_axis; ++k)
            dot += n.grad[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < n_axis; ++k) {
            std::size_t idx = base + k * inner;
            g[idx] += y[idx] * (n.grad[idx] - dot);
          }
        }
    };
  }
  return t;
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

namespace detail {

// C[m x n] += A[m x k] * B[k x n], ikj order for contiguous inner loops
template <class S>
void mm_acc(const S* A, const S* B, S* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* a_row = A + i * k;
    S* c_row = C + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      S a = a_row[t];
      const S* b_row = B + t * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// dot product with eight independent accumulators; the fixed reassociation
// makes the reduction vectorizable while keeping results deterministic
template <class S>
S dot_unrolled(const S* a, const S* b, std::size_t n) {
  S acc[8] = {};
  std::size_t t = 0;
  for (; t + 8 <= n; t += 8)
    for (std::size_t u = 0; u < 8; ++u) acc[u] += a[t + u] * b[t + u];
  for (; t < n; ++t) acc[t % 8] += a[t] * b[t];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// C[m x n] += A[m x k] * B^T where B is [n x k] (dot-product form)
template <class S>
void mm_bt_acc(const S* A, const S* B, S* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* a_row = A + i * k;
    S* c_row = C + i * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += dot_unrolled(a_row, B + j * k, k);
  }
}

// C[k x n] += A^T * B where A is [m x k], B is [m x n]
template <class S>
void mm_at_acc(const S* A, const S* B, S* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* a_row = A + i * k;
    const S* b_row = B + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      S a = a_row[t];
      S* c_row = C + t * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

}  // namespace detail

template <class S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(m * n, S(0));
  detail::mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<S>::make_op(
      "matmul", {m, n}, std::move(out), {a, b},
      [a, b, m, k, n](typename Tensor<S>::Node& nd) mutable {
        if (a.requires_grad())  // dA = dC * B^T
          detail::mm_bt_acc(nd.grad.data(), b.data().data(), a.grad_buffer().data(), m, n, k);
        if (b.requires_grad())  // dB = A^T * dC
          detail::mm_at_acc(a.data().data(), nd.grad.data(), b.grad_buffer().data(), m, k, n);
      });
}

// x[N x d_in] * w[d_in x d_out] + bias broadcast over rows
template <class S>
Tensor<S> linear(Tensor<S> x, Tensor<S> w, Tensor<S> b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0))
    throw shape_error("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                      shape_str(w.shape()));
  if (b.ndim() != 1 || b.dim(0) != w.dim(1))
    throw shape_error("linear: bias shape " + shape_str(b.shape()) + " does not match d_out " +
                      std::to_string(w.dim(1)));
  std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(out.data() + i * n, b.data().data(), n * sizeof(S));
  detail::mm_acc(x.data().data(), w.data().data(), out.data(), m, k, n);
  return Tensor<S>::make_op(
      "linear", {m, n}, std::move(out), {x, w, b},
      [x, w, b, m, k, n](typename Tensor<S>::Node& nd) mutable {
        if (x.requires_grad())
          detail::mm_bt_acc(nd.grad.data(), w.data().data(), x.grad_buffer().data(), m, n, k);
        if (w.requires_grad())
          detail::mm_at_acc(x.data().data(), nd.grad.data(), w.grad_buffer().data(), m, k, n);
        if (b.requires_grad()) {
          auto& g = b.grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += nd.grad[i * n + j];
        }
      });
}

// ---------------------------------------------------------------------------
// convolutions (cross-correlation convention, zero padding)
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> conv2d(Tensor<S> x, Tensor<S> w, Tensor<S> bias,
                 std::size_t stride, std::size_t padding) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw shape_error("conv2d: expected x (C,H,W) and w (Cout,Cin,k,k), got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
  std::size_t c_in = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::size_t c_out = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c_in || w.dim(3) != k)
    throw shape_error("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                      shape_str(x.shape()));
  if (bias.size() != c_out) throw shape_error("conv2d: bias size mismatch");
  std::ptrdiff_t ho = (static_cast<std::ptrdiff_t>(H) + 2 * static_cast<std::ptrdiff_t>(padding) -
                       static_cast<std::ptrdiff_t>(k)) / static_cast<std::ptrdiff_t>(stride) + 1;
  std::ptrdiff_t wo = (static_cast<std::ptrdiff_t>(W) + 2 * static_cast<std::ptrdiff_t>(padding) -
                       static_cast<std::ptrdiff_t>(k)) / static_cast<std::ptrdiff_t>(stride) + 1;
  if (ho < 1 || wo < 1)
    throw config_error("conv2d: output dimension < 1 for input " + shape_str(x.shape()) +
                       " kernel " + std::to_string(k) + " stride " + std::to_string(stride) +
                       " padding " + std::to_string(padding));
  std::size_t Ho = static_cast<std::size_t>(ho), Wo = static_cast<std::size_t>(wo);
  std::vector<S> out(c_out * Ho * Wo);
  const auto& xd = x.data();
  const auto& wd = w.data();
  // kernel-position-outer loop order: the inner ox loop touches contiguous
  // output memory and (for stride 1) contiguous input memory, so it
  // vectorizes; the per-pixel formulation does not
  auto ox_range = [W, Wo, stride, padding](std::size_t kx, std::size_t& lo, std::size_t& hi) {
    // valid ox: 0 <= ox*stride + kx - padding < W
    std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(padding);
    std::ptrdiff_t lo_i = off < 0 ? (-off + static_cast<std::ptrdiff_t>(stride) - 1) /
                                        static_cast<std::ptrdiff_t>(stride)
                                  : 0;
    std::ptrdiff_t hi_i = (static_cast<std::ptrdiff_t>(W) - 1 - off) /
                              static_cast<std::ptrdiff_t>(stride) + 1;
    lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(lo_i, 0));
    hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(hi_i, lo_i, Wo));
    if (hi < lo) hi = lo;
  };
  for (std::size_t co = 0; co < c_out; ++co) {
    S b = bias.data()[co];
    S* op = out.data() + co * Ho * Wo;
    for (std::size_t i = 0; i < Ho * Wo; ++i) op[i] = b;
    for (std::size_t ci = 0; ci < c_in; ++ci)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          S wv = wd[((co * c_in + ci) * k + ky) * k + kx];
          std::size_t lo, hi;
          ox_range(kx, lo, hi);
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>((ci * H + iy) * W + lo * stride) +
                                  static_cast<std::ptrdiff_t>(kx) -
                                  static_cast<std::ptrdiff_t>(padding);
            const S* xr = xd.data() + xoff;
            S* orow = op + oy * Wo;
            if (stride == 1)
              for (std::size_t oxi = lo; oxi < hi; ++oxi) orow[oxi] += wv * xr[oxi - lo];
            else
              for (std::size_t oxi = lo; oxi < hi; ++oxi)
                orow[oxi] += wv * xr[(oxi - lo) * stride];
          }
        }
  }
  return Tensor<S>::make_op(
      "conv2d", {c_out, Ho, Wo}, std::move(out), {x, w, bias},
      [x, w, bias, stride, padding, c_in, c_out, H, W, Ho, Wo, k,
       ox_range](typename Tensor<S>::Node& nd) mutable {
        const auto& g = nd.grad;
        const auto& xd = x.data();
        const auto& wd = w.data();
        S* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
        S* gw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
        S* gb = bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
        if (gb)
          for (std::size_t co = 0; co < c_out; ++co) {
            S acc = S(0);
            const S* gp = g.data() + co * Ho * Wo;
            for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
            gb[co] += acc;
          }
        for (std::size_t co = 0; co < c_out; ++co) {
          const S* gp = g.data() + co * Ho * Wo;
          for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t wi = ((co * c_in + ci) * k + ky) * k + kx;
                S wv = wd[wi];
                S wacc = S(0);
                std::size_t lo, hi;
                ox_range(kx, lo, hi);
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(padding);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  std::size_t xbase = static_cast<std::size_t>(
                      static_cast<std::ptrdiff_t>((ci * H + iy) * W + lo * stride) +
                      static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(padding));
                  const S* grow = gp + oy * Wo;
                  if (gx) {
                    S* xg = gx + xbase;
                    if (stride == 1)
                      for (std::size_t oxi = lo; oxi < hi; ++oxi)
                        xg[oxi - lo] += wv * grow[oxi];
                    else
                      for (std::size_t oxi = lo; oxi < hi; ++oxi)
                        xg[(oxi - lo) * stride] += wv * grow[oxi];
                  }
                  if (gw) {
                    const S* xr = xd.data() + xbase;
                    if (stride == 1)
                      wacc += detail::dot_unrolled(grow + lo, xr, hi - lo);
                    else
                      for (std::size_t oxi = lo; oxi < hi; ++oxi)
                        wacc += grow[oxi] * xr[(oxi - lo) * stride];
                  }
                }
                if (gw) gw[wi] += wacc;
              }
        }
      });
}

// 2x2 stride-2 transposed convolution: exact spatial doubling.
// w is (C_in, C_out, 2, 2); adjoint of the matching stride-2 conv.
template <class S>
Tensor<S> conv_transpose2d(Tensor<S> x, Tensor<S> w) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw shape_error("conv_transpose2d: expected x (C,H,W) and w (Cin,Cout,2,2)");
  std::size_t c_in = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (w.dim(0) != c_in)
    throw shape_error("conv_transpose2d: weight " + shape_str(w.shape()) +
                      " incompatible with input " + shape_str(x.shape()));
  if (w.dim(2) != 2 || w.dim(3) != 2)
    throw config_error("conv_transpose2d: kernel must be 2x2, got " + shape_str(w.shape()));
  std::size_t c_out = w.dim(1);
  std::size_t Ho = 2 * H, Wo = 2 * W;
  std::vector<S> out(c_out * Ho * Wo, S(0));
  const auto& xd = x.data();
  const auto& wd = w.data();
  for (std::size_t ci = 0; ci < c_in; ++ci)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        S v = xd[(ci * H + y) * W + xx];
        if (v == S(0)) continue;
        for (std::size_t co = 0; co < c_out; ++co)
          for (std::size_t ky = 0; ky < 2; ++ky)
            for (std::size_t kx = 0; kx < 2; ++kx)
              out[(co * Ho + 2 * y + ky) * Wo + 2 * xx + kx] +=
                  v * wd[((ci * c_out + co) * 2 + ky) * 2 + kx];
      }
  return Tensor<S>::make_op(
      "conv_transpose2d", {c_out, Ho, Wo}, std::move(out), {x, w},
      [x, w, c_in, c_out, H, W, Ho, Wo](typename Tensor<S>::Node& nd) mutable {
        const auto& g = nd.grad;
        const auto& xd = x.data();
        const auto& wd = w.data();
        S* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
        S* gw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
        for (std::size_t ci = 0; ci < c_in; ++ci)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
              std::size_t xi = (ci * H + y) * W + xx;
              S acc = 0;
              for (std::size_t co = 0; co < c_out; ++co)
                for (std::size_t ky = 0; ky < 2; ++ky)
                  for (std::size_t kx = 0; kx < 2; ++kx) {
                    S go = g[(co * Ho + 2 * y + ky) * Wo + 2 * xx + kx];
                    std::size_t wi = ((ci * c_out + co) * 2 + ky) * 2 + kx;
                    acc += go * wd[wi];
                    if (gw) gw[wi] += go * xd[xi];
                  }
              if (gx) gx[xi] += acc;
            }
      });
}

// 3x3 depthwise convolution, padding 1, one kernel per channel
template <class S>
Tensor<S> depthwise_conv2d(Tensor<S> x, Tensor<S> w, Tensor<S> bias) {
  if (x.ndim() != 3 || w.ndim() != 4 || w.dim(1) != 1 || w.dim(2) != 3 || w.dim(3) != 3)
    throw shape_error("depthwise_conv2d: expected x (C,H,W) and w (C,1,3,3)");
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (w.dim(0) != C)
    throw shape_error("depthwise_conv2d: channel count mismatch, x has " + std::to_string(C) +
                      " channels, w has " + std::to_string(w.dim(0)));
  if (bias.size() != C) throw shape_error("depthwise_conv2d: bias size mismatch");
  std::vector<S> out(C * H * W);
  const auto& xd = x.data();
  const auto& wd = w.data();
  for (std::size_t c = 0; c < C; ++c) {
    S b = bias.data()[c];
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        S acc = b;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            acc += xd[(c * H + iy) * W + ix] * wd[(c * 9) + ky * 3 + kx];
          }
        }
        out[(c * H + y) * W + xx] = acc;
      }
  }
  return Tensor<S>::make_op(
      "depthwise_conv2d", {C, H, W}, std::move(out), {x, w, bias},
      [x, w, bias, C, H, W](typename Tensor<S>::Node& nd) mutable {
        const auto& g = nd.grad;
        const auto& xd = x.data();
        const auto& wd = w.data();
        S* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
        S* gw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
        S* gb = bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
              S go = g[(c * H + y) * W + xx];
              if (go == S(0)) continue;
              if (gb) gb[c] += go;
              for (std::size_t ky = 0; ky < 3; ++ky) {
                std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                  std::size_t xi = (c * H + iy) * W + ix;
                  std::size_t wi = c * 9 + ky * 3 + kx;
                  if (gx) gx[xi] += go * wd[wi];
                  if (gw) gw[wi] += go * xd[xi];
                }
              }
            }
      });
}

// ---------------------------------------------------------------------------
// layer norm over rows of an (N, d) tensor
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gamma, Tensor<S> beta,
                     double eps = 1e-5) {
  if (x.ndim() != 2) throw shape_error("layer_norm: expected (N,d), got " + shape_str(x.shape()));
  std::size_t N = x.dim(0), d = x.dim(1);
  if (gamma.size() != d || beta.size() != d)
    throw shape_error("layer_norm: gamma/beta size must equal d");
  std::vector<S> out(N * d);
  std::vector<S> inv_std(N), mu(N);
  const auto& xd = x.data();
  for (std::size_t i = 0; i < N; ++i) {
    double m = 0;
    for (std::size_t j = 0; j < d; ++j) m += static_cast<double>(xd[i * d + j]);
    m /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      double t = static_cast<double>(xd[i * d + j]) - m;
      var += t * t;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    mu[i] = static_cast<S>(m);
    inv_std[i] = static_cast<S>(is);
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = static_cast<S>((static_cast<double>(xd[i * d + j]) - m) * is) *
                           gamma.data()[j] + beta.data()[j];
  }
  return Tensor<S>::make_op(
      "layer_norm", {N, d}, std::move(out), {x, gamma, beta},
      [x, gamma, beta, N, d, mu, inv_std](typename Tensor<S>::Node& nd) mutable {
        const auto& g = nd.grad;
        const auto& xd = x.data();
        S* ggamma = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
        S* gbeta = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
        S* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
        for (std::size_t i = 0; i < N; ++i) {
          S is = inv_std[i];
          S m = mu[i];
          // xhat_j = (x_j - m) * is
          if (ggamma || gbeta) {
            for (std::size_t j = 0; j < d; ++j) {
              S xhat = (xd[i * d + j] - m) * is;
              if (ggamma) ggamma[j] += g[i * d + j] * xhat;
              if (gbeta) gbeta[j] += g[i * d + j];
            }
          }
          if (gx) {
            S sum_gy = 0, sum_gy_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
              S gy = g[i * d + j] * gamma.data()[j];
              S xhat = (xd[i * d + j] - m) * is;
              sum_gy += gy;
              sum_gy_xhat += gy * xhat;
            }
            S inv_d = S(1) / static_cast<S>(d);
            for (std::size_t j = 0; j < d; ++j) {
              S gy = g[i * d + j] * gamma.data()[j];
              S xhat = (xd[i * d + j] - m) * is;
              gx[i * d + j] += is * (gy - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// pooled statistics and gating helpers
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> channel_avg(Tensor<S> x) {
  if (x.ndim() != 3) throw shape_error("channel_avg: expected (C,H,W)");
  std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
  std::vector<S> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    S acc = 0;
    for (std::size_t i = 0; i < HW; ++i) acc += x.data()[c * HW + i];
    out[c] = acc / static_cast<S>(HW);
  }
  return Tensor<S>::make_op("channel_avg", {C}, std::move(out), {x},
                            [x, C, HW](typename Tensor<S>::Node& nd) mutable {
                              if (!x.requires_grad()) return;
                              auto& g = x.grad_buffer();
                              S inv = S(1) / static_cast<S>(HW);
                              for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t i = 0; i < HW; ++i)
                                  g[c * HW + i] += nd.grad[c] * inv;
                            });
}

template <class S>
Tensor<S> spatial_mean(Tensor<S> x) {
  if (x.ndim() != 3) throw shape_error("spatial_mean: expected (C,H,W)");
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), HW = H * W;
  std::vector<S> out(HW, S(0));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[i] += x.data()[c * HW + i];
  S inv = S(1) / static_cast<S>(C);
  for (auto& v : out) v *= inv;
  return Tensor<S>::make_op("spatial_mean", {1, H, W}, std::move(out), {x},
                            [x, C, HW, inv](typename Tensor<S>::Node& nd) mutable {
                              if (!x.requires_grad()) return;
                              auto& g = x.grad_buffer();
                              for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t i = 0; i < HW; ++i)
                                  g[c * HW + i] += nd.grad[i] * inv;
                            });
}

template <class S>
Tensor<S> spatial_max(Tensor<S> x) {
  if (x.ndim() != 3) throw shape_error("spatial_max: expected (C,H,W)");
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), HW = H * W;
  std::vector<S> out(HW);
  std::vector<std::size_t> argmax(HW);
  for (std::size_t i = 0; i < HW; ++i) {
    S best = x.data()[i];
    std::size_t bc = 0;
    for (std::size_t c = 1; c < C; ++c) {
      S v = x.data()[c * HW + i];
      if (v > best) {
        best = v;
        bc = c;
      }
    }
    out[i] = best;
    argmax[i] = bc;
  }
  return Tensor<S>::make_op("spatial_max", {1, H, W}, std::move(out), {x},
                            [x, HW, argmax](typename Tensor<S>::Node& nd) mutable {
                              if (!x.requires_grad()) return;
                              auto& g = x.grad_buffer();
                              for (std::size_t i = 0; i < HW; ++i)
                                g[argmax[i] * HW + i] += nd.grad[i];
                            });
}

// x (C,H,W) * gate (C) broadcast over spatial positions
template <class S>
Tensor<S> mul_channel_gate(Tensor<S> x, Tensor<S> gate) {
  if (x.ndim() != 3 || gate.size() != x.dim(0))
    throw shape_error("mul_channel_gate: x " + shape_str(x.shape()) + " gate " +
                      shape_str(gate.shape()));
  std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
  std::vector<S> out(C * HW);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] = x.data()[c * HW + i] * gate.data()[c];
  return Tensor<S>::make_op(
      "mul_channel_gate", x.shape(), std::move(out), {x, gate},
      [x, gate, C, HW](typename Tensor<S>::Node& nd) mutable {
        if (x.requires_grad()) {
          auto& g = x.grad_buffer();
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) g[c * HW + i] += nd.grad[c * HW + i] * gate.data()[c];
        }
        if (gate.requires_grad()) {
          auto& g = gate.grad_buffer();
          for (std::size_t c = 0; c < C; ++c) {
            S acc = 0;
            for (std::size_t i = 0; i < HW; ++i) acc += nd.grad[c * HW + i] * x.data()[c * HW + i];
            g[c] += acc;
          }
        }
      });
}

// x (C,H,W) * gate (1,H,W) broadcast over channels
template <class S>
Tensor<S> mul_spatial_gate(Tensor<S> x, Tensor<S> gate) {
  if (x.ndim() != 3 || gate.size() != x.dim(1) * x.dim(2))
    throw shape_error("mul_spatial_gate: x " + shape_str(x.shape()) + " gate " +
                      shape_str(gate.shape()));
  std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
  std::vector<S> out(C * HW);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] = x.data()[c * HW + i] * gate.data()[i];
  return Tensor<S>::make_op(
      "mul_spatial_gate", x.shape(), std::move(out), {x, gate},
      [x, gate, C, HW](typename Tensor<S>::Node& nd) mutable {
        if (x.requires_grad()) {
          auto& g = x.grad_buffer();
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) g[c * HW + i] += nd.grad[c * HW + i] * gate.data()[i];
        }
        if (gate.requires_grad()) {
          auto& g = gate.grad_buffer();
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) g[i] += nd.grad[c * HW + i] * x.data()[c * HW + i];
        }
      });
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(Tensor<S> x, Shape shape) {
  if (numel(shape) != x.size())
    throw shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<S> out = x.data();
  return Tensor<S>::make_op("reshape", std::move(shape), std::move(out), {x},
                            [x](typename Tensor<S>::Node& nd) mutable {
                              if (x.requires_grad()) x.accumulate_grad(nd.grad);
                            });
}

template <class S>
Tensor<S> concat_channels(Tensor<S> a, Tensor<S> b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw shape_error("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::size_t Ca = a.dim(0), Cb = b.dim(0);
  std::vector<S> out(a.size() + b.size());
  std::memcpy(out.data(), a.data().data(), a.size() * sizeof(S));
  std::memcpy(out.data() + a.size(), b.data().data(), b.size() * sizeof(S));
  return Tensor<S>::make_op(
      "concat_channels", {Ca + Cb, a.dim(1), a.dim(2)}, std::move(out), {a, b},
      [a, b](typename Tensor<S>::Node& nd) mutable {
        if (a.requires_grad()) {
          auto& g = a.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
        }
        if (b.requires_grad()) {
          auto& g = b.grad_buffer();
          std::size_t off = a.size();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[off + i];
        }
      });
}

// (C,H,W) -> (N, C*p*p) non-overlapping p x p patches, N = (H/p)*(W/p).
// p = 1 degenerates to the plain pixel-token transpose.
template <class S>
Tensor<S> patchify(Tensor<S> x, std::size_t p) {
  if (x.ndim() != 3) throw shape_error("patchify: expected (C,H,W)");
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (p == 0 || H % p != 0 || W % p != 0)
    throw config_error("patchify: patch size " + std::to_string(p) + " must divide " +
                       shape_str(x.shape()));
  std::size_t gh = H / p, gw = W / p, N = gh * gw, d = C * p * p;
  std::vector<S> out(N * d);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        std::size_t n = (y / p) * gw + (xx / p);
        std::size_t f = c * p * p + (y % p) * p + (xx % p);
        out[n * d + f] = x.data()[(c * H + y) * W + xx];
      }
  return Tensor<S>::make_op("patchify", {N, d}, std::move(out), {x},
                            [x, C, H, W, p, gw, d](typename Tensor<S>::Node& nd) mutable {
                              if (!x.requires_grad()) return;
                              auto& g = x.grad_buffer();
                              for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t y = 0; y < H; ++y)
                                  for (std::size_t xx = 0; xx < W; ++xx) {
                                    std::size_t n = (y / p) * gw + (xx / p);
                                    std::size_t f = c * p * p + (y % p) * p + (xx % p);
                                    g[(c * H + y) * W + xx] += nd.grad[n * d + f];
                                  }
                            });
}

// inverse of patchify: (N, C*p*p) -> (C,H,W)
template <class S>
Tensor<S> unpatchify(Tensor<S> t, std::size_t C, std::size_t H, std::size_t W,
                     std::size_t p) {
  if (t.ndim() != 2 || t.size() != C * H * W || t.dim(1) != C * p * p)
    throw shape_error("unpatchify: tokens " + shape_str(t.shape()) + " incompatible with (" +
                      std::to_string(C) + "," + std::to_string(H) + "," + std::to_string(W) +
                      ") p=" + std::to_string(p));
  std::size_t gw = W / p, d = C * p * p;
  std::vector<S> out(C * H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        std::size_t n = (y / p) * gw + (xx / p);
        std::size_t f = c * p * p + (y % p) * p + (xx % p);
        out[(c * H + y) * W + xx] = t.data()[n * d + f];
      }
  return Tensor<S>::make_op("unpatchify", {C, H, W}, std::move(out), {t},
                            [t, C, H, W, p, gw, d](typename Tensor<S>::Node& nd) mutable {
                              if (!t.requires_grad()) return;
                              auto& g = t.grad_buffer();
                              for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t y = 0; y < H; ++y)
                                  for (std::size_t xx = 0; xx < W; ++xx) {
                                    std::size_t n = (y / p) * gw + (xx / p);
                                    std::size_t f = c * p * p + (y % p) * p + (xx % p);
                                    g[n * d + f] += nd.grad[(c * H + y) * W + xx];
                                  }
                            });
}

// channel c of (C,H,W) as a (1,H,W) tensor
template <class S>
Tensor<S> select_channel(Tensor<S> x, std::size_t c) {
  if (x.ndim() != 3 || c >= x.dim(0)) throw shape_error("select_channel: bad channel");
  std::size_t HW = x.dim(1) * x.dim(2);
  std::vector<S> out(x.data().begin() + c * HW, x.data().begin() + (c + 1) * HW);
  return Tensor<S>::make_op("select_channel", {1, x.dim(1), x.dim(2)}, std::move(out), {x},
                            [x, c, HW](typename Tensor<S>::Node& nd) mutable {
                              if (!x.requires_grad()) return;
                              auto& g = x.grad_buffer();
                              for (std::size_t i = 0; i < HW; ++i) g[c * HW + i] += nd.grad[i];
                            });
}

// ---------------------------------------------------------------------------
// fused multi-head scaled dot-product attention over pre-projected Q,K,V
// (N, d) each, d = heads * head_dim; returns (N, d) of concatenated heads.
// Stores the per-head softmax matrices for the backward pass.
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> scaled_dot_attention(Tensor<S> q, Tensor<S> k, Tensor<S> v,
                               std::size_t heads) {
  detail::check_same_shape(q, k, "attention");
  detail::check_same_shape(q, v, "attention");
  if (q.ndim() != 2) throw shape_error("attention: expected (N,d) inputs");
  std::size_t N = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0)
    throw config_error("attention: heads " + std::to_string(heads) + " must divide d " +
                       std::to_string(d));
  std::size_t hd = d / heads;
  S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  auto probs = std::make_shared<std::vector<S>>(heads * N * N);
  std::vector<S> out(N * d, S(0));
  std::vector<S> qh(N * hd), kh(N * hd), vh(N * hd);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t t = 0; t < hd; ++t) {
        qh[i * hd + t] = q.data()[i * d + h * hd + t];
        kh[i * hd + t] = k.data()[i * d + h * hd + t];
        vh[i * hd + t] = v.data()[i * d + h * hd + t];
      }
    S* P = probs->data() + h * N * N;
    std::fill(P, P + N * N, S(0));
    detail::mm_bt_acc(qh.data(), kh.data(), P, N, hd, N);
    for (std::size_t i = 0; i < N; ++i) {
      S* row = P + i * N;
      S mx = row[0] * inv_sqrt;
      for (std::size_t j = 0; j < N; ++j) {
        row[j] *= inv_sqrt;
        mx = std::max(mx, row[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < N; ++j) {
        double e = std::exp(static_cast<double>(row[j] - mx));
        row[j] = static_cast<S>(e);
        z += e;
      }
      S invz = static_cast<S>(1.0 / z);
      for (std::size_t j = 0; j < N; ++j) row[j] *= invz;
    }
    // out_h = P * V_h, scattered back into the concatenated layout
    std::vector<S> oh(N * hd, S(0));
    detail::mm_acc(P, vh.data(), oh.data(), N, N, hd);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t t = 0; t < hd; ++t) out[i * d + h * hd + t] = oh[i * hd + t];
  }
  return Tensor<S>::make_op(
      "attention", {N, d}, std::move(out), {q, k, v},
      [q, k, v, probs, heads, N, d, hd, inv_sqrt](typename Tensor<S>::Node& nd) mutable {
        S* gq = q.requires_grad() ? q.grad_buffer().data() : nullptr;
        S* gk = k.requires_grad() ? k.grad_buffer().data() : nullptr;
        S* gv = v.requires_grad() ? v.grad_buffer().data() : nullptr;
        std::vector<S> qh(N * hd), kh(N * hd), vh(N * hd), goh(N * hd);
        std::vector<S> dP(N), dS_row(N);
        for (std::size_t h = 0; h < heads; ++h) {
          const S* P = probs->data() + h * N * N;
          for (std::size_t i = 0; i < N; ++i)
            for (std::size_t t = 0; t < hd; ++t) {
              qh[i * hd + t] = q.data()[i * d + h * hd + t];
              kh[i * hd + t] = k.data()[i * d + h * hd + t];
              vh[i * hd + t] = v.data()[i * d + h * hd + t];
              goh[i * hd + t] = nd.grad[i * d + h * hd + t];
            }
          // dV_h = P^T * dOut_h
          if (gv) {
            std::vector<S> dvh(N * hd, S(0));
            detail::mm_at_acc(P, goh.data(), dvh.data(), N, N, hd);
            for (std::size_t i = 0; i < N; ++i)
              for (std::size_t t = 0; t < hd; ++t) gv[i * d + h * hd + t] += dvh[i * hd + t];
          }
          if (gq || gk) {
            for (std::size_t i = 0; i < N; ++i) {
              const S* p_row = P + i * N;
              // dP_i = dOut_i * V_h^T
              std::fill(dP.begin(), dP.end(), S(0));
              detail::mm_bt_acc(goh.data() + i * hd, vh.data(), dP.data(), 1, hd, N);
              S dot = 0;
              for (std::size_t j = 0; j < N; ++j) dot += dP[j] * p_row[j];
              for (std::size_t j = 0; j < N; ++j)
                dS_row[j] = p_row[j] * (dP[j] - dot) * inv_sqrt;
              if (gq)  // dQ_i += dS_i * K_h
                for (std::size_t j = 0; j < N; ++j) {
                  S s = dS_row[j];
                  if (s == S(0)) continue;
                  for (std::size_t t = 0; t < hd; ++t) gq[i * d + h * hd + t] += s * kh[j * hd + t];
                }
              if (gk)  // dK_j += dS_ij * Q_i
                for (std::size_t j = 0; j < N; ++j) {
                  S s = dS_row[j];
                  if (s == S(0)) continue;
                  for (std::size_t t = 0; t < hd; ++t) gk[j * d + h * hd + t] += s * qh[i * hd + t];
                }
            }
          }
        }
      });
}

}  // namespace sma
