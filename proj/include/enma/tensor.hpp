#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "enma/rng.hpp"

namespace enma {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

/// RAII guard disabling graph construction (inference mode).
class NoGrad {
 public:
  NoGrad() : prev_(enabled()) { enabled() = false; }
  ~NoGrad() { enabled() = prev_; }
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }

 private:
  bool prev_;
};

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> val;
  std::vector<S> grad;  // empty until touched by backward
  bool requires_grad = false;
  std::function<void()> backfn;                    // empty for leaves
  std::vector<std::shared_ptr<Node<S>>> parents;   // keeps graph alive
  int mark = 0;                                    // topo-sort scratch

  void ensure_grad() {
    if (grad.empty()) grad.assign(val.size(), S(0));
  }
};

/// Dense differentiable array, a shared handle onto a graph node.
/// Shapes are explicit; no implicit broadcasting beyond the *_rows/*_cols
/// and *_bcast helpers below.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, S(0), requires_grad);
  }

  static Tensor filled(const Shape& shape, S value, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node<S>>();
    t.node_->shape = shape;
    t.node_->val.assign(static_cast<size_t>(numel(shape)), value);
    t.node_->requires_grad = requires_grad && NoGrad::enabled();
    return t;
  }

  static Tensor from(const Shape& shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<Index>(data.size()) != numel(shape))
      throw std::invalid_argument("Tensor::from: data size does not match shape");
    Tensor t;
    t.node_ = std::make_shared<Node<S>>();
    t.node_->shape = shape;
    t.node_->val = std::move(data);
    t.node_->requires_grad = requires_grad && NoGrad::enabled();
    return t;
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  static Tensor randn(const Shape& shape, RngStream& rng, S stddev = S(1),
                      bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    for (auto& v : t.values()) v = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  /// Truncated normal in [-2 std, 2 std], the usual projection init.
  static Tensor trunc_normal(const Shape& shape, RngStream& rng, S stddev,
                             bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    for (auto& v : t.values()) {
      double d;
      do {
        d = rng.normal();
      } while (std::abs(d) > 2.0);
      v = static_cast<S>(d) * stddev;
    }
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index size() const { return numel(node_->shape); }
  Index dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }

  std::vector<S>& values() { return node_->val; }
  const std::vector<S>& values() const { return node_->val; }
  S* data() { return node_->val.data(); }
  const S* data() const { return node_->val.data(); }
  S item() const {
    if (size() != 1) throw std::logic_error("item(): tensor is not scalar");
    return node_->val[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }
  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  bool all_finite() const {
    for (S v : node_->val)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  /// Reverse pass from a scalar root; accumulates into .grad() of every
  /// reachable node with requires_grad set.
  void backward() {
    if (size() != 1) throw std::logic_error("backward(): root must be scalar");
    std::vector<Node<S>*> order;
    topo(node_.get(), order);
    node_->ensure_grad();
    node_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      (*it)->mark = 0;
      if ((*it)->backfn) (*it)->backfn();
    }
  }

  std::shared_ptr<Node<S>> node() const { return node_; }

  // --- internal: used by op implementations ---
  static Tensor make_op(const Shape& shape, std::vector<Tensor> inputs) {
    Tensor t;
    t.node_ = std::make_shared<Node<S>>();
    t.node_->shape = shape;
    t.node_->val.assign(static_cast<size_t>(numel(shape)), S(0));
    if (NoGrad::enabled()) {
      bool rg = false;
      for (auto& in : inputs) rg = rg || in.requires_grad();
      t.node_->requires_grad = rg;
      if (rg)
        for (auto& in : inputs) t.node_->parents.push_back(in.node_);
    }
    return t;
  }
  void set_backfn(std::function<void()> fn) {
    if (node_->requires_grad) node_->backfn = std::move(fn);
  }

 private:
  static void topo(Node<S>* n, std::vector<Node<S>*>& order) {
    // iterative DFS, post-order
    std::vector<std::pair<Node<S>*, size_t>> stack{{n, 0}};
    n->mark = 1;
    while (!stack.empty()) {
      auto& [cur, i] = stack.back();
      if (i < cur->parents.size()) {
        Node<S>* p = cur->parents[i++].get();
        if (p->mark == 0 && p->requires_grad) {
          p->mark = 1;
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(cur);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S, typename FwdF, typename BwdA, typename BwdB>
Tensor<S> binary_ew(const Tensor<S>& a, const Tensor<S>& b, FwdF f, BwdA dfa, BwdB dfb,
                    const char* name) {
  detail::check_same_shape(a, b, name);
  Tensor<S> out = Tensor<S>::make_op(a.shape(), {a, b});
  const Index n = a.size();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (Index i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  auto an = a.node();
  auto bn = b.node();
  auto on = out.node().get();
  out.set_backfn([an, bn, on, n, dfa, dfb]() {
    const S* g = on->grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (Index i = 0; i < n; ++i) an->grad[i] += g[i] * dfa(an->val[i], bn->val[i]);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (Index i = 0; i < n; ++i) bn->grad[i] += g[i] * dfb(an->val[i], bn->val[i]);
    }
  });
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); }, "add");
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); }, "sub");
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; },
      "mul");
}

template <typename S, typename FwdF, typename BwdF>
Tensor<S> unary_ew(const Tensor<S>& a, FwdF f, BwdF df) {
  Tensor<S> out = Tensor<S>::make_op(a.shape(), {a});
  const Index n = a.size();
  const S* pa = a.data();
  S* po = out.data();
  for (Index i = 0; i < n; ++i) po[i] = f(pa[i]);
  auto an = a.node();
  auto on = out.node().get();
  out.set_backfn([an, on, n, df]() {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const S* g = on->grad.data();
    for (Index i = 0; i < n; ++i) an->grad[i] += g[i] * df(an->val[i], on->val[i]);
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return unary_ew(a, [c](S x) { return c * x; }, [c](S, S) { return c; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return unary_ew(a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return unary_ew(a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return unary_ew(a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return unary_ew(a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return unary_ew(a, [](S x) { return std::sqrt(x); },
                  [](S, S y) { return S(0.5) / std::max(y, S(1e-30)); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return unary_ew(a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
                  [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  return unary_ew(
      a, [](S x) { return x / (S(1) + std::exp(-x)); },
      [](S x, S) {
        const S s = S(1) / (S(1) + std::exp(-x));
        return s * (S(1) + x * (S(1) - s));
      });
}

template <typename S>
Tensor<S> sin(const Tensor<S>& a) {
  return unary_ew(a, [](S x) { return std::sin(x); }, [](S x, S) { return std::cos(x); });
}

template <typename S>
Tensor<S> cos(const Tensor<S>& a) {
  return unary_ew(a, [](S x) { return std::cos(x); }, [](S x, S) { return -std::sin(x); });
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

/// x: [..., n] plus row vector v: [n], added to every row.
template <typename S>
Tensor<S> add_rows(const Tensor<S>& x, const Tensor<S>& v) {
  const Index n = v.size();
  if (x.dim(x.ndim() - 1) != n)
    throw std::invalid_argument("add_rows: last dim mismatch");
  Tensor<S> out = Tensor<S>::make_op(x.shape(), {x, v});
  const Index rows = x.size() / n;
  const S* px = x.data();
  const S* pv = v.data();
  S* po = out.data();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] + pv[j];
  auto xn = x.node();
  auto vn = v.node();
  auto on = out.node().get();
  out.set_backfn([xn, vn, on, rows, n]() {
    const S* g = on->grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (Index i = 0; i < rows * n; ++i) xn->grad[i] += g[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < n; ++j) vn->grad[j] += g[r * n + j];
    }
  });
  return out;
}

/// x: [..., n] times row vector v: [n] (per-channel gain).
template <typename S>
Tensor<S> mul_rows(const Tensor<S>& x, const Tensor<S>& v) {
  const Index n = v.size();
  if (x.dim(x.ndim() - 1) != n)
    throw std::invalid_argument("mul_rows: last dim mismatch");
  Tensor<S> out = Tensor<S>::make_op(x.shape(), {x, v});
  const Index rows = x.size() / n;
  const S* px = x.data();
  const S* pv = v.data();
  S* po = out.data();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] * pv[j];
  auto xn = x.node();
  auto vn = v.node();
  auto on = out.node().get();
  out.set_backfn([xn, vn, on, rows, n]() {
    const S* g = on->grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < n; ++j) xn->grad[r * n + j] += g[r * n + j] * vn->val[j];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < n; ++j) vn->grad[j] += g[r * n + j] * xn->val[r * n + j];
    }
  });
  return out;
}

/// x: [m, n] scaled per row by column vector v: [m].
template <typename S>
Tensor<S> mul_cols(const Tensor<S>& x, const Tensor<S>& v) {
  if (x.ndim() != 2 || v.size() != x.dim(0))
    throw std::invalid_argument("mul_cols: expects [m,n] and [m]");
  const Index m = x.dim(0), n = x.dim(1);
  Tensor<S> out = Tensor<S>::make_op(x.shape(), {x, v});
  const S* px = x.data();
  const S* pv = v.data();
  S* po = out.data();
  for (Index r = 0; r < m; ++r)
    for (Index j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] * pv[r];
  auto xn = x.node();
  auto vn = v.node();
  auto on = out.node().get();
  out.set_backfn([xn, vn, on, m, n]() {
    const S* g = on->grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (Index r = 0; r < m; ++r)
        for (Index j = 0; j < n; ++j) xn->grad[r * n + j] += g[r * n + j] * vn->val[r];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (Index r = 0; r < m; ++r)
        for (Index j = 0; j < n; ++j) vn->grad[r] += g[r * n + j] * xn->val[r * n + j];
    }
  });
  return out;
}

/// x: [B, m, n] plus a shared [m, n] addend per batch item.
template <typename S>
Tensor<S> add_bcast2(const Tensor<S>& x, const Tensor<S>& b) {
  if (x.ndim() < 2 || b.ndim() != 2)
    throw std::invalid_argument("add_bcast2: expects [...,m,n] and [m,n]");
  const Index m = b.dim(0), n = b.dim(1);
  if (x.dim(x.ndim() - 2) != m || x.dim(x.ndim() - 1) != n)
    throw std::invalid_argument("add_bcast2: trailing dims mismatch");
  Tensor<S> out = Tensor<S>::make_op(x.shape(), {x, b});
  const Index mn = m * n;
  const Index batch = x.size() / mn;
  const S* px = x.data();
  const S* pb = b.data();
  S* po = out.data();
  for (Index k = 0; k < batch; ++k)
    for (Index i = 0; i < mn; ++i) po[k * mn + i] = px[k * mn + i] + pb[i];
  auto xn = x.node();
  auto bn = b.node();
  auto on = out.node().get();
  out.set_backfn([xn, bn, on, batch, mn]() {
    const S* g = on->grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (Index i = 0; i < batch * mn; ++i) xn->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (Index k = 0; k < batch; ++k)
        for (Index i = 0; i < mn; ++i) bn->grad[i] += g[k * mn + i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, const Shape& shape) {
  if (numel(shape) != x.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor<S> out = Tensor<S>::make_op(shape, {x});
  std::copy(x.data(), x.data() + x.size(), out.data());
  auto xn = x.node();
  auto on = out.node().get();
  const Index n = x.size();
  out.set_backfn([xn, on, n]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
  });
  return out;
}

/// Transpose the last two dims: [..., m, n] -> [..., n, m].
template <typename S>
Tensor<S> transpose_last(const Tensor<S>& x) {
  if (x.ndim() < 2) throw std::invalid_argument("transpose_last: needs >= 2 dims");
  Shape s = x.shape();
  const Index m = s[s.size() - 2], n = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor<S> out = Tensor<S>::make_op(s, {x});
  const Index mn = m * n;
  const Index batch = x.size() / mn;
  const S* px = x.data();
  S* po = out.data();
  for (Index k = 0; k < batch; ++k)
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) po[k * mn + j * m + i] = px[k * mn + i * n + j];
  auto xn = x.node();
  auto on = out.node().get();
  out.set_backfn([xn, on, batch, m, n, mn]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S* g = on->grad.data();
    for (Index k = 0; k < batch; ++k)
      for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) xn->grad[k * mn + i * n + j] += g[k * mn + j * m + i];
  });
  return out;
}

/// Contiguous slice along an axis.
template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index len) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim()) throw std::invalid_argument("slice: bad axis");
  const Shape& s = x.shape();
  if (start < 0 || start + len > s[static_cast<size_t>(axis)])
    throw std::invalid_argument("slice: out of range");
  Shape os = s;
  os[static_cast<size_t>(axis)] = len;
  Index inner = 1;
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  Index outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  const Index src_stride = s[static_cast<size_t>(axis)] * inner;
  const Index dst_stride = len * inner;
  Tensor<S> out = Tensor<S>::make_op(os, {x});
  const S* px = x.data();
  S* po = out.data();
  for (Index o = 0; o < outer; ++o)
    std::copy(px + o * src_stride + start * inner, px + o * src_stride + (start + len) * inner,
              po + o * dst_stride);
  auto xn = x.node();
  auto on = out.node().get();
  out.set_backfn([xn, on, outer, inner, src_stride, dst_stride, start]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S* g = on->grad.data();
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < dst_stride; ++i)
        xn->grad[o * src_stride + start * inner + i] += g[o * dst_stride + i];
  });
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input");
  int nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  Shape os = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != os[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch");
    total += p.dim(axis);
  }
  os[static_cast<size_t>(axis)] = total;
  Tensor<S> out = Tensor<S>::make_op(os, parts);
  Index inner = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= os[static_cast<size_t>(i)];
  Index outer = 1;
  for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
  const Index dst_stride = total * inner;
  S* po = out.data();
  Index off = 0;
  struct Piece {
    std::shared_ptr<Node<S>> node;
    Index offset, stride;
  };
  std::vector<Piece> pieces;
  for (const auto& p : parts) {
    const Index pstride = p.dim(axis) * inner;
    const S* ps = p.data();
    for (Index o = 0; o < outer; ++o)
      std::copy(ps + o * pstride, ps + (o + 1) * pstride, po + o * dst_stride + off);
    pieces.push_back({p.node(), off, pstride});
    off += pstride;
  }
  auto on = out.node().get();
  out.set_backfn([on, pieces, outer, dst_stride]() {
    const S* g = on->grad.data();
    for (const auto& pc : pieces) {
      if (!pc.node->requires_grad) continue;
      pc.node->ensure_grad();
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < pc.stride; ++i)
          pc.node->grad[o * pc.stride + i] += g[o * dst_stride + pc.offset + i];
    }
  });
  return out;
}

/// Select rows along axis 0: x [m, ...] with k indices -> [k, ...].
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<Index>& idx) {
  const Index m = x.dim(0);
  const Index row = x.size() / m;
  Shape os = x.shape();
  os[0] = static_cast<Index>(idx.size());
  for (Index i : idx)
    if (i < 0 || i >= m) throw std::out_of_range("gather_rows: index out of range");
  Tensor<S> out = Tensor<S>::make_op(os, {x});
  const S* px = x.data();
  S* po = out.data();
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy(px + idx[k] * row, px + (idx[k] + 1) * row, po + static_cast<Index>(k) * row);
  auto xn = x.node();
  auto on = out.node().get();
  auto ic = idx;
  out.set_backfn([xn, on, ic, row]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S* g = on->grad.data();
    for (size_t k = 0; k < ic.size(); ++k)
      for (Index i = 0; i < row; ++i)
        xn->grad[ic[k] * row + i] += g[static_cast<Index>(k) * row + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::make_op({1}, {x});
  S acc = S(0);
  const S* px = x.data();
  const Index n = x.size();
  for (Index i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = acc;
  auto xn = x.node();
  auto on = out.node().get();
  out.set_backfn([xn, on, n]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S g = on->grad[0];
    for (Index i = 0; i < n; ++i) xn->grad[i] += g;
  });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// a: [m, k] x b: [k, n] -> [m, n].
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: bad shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::make_op({m, n}, {a, b});
  // row-by-row so each output row is a pure function of its input row and b;
  // results then do not depend on how many other rows share the product
  detail::CMatMap<S> mb(b.data(), k, n);
  for (Index i = 0; i < m; ++i)
    detail::MatMap<S>(out.data() + i * n, 1, n).noalias() =
        detail::CMatMap<S>(a.data() + i * k, 1, k) * mb;
  auto an = a.node();
  auto bn = b.node();
  auto on = out.node().get();
  out.set_backfn([an, bn, on, m, k, n]() {
    detail::CMatMap<S> g(on->grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      detail::MatMap<S>(an->grad.data(), m, k) +=
          g * detail::CMatMap<S>(bn->val.data(), k, n).transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::MatMap<S>(bn->grad.data(), k, n) +=
          detail::CMatMap<S>(an->val.data(), m, k).transpose() * g;
    }
  });
  return out;
}

/// Batched matmul. a: [B, m, k] (or [m, k], shared) x b: [B, k, n] -> [B, m, n].
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (b.ndim() != 3) throw std::invalid_argument("bmm: b must be [B,k,n]");
  const Index B = b.dim(0), k = b.dim(1), n = b.dim(2);
  const bool shared_a = (a.ndim() == 2);
  if (!shared_a && (a.ndim() != 3 || a.dim(0) != B))
    throw std::invalid_argument("bmm: batch mismatch");
  const Index m = shared_a ? a.dim(0) : a.dim(1);
  if ((shared_a ? a.dim(1) : a.dim(2)) != k) throw std::invalid_argument("bmm: inner dim");
  Tensor<S> out = Tensor<S>::make_op({B, m, n}, {a, b});
  for (Index t = 0; t < B; ++t) {
    detail::CMatMap<S> mb(b.data() + t * k * n, k, n);
    // row-by-row for row-count-independent results, as in matmul
    for (Index i = 0; i < m; ++i)
      detail::MatMap<S>(out.data() + t * m * n + i * n, 1, n).noalias() =
          detail::CMatMap<S>(a.data() + (shared_a ? 0 : t * m * k) + i * k, 1, k) * mb;
  }
  auto an = a.node();
  auto bn = b.node();
  auto on = out.node().get();
  out.set_backfn([an, bn, on, B, m, k, n, shared_a]() {
    for (Index t = 0; t < B; ++t) {
      detail::CMatMap<S> g(on->grad.data() + t * m * n, m, n);
      detail::CMatMap<S> ma(an->val.data() + (shared_a ? 0 : t * m * k), m, k);
      detail::CMatMap<S> mb(bn->val.data() + t * k * n, k, n);
      if (an->requires_grad) {
        an->ensure_grad();
        detail::MatMap<S>(an->grad.data() + (shared_a ? 0 : t * m * k), m, k) +=
            g * mb.transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::MatMap<S>(bn->grad.data() + t * k * n, k, n) += ma.transpose() * g;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax / normalization
// ---------------------------------------------------------------------------

/// Softmax over the last dim. `mask`, when given, is an allow-mask over the
/// trailing [m, n] block shared across leading batch dims; disallowed entries
/// get weight exactly zero. A fully masked row is an error.
template <typename S>
Tensor<S> masked_softmax(const Tensor<S>& x,
                         const std::shared_ptr<const std::vector<std::uint8_t>>& mask = nullptr,
                         Index mask_rows = 0) {
  const Index n = x.dim(x.ndim() - 1);
  const Index rows = x.size() / n;
  if (mask) {
    if (mask_rows <= 0 || static_cast<Index>(mask->size()) != mask_rows * n)
      throw std::invalid_argument("masked_softmax: mask size mismatch");
    if (rows % mask_rows != 0) throw std::invalid_argument("masked_softmax: mask rows mismatch");
  }
  Tensor<S> out = Tensor<S>::make_op(x.shape(), {x});
  const S* px = x.data();
  S* po = out.data();
  for (Index r = 0; r < rows; ++r) {
    const std::uint8_t* mrow = mask ? mask->data() + (r % mask_rows) * n : nullptr;
    S mx = -std::numeric_limits<S>::infinity();
    bool any = false;
    for (Index j = 0; j < n; ++j)
      if (!mrow || mrow[j]) {
        any = true;
        mx = std::max(mx, px[r * n + j]);
      }
    if (!any) throw std::domain_error("masked_softmax: fully masked row");
    S denom = S(0);
    for (Index j = 0; j < n; ++j) {
      if (!mrow || mrow[j]) {
        po[r * n + j] = std::exp(px[r * n + j] - mx);
        denom += po[r * n + j];
      } else {
        po[r * n + j] = S(0);
      }
    }
    for (Index j = 0; j < n; ++j) po[r * n + j] /= denom;
  }
  auto xn = x.node();
  auto on = out.node().get();
  out.set_backfn([xn, on, rows, n]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S* y = on->val.data();
    const S* g = on->grad.data();
    for (Index r = 0; r < rows; ++r) {
      S dot = S(0);
      for (Index j = 0; j < n; ++j) dot += y[r * n + j] * g[r * n + j];
      for (Index j = 0; j < n; ++j)
        xn->grad[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
  return out;
}

/// RMS normalization over the last dim (no gain; compose with mul_rows).
template <typename S>
Tensor<S> rmsnorm(const Tensor<S>& x, S eps = S(1e-6)) {
  const Index n = x.dim(x.ndim() - 1);
  const Index rows = x.size() / n;
  Tensor<S> out = Tensor<S>::make_op(x.shape(), {x});
  const S* px = x.data();
  S* po = out.data();
  std::vector<S> inv(static_cast<size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    S ss = S(0);
    for (Index j = 0; j < n; ++j) ss += px[r * n + j] * px[r * n + j];
    inv[static_cast<size_t>(r)] = S(1) / std::sqrt(ss / static_cast<S>(n) + eps);
    for (Index j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] * inv[static_cast<size_t>(r)];
  }
  auto xn = x.node();
  auto on = out.node().get();
  out.set_backfn([xn, on, rows, n, inv = std::move(inv)]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S* px2 = xn->val.data();
    const S* g = on->grad.data();
    for (Index r = 0; r < rows; ++r) {
      const S iv = inv[static_cast<size_t>(r)];
      S dot = S(0);
      for (Index j = 0; j < n; ++j) dot += g[r * n + j] * px2[r * n + j];
      const S c = dot * iv * iv * iv / static_cast<S>(n);
      for (Index j = 0; j < n; ++j) xn->grad[r * n + j] += g[r * n + j] * iv - c * px2[r * n + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

/// Pairwise periodic Euclidean distance between point sets a: [m, d] and
/// b: [k, d] on a torus with the given per-axis extents -> [m, k].
/// Differentiable in both point sets (a.e.; the wrap boundary and the
/// coincident-point diagonal use a guarded derivative).
template <typename S>
Tensor<S> pairwise_periodic_dist(const Tensor<S>& a, const Tensor<S>& b,
                                 const std::vector<double>& extents) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw std::invalid_argument("pairwise_periodic_dist: bad shapes");
  const Index m = a.dim(0), k = b.dim(0), d = a.dim(1);
  if (static_cast<Index>(extents.size()) != d)
    throw std::invalid_argument("pairwise_periodic_dist: extents rank mismatch");
  Tensor<S> out = Tensor<S>::make_op({m, k}, {a, b});
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < k; ++j) {
      double ss = 0;
      for (Index ax = 0; ax < d; ++ax) {
        double diff = static_cast<double>(pa[i * d + ax]) - static_cast<double>(pb[j * d + ax]);
        const double L = extents[static_cast<size_t>(ax)];
        diff -= L * std::round(diff / L);
        ss += diff * diff;
      }
      po[i * k + j] = static_cast<S>(std::sqrt(ss));
    }
  auto an = a.node();
  auto bn = b.node();
  auto on = out.node().get();
  auto ext = extents;
  out.set_backfn([an, bn, on, m, k, d, ext]() {
    const S* pa2 = an->val.data();
    const S* pb2 = bn->val.data();
    const S* y = on->val.data();
    const S* g = on->grad.data();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < k; ++j) {
        const double dist = std::max(static_cast<double>(y[i * k + j]), 1e-12);
        const double gd = static_cast<double>(g[i * k + j]) / dist;
        for (Index ax = 0; ax < d; ++ax) {
          double diff =
              static_cast<double>(pa2[i * d + ax]) - static_cast<double>(pb2[j * d + ax]);
          const double L = ext[static_cast<size_t>(ax)];
          diff -= L * std::round(diff / L);
          if (an->requires_grad) an->grad[i * d + ax] += static_cast<S>(gd * diff);
          if (bn->requires_grad) bn->grad[j * d + ax] -= static_cast<S>(gd * diff);
        }
      }
  });
  return out;
}

}  // namespace enma
