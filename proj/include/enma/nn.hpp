#pragma once

#include <map>

#include "enma/tensor.hpp"

namespace enma {

template <typename S>
inline void assert_all_finite(const Tensor<S>& t, const char* what) {
  if (!t.all_finite()) throw std::runtime_error(std::string(what) + ": non-finite values");
}

/// Named trainable parameters with AdamW moment slots.
/// Iteration order is insertion order, so updates are deterministic.
template <typename S>
class ParamStore {
 public:
  struct Slot {
    Tensor<S> param;
    std::vector<S> m, v;  // allocated iff trainable
    bool trainable = true;
  };

  Tensor<S>& add(const std::string& name, Tensor<S> t, bool trainable = true) {
    if (slots_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    t.set_requires_grad(trainable);
    Slot s;
    s.param = std::move(t);
    s.trainable = trainable;
    if (trainable) {
      s.m.assign(static_cast<size_t>(s.param.size()), S(0));
      s.v.assign(static_cast<size_t>(s.param.size()), S(0));
    }
    order_.push_back(name);
    return slots_.emplace(name, std::move(s)).first->second.param;
  }

  Tensor<S>& get(const std::string& name) {
    auto it = slots_.find(name);
    if (it == slots_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second.param;
  }
  const Tensor<S>& get(const std::string& name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }
  bool has(const std::string& name) const { return slots_.count(name) != 0; }
  Slot& slot(const std::string& name) { return slots_.at(name); }
  const std::vector<std::string>& names() const { return order_; }
  std::int64_t& step() { return step_; }
  std::int64_t step() const { return step_; }

  void zero_grad() {
    for (auto& n : order_) slots_.at(n).param.zero_grad();
  }

  Index total_size() const {
    Index n = 0;
    for (auto& name : order_) n += slots_.at(name).param.size();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, Slot> slots_;
  std::int64_t step_ = 0;
};

/// Linear warmup to `base`, then cosine decay to `floor`.
struct LrSchedule {
  double base = 1e-3;
  double floor = 1e-5;
  std::int64_t warmup_steps = 500;
  std::int64_t total_steps = 10000;

  double at(std::int64_t step) const {
    if (step < warmup_steps)
      return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const std::int64_t span = std::max<std::int64_t>(1, total_steps - warmup_steps);
    double p = static_cast<double>(std::min(step - warmup_steps, span)) /
               static_cast<double>(span);
    return floor + 0.5 * (base - floor) * (1.0 + std::cos(M_PI * p));
  }
};

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double eps = 1e-8;
};

/// Global L2 norm of all trainable gradients (computed in double).
template <typename S>
double global_grad_norm(ParamStore<S>& store) {
  double ss = 0;
  for (const auto& name : store.names()) {
    auto& slot = store.slot(name);
    if (!slot.trainable) continue;
    for (S g : slot.param.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(ss);
}

/// One AdamW step: global-norm clipping, decoupled weight decay, bias-corrected
/// moments. Throws on non-finite gradients.
template <typename S>
void optimizer_step(ParamStore<S>& store, double lr, const OptimConfig& cfg = {}) {
  for (const auto& name : store.names()) {
    auto& slot = store.slot(name);
    if (!slot.trainable) continue;
    for (S g : slot.param.grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw std::runtime_error("optimizer_step: non-finite gradient in " + name);
  }
  double gscale = 1.0;
  if (cfg.clip_norm > 0) {
    const double norm = global_grad_norm(store);
    if (norm > cfg.clip_norm) gscale = cfg.clip_norm / norm;
  }
  store.step() += 1;
  const double t = static_cast<double>(store.step());
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& name : store.names()) {
    auto& slot = store.slot(name);
    if (!slot.trainable) continue;
    auto& p = slot.param.values();
    auto& g = slot.param.grad();
    for (size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * gscale;
      const double m = cfg.beta1 * static_cast<double>(slot.m[i]) + (1.0 - cfg.beta1) * gi;
      const double v = cfg.beta2 * static_cast<double>(slot.v[i]) + (1.0 - cfg.beta2) * gi * gi;
      slot.m[i] = static_cast<S>(m);
      slot.v[i] = static_cast<S>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      p[i] = static_cast<S>(static_cast<double>(p[i]) -
                            lr * (update + cfg.weight_decay * static_cast<double>(p[i])));
    }
  }
}

/// Max relative error between analytic gradients of f (a scalar-valued
/// computation over the store) and central finite differences.
template <typename F>
double grad_check(ParamStore<double>& store, F f, double eps = 1e-5) {
  if (eps < 1e-6 || eps > 1e-4) throw std::invalid_argument("grad_check: eps out of range");
  store.zero_grad();
  Tensor<double> loss = f();
  if (!loss.all_finite()) throw std::runtime_error("grad_check: non-finite loss");
  loss.backward();
  std::map<std::string, std::vector<double>> analytic;
  for (const auto& name : store.names()) {
    auto& slot = store.slot(name);
    if (slot.trainable) analytic[name] = slot.param.grad();
  }
  double max_err = 0;
  NoGrad off;
  for (const auto& name : store.names()) {
    auto& slot = store.slot(name);
    if (!slot.trainable) continue;
    auto& p = slot.param.values();
    for (size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + eps;
      const double fp = f().item();
      p[i] = orig - eps;
      const double fm = f().item();
      p[i] = orig;
      const double fd = (fp - fm) / (2 * eps);
      const double a = analytic[name][i];
      const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

namespace nn {

template <typename S>
struct Linear {
  Tensor<S> w;  // [in, out]
  Tensor<S> b;  // [out]

  // init_std <= 0 selects fan-in scaling 1/sqrt(in); a fixed small std would
  // attenuate signals through the narrow non-residual paths used here.
  static Linear create(ParamStore<S>& store, const std::string& name, Index in, Index out,
                       RngStream& rng, S init_std = S(0)) {
    Linear l;
    if (init_std <= S(0)) init_std = S(1) / std::sqrt(static_cast<S>(in));
    l.w = store.add(name + ".w", Tensor<S>::trunc_normal({in, out}, rng, init_std));
    l.b = store.add(name + ".b", Tensor<S>::zeros({out}));
    return l;
  }

  static Linear from_store(ParamStore<S>& store, const std::string& name) {
    Linear l;
    l.w = store.get(name + ".w");
    l.b = store.get(name + ".b");
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    const Index in = w.dim(0);
    if (x.dim(x.ndim() - 1) != in)
      throw std::invalid_argument("Linear: input dim mismatch");
    Tensor<S> flat = reshape(x, {x.size() / in, in});
    Tensor<S> y = add_rows(matmul(flat, w), b);
    Shape os = x.shape();
    os.back() = w.dim(1);
    return reshape(y, os);
  }
};

template <typename S>
struct RmsNorm {
  Tensor<S> gain;  // [n]

  static RmsNorm create(ParamStore<S>& store, const std::string& name, Index n) {
    RmsNorm r;
    r.gain = store.add(name + ".g", Tensor<S>::filled({n}, S(1)));
    return r;
  }
  static RmsNorm from_store(ParamStore<S>& store, const std::string& name) {
    return RmsNorm{store.get(name + ".g")};
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return mul_rows(rmsnorm(x), gain); }
};

/// SwiGLU feed-forward: silu(x W_g) * (x W_v) -> W_out.
template <typename S>
struct SwiGlu {
  Linear<S> win;   // dm -> 2*hidden
  Linear<S> wout;  // hidden -> dm

  static SwiGlu create(ParamStore<S>& store, const std::string& name, Index dm, Index hidden,
                       RngStream& rng) {
    SwiGlu m;
    m.win = Linear<S>::create(store, name + ".in", dm, 2 * hidden, rng);
    m.wout = Linear<S>::create(store, name + ".out", hidden, dm, rng);
    return m;
  }
  static SwiGlu from_store(ParamStore<S>& store, const std::string& name) {
    return SwiGlu{Linear<S>::from_store(store, name + ".in"),
                  Linear<S>::from_store(store, name + ".out")};
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    Tensor<S> h = win(x);
    const Index hid = h.dim(h.ndim() - 1) / 2;
    Tensor<S> gate = slice(h, h.ndim() - 1, 0, hid);
    Tensor<S> val = slice(h, h.ndim() - 1, hid, hid);
    return wout(mul(silu(gate), val));
  }
};

/// Multi-head attention over batched token sets.
/// x_q: [B, nq, dq] or [nq, dq] (shared queries across batch);
/// x_kv: [B, nk, dk_in]. Optional per-head additive bias matrices [nq, nk]
/// applied pre-softmax (before the 1/sqrt(d_k) scaling, matching the
/// softmax((QK^T + B)/sqrt(d_k)) V form), and an allow-mask over [nq, nk].
template <typename S>
struct MultiHeadAttention {
  Index heads = 0, head_dim = 0;
  Linear<S> wq, wk, wv, wo;
  Tensor<S> qgain, kgain;  // QK normalization gains, [head_dim]
  bool qk_norm = true;

  static MultiHeadAttention create(ParamStore<S>& store, const std::string& name, Index dq,
                                   Index dkv, Index heads, Index head_dim, Index dout,
                                   RngStream& rng, bool qk_norm = true) {
    MultiHeadAttention a;
    a.heads = heads;
    a.head_dim = head_dim;
    a.qk_norm = qk_norm;
    a.wq = Linear<S>::create(store, name + ".q", dq, heads * head_dim, rng);
    a.wk = Linear<S>::create(store, name + ".k", dkv, heads * head_dim, rng);
    a.wv = Linear<S>::create(store, name + ".v", dkv, heads * head_dim, rng);
    a.wo = Linear<S>::create(store, name + ".o", heads * head_dim, dout, rng);
    if (qk_norm) {
      a.qgain = store.add(name + ".qg", Tensor<S>::filled({head_dim}, S(1)));
      a.kgain = store.add(name + ".kg", Tensor<S>::filled({head_dim}, S(1)));
    }
    return a;
  }

  static MultiHeadAttention from_store(ParamStore<S>& store, const std::string& name,
                                       Index heads, Index head_dim, bool qk_norm = true) {
    MultiHeadAttention a;
    a.heads = heads;
    a.head_dim = head_dim;
    a.qk_norm = qk_norm;
    a.wq = Linear<S>::from_store(store, name + ".q");
    a.wk = Linear<S>::from_store(store, name + ".k");
    a.wv = Linear<S>::from_store(store, name + ".v");
    a.wo = Linear<S>::from_store(store, name + ".o");
    if (qk_norm) {
      a.qgain = store.get(name + ".qg");
      a.kgain = store.get(name + ".kg");
    }
    return a;
  }

  Tensor<S> operator()(const Tensor<S>& x_q, const Tensor<S>& x_kv,
                       const std::vector<Tensor<S>>* head_bias = nullptr,
                       const std::shared_ptr<const std::vector<std::uint8_t>>& mask = nullptr)
      const {
    const bool shared_q = (x_q.ndim() == 2);
    const Index B = x_kv.dim(0);
    const Index nq = shared_q ? x_q.dim(0) : x_q.dim(1);
    const Index nk = x_kv.dim(1);
    if (!shared_q && x_q.dim(0) != B)
      throw std::invalid_argument("attention: query/key batch mismatch");
    if (head_bias && static_cast<Index>(head_bias->size()) != heads)
      throw std::invalid_argument("attention: bias must have one matrix per head");

    Tensor<S> q = wq(x_q);  // [(B,)nq, H*hd]
    Tensor<S> k = wk(x_kv);
    Tensor<S> v = wv(x_kv);
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(head_dim));
    std::vector<Tensor<S>> outs;
    for (Index h = 0; h < heads; ++h) {
      Tensor<S> qh = slice(q, q.ndim() - 1, h * head_dim, head_dim);
      Tensor<S> kh = slice(k, 2, h * head_dim, head_dim);
      Tensor<S> vh = slice(v, 2, h * head_dim, head_dim);
      if (qk_norm) {
        qh = mul_rows(rmsnorm(qh), qgain);
        kh = mul_rows(rmsnorm(kh), kgain);
      }
      Tensor<S> scores = bmm(qh, transpose_last(kh));  // [B, nq, nk]
      if (head_bias) scores = add_bcast2(scores, (*head_bias)[static_cast<size_t>(h)]);
      scores = scale(scores, inv_sqrt);
      Tensor<S> attn = masked_softmax(scores, mask, mask ? nq : 0);
      outs.push_back(bmm(attn, vh));  // [B, nq, hd]
    }
    return wo(concat(outs, 2));
  }
};

/// Pre-norm transformer block: self-attention then SwiGLU feed-forward.
template <typename S>
struct TransformerBlock {
  RmsNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  SwiGlu<S> mlp;

  static TransformerBlock create(ParamStore<S>& store, const std::string& name, Index dm,
                                 Index heads, Index mlp_hidden, RngStream& rng) {
    TransformerBlock b;
    b.ln1 = RmsNorm<S>::create(store, name + ".ln1", dm);
    b.ln2 = RmsNorm<S>::create(store, name + ".ln2", dm);
    b.attn = MultiHeadAttention<S>::create(store, name + ".attn", dm, dm, heads, dm / heads, dm,
                                           rng);
    b.mlp = SwiGlu<S>::create(store, name + ".mlp", dm, mlp_hidden, rng);
    return b;
  }
  static TransformerBlock from_store(ParamStore<S>& store, const std::string& name, Index dm,
                                     Index heads) {
    TransformerBlock b;
    b.ln1 = RmsNorm<S>::from_store(store, name + ".ln1");
    b.ln2 = RmsNorm<S>::from_store(store, name + ".ln2");
    b.attn = MultiHeadAttention<S>::from_store(store, name + ".attn", heads, dm / heads);
    b.mlp = SwiGlu<S>::from_store(store, name + ".mlp");
    return b;
  }

  /// x: [B, n, dm]; mask over [n, n] shared across batch.
  Tensor<S> operator()(const Tensor<S>& x,
                       const std::shared_ptr<const std::vector<std::uint8_t>>& mask = nullptr)
      const {
    Tensor<S> n1 = ln1(x);
    Tensor<S> h = add(x, attn(n1, n1, nullptr, mask));
    return add(h, mlp(ln2(h)));
  }
};

/// Sinusoidal position embedding table [n, dim] (fixed, not trained).
template <typename S>
Tensor<S> sincos_positions(Index n, Index dim) {
  Tensor<S> t = Tensor<S>::zeros({n, dim});
  S* p = t.data();
  for (Index pos = 0; pos < n; ++pos)
    for (Index i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) /
                                                static_cast<double>(dim));
      const double a = static_cast<double>(pos) * freq;
      p[pos * dim + i] = static_cast<S>((i % 2 == 0) ? std::sin(a) : std::cos(a));
    }
  return t;
}

}  // namespace nn

/// softmax((Q K^T + B) / sqrt(d_k)) V with optional additive bias and
/// boolean allow-mask, both [nq, nk]. Masked keys receive exactly zero
/// weight; a fully masked row is an error.
template <typename S>
Tensor<S> attention_with_bias(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                              const Tensor<S>* bias = nullptr,
                              const std::vector<std::uint8_t>* mask = nullptr) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
    throw std::invalid_argument("attention_with_bias: expects 2-D Q, K, V");
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
    throw std::invalid_argument("attention_with_bias: shape mismatch");
  const Index nq = q.dim(0), nk = k.dim(0);
  if (bias && (bias->ndim() != 2 || bias->dim(0) != nq || bias->dim(1) != nk))
    throw std::invalid_argument("attention_with_bias: bias shape mismatch");
  if (mask && static_cast<Index>(mask->size()) != nq * nk)
    throw std::invalid_argument("attention_with_bias: mask shape mismatch");
  Tensor<S> scores = matmul(q, transpose_last(k));
  if (bias) scores = add(scores, *bias);
  scores = scale(scores, S(1) / std::sqrt(static_cast<S>(q.dim(1))));
  std::shared_ptr<const std::vector<std::uint8_t>> mk;
  if (mask) mk = std::make_shared<const std::vector<std::uint8_t>>(*mask);
  Tensor<S> attn = masked_softmax(scores, mk, mask ? nq : 0);
  return matmul(attn, v);
}

}  // namespace enma
