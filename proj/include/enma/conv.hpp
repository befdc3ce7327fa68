#pragma once

#include "enma/tensor.hpp"

namespace enma {

namespace convdet {

/// Geometry of one causal space-time convolution.
/// Input  x: [T, S1, S2, Cin]   (S2 = 1 for one spatial dim)
/// Weight w: [kt, k1, k2, Cin, Cout]
/// Output y: [To, O1, O2, Cout]
/// Temporal padding covers only the past (kt - 1 zeros); spatial padding is
/// circular with offset ks/2. Temporal stride st gives To = (T-1)/st + 1;
/// spatial stride ss > 1 requires divisibility and gives O = S/ss.
struct Geom {
  Index T, S1, S2, Cin, Cout, kt, k1, k2, st, ss;
  Index To, O1, O2;

  Geom(Index T_, Index S1_, Index S2_, Index Cin_, Index Cout_, Index kt_, Index k1_, Index k2_,
       Index st_, Index ss_)
      : T(T_), S1(S1_), S2(S2_), Cin(Cin_), Cout(Cout_), kt(kt_), k1(k1_), k2(k2_), st(st_),
        ss(ss_) {
    if (T < 1 || S1 < 1 || S2 < 1) throw std::invalid_argument("conv: empty input");
    if (k1 > S1 || k2 > S2)
      throw std::invalid_argument("conv: kernel larger than spatial extent");
    if (ss > 1 && (S1 % ss != 0 || (S2 > 1 && S2 % ss != 0)))
      throw std::invalid_argument("conv: spatial extent not divisible by stride");
    To = (T - 1) / st + 1;
    O1 = (ss > 1) ? S1 / ss : S1;
    O2 = (S2 > 1 && ss > 1) ? S2 / ss : S2;
  }

  Index in_size() const { return T * S1 * S2 * Cin; }
  Index out_size() const { return To * O1 * O2 * Cout; }
  Index w_size() const { return kt * k1 * k2 * Cin * Cout; }
};

inline Index wrap(Index i, Index n) {
  i %= n;
  return i < 0 ? i + n : i;
}

template <typename S>
void conv_fwd(const Geom& g, const S* x, const S* w, const S* b, S* y,
              bool accumulate = false) {
  using RowIn = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;
  using RowOut = Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>;
  using WMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  for (Index to = 0; to < g.To; ++to)
    for (Index o1 = 0; o1 < g.O1; ++o1)
      for (Index o2 = 0; o2 < g.O2; ++o2) {
        RowOut yr(y + ((to * g.O1 + o1) * g.O2 + o2) * g.Cout, g.Cout);
        if (!accumulate) {
          if (b)
            yr = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b, g.Cout);
          else
            yr.setZero();
        }
        for (Index dt = 0; dt < g.kt; ++dt) {
          const Index ti = to * g.st + dt - (g.kt - 1);
          if (ti < 0) continue;
          for (Index d1 = 0; d1 < g.k1; ++d1) {
            const Index s1 = wrap(o1 * (g.ss > 1 ? g.ss : 1) + d1 - g.k1 / 2, g.S1);
            for (Index d2 = 0; d2 < g.k2; ++d2) {
              const Index s2 =
                  g.S2 == 1 ? 0 : wrap(o2 * (g.ss > 1 ? g.ss : 1) + d2 - g.k2 / 2, g.S2);
              RowIn xr(x + ((ti * g.S1 + s1) * g.S2 + s2) * g.Cin, g.Cin);
              WMap wk(w + (((dt * g.k1 + d1) * g.k2 + d2) * g.Cin) * g.Cout, g.Cin, g.Cout);
              yr.noalias() += xr * wk;
            }
          }
        }
      }
}

template <typename S>
void conv_bwd_data(const Geom& g, const S* gy, const S* w, S* gx_accum) {
  using RowG = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;
  using RowX = Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>;
  using WMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  for (Index to = 0; to < g.To; ++to)
    for (Index o1 = 0; o1 < g.O1; ++o1)
      for (Index o2 = 0; o2 < g.O2; ++o2) {
        RowG gr(gy + ((to * g.O1 + o1) * g.O2 + o2) * g.Cout, g.Cout);
        for (Index dt = 0; dt < g.kt; ++dt) {
          const Index ti = to * g.st + dt - (g.kt - 1);
          if (ti < 0) continue;
          for (Index d1 = 0; d1 < g.k1; ++d1) {
            const Index s1 = wrap(o1 * (g.ss > 1 ? g.ss : 1) + d1 - g.k1 / 2, g.S1);
            for (Index d2 = 0; d2 < g.k2; ++d2) {
              const Index s2 =
                  g.S2 == 1 ? 0 : wrap(o2 * (g.ss > 1 ? g.ss : 1) + d2 - g.k2 / 2, g.S2);
              RowX xr(gx_accum + ((ti * g.S1 + s1) * g.S2 + s2) * g.Cin, g.Cin);
              WMap wk(w + (((dt * g.k1 + d1) * g.k2 + d2) * g.Cin) * g.Cout, g.Cin, g.Cout);
              xr.noalias() += gr * wk.transpose();
            }
          }
        }
      }
}

template <typename S>
void conv_bwd_weights(const Geom& g, const S* x, const S* gy, S* gw_accum, S* gb_accum) {
  using RowIn = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;
  using WMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  for (Index to = 0; to < g.To; ++to)
    for (Index o1 = 0; o1 < g.O1; ++o1)
      for (Index o2 = 0; o2 < g.O2; ++o2) {
        RowIn gr(gy + ((to * g.O1 + o1) * g.O2 + o2) * g.Cout, g.Cout);
        if (gb_accum)
          Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gb_accum, g.Cout) += gr;
        for (Index dt = 0; dt < g.kt; ++dt) {
          const Index ti = to * g.st + dt - (g.kt - 1);
          if (ti < 0) continue;
          for (Index d1 = 0; d1 < g.k1; ++d1) {
            const Index s1 = wrap(o1 * (g.ss > 1 ? g.ss : 1) + d1 - g.k1 / 2, g.S1);
            for (Index d2 = 0; d2 < g.k2; ++d2) {
              const Index s2 =
                  g.S2 == 1 ? 0 : wrap(o2 * (g.ss > 1 ? g.ss : 1) + d2 - g.k2 / 2, g.S2);
              RowIn xr(x + ((ti * g.S1 + s1) * g.S2 + s2) * g.Cin, g.Cin);
              WMap wk(gw_accum + (((dt * g.k1 + d1) * g.k2 + d2) * g.Cin) * g.Cout, g.Cin,
                      g.Cout);
              wk.noalias() += xr.transpose() * gr;
            }
          }
        }
      }
}

inline Geom geom_from(const Shape& xs, const Shape& ws, Index st, Index ss) {
  if (ws.size() != 5) throw std::invalid_argument("conv: weight must be [kt,k1,k2,Cin,Cout]");
  if (xs.size() == 3)  // [T, S1, C]
    return Geom(xs[0], xs[1], 1, xs[2], ws[4], ws[0], ws[1], ws[2], st, ss);
  if (xs.size() == 4)  // [T, S1, S2, C]
    return Geom(xs[0], xs[1], xs[2], xs[3], ws[4], ws[0], ws[1], ws[2], st, ss);
  throw std::invalid_argument("conv: input must be [T,S1,C] or [T,S1,S2,C]");
}

}  // namespace convdet

/// Causal space-time convolution. Temporal padding only on the past side
/// (size kt-1, zero fill); spatial padding circular. Output frame t is a
/// function of input frames <= t only.
template <typename S>
Tensor<S> causal_conv(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, Index stride_t,
                      Index stride_s) {
  const convdet::Geom g = convdet::geom_from(x.shape(), w.shape(), stride_t, stride_s);
  if (x.size() != g.in_size() || w.size() != g.w_size() || b.size() != g.Cout)
    throw std::invalid_argument("causal_conv: shape mismatch");
  Shape os = x.ndim() == 3 ? Shape{g.To, g.O1, g.Cout} : Shape{g.To, g.O1, g.O2, g.Cout};
  Tensor<S> out = Tensor<S>::make_op(os, {x, w, b});
  convdet::conv_fwd(g, x.data(), w.data(), b.data(), out.data());
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  auto on = out.node().get();
  out.set_backfn([g, xn, wn, bn, on]() {
    if (xn->requires_grad) {
      xn->ensure_grad();
      convdet::conv_bwd_data(g, on->grad.data(), wn->val.data(), xn->grad.data());
    }
    if (wn->requires_grad || bn->requires_grad) {
      wn->ensure_grad();
      bn->ensure_grad();
      convdet::conv_bwd_weights(g, xn->val.data(), on->grad.data(), wn->grad.data(),
                                bn->grad.data());
    }
  });
  return out;
}

/// Adjoint of causal_conv: upsamples [Ts, Os.., Cin] back to the given
/// [T_out, S_out..] sizes. Weight layout [kt, k1, k2, Cout, Cin] matches the
/// forward conv whose adjoint this is, so a transpose block exactly inverts
/// the stride schedule of its paired compression block.
template <typename S>
Tensor<S> causal_conv_transpose(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                                Index stride_t, Index stride_s, const Shape& out_sizes) {
  // out_sizes: [T_out, S1_out] or [T_out, S1_out, S2_out]
  Shape big = out_sizes;
  big.push_back(w.dim(3));  // Cout
  const convdet::Geom g = convdet::geom_from(big, w.shape(), stride_t, stride_s);
  // g describes the paired forward conv big -> small, so the input here has
  // g.Cout channels and the output has g.Cin channels.
  Shape expect_small =
      x.ndim() == 3 ? Shape{g.To, g.O1, g.Cout} : Shape{g.To, g.O1, g.O2, g.Cout};
  if (x.shape() != expect_small)
    throw std::invalid_argument("causal_conv_transpose: input/out_sizes inconsistent, expected " +
                                shape_str(expect_small) + " got " + shape_str(x.shape()));
  if (b.size() != g.Cin)
    throw std::invalid_argument("causal_conv_transpose: bias size");
  Tensor<S> out = Tensor<S>::make_op(big, {x, w, b});
  // scatter through the adjoint, then add bias per output channel
  convdet::conv_bwd_data(g, x.data(), w.data(), out.data());
  {
    S* po = out.data();
    const S* pb = b.data();
    const Index positions = out.size() / g.Cin;
    for (Index p = 0; p < positions; ++p)
      for (Index c = 0; c < g.Cin; ++c) po[p * g.Cin + c] += pb[c];
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  auto on = out.node().get();
  out.set_backfn([g, xn, wn, bn, on]() {
    if (xn->requires_grad) {
      xn->ensure_grad();
      convdet::conv_fwd(g, on->grad.data(), wn->val.data(), static_cast<const S*>(nullptr),
                        xn->grad.data(), /*accumulate=*/true);
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      convdet::conv_bwd_weights(g, on->grad.data(), xn->val.data(), wn->grad.data(),
                                static_cast<S*>(nullptr));
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      const Index positions = static_cast<Index>(on->grad.size()) / g.Cin;
      for (Index p = 0; p < positions; ++p)
        for (Index c = 0; c < g.Cin; ++c) bn->grad[c] += on->grad[p * g.Cin + c];
    }
  });
  return out;
}

}  // namespace enma
