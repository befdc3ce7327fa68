#pragma once

#include <algorithm>
#include <numeric>

#include "enma/conv.hpp"
#include "enma/nn.hpp"
#include "enma/pde.hpp"

namespace enma {
namespace vae {

enum class Block { Residual, CompressSpace, CompressTime };

/// Encoder/decoder hyperparameters. The interpolator maps scattered input
/// points onto a learned coordinate grid Xi via distance-biased cross
/// attention; the compressor is a stack of causal space-time conv blocks.
struct VaeConfig {
  std::vector<Index> xi_sizes;  // {128} or {16, 16}
  std::vector<double> extents;  // periodic domain length per axis
  Index channels = 1;
  Index freqs = 12;      // positional encoding frequency count
  double max_freq = 4.0; // highest frequency, geometric spacing from 1
  Index heads = 4;
  Index head_dim = 4;
  std::vector<double> slopes{1, 2, 3, 4};  // per-head distance-bias slopes
  bool bias_enabled = true;
  Index h_comp = 16;  // lifted conv width
  Index kernel = 7;   // conv kernel size (temporal and spatial)
  std::vector<Block> blocks{Block::CompressSpace, Block::Residual, Block::CompressSpace,
                            Block::Residual,      Block::CompressSpace, Block::Residual};
  Index token_dim = 4;
  Index refine_depth = 2;  // self-attention blocks over Xi tokens

  Index dims() const { return static_cast<Index>(xi_sizes.size()); }
  Index model_dim() const { return heads * head_dim; }
  Index posenc_dim() const { return dims() * 2 * freqs; }
  Index xi_count() const {
    Index p = 1;
    for (Index s : xi_sizes) p *= s;
    return p;
  }
  Index space_stride() const {
    Index s = 1;
    for (Block b : blocks)
      if (b == Block::CompressSpace) s *= 2;
    return s;
  }
  std::vector<Index> latent_sizes() const {
    std::vector<Index> out = xi_sizes;
    for (auto& s : out) s /= space_stride();
    return out;
  }
  Index latent_sites() const {
    Index p = 1;
    for (Index s : latent_sizes()) p *= s;
    return p;
  }

  void validate() const {
    if (xi_sizes.empty() || xi_sizes.size() > 2)
      throw std::invalid_argument("vae: Xi must be 1-D or 2-D");
    if (extents.size() != xi_sizes.size())
      throw std::invalid_argument("vae: one domain extent per axis required");
    if (static_cast<Index>(slopes.size()) != heads)
      throw std::invalid_argument("vae: one bias slope per head required");
    for (double m : slopes)
      if (m < 0) throw std::invalid_argument("vae: bias slopes must be non-negative");
    if (freqs < 2 || max_freq <= 0) throw std::invalid_argument("vae: bad positional encoding");
    if (h_comp < 1 || kernel < 1 || token_dim < 1 || heads < 1 || head_dim < 1)
      throw std::invalid_argument("vae: bad sizes");
    std::vector<Index> sp = xi_sizes;
    for (Block b : blocks) {
      for (Index s : sp)
        if (kernel > s)
          throw std::invalid_argument("vae: kernel exceeds spatial extent in block stack");
      if (b == Block::CompressSpace)
        for (auto& s : sp) {
          if (s % 2 != 0)
            throw std::invalid_argument("vae: spatial extent not divisible by stride");
          s /= 2;
        }
    }
  }
};

inline VaeConfig default_vae_config(Index dims) {
  VaeConfig c;
  if (dims == 1) {
    c.xi_sizes = {128};
    c.extents = {1.0};
    c.token_dim = 4;
  } else {
    c.xi_sizes = {16, 16};
    c.extents = {1.0, 1.0};
    c.token_dim = 8;
    c.kernel = 3;
    c.blocks = {Block::CompressSpace, Block::Residual};
  }
  return c;
}

/// Shape of the activation entering each conv block, plus the final latent
/// shape; used both by the encoder and to invert the stride schedule when
/// decoding (transposed convs need the big-side sizes explicitly).
struct StageShape {
  Index T;
  std::vector<Index> sp;
};

inline std::vector<StageShape> stage_shapes(const VaeConfig& cfg, Index L) {
  if (L < 1) throw std::invalid_argument("vae: need at least one frame");
  std::vector<StageShape> out;
  StageShape s{L, cfg.xi_sizes};
  out.push_back(s);
  for (Block b : cfg.blocks) {
    if (b == Block::CompressSpace) {
      for (auto& e : s.sp) {
        if (e % 2 != 0) throw std::invalid_argument("vae: spatial extent not divisible by stride");
        e /= 2;
      }
    } else if (b == Block::CompressTime) {
      s.T = (s.T - 1) / 2 + 1;
    }
    out.push_back(s);
  }
  return out;
}

/// Sin/cos features at geometrically spaced frequencies 1..max_freq, per
/// coordinate axis, with a full period of frequency f spanning extent/f.
/// Pure data transform: no gradient flows through coordinates here.
template <typename S>
Tensor<S> positional_encode(const Tensor<S>& coords, Index freqs, double max_freq,
                            const std::vector<double>& extents) {
  if (coords.ndim() != 2 || coords.dim(1) != static_cast<Index>(extents.size()))
    throw std::invalid_argument("positional_encode: coords must be [n, dims]");
  const Index n = coords.dim(0), d = coords.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n, d * 2 * freqs});
  const S* c = coords.data();
  S* p = out.data();
  for (Index i = 0; i < n; ++i)
    for (Index a = 0; a < d; ++a)
      for (Index j = 0; j < freqs; ++j) {
        const double f = std::pow(max_freq, static_cast<double>(j) / static_cast<double>(freqs - 1));
        const double ang = 2.0 * M_PI * f * static_cast<double>(c[i * d + a]) / extents[a];
        p[i * out.dim(1) + (a * freqs + j) * 2] = static_cast<S>(std::sin(ang));
        p[i * out.dim(1) + (a * freqs + j) * 2 + 1] = static_cast<S>(std::cos(ang));
      }
  return out;
}

/// Per-head additive attention bias B[h][i][j] = -m_h * dist(q_i, k_j) with
/// periodic Euclidean distance; differentiable in both coordinate sets.
template <typename S>
std::vector<Tensor<S>> geometry_bias(const Tensor<S>& q_coords, const Tensor<S>& k_coords,
                                     const std::vector<double>& slopes,
                                     const std::vector<double>& extents) {
  Tensor<S> dist = pairwise_periodic_dist(q_coords, k_coords, extents);
  std::vector<Tensor<S>> out;
  out.reserve(slopes.size());
  for (double m : slopes) out.push_back(scale(dist, static_cast<S>(-m)));
  return out;
}

template <typename S>
struct VaeOutput {
  Tensor<S> mean;    // [L_e, M_latent, token_dim]
  Tensor<S> logvar;  // same shape
  std::vector<Index> latent_sizes;
};

template <typename S>
struct Vae {
  VaeConfig cfg;
  Tensor<S> xi;        // [M, dims] learned grid coordinates
  Tensor<S> xi_embed;  // [M, model_dim] learned query embeddings
  nn::MultiHeadAttention<S> enc_cross;
  std::vector<nn::TransformerBlock<S>> refine;
  nn::Linear<S> lift;  // model_dim -> h_comp
  struct ConvBlock {
    Block kind;
    Tensor<S> w1, b1, w2, b2;  // compress blocks use only w1/b1
  };
  std::vector<ConvBlock> enc_blocks;
  std::vector<ConvBlock> dec_blocks;  // stored in encoder order, applied reversed
  nn::Linear<S> mean_head, logvar_head;  // h_comp -> token_dim
  nn::Linear<S> unlift;                  // token_dim -> h_comp
  nn::Linear<S> dec_feat;                // h_comp -> model_dim
  nn::MultiHeadAttention<S> dec_cross;
  nn::Linear<S> out1, out2;  // model_dim -> model_dim -> channels

  Shape conv_w_shape() const {
    const Index k = cfg.kernel;
    return {k, k, cfg.dims() == 2 ? k : 1, cfg.h_comp, cfg.h_comp};
  }

  static Tensor<S> regular_xi(const VaeConfig& cfg) {
    Tensor<S> t = Tensor<S>::zeros({cfg.xi_count(), cfg.dims()});
    S* p = t.data();
    if (cfg.dims() == 1) {
      const double h = cfg.extents[0] / static_cast<double>(cfg.xi_sizes[0]);
      for (Index i = 0; i < cfg.xi_sizes[0]; ++i) p[i] = static_cast<S>(h * static_cast<double>(i));
    } else {
      const double hy = cfg.extents[0] / static_cast<double>(cfg.xi_sizes[0]);
      const double hx = cfg.extents[1] / static_cast<double>(cfg.xi_sizes[1]);
      for (Index i = 0; i < cfg.xi_sizes[0]; ++i)
        for (Index j = 0; j < cfg.xi_sizes[1]; ++j) {
          p[(i * cfg.xi_sizes[1] + j) * 2] = static_cast<S>(hy * static_cast<double>(i));
          p[(i * cfg.xi_sizes[1] + j) * 2 + 1] = static_cast<S>(hx * static_cast<double>(j));
        }
    }
    return t;
  }

  static Vae create(ParamStore<S>& store, const VaeConfig& cfg, RngStream& rng) {
    cfg.validate();
    Vae m;
    m.cfg = cfg;
    const Index dm = cfg.model_dim();
    const Index kv_dim = cfg.posenc_dim() + cfg.channels;
    m.xi = store.add("xi.coords", regular_xi(cfg));
    m.xi_embed = store.add("xi.embed",
                           Tensor<S>::trunc_normal({cfg.xi_count(), dm}, rng, S(0.02)));
    m.enc_cross = nn::MultiHeadAttention<S>::create(store, "enc.cross", dm, kv_dim, cfg.heads,
                                                    cfg.head_dim, dm, rng);
    for (Index i = 0; i < cfg.refine_depth; ++i)
      m.refine.push_back(nn::TransformerBlock<S>::create(store, "enc.ref" + std::to_string(i),
                                                         dm, cfg.heads, 2 * dm, rng));
    m.lift = nn::Linear<S>::create(store, "enc.lift", dm, cfg.h_comp, rng);
    const Shape ws = m.conv_w_shape();
    // gain-2 fan-in init compensates silu's small-signal slope of 1/2, keeping
    // the non-residual compress stack near unit gain; residual blocks start as
    // the identity (zero output conv) so depth never attenuates the signal
    const S conv_std = S(2) / std::sqrt(static_cast<S>(ws[0] * ws[1] * ws[2] * ws[3]));
    auto add_blocks = [&](const std::string& prefix, std::vector<ConvBlock>& dst) {
      for (size_t i = 0; i < cfg.blocks.size(); ++i) {
        ConvBlock b;
        b.kind = cfg.blocks[i];
        const std::string nm = prefix + ".blk" + std::to_string(i);
        b.w1 = store.add(nm + ".w1", Tensor<S>::trunc_normal(ws, rng, conv_std));
        b.b1 = store.add(nm + ".b1", Tensor<S>::zeros({cfg.h_comp}));
        if (b.kind == Block::Residual) {
          b.w2 = store.add(nm + ".w2", Tensor<S>::zeros(ws));
          b.b2 = store.add(nm + ".b2", Tensor<S>::zeros({cfg.h_comp}));
        }
        dst.push_back(b);
      }
    };
    add_blocks("enc", m.enc_blocks);
    add_blocks("dec", m.dec_blocks);
    m.mean_head = nn::Linear<S>::create(store, "enc.mean", cfg.h_comp, cfg.token_dim, rng);
    // start with near-deterministic tokens (std ~ e^-3): with unit sampling
    // noise the decoder would see no signal and training would collapse onto
    // ignoring the latent before the variance could shrink
    m.logvar_head = nn::Linear<S>::create(store, "enc.logvar", cfg.h_comp, cfg.token_dim, rng,
                                          S(0.02));
    for (auto& v : store.get("enc.logvar.b").values()) v = S(-6);
    m.unlift = nn::Linear<S>::create(store, "dec.unlift", cfg.token_dim, cfg.h_comp, rng);
    m.dec_feat = nn::Linear<S>::create(store, "dec.feat", cfg.h_comp, dm, rng);
    m.dec_cross = nn::MultiHeadAttention<S>::create(store, "dec.cross", cfg.posenc_dim(), dm,
                                                    cfg.heads, cfg.head_dim, dm, rng);
    m.out1 = nn::Linear<S>::create(store, "dec.out1", dm, dm, rng);
    m.out2 = nn::Linear<S>::create(store, "dec.out2", dm, cfg.channels, rng);
    return m;
  }

  static Vae from_store(ParamStore<S>& store, const VaeConfig& cfg) {
    cfg.validate();
    Vae m;
    m.cfg = cfg;
    m.xi = store.get("xi.coords");
    m.xi_embed = store.get("xi.embed");
    m.enc_cross = nn::MultiHeadAttention<S>::from_store(store, "enc.cross", cfg.heads,
                                                        cfg.head_dim);
    for (Index i = 0; i < cfg.refine_depth; ++i)
      m.refine.push_back(nn::TransformerBlock<S>::from_store(store, "enc.ref" + std::to_string(i),
                                                             cfg.model_dim(), cfg.heads));
    m.lift = nn::Linear<S>::from_store(store, "enc.lift");
    auto load_blocks = [&](const std::string& prefix, std::vector<ConvBlock>& dst) {
      for (size_t i = 0; i < cfg.blocks.size(); ++i) {
        ConvBlock b;
        b.kind = cfg.blocks[i];
        const std::string nm = prefix + ".blk" + std::to_string(i);
        b.w1 = store.get(nm + ".w1");
        b.b1 = store.get(nm + ".b1");
        if (b.kind == Block::Residual) {
          b.w2 = store.get(nm + ".w2");
          b.b2 = store.get(nm + ".b2");
        }
        dst.push_back(b);
      }
    };
    load_blocks("enc", m.enc_blocks);
    load_blocks("dec", m.dec_blocks);
    m.mean_head = nn::Linear<S>::from_store(store, "enc.mean");
    m.logvar_head = nn::Linear<S>::from_store(store, "enc.logvar");
    m.unlift = nn::Linear<S>::from_store(store, "dec.unlift");
    m.dec_feat = nn::Linear<S>::from_store(store, "dec.feat");
    m.dec_cross = nn::MultiHeadAttention<S>::from_store(store, "dec.cross", cfg.heads,
                                                        cfg.head_dim);
    m.out1 = nn::Linear<S>::from_store(store, "dec.out1");
    m.out2 = nn::Linear<S>::from_store(store, "dec.out2");
    return m;
  }
};

/// Interpolate scattered (coord, value) observations onto the learned grid Xi.
/// coords: [N, dims], values: [L, N, channels] -> [L, M, model_dim].
/// Input points are re-sorted into a canonical order first, so the result is
/// bit-exactly invariant to the ordering of the input set.
template <typename S>
Tensor<S> interp_encode(const Vae<S>& m, const Tensor<S>& coords, const Tensor<S>& values) {
  const VaeConfig& cfg = m.cfg;
  if (coords.ndim() != 2 || coords.dim(1) != cfg.dims())
    throw std::invalid_argument("interp_encode: coords must be [n, dims]");
  if (values.ndim() != 3 || values.dim(1) != coords.dim(0) || values.dim(2) != cfg.channels)
    throw std::invalid_argument("interp_encode: values must be [frames, n, channels]");
  const Index N = coords.dim(0), L = values.dim(0), d = cfg.dims(), ch = cfg.channels;
  if (N < 1) throw std::invalid_argument("interp_encode: empty input set");

  const S* cp = coords.data();
  const S* vp = values.data();
  std::vector<Index> perm(static_cast<size_t>(N));
  std::iota(perm.begin(), perm.end(), Index(0));
  std::sort(perm.begin(), perm.end(), [&](Index a, Index b) {
    for (Index k = 0; k < d; ++k) {
      if (cp[a * d + k] != cp[b * d + k]) return cp[a * d + k] < cp[b * d + k];
    }
    for (Index l = 0; l < L; ++l)
      for (Index k = 0; k < ch; ++k) {
        const S va = vp[(l * N + a) * ch + k], vb = vp[(l * N + b) * ch + k];
        if (va != vb) return va < vb;
      }
    return false;
  });

  std::vector<S> sc(static_cast<size_t>(N * d));
  for (Index i = 0; i < N; ++i)
    for (Index k = 0; k < d; ++k) sc[i * d + k] = cp[perm[i] * d + k];
  Tensor<S> sorted_coords = Tensor<S>::from({N, d}, std::move(sc));
  Tensor<S> pe = positional_encode(sorted_coords, cfg.freqs, cfg.max_freq, cfg.extents);

  const Index kv_dim = cfg.posenc_dim() + ch;
  std::vector<S> kv(static_cast<size_t>(L * N * kv_dim));
  const S* pep = pe.data();
  for (Index l = 0; l < L; ++l)
    for (Index i = 0; i < N; ++i) {
      S* row = kv.data() + (l * N + i) * kv_dim;
      std::copy(pep + i * cfg.posenc_dim(), pep + (i + 1) * cfg.posenc_dim(), row);
      for (Index k = 0; k < ch; ++k) row[cfg.posenc_dim() + k] = vp[(l * N + perm[i]) * ch + k];
    }
  Tensor<S> kv_t = Tensor<S>::from({L, N, kv_dim}, std::move(kv));

  Tensor<S> h;
  if (cfg.bias_enabled) {
    std::vector<Tensor<S>> bias = geometry_bias(m.xi, sorted_coords, cfg.slopes, cfg.extents);
    h = m.enc_cross(m.xi_embed, kv_t, &bias);
  } else {
    h = m.enc_cross(m.xi_embed, kv_t);
  }
  for (const auto& blk : m.refine) h = blk(h);
  return h;  // [L, M, model_dim]
}

namespace detail {

template <typename S>
Tensor<S> apply_enc_block(const typename Vae<S>::ConvBlock& b, const Tensor<S>& x) {
  if (b.kind == Block::Residual)
    return add(x, causal_conv(silu(causal_conv(x, b.w1, b.b1, 1, 1)), b.w2, b.b2, 1, 1));
  const Index st = b.kind == Block::CompressTime ? 2 : 1;
  const Index ss = b.kind == Block::CompressSpace ? 2 : 1;
  return silu(causal_conv(x, b.w1, b.b1, st, ss));
}

template <typename S>
Tensor<S> apply_dec_block(const typename Vae<S>::ConvBlock& b, const Tensor<S>& x,
                          const StageShape& big) {
  if (b.kind == Block::Residual)
    return add(x, causal_conv(silu(causal_conv(x, b.w1, b.b1, 1, 1)), b.w2, b.b2, 1, 1));
  const Index st = b.kind == Block::CompressTime ? 2 : 1;
  const Index ss = b.kind == Block::CompressSpace ? 2 : 1;
  Shape out_sizes{big.T};
  for (Index s : big.sp) out_sizes.push_back(s);
  return silu(causal_conv_transpose(x, b.w1, b.b1, st, ss, out_sizes));
}

inline Shape with_channels(const StageShape& s, Index c) {
  Shape out{s.T};
  for (Index e : s.sp) out.push_back(e);
  out.push_back(c);
  return out;
}

}  // namespace detail

/// Compress the interpolated field [L, M, model_dim] through the causal conv
/// stack into mean/log-variance token grids.
template <typename S>
VaeOutput<S> compress(const Vae<S>& m, const Tensor<S>& field) {
  const VaeConfig& cfg = m.cfg;
  if (field.ndim() != 3 || field.dim(1) != cfg.xi_count() || field.dim(2) != cfg.model_dim())
    throw std::invalid_argument("compress: field must be [frames, xi_count, model_dim]");
  const Index L = field.dim(0);
  const auto stages = stage_shapes(cfg, L);
  Tensor<S> x = m.lift(field);
  x = reshape(x, detail::with_channels(stages[0], cfg.h_comp));
  for (size_t i = 0; i < m.enc_blocks.size(); ++i)
    x = detail::apply_enc_block<S>(m.enc_blocks[i], x);
  const StageShape& fin = stages.back();
  Index ms = 1;
  for (Index s : fin.sp) ms *= s;
  Tensor<S> flat = reshape(x, {fin.T, ms, cfg.h_comp});
  VaeOutput<S> out;
  out.mean = m.mean_head(flat);
  out.logvar = m.logvar_head(flat);
  out.latent_sizes = fin.sp;
  return out;
}

/// Reparameterized draw z = mean + exp(logvar / 2) * eps.
template <typename S>
Tensor<S> sample_tokens(const VaeOutput<S>& vo, const Tensor<S>& eps) {
  if (eps.shape() != vo.mean.shape())
    throw std::invalid_argument("sample_tokens: eps shape mismatch");
  return add(vo.mean, mul(exp(scale(vo.logvar, S(0.5))), eps));
}

template <typename S>
Tensor<S> sample_tokens(const VaeOutput<S>& vo, RngStream& rng) {
  return sample_tokens(vo, Tensor<S>::randn(vo.mean.shape(), rng));
}

/// Invert the stride schedule with transposed causal convs, then decode to
/// arbitrary query coordinates via cross attention (queries from x_out,
/// keys/values from the upsampled Xi tokens, bias roles swapped).
/// z: [L_e, latent_sites, token_dim]; x_out: [Q, dims] -> [L, Q, channels].
template <typename S>
Tensor<S> decompress_and_decode(const Vae<S>& m, const Tensor<S>& z, Index frames,
                                const Tensor<S>& x_out) {
  const VaeConfig& cfg = m.cfg;
  const auto stages = stage_shapes(cfg, frames);
  const StageShape& fin = stages.back();
  Index ms = 1;
  for (Index s : fin.sp) ms *= s;
  if (z.ndim() != 3 || z.dim(0) != fin.T || z.dim(1) != ms || z.dim(2) != cfg.token_dim)
    throw std::invalid_argument("decode: latent shape inconsistent with frame count");
  if (x_out.ndim() != 2 || x_out.dim(1) != cfg.dims())
    throw std::invalid_argument("decode: query coords must be [q, dims]");
  Tensor<S> x = m.unlift(z);
  x = reshape(x, detail::with_channels(fin, cfg.h_comp));
  for (size_t i = m.dec_blocks.size(); i-- > 0;)
    x = detail::apply_dec_block<S>(m.dec_blocks[i], x, stages[i]);
  Tensor<S> feats = m.dec_feat(reshape(x, {frames, cfg.xi_count(), cfg.h_comp}));
  Tensor<S> pe = positional_encode(x_out, cfg.freqs, cfg.max_freq, cfg.extents);
  Tensor<S> dec;
  if (cfg.bias_enabled) {
    std::vector<Tensor<S>> bias = geometry_bias(x_out, m.xi, cfg.slopes, cfg.extents);
    dec = m.dec_cross(pe, feats, &bias);
  } else {
    dec = m.dec_cross(pe, feats);
  }
  return m.out2(silu(m.out1(dec)));  // [L, Q, channels]
}

/// Relative-MSE reconstruction plus beta-weighted Gaussian KL to N(0, I),
/// KL = 1/2 sum(mean^2 + exp(logvar) - 1 - logvar) over all latent entries.
template <typename S>
Tensor<S> vae_loss(const Tensor<S>& recon, const Tensor<S>& target, const Tensor<S>& mean_t,
                   const Tensor<S>& logvar, double beta = 1e-4) {
  if (recon.shape() != target.shape()) throw std::invalid_argument("vae_loss: shape mismatch");
  if (mean_t.shape() != logvar.shape()) throw std::invalid_argument("vae_loss: latent mismatch");
  double den = 0;
  for (S v : target.values()) den += static_cast<double>(v) * static_cast<double>(v);
  Tensor<S> rel = scale(sum(square(sub(recon, target))), static_cast<S>(1.0 / std::max(den, 1e-30)));
  Tensor<S> kl =
      scale(sum(sub(add(square(mean_t), exp(logvar)), add_scalar(logvar, S(1)))), S(0.5));
  return add(rel, scale(kl, static_cast<S>(beta)));
}

template <typename S>
Tensor<S> coords_tensor(const Dataset& d) {
  std::vector<S> c(d.grid.begin(), d.grid.end());
  return Tensor<S>::from({d.sites(), static_cast<Index>(d.spatial.size())}, std::move(c));
}

template <typename S>
Tensor<S> traj_values(const Dataset& d, Index i) {
  const float* p = d.traj(i);
  std::vector<S> v(p, p + d.nt * d.frame_size());
  return Tensor<S>::from({d.nt, d.sites(), d.channels}, std::move(v));
}

template <typename S>
Tensor<S> sub_coords_tensor(const pde::GridSubsample& s, Index dims) {
  std::vector<S> c(s.coords.begin(), s.coords.end());
  return Tensor<S>::from({static_cast<Index>(s.indices.size()), dims}, std::move(c));
}

template <typename S>
Tensor<S> sub_values_tensor(const pde::GridSubsample& s, Index nt, Index ch) {
  std::vector<S> v(s.values.begin(), s.values.end());
  return Tensor<S>::from({nt, static_cast<Index>(s.indices.size()), ch}, std::move(v));
}

struct VaeTrainConfig {
  Index steps = 500;
  Index batch = 8;
  double pi_min = 0.2;  // per-sample input subsampling fraction range
  double pi_max = 1.0;
  double beta = 1e-4;
  // KL weight ramps linearly from zero over [ramp_start, ramp_end] (fractions
  // of total steps). At full weight from step 0 the KL term is the only
  // consistent-sign gradient and Adam inflates the posterior variance before
  // the decoder commits to the latent, collapsing reconstruction.
  double beta_ramp_start = 0.25;
  double beta_ramp_end = 0.75;
  LrSchedule lr{};
  OptimConfig opt{};

  double beta_at(Index step) const {
    const double p = static_cast<double>(step) / static_cast<double>(std::max<Index>(1, steps));
    if (p <= beta_ramp_start) return 0.0;
    if (p >= beta_ramp_end) return beta;
    return beta * (p - beta_ramp_start) / (beta_ramp_end - beta_ramp_start);
  }
};

/// End-to-end reconstruction: encode a point set, sample tokens, decode on
/// query coords. Exposed for evaluation helpers.
template <typename S>
Tensor<S> reconstruct(const Vae<S>& m, const Tensor<S>& coords, const Tensor<S>& values,
                      const Tensor<S>& x_out, RngStream& rng, Tensor<S>* mean_out = nullptr,
                      Tensor<S>* logvar_out = nullptr) {
  VaeOutput<S> vo = compress(m, interp_encode(m, coords, values));
  if (mean_out) *mean_out = vo.mean;
  if (logvar_out) *logvar_out = vo.logvar;
  Tensor<S> z = sample_tokens(vo, rng);
  return decompress_and_decode(m, z, values.dim(0), x_out);
}

/// Train on a trajectory dataset: each iteration draws, per sample, a fraction
/// pi of the grid as encoder input; reconstruction targets stay on the full
/// grid. Xi coordinates are clamped into the domain after every step.
/// Returns the per-step loss trace.
template <typename S>
std::vector<double> train_vae(const Dataset& data, ParamStore<S>& store, Vae<S>& model,
                              const VaeTrainConfig& tc, std::uint64_t seed) {
  data.validate();
  if (static_cast<Index>(data.spatial.size()) != model.cfg.dims() ||
      data.channels != model.cfg.channels)
    throw std::invalid_argument("train_vae: dataset/config mismatch");
  RngStream root(seed);
  Tensor<S> full_coords = coords_tensor<S>(data);
  std::vector<Tensor<S>> targets(static_cast<size_t>(data.n_traj));
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(tc.steps));
  for (Index step = 0; step < tc.steps; ++step) {
    RngStream it = root.fork(static_cast<std::uint64_t>(step));
    const Index bsz = std::min<Index>(tc.batch, data.n_traj);
    const auto picks = it.sample_without_replacement(data.n_traj, bsz);
    store.zero_grad();
    Tensor<S> total;
    for (Index b = 0; b < bsz; ++b) {
      const Index ti = picks[static_cast<size_t>(b)];
      if (!targets[static_cast<size_t>(ti)].node())
        targets[static_cast<size_t>(ti)] = traj_values<S>(data, ti);
      const double pi = it.uniform(tc.pi_min, tc.pi_max);
      pde::GridSubsample sub = pde::subsample_grid(data, ti, pi, it);
      Tensor<S> sc = sub_coords_tensor<S>(sub, model.cfg.dims());
      Tensor<S> sv = sub_values_tensor<S>(sub, data.nt, data.channels);
      Tensor<S> mean_t, logvar_t;
      Tensor<S> recon = reconstruct(model, sc, sv, full_coords, it, &mean_t, &logvar_t);
      Tensor<S> li =
          vae_loss(recon, targets[static_cast<size_t>(ti)], mean_t, logvar_t, tc.beta_at(step));
      total = total.node() ? add(total, li) : li;
    }
    total = scale(total, S(1) / static_cast<S>(bsz));
    const double lv = static_cast<double>(total.item());
    if (!std::isfinite(lv)) throw std::runtime_error("train_vae: non-finite loss (divergence)");
    total.backward();
    optimizer_step(store, tc.lr.at(step), tc.opt);
    auto& xc = store.get("xi.coords").values();
    const Index d = model.cfg.dims();
    for (Index i = 0; i < model.cfg.xi_count(); ++i)
      for (Index a = 0; a < d; ++a) {
        S& v = xc[static_cast<size_t>(i * d + a)];
        v = std::min(std::max(v, S(0)), static_cast<S>(model.cfg.extents[static_cast<size_t>(a)]));
      }
    trace.push_back(lv);
  }
  return trace;
}

}  // namespace vae
}  // namespace enma
