#pragma once

#include "enma/tokenizer.hpp"

namespace enma {
namespace gen {

/// Latent-space autoregressive model sizes. Tokens are the VAE's latent grid,
/// optionally grouped into patches before entering the transformers.
struct GenConfig {
  std::vector<Index> latent_sizes;  // spatial latent grid, {M} or {H, W}
  Index token_dim = 4;
  Index patch = 1;  // 1-D default 1; 2-D default 4
  Index hidden = 64;
  Index causal_depth = 2;
  Index spatial_depth = 2;
  Index heads = 4;
  Index head_layers = 3;  // flow head MLP depth
  Index head_width = 64;
  Index decode_steps = 6;  // S
  Index fm_steps = 10;     // flow integration steps
  double mask_min = 0.75;
  double mask_max = 1.0;

  Index dims() const { return static_cast<Index>(latent_sizes.size()); }
  Index latent_count() const {
    Index p = 1;
    for (Index s : latent_sizes) p *= s;
    return p;
  }
  Index patch_cells() const {
    Index c = 1;
    for (Index i = 0; i < dims(); ++i) c *= patch;
    return c;
  }
  Index m_tokens() const { return latent_count() / patch_cells(); }
  Index patch_dim() const { return token_dim * patch_cells(); }

  void validate() const {
    if (latent_sizes.empty() || latent_sizes.size() > 2)
      throw std::invalid_argument("gen: latent grid must be 1-D or 2-D");
    for (Index s : latent_sizes)
      if (s < 1 || s % patch != 0)
        throw std::invalid_argument("gen: patch size must divide each latent extent");
    if (patch < 1 || token_dim < 1 || hidden < 1 || heads < 1 || hidden % heads != 0)
      throw std::invalid_argument("gen: bad sizes");
    if (decode_steps < 1 || decode_steps > m_tokens())
      throw std::invalid_argument("gen: decode steps must lie in [1, token count]");
    if (fm_steps < 1) throw std::invalid_argument("gen: need at least one flow step");
    if (!(mask_min > 0 && mask_min <= mask_max && mask_max <= 1.0))
      throw std::invalid_argument("gen: mask-ratio range must lie in (0, 1]");
  }
};

namespace detail {

inline std::vector<Index> patch_order(const std::vector<Index>& sizes, Index p) {
  std::vector<Index> order;
  if (sizes.size() == 1) {
    order.reserve(static_cast<size_t>(sizes[0]));
    for (Index i = 0; i < sizes[0]; ++i) order.push_back(i);
  } else {
    const Index H = sizes[0], W = sizes[1];
    order.reserve(static_cast<size_t>(H * W));
    for (Index i = 0; i < H / p; ++i)
      for (Index j = 0; j < W / p; ++j)
        for (Index a = 0; a < p; ++a)
          for (Index b = 0; b < p; ++b) order.push_back((i * p + a) * W + (j * p + b));
  }
  return order;
}

inline std::vector<Index> inverse_perm(const std::vector<Index>& perm) {
  std::vector<Index> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<Index>(i);
  return inv;
}

}  // namespace detail

/// Group latent tokens into non-overlapping patches, concatenating channels.
/// z: [M, d] -> [M / p^dims, d * p^dims]; p = 1 is the identity.
template <typename S>
Tensor<S> patchify(const Tensor<S>& z, const std::vector<Index>& sizes, Index p) {
  Index m = 1;
  for (Index s : sizes) m *= s;
  if (z.ndim() != 2 || z.dim(0) != m) throw std::invalid_argument("patchify: shape mismatch");
  for (Index s : sizes)
    if (s % p != 0) throw std::invalid_argument("patchify: extent not divisible by patch");
  if (p == 1) return z;
  const Index cells = sizes.size() == 2 ? p * p : p;
  Tensor<S> g = gather_rows(z, detail::patch_order(sizes, p));
  return reshape(g, {m / cells, cells * z.dim(1)});
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& zp, const std::vector<Index>& sizes, Index p, Index d) {
  Index m = 1;
  for (Index s : sizes) m *= s;
  const Index cells = sizes.size() == 2 ? p * p : p;
  if (zp.ndim() != 2 || zp.dim(0) != m / cells || zp.dim(1) != cells * d)
    throw std::invalid_argument("unpatchify: shape mismatch");
  if (p == 1) return zp;
  Tensor<S> flat = reshape(zp, {m, d});
  return gather_rows(flat, detail::inverse_perm(detail::patch_order(sizes, p)));
}

/// Attention allow-mask over T frames of M tokens each: token i may attend to
/// token j iff frame(j) <= frame(i); attention within a frame is unrestricted.
inline std::shared_ptr<const std::vector<std::uint8_t>> block_causal_mask(Index frames,
                                                                          Index tokens) {
  if (frames < 1 || tokens < 1) throw std::invalid_argument("block_causal_mask: empty");
  const Index n = frames * tokens;
  auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<size_t>(n * n), 0);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (j / tokens <= i / tokens) (*mask)[static_cast<size_t>(i * n + j)] = 1;
  return mask;
}

/// Tokens still masked after step s follow floor(M * cos^2(pi (s+1) / 2S)),
/// clamped so every step decodes at least one token and the total is M.
inline std::vector<Index> cosine_decode_counts(Index m_tokens, Index steps) {
  if (steps < 1 || steps > m_tokens)
    throw std::invalid_argument("cosine_decode_counts: steps must lie in [1, tokens]");
  std::vector<Index> counts;
  Index prev = m_tokens;
  for (Index s = 0; s < steps; ++s) {
    const double phase = M_PI * static_cast<double>(s + 1) / (2.0 * static_cast<double>(steps));
    const double c = std::cos(phase);
    Index want = s == steps - 1
                     ? 0
                     : static_cast<Index>(std::floor(static_cast<double>(m_tokens) * c * c));
    want = std::min(want, prev - 1);
    want = std::max(want, steps - 1 - s);
    counts.push_back(prev - want);
    prev = want;
  }
  return counts;
}

template <typename S>
struct Generator {
  GenConfig cfg;
  Tensor<S> bos;         // [M_p, hidden] learned begin-of-sequence frame
  Tensor<S> sep;         // [M_p, hidden] learned context/target separator frame
  Tensor<S> mask_embed;  // [patch_dim] learned masked-token value
  Tensor<S> spat_pos;    // [M_p, hidden] learned spatial position embedding
  Tensor<S> role_cond, role_frame;  // [hidden] block-role embeddings
  nn::Linear<S> in_proj;            // patch_dim -> hidden
  std::vector<nn::TransformerBlock<S>> causal_blocks;
  nn::RmsNorm<S> causal_norm;
  nn::Linear<S> sp_in;  // patch_dim -> hidden
  std::vector<nn::TransformerBlock<S>> spatial_blocks;
  nn::RmsNorm<S> sp_norm;
  nn::Linear<S> head_in;  // patch_dim + 1 -> head_width
  std::vector<nn::Linear<S>> head_lin, head_cond;
  nn::Linear<S> head_out;  // head_width -> patch_dim

  static Generator create(ParamStore<S>& store, const GenConfig& cfg, RngStream& rng) {
    cfg.validate();
    Generator g;
    g.cfg = cfg;
    const Index mp = cfg.m_tokens(), dp = cfg.patch_dim(), h = cfg.hidden;
    g.bos = store.add("bos", Tensor<S>::trunc_normal({mp, h}, rng, S(0.02)));
    g.sep = store.add("sep", Tensor<S>::trunc_normal({mp, h}, rng, S(0.02)));
    g.mask_embed = store.add("mask_embed", Tensor<S>::trunc_normal({dp}, rng, S(0.02)));
    g.spat_pos = store.add("spat_pos", Tensor<S>::trunc_normal({mp, h}, rng, S(0.02)));
    g.role_cond = store.add("role_cond", Tensor<S>::trunc_normal({h}, rng, S(0.02)));
    g.role_frame = store.add("role_frame", Tensor<S>::trunc_normal({h}, rng, S(0.02)));
    g.in_proj = nn::Linear<S>::create(store, "in_proj", dp, h, rng);
    for (Index i = 0; i < cfg.causal_depth; ++i)
      g.causal_blocks.push_back(nn::TransformerBlock<S>::create(
          store, "causal" + std::to_string(i), h, cfg.heads, 2 * h, rng));
    g.causal_norm = nn::RmsNorm<S>::create(store, "causal_norm", h);
    g.sp_in = nn::Linear<S>::create(store, "sp_in", dp, h, rng);
    for (Index i = 0; i < cfg.spatial_depth; ++i)
      g.spatial_blocks.push_back(nn::TransformerBlock<S>::create(
          store, "spatial" + std::to_string(i), h, cfg.heads, 2 * h, rng));
    g.sp_norm = nn::RmsNorm<S>::create(store, "sp_norm", h);
    g.head_in = nn::Linear<S>::create(store, "head_in", dp + 1, cfg.head_width, rng);
    for (Index i = 0; i < cfg.head_layers; ++i) {
      g.head_lin.push_back(nn::Linear<S>::create(store, "head_lin" + std::to_string(i),
                                                 cfg.head_width, cfg.head_width, rng));
      g.head_cond.push_back(
          nn::Linear<S>::create(store, "head_cond" + std::to_string(i), h, cfg.head_width, rng));
    }
    g.head_out = nn::Linear<S>::create(store, "head_out", cfg.head_width, dp, rng);
    return g;
  }

  static Generator from_store(ParamStore<S>& store, const GenConfig& cfg) {
    cfg.validate();
    Generator g;
    g.cfg = cfg;
    g.bos = store.get("bos");
    g.sep = store.get("sep");
    g.mask_embed = store.get("mask_embed");
    g.spat_pos = store.get("spat_pos");
    g.role_cond = store.get("role_cond");
    g.role_frame = store.get("role_frame");
    g.in_proj = nn::Linear<S>::from_store(store, "in_proj");
    for (Index i = 0; i < cfg.causal_depth; ++i)
      g.causal_blocks.push_back(nn::TransformerBlock<S>::from_store(
          store, "causal" + std::to_string(i), cfg.hidden, cfg.heads));
    g.causal_norm = nn::RmsNorm<S>::from_store(store, "causal_norm");
    g.sp_in = nn::Linear<S>::from_store(store, "sp_in");
    for (Index i = 0; i < cfg.spatial_depth; ++i)
      g.spatial_blocks.push_back(nn::TransformerBlock<S>::from_store(
          store, "spatial" + std::to_string(i), cfg.hidden, cfg.heads));
    g.sp_norm = nn::RmsNorm<S>::from_store(store, "sp_norm");
    g.head_in = nn::Linear<S>::from_store(store, "head_in");
    for (Index i = 0; i < cfg.head_layers; ++i) {
      g.head_lin.push_back(nn::Linear<S>::from_store(store, "head_lin" + std::to_string(i)));
      g.head_cond.push_back(nn::Linear<S>::from_store(store, "head_cond" + std::to_string(i)));
    }
    g.head_out = nn::Linear<S>::from_store(store, "head_out");
    return g;
  }

  Tensor<S> time_tile(Index tpos) const {
    Tensor<S> row = nn::sincos_positions<S>(tpos + 1, cfg.hidden);
    Tensor<S> t = Tensor<S>::zeros({cfg.m_tokens(), cfg.hidden});
    for (Index i = 0; i < cfg.m_tokens(); ++i)
      std::copy(row.data() + tpos * cfg.hidden, row.data() + (tpos + 1) * cfg.hidden,
                t.data() + i * cfg.hidden);
    return t;
  }

  Tensor<S> embed_bos() const { return add(bos, time_tile(0)); }
  Tensor<S> embed_sep(Index tpos) const { return add(sep, time_tile(tpos)); }
  Tensor<S> embed_frame(const Tensor<S>& z, Index tpos) const {
    return add(add(in_proj(z), spat_pos), time_tile(tpos));
  }
};

/// Teacher-forced pass: [BOS, Z^0..Z^{L-1}] under the block-causal mask.
/// Returns [L+1, M_p, hidden]; slice t is the conditioning for frame t and
/// depends only on BOS and frames < t.
template <typename S>
Tensor<S> causal_forward(const Generator<S>& g, const Tensor<S>& z_frames) {
  const Index mp = g.cfg.m_tokens(), dp = g.cfg.patch_dim(), h = g.cfg.hidden;
  if (z_frames.ndim() != 3 || z_frames.dim(1) != mp || z_frames.dim(2) != dp)
    throw std::invalid_argument("causal_forward: frames must be [L, M_p, patch_dim]");
  const Index L = z_frames.dim(0);
  std::vector<Tensor<S>> frames;
  frames.push_back(g.embed_bos());
  for (Index t = 0; t < L; ++t)
    frames.push_back(g.embed_frame(reshape(slice(z_frames, 0, t, 1), {mp, dp}), t + 1));
  Tensor<S> x = reshape(concat(frames, 0), {1, (L + 1) * mp, h});
  auto mask = block_causal_mask(L + 1, mp);
  for (const auto& blk : g.causal_blocks) x = blk(x, mask);
  return reshape(g.causal_norm(x), {L + 1, mp, h});
}

/// Per-layer key/value buffers over every appended frame. Entries for earlier
/// frames are never rewritten.
template <typename S>
struct KvCache {
  Index positions = 0;
  std::vector<std::vector<S>> k, v;  // per causal block: [positions, heads*head_dim]
};

/// Append one embedded frame to the cache and return its transformer output.
/// Inference-only (runs without building an autodiff graph).
template <typename S>
Tensor<S> cache_append(const Generator<S>& g, KvCache<S>& cache, const Tensor<S>& x_frame) {
  NoGrad off;
  const Index mp = g.cfg.m_tokens(), h = g.cfg.hidden;
  if (x_frame.ndim() != 2 || x_frame.dim(0) != mp || x_frame.dim(1) != h)
    throw std::invalid_argument("cache_append: frame must be [M_p, hidden]");
  if (cache.k.empty()) {
    cache.k.resize(g.causal_blocks.size());
    cache.v.resize(g.causal_blocks.size());
  } else if (cache.k.size() != g.causal_blocks.size()) {
    throw std::invalid_argument("cache_append: cache/model depth mismatch");
  }
  Tensor<S> x = x_frame;
  for (size_t b = 0; b < g.causal_blocks.size(); ++b) {
    const auto& blk = g.causal_blocks[b];
    const auto& at = blk.attn;
    Tensor<S> n1 = blk.ln1(x);
    Tensor<S> kf = at.wk(n1), vf = at.wv(n1), qf = at.wq(n1);
    cache.k[b].insert(cache.k[b].end(), kf.data(), kf.data() + kf.size());
    cache.v[b].insert(cache.v[b].end(), vf.data(), vf.data() + vf.size());
    const Index nk = static_cast<Index>(cache.k[b].size()) / (at.heads * at.head_dim);
    Tensor<S> k_all = Tensor<S>::from({nk, at.heads * at.head_dim}, cache.k[b]);
    Tensor<S> v_all = Tensor<S>::from({nk, at.heads * at.head_dim}, cache.v[b]);
    std::vector<Tensor<S>> outs;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(at.head_dim));
    for (Index hd = 0; hd < at.heads; ++hd) {
      Tensor<S> qh = slice(qf, 1, hd * at.head_dim, at.head_dim);
      Tensor<S> kh = slice(k_all, 1, hd * at.head_dim, at.head_dim);
      Tensor<S> vh = slice(v_all, 1, hd * at.head_dim, at.head_dim);
      if (at.qk_norm) {
        qh = mul_rows(rmsnorm(qh), at.qgain);
        kh = mul_rows(rmsnorm(kh), at.kgain);
      }
      Tensor<S> attn = masked_softmax(scale(matmul(qh, transpose_last(kh)), inv_sqrt));
      outs.push_back(matmul(attn, vh));
    }
    x = add(x, at.wo(concat(outs, 1)));
    x = add(x, blk.mlp(blk.ln2(x)));
  }
  cache.positions += mp;
  return g.causal_norm(x);
}

/// Bidirectional pass over [conditioning block; frame block] (2 M_p tokens).
/// Masked frame tokens are replaced by the learned mask embedding. Returns the
/// frame-block outputs, position-aligned with the input tokens.
template <typename S>
Tensor<S> spatial_forward(const Generator<S>& g, const Tensor<S>& z_dyn, const Tensor<S>& tokens,
                          const std::vector<std::uint8_t>& masked) {
  const Index mp = g.cfg.m_tokens(), dp = g.cfg.patch_dim(), h = g.cfg.hidden;
  if (z_dyn.ndim() != 2 || z_dyn.dim(0) != mp || z_dyn.dim(1) != h)
    throw std::invalid_argument("spatial_forward: conditioning must be [M_p, hidden]");
  if (tokens.ndim() != 2 || tokens.dim(0) != mp || tokens.dim(1) != dp)
    throw std::invalid_argument("spatial_forward: tokens must be [M_p, patch_dim]");
  if (static_cast<Index>(masked.size()) != mp)
    throw std::invalid_argument("spatial_forward: one mask flag per token required");
  std::vector<S> keep(static_cast<size_t>(mp)), drop(static_cast<size_t>(mp));
  for (Index i = 0; i < mp; ++i) {
    keep[static_cast<size_t>(i)] = masked[static_cast<size_t>(i)] ? S(0) : S(1);
    drop[static_cast<size_t>(i)] = masked[static_cast<size_t>(i)] ? S(1) : S(0);
  }
  Tensor<S> mask_rows = matmul(Tensor<S>::from({mp, 1}, std::move(drop)),
                               reshape(g.mask_embed, {1, dp}));
  Tensor<S> t_in = add(mul_cols(tokens, Tensor<S>::from({mp}, std::move(keep))), mask_rows);
  Tensor<S> x_frame = add_rows(add(g.sp_in(t_in), g.spat_pos), g.role_frame);
  Tensor<S> x_cond = add_rows(add(z_dyn, g.spat_pos), g.role_cond);
  Tensor<S> x = reshape(concat(std::vector<Tensor<S>>{x_cond, x_frame}, 0), {1, 2 * mp, h});
  for (const auto& blk : g.spatial_blocks) x = blk(x);
  Tensor<S> out = g.sp_norm(reshape(x, {2 * mp, h}));
  return slice(out, 0, mp, mp);
}

/// Velocity head: MLP over (z^r, r) with the conditioning added into every
/// hidden layer. z_r: [K, patch_dim], r: [K, 1], cond: [K, hidden].
template <typename S>
Tensor<S> fm_head(const Generator<S>& g, const Tensor<S>& z_r, const Tensor<S>& r,
                  const Tensor<S>& cond) {
  Tensor<S> hcur = g.head_in(concat(std::vector<Tensor<S>>{z_r, r}, 1));
  for (size_t l = 0; l < g.head_lin.size(); ++l)
    hcur = silu(add(g.head_lin[l](hcur), g.head_cond[l](cond)));
  return g.head_out(hcur);
}

/// Flow-matching objective over the masked positions: draw eps ~ N(0, I) and
/// r ~ U[0, 1] per token, form z^r = r z + (1 - r) eps, and regress the head
/// onto z - eps. Mean of squared error over the masked set.
template <typename S>
Tensor<S> fm_train_loss(const Generator<S>& g, const Tensor<S>& tokens, const Tensor<S>& z_tilde,
                        const std::vector<Index>& masked_idx, RngStream& rng) {
  if (masked_idx.empty()) throw std::invalid_argument("fm_train_loss: empty masked set");
  const Index K = static_cast<Index>(masked_idx.size()), dp = g.cfg.patch_dim();
  Tensor<S> zk = gather_rows(tokens, masked_idx);
  Tensor<S> ck = gather_rows(z_tilde, masked_idx);
  Tensor<S> eps = Tensor<S>::randn({K, dp}, rng);
  std::vector<S> rv(static_cast<size_t>(K)), omr(static_cast<size_t>(K));
  for (Index i = 0; i < K; ++i) {
    rv[static_cast<size_t>(i)] = static_cast<S>(rng.uniform());
    omr[static_cast<size_t>(i)] = S(1) - rv[static_cast<size_t>(i)];
  }
  Tensor<S> r_col = Tensor<S>::from({K, 1}, rv);
  Tensor<S> z_r = add(mul_cols(zk, Tensor<S>::from({K}, std::move(rv))),
                      mul_cols(eps, Tensor<S>::from({K}, std::move(omr))));
  Tensor<S> target = sub(zk, eps);
  Tensor<S> v = fm_head(g, z_r, r_col, ck);
  return scale(sum(square(sub(v, target))), S(1) / static_cast<S>(K));
}

/// Integrate dz/dr = head(z, cond, r) from unit-normal noise at r=0 to r=1
/// with the explicit midpoint rule. cond: [K, hidden] -> samples [K, patch_dim].
template <typename S>
Tensor<S> fm_sample(const Generator<S>& g, const Tensor<S>& cond, RngStream& rng,
                    Index n_steps = 0) {
  NoGrad off;
  if (n_steps == 0) n_steps = g.cfg.fm_steps;
  if (n_steps < 1) throw std::invalid_argument("fm_sample: need at least one step");
  const Index K = cond.dim(0), dp = g.cfg.patch_dim();
  Tensor<S> z = Tensor<S>::randn({K, dp}, rng);
  const S h = S(1) / static_cast<S>(n_steps);
  for (Index s = 0; s < n_steps; ++s) {
    const S r0 = static_cast<S>(s) * h;
    Tensor<S> v1 = fm_head(g, z, Tensor<S>::filled({K, 1}, r0), cond);
    Tensor<S> zm = add(z, scale(v1, h / S(2)));
    Tensor<S> v2 = fm_head(g, zm, Tensor<S>::filled({K, 1}, r0 + h / S(2)), cond);
    z = add(z, scale(v2, h));
    if (!z.all_finite()) throw std::runtime_error("fm_sample: non-finite state");
  }
  return z;
}

/// Generate one frame: start fully masked, decode cosine-scheduled batches of
/// tokens with the flow sampler until none remain.
template <typename S>
Tensor<S> decode_frame(const Generator<S>& g, const Tensor<S>& z_dyn, RngStream& rng) {
  NoGrad off;
  const Index mp = g.cfg.m_tokens(), dp = g.cfg.patch_dim();
  const auto counts = cosine_decode_counts(mp, g.cfg.decode_steps);
  std::vector<std::uint8_t> masked(static_cast<size_t>(mp), 1);
  Tensor<S> tokens = Tensor<S>::zeros({mp, dp});
  for (Index n : counts) {
    Tensor<S> zt = spatial_forward(g, z_dyn, tokens, masked);
    std::vector<Index> open;
    for (Index i = 0; i < mp; ++i)
      if (masked[static_cast<size_t>(i)]) open.push_back(i);
    const auto picks = rng.sample_without_replacement(static_cast<Index>(open.size()), n);
    std::vector<Index> chosen;
    for (auto p : picks) chosen.push_back(open[static_cast<size_t>(p)]);
    Tensor<S> sampled = fm_sample(g, gather_rows(zt, chosen), rng);
    for (Index j = 0; j < static_cast<Index>(chosen.size()); ++j) {
      std::copy(sampled.data() + j * dp, sampled.data() + (j + 1) * dp,
                tokens.data() + chosen[static_cast<size_t>(j)] * dp);
      masked[static_cast<size_t>(chosen[static_cast<size_t>(j)])] = 0;
    }
  }
  return tokens;
}

/// Autoregressive continuation: observe history frames 0..L-1, emit frames
/// L..horizon-1 using the KV cache (each step re-encodes nothing).
template <typename S>
Tensor<S> rollout(const Generator<S>& g, const Tensor<S>& history, Index horizon,
                  RngStream& rng) {
  NoGrad off;
  const Index mp = g.cfg.m_tokens(), dp = g.cfg.patch_dim();
  if (history.ndim() != 3 || history.dim(0) < 1 || history.dim(1) != mp ||
      history.dim(2) != dp)
    throw std::invalid_argument("rollout: history must be [L >= 1, M_p, patch_dim]");
  const Index L = history.dim(0);
  if (horizon < L) throw std::invalid_argument("rollout: horizon shorter than history");
  KvCache<S> cache;
  Tensor<S> cond = cache_append(g, cache, g.embed_bos());
  for (Index t = 0; t < L; ++t)
    cond = cache_append(g, cache, g.embed_frame(reshape(slice(history, 0, t, 1), {mp, dp}), t + 1));
  std::vector<Tensor<S>> out;
  for (Index t = L; t < horizon; ++t) {
    Tensor<S> z = decode_frame(g, cond, rng);
    out.push_back(reshape(z, {1, mp, dp}));
    if (t + 1 < horizon) cond = cache_append(g, cache, g.embed_frame(z, t + 1));
  }
  if (out.empty()) return Tensor<S>::zeros({0, mp, dp});
  return concat(out, 0);
}

/// Continuation conditioned on a separate context trajectory: the causal
/// sequence is [BOS, context frames, SEP, Z^0, ...]; from there generation
/// proceeds as in rollout. include_sep = false ablates the separator frame.
template <typename S>
Tensor<S> rollout_with_context(const Generator<S>& g, const Tensor<S>& context,
                               const Tensor<S>& z0, Index horizon, RngStream& rng,
                               bool include_sep = true) {
  NoGrad off;
  const Index mp = g.cfg.m_tokens(), dp = g.cfg.patch_dim();
  if (context.ndim() != 3 || context.dim(1) != mp || context.dim(2) != dp)
    throw std::invalid_argument("rollout_with_context: context must be [T, M_p, patch_dim]");
  if (z0.ndim() != 2 || z0.dim(0) != mp || z0.dim(1) != dp)
    throw std::invalid_argument("rollout_with_context: target state must be [M_p, patch_dim]");
  KvCache<S> cache;
  Tensor<S> cond = cache_append(g, cache, g.embed_bos());
  Index tpos = 1;
  for (Index t = 0; t < context.dim(0); ++t)
    cond = cache_append(g, cache, g.embed_frame(reshape(slice(context, 0, t, 1), {mp, dp}), tpos++));
  if (include_sep) cond = cache_append(g, cache, g.embed_sep(tpos++));
  cond = cache_append(g, cache, g.embed_frame(z0, tpos++));
  std::vector<Tensor<S>> out;
  for (Index t = 0; t < horizon; ++t) {
    Tensor<S> z = decode_frame(g, cond, rng);
    out.push_back(reshape(z, {1, mp, dp}));
    if (t + 1 < horizon) cond = cache_append(g, cache, g.embed_frame(z, tpos++));
  }
  if (out.empty()) return Tensor<S>::zeros({0, mp, dp});
  return concat(out, 0);
}

struct GenTrainConfig {
  Index steps = 500;
  Index batch = 8;
  LrSchedule lr{};
  OptimConfig opt{};
};

/// Teacher-forced training on frozen-tokenizer latents (already standardized
/// and in token space [L, M, token_dim]). Per frame: draw a mask ratio in
/// [mask_min, mask_max], mask that many tokens, apply the flow loss there.
template <typename S>
std::vector<double> train_generator(const std::vector<Tensor<S>>& latents, ParamStore<S>& store,
                                    Generator<S>& model, const GenTrainConfig& tc,
                                    std::uint64_t seed) {
  if (latents.empty()) throw std::invalid_argument("train_generator: empty latent dataset");
  const GenConfig& cfg = model.cfg;
  const Index mp = cfg.m_tokens(), dp = cfg.patch_dim();
  std::vector<Tensor<S>> patched(latents.size());
  for (size_t i = 0; i < latents.size(); ++i) {
    const Tensor<S>& z = latents[i];
    if (z.ndim() != 3 || z.dim(1) != cfg.latent_count() || z.dim(2) != cfg.token_dim)
      throw std::invalid_argument("train_generator: latent shape mismatch");
    std::vector<Tensor<S>> frames;
    for (Index t = 0; t < z.dim(0); ++t)
      frames.push_back(reshape(
          patchify(reshape(slice(z, 0, t, 1), {cfg.latent_count(), cfg.token_dim}),
                   cfg.latent_sizes, cfg.patch),
          {1, mp, dp}));
    patched[i] = concat(frames, 0);
  }
  RngStream root(seed);
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(tc.steps));
  for (Index step = 0; step < tc.steps; ++step) {
    RngStream it = root.fork(static_cast<std::uint64_t>(step));
    const Index bsz = std::min<Index>(tc.batch, static_cast<Index>(patched.size()));
    const auto picks = it.sample_without_replacement(static_cast<Index>(patched.size()), bsz);
    store.zero_grad();
    Tensor<S> total;
    Index n_terms = 0;
    for (Index b = 0; b < bsz; ++b) {
      const Tensor<S>& zp = patched[static_cast<size_t>(picks[static_cast<size_t>(b)])];
      const Index L = zp.dim(0);
      Tensor<S> dyn = causal_forward(model, zp);
      for (Index t = 0; t < L; ++t) {
        Tensor<S> frame = reshape(slice(zp, 0, t, 1), {mp, dp});
        Tensor<S> cond = reshape(slice(dyn, 0, t, 1), {mp, cfg.hidden});
        const double ratio = it.uniform(cfg.mask_min, cfg.mask_max);
        const Index k = std::max<Index>(
            1, std::min<Index>(mp, static_cast<Index>(std::lround(ratio * static_cast<double>(mp)))));
        const auto idx = it.sample_without_replacement(mp, k);
        std::vector<std::uint8_t> flags(static_cast<size_t>(mp), 0);
        std::vector<Index> midx(idx.begin(), idx.end());
        for (Index i : midx) flags[static_cast<size_t>(i)] = 1;
        Tensor<S> zt = spatial_forward(model, cond, frame, flags);
        Tensor<S> li = fm_train_loss(model, frame, zt, midx, it);
        total = total.defined() ? add(total, li) : li;
        ++n_terms;
      }
    }
    total = scale(total, S(1) / static_cast<S>(n_terms));
    const double lv = total.item();
    if (!std::isfinite(lv)) throw std::runtime_error("train_generator: non-finite loss");
    total.backward();
    optimizer_step(store, tc.lr.at(step), tc.opt);
    trace.push_back(lv);
  }
  return trace;
}

/// Per-channel statistics for latent standardization; generator training sees
/// zero-mean unit-variance tokens, inverted before decoding.
struct LatentStats {
  std::vector<double> mean, stdev;
};

template <typename S>
LatentStats latent_statistics(const std::vector<Tensor<S>>& latents, Index token_dim) {
  LatentStats st;
  st.mean.assign(static_cast<size_t>(token_dim), 0.0);
  st.stdev.assign(static_cast<size_t>(token_dim), 0.0);
  std::int64_t count = 0;
  for (const auto& z : latents) {
    const S* p = z.data();
    for (Index i = 0; i < z.size(); i += token_dim) {
      for (Index c = 0; c < token_dim; ++c) st.mean[static_cast<size_t>(c)] += p[i + c];
      ++count;
    }
  }
  for (auto& m : st.mean) m /= static_cast<double>(count);
  for (const auto& z : latents) {
    const S* p = z.data();
    for (Index i = 0; i < z.size(); i += token_dim)
      for (Index c = 0; c < token_dim; ++c) {
        const double d = p[i + c] - st.mean[static_cast<size_t>(c)];
        st.stdev[static_cast<size_t>(c)] += d * d;
      }
  }
  for (auto& s : st.stdev) s = std::sqrt(std::max(s / static_cast<double>(count), 1e-12));
  return st;
}

template <typename S>
Tensor<S> standardize_latent(const Tensor<S>& z, const LatentStats& st) {
  const Index d = static_cast<Index>(st.mean.size());
  Tensor<S> out = Tensor<S>::zeros(z.shape());
  for (Index i = 0; i < z.size(); ++i) {
    const Index c = i % d;
    out.data()[i] = static_cast<S>((z.data()[i] - st.mean[static_cast<size_t>(c)]) /
                                   st.stdev[static_cast<size_t>(c)]);
  }
  return out;
}

template <typename S>
Tensor<S> unstandardize_latent(const Tensor<S>& z, const LatentStats& st) {
  const Index d = static_cast<Index>(st.mean.size());
  Tensor<S> out = Tensor<S>::zeros(z.shape());
  for (Index i = 0; i < z.size(); ++i) {
    const Index c = i % d;
    out.data()[i] = static_cast<S>(z.data()[i] * st.stdev[static_cast<size_t>(c)] +
                                   st.mean[static_cast<size_t>(c)]);
  }
  return out;
}

/// Deterministic dataset encoding through a trained tokenizer: latent means
/// on the full grid, one [L_e, M, token_dim] tensor per trajectory.
template <typename S>
std::vector<Tensor<S>> encode_latents(const vae::Vae<S>& v, const Dataset& data) {
  NoGrad off;
  std::vector<Tensor<S>> out;
  Tensor<S> coords = vae::coords_tensor<S>(data);
  for (Index i = 0; i < data.n_traj; ++i) {
    Tensor<S> values = vae::traj_values<S>(data, i);
    auto vo = vae::compress(v, vae::interp_encode(v, coords, values));
    out.push_back(vo.mean);
  }
  return out;
}

}  // namespace gen
}  // namespace enma
