#pragma once

#include <unsupported/Eigen/FFT>

#include <complex>
#include <string>
#include <vector>

#include "enma/dataset.hpp"
#include "enma/rng.hpp"
#include "enma/tensor.hpp"

namespace enma::pde {

enum class System { Combined, Advection, Wave, GrayScott, Vorticity };
enum class Regime { InD, OutD };

inline std::string to_string(System s) {
  switch (s) {
    case System::Combined: return "Combined";
    case System::Advection: return "Advection";
    case System::Wave: return "Wave";
    case System::GrayScott: return "GrayScott";
    case System::Vorticity: return "Vorticity";
  }
  throw std::logic_error("bad system");
}

inline std::string to_string(Regime r) { return r == Regime::InD ? "InD" : "OutD"; }

inline System parse_system(const std::string& s) {
  for (System v : {System::Combined, System::Advection, System::Wave, System::GrayScott,
                   System::Vorticity})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown system: " + s);
}

inline Regime parse_regime(const std::string& s) {
  if (s == "InD") return Regime::InD;
  if (s == "OutD") return Regime::OutD;
  throw std::invalid_argument("unknown regime: " + s);
}

struct PdeParams {
  System system;
  std::vector<std::pair<std::string, double>> coef;  // insertion order is stable

  double get(const std::string& name) const {
    for (const auto& [k, v] : coef)
      if (k == name) return v;
    throw std::out_of_range("PdeParams: no coefficient " + name);
  }
  bool has(const std::string& name) const {
    for (const auto& [k, v] : coef)
      if (k == name) return true;
    return false;
  }
};

inline Index n_channels(System s) { return s == System::GrayScott ? 2 : 1; }

/// Uniform draw from each Table 3 interval; union intervals are picked by
/// interval-length weighting.
inline PdeParams sample_params(System system, Regime regime, RngStream& rng) {
  PdeParams p;
  p.system = system;
  switch (system) {
    case System::Combined:
      p.coef = {{"alpha", rng.uniform(0.3, 0.5)},
                {"beta", rng.uniform(0.0005, 0.5)},
                {"gamma", rng.uniform(0.01, 1.0)}};
      if (regime == Regime::OutD) p.coef.push_back({"delta", rng.uniform(0.5, 1.0)});
      break;
    case System::Advection:
      if (regime == Regime::InD) {
        p.coef = {{"alpha", rng.uniform(-5.0, 5.0)}};
      } else {
        // [-7,-5] and [5,7] have equal length: fair coin, then magnitude
        const double mag = rng.uniform(5.0, 7.0);
        p.coef = {{"alpha", rng.uniform() < 0.5 ? -mag : mag}};
      }
      break;
    case System::Wave:
      if (regime == Regime::InD)
        p.coef = {{"c", rng.uniform(100.0, 500.0)}, {"k", rng.uniform(0.0, 50.0)}};
      else
        p.coef = {{"c", rng.uniform(500.0, 550.0)}, {"k", rng.uniform(50.0, 60.0)}};
      break;
    case System::GrayScott:
      if (regime == Regime::InD)
        p.coef = {{"F", rng.uniform(0.023, 0.045)}, {"k", rng.uniform(0.0590, 0.0640)}};
      else
        p.coef = {{"F", rng.uniform(0.045, 0.0467)}, {"k", rng.uniform(0.0570, 0.0590)}};
      p.coef.push_back({"Du", 0.102});
      p.coef.push_back({"Dv", 0.204});
      break;
    case System::Vorticity:
      p.coef = {{"nu", regime == Regime::InD ? rng.uniform(1e-3, 1e-2)
                                             : rng.uniform(1e-5, 1e-4)}};
      break;
  }
  return p;
}

struct GridSpec {
  std::vector<Index> sizes;     // [nx] or [ny, nx]
  std::vector<double> extents;  // periodic domain length per axis

  Index sites() const {
    Index p = 1;
    for (Index s : sizes) p *= s;
    return p;
  }
};

inline GridSpec sim_grid(System system, const std::vector<Index>& sizes) {
  GridSpec g;
  g.sizes = sizes;
  switch (system) {
    case System::Combined:
      g.extents = {2 * M_PI};
      break;
    case System::Advection:
      g.extents = {1.0};
      break;
    case System::Wave:
      g.extents = {1.0, 1.0};
      break;
    case System::GrayScott:
      // fixed spacing 2 per site
      for (Index s : sizes) g.extents.push_back(2.0 * static_cast<double>(s));
      break;
    case System::Vorticity:
      g.extents = {2 * M_PI, 2 * M_PI};
      break;
  }
  if (g.extents.size() != g.sizes.size())
    throw std::invalid_argument("sim_grid: dimensionality mismatch for " + to_string(system));
  return g;
}

/// Site coordinates, row-major over the grid, one d-vector per site.
inline std::vector<double> grid_coords(const GridSpec& g) {
  std::vector<double> out;
  if (g.sizes.size() == 1) {
    const double h = g.extents[0] / static_cast<double>(g.sizes[0]);
    for (Index i = 0; i < g.sizes[0]; ++i) out.push_back(h * static_cast<double>(i));
  } else if (g.sizes.size() == 2) {
    const double hy = g.extents[0] / static_cast<double>(g.sizes[0]);
    const double hx = g.extents[1] / static_cast<double>(g.sizes[1]);
    for (Index i = 0; i < g.sizes[0]; ++i)
      for (Index j = 0; j < g.sizes[1]; ++j) {
        out.push_back(hy * static_cast<double>(i));
        out.push_back(hx * static_cast<double>(j));
      }
  } else {
    throw std::invalid_argument("grid_coords: 1-D or 2-D only");
  }
  return out;
}

// ---------------------------------------------------------------------------
// initial conditions
// ---------------------------------------------------------------------------

enum class TrigFamily { Sine, Cosine, SineCosine };

inline std::vector<double> trig_sum_ic_terms(const GridSpec& g, TrigFamily family,
                                             const std::vector<double>& A,
                                             const std::vector<double>& phi,
                                             const std::vector<double>& l) {
  const Index n = g.sizes[0];
  const double L = g.extents[0];
  std::vector<double> u(static_cast<size_t>(n), 0.0);
  for (size_t t = 0; t < A.size(); ++t) {
    for (Index i = 0; i < n; ++i) {
      const double x = L * static_cast<double>(i) / static_cast<double>(n);
      const double arg = 2 * M_PI * l[t] * x / L + phi[t];
      double v = 0;
      if (family == TrigFamily::Sine || family == TrigFamily::SineCosine) v += std::sin(arg);
      if (family == TrigFamily::Cosine || family == TrigFamily::SineCosine) v += std::cos(arg);
      u[static_cast<size_t>(i)] += A[t] * v;
    }
  }
  return u;
}

inline std::vector<double> trig_sum_ic(const GridSpec& g, RngStream& rng, TrigFamily family,
                                       int n_terms) {
  std::vector<double> A, phi, l;
  for (int t = 0; t < n_terms; ++t) {
    A.push_back(rng.uniform(-0.5, 0.5));
    phi.push_back(rng.uniform(0.0, 2 * M_PI));
    l.push_back(1.0 + static_cast<double>(rng.uniform_int(3)));
  }
  return trig_sum_ic_terms(g, family, A, phi, l);
}

inline std::vector<double> gaussian_sum_ic_centers(const GridSpec& g,
                                                   const std::vector<double>& cy,
                                                   const std::vector<double>& cx,
                                                   const std::vector<double>& sg) {
  const Index ny = g.sizes[0], nx = g.sizes[1];
  const double Ly = g.extents[0], Lx = g.extents[1];
  const int N = static_cast<int>(cy.size());
  std::vector<double> w(static_cast<size_t>(ny * nx), 0.0);
  for (Index i = 0; i < ny; ++i)
    for (Index j = 0; j < nx; ++j) {
      const double y = Ly * static_cast<double>(i) / static_cast<double>(ny);
      const double x = Lx * static_cast<double>(j) / static_cast<double>(nx);
      double s = 0;
      for (int c = 0; c < N; ++c) {
        const double dy = y - cy[static_cast<size_t>(c)] * Ly;
        const double dx = x - cx[static_cast<size_t>(c)] * Lx;
        s += std::exp(-(dx * dx + dy * dy) / (2 * sg[static_cast<size_t>(c)] *
                                              sg[static_cast<size_t>(c)]));
      }
      w[static_cast<size_t>(i * nx + j)] = s;
    }
  return w;
}

inline std::vector<double> gaussian_sum_ic(const GridSpec& g, RngStream& rng) {
  const int N = 2 + static_cast<int>(rng.uniform_int(3));
  std::vector<double> cy, cx, sg;
  for (int c = 0; c < N; ++c) {
    cx.push_back(rng.uniform());
    cy.push_back(rng.uniform());
    sg.push_back(rng.uniform(0.025, 0.1));
  }
  return gaussian_sum_ic_centers(g, cy, cx, sg);
}

/// u=1, v=0 background with a centered square patch at (0.5, 0.25), each patch
/// value jittered by 1% uniform noise.
inline std::vector<double> gray_scott_ic(const GridSpec& g, RngStream& rng) {
  const Index ny = g.sizes[0], nx = g.sizes[1];
  std::vector<double> uv(static_cast<size_t>(ny * nx * 2), 0.0);
  for (Index i = 0; i < ny * nx; ++i) uv[static_cast<size_t>(2 * i)] = 1.0;
  const Index py0 = ny / 2 - ny / 8, py1 = ny / 2 + ny / 8;
  const Index px0 = nx / 2 - nx / 8, px1 = nx / 2 + nx / 8;
  for (Index i = py0; i < py1; ++i)
    for (Index j = px0; j < px1; ++j) {
      const size_t at = static_cast<size_t>(2 * (i * nx + j));
      uv[at] = 0.5 * (1.0 + rng.uniform(-0.01, 0.01));
      uv[at + 1] = 0.25 * (1.0 + rng.uniform(-0.01, 0.01));
    }
  return uv;
}

namespace fftdet {

/// 2-D complex FFT helpers built from Eigen's 1-D transform.
inline void fft2(std::vector<std::complex<double>>& a, Index ny, Index nx, bool inverse) {
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> row(static_cast<size_t>(nx)),
      rowt(static_cast<size_t>(nx)), col(static_cast<size_t>(ny)), colt(static_cast<size_t>(ny));
  for (Index i = 0; i < ny; ++i) {
    std::copy(a.begin() + i * nx, a.begin() + (i + 1) * nx, row.begin());
    if (inverse)
      fft.inv(rowt, row);
    else
      fft.fwd(rowt, row);
    std::copy(rowt.begin(), rowt.end(), a.begin() + i * nx);
  }
  for (Index j = 0; j < nx; ++j) {
    for (Index i = 0; i < ny; ++i) col[static_cast<size_t>(i)] = a[static_cast<size_t>(i * nx + j)];
    if (inverse)
      fft.inv(colt, col);
    else
      fft.fwd(colt, col);
    for (Index i = 0; i < ny; ++i) a[static_cast<size_t>(i * nx + j)] = colt[static_cast<size_t>(i)];
  }
}

inline double freq_of(Index m, Index n) {
  return static_cast<double>(m <= n / 2 ? m : m - n);
}

}  // namespace fftdet

/// Random-phase vorticity field whose radial amplitude follows the prescribed
/// energy spectrum; Hermitian symmetry keeps the physical field real.
inline std::vector<double> vorticity_spectrum_ic(const GridSpec& g, RngStream& rng,
                                                 double k0 = 4.0) {
  const Index ny = g.sizes[0], nx = g.sizes[1];
  std::vector<std::complex<double>> what(static_cast<size_t>(ny * nx), {0.0, 0.0});
  auto spec_amp = [k0](double k) {
    if (k <= 0) return 0.0;
    const double E = 4.0 / 3.0 * std::sqrt(M_PI) * std::pow(k / k0, 4) / k0 *
                     std::exp(-(k / k0) * (k / k0));
    return std::sqrt(E / (M_PI * k));
  };
  for (Index i = 0; i < ny; ++i)
    for (Index j = 0; j < nx; ++j) {
      const Index ci = (ny - i) % ny, cj = (nx - j) % nx;  // conjugate partner
      const bool self = (ci == i && cj == j);
      // fill each conjugate pair once, from its lexicographically first member
      if (!self && std::make_pair(ci, cj) < std::make_pair(i, j)) continue;
      const double ky = fftdet::freq_of(i, ny), kx = fftdet::freq_of(j, nx);
      const double amp = spec_amp(std::sqrt(kx * kx + ky * ky));
      const double ph = rng.uniform(0.0, 2 * M_PI);
      if (self) {
        what[static_cast<size_t>(i * nx + j)] = {amp * std::cos(ph), 0.0};
      } else {
        const std::complex<double> v = std::polar(amp, ph);
        what[static_cast<size_t>(i * nx + j)] = v;
        what[static_cast<size_t>(ci * nx + cj)] = std::conj(v);
      }
    }
  fftdet::fft2(what, ny, nx, /*inverse=*/true);
  std::vector<double> w(static_cast<size_t>(ny * nx));
  for (size_t i = 0; i < w.size(); ++i) w[i] = what[i].real() * static_cast<double>(ny * nx);
  return w;
}

inline std::vector<double> sample_initial_condition(System system, RngStream& rng,
                                                    const GridSpec& g) {
  switch (system) {
    case System::Combined:
      return trig_sum_ic(g, rng, TrigFamily::Sine, 3);
    case System::Advection: {
      const TrigFamily fam = static_cast<TrigFamily>(rng.uniform_int(3));
      return trig_sum_ic(g, rng, fam, 3);
    }
    case System::Wave:
      return gaussian_sum_ic(g, rng);
    case System::GrayScott:
      return gray_scott_ic(g, rng);
    case System::Vorticity:
      return vorticity_spectrum_ic(g, rng);
  }
  throw std::logic_error("bad system");
}

// ---------------------------------------------------------------------------
// solvers
// ---------------------------------------------------------------------------

struct SolveConfig {
  GridSpec grid;
  std::vector<Index> store_sizes;  // stride-subsampled stored resolution
  Index nt = 20;                   // stored frames, frame 0 is the initial state
  double t_end = 1.0;
  Index substeps = 0;  // internal steps per stored frame; 0 = stability-based
};

inline SolveConfig default_config(System system) {
  SolveConfig c;
  switch (system) {
    case System::Combined:
      c.grid = sim_grid(system, {256});
      c.store_sizes = {128};
      c.nt = 20;
      c.t_end = 1.0;
      break;
    case System::Advection:
      c.grid = sim_grid(system, {128});
      c.store_sizes = {128};
      c.nt = 20;
      c.t_end = 1.0;
      break;
    case System::Wave:
      c.grid = sim_grid(system, {64, 64});
      c.store_sizes = {64, 64};
      c.nt = 30;
      c.t_end = 0.005;
      break;
    case System::GrayScott:
      c.grid = sim_grid(system, {32, 32});
      c.store_sizes = {32, 32};
      c.nt = 20;
      c.t_end = 1000.0;  // unit internal step, patterns form over ~1e3 steps
      break;
    case System::Vorticity:
      c.grid = sim_grid(system, {32, 32});
      c.store_sizes = {32, 32};
      c.nt = 20;
      c.t_end = 2.0;
      break;
  }
  return c;
}

namespace solvedet {

inline void check_finite(const std::vector<double>& v, const char* who) {
  for (double x : v)
    if (!std::isfinite(x)) throw std::runtime_error(std::string(who) + ": non-finite state");
}

inline void check_finite_c(const std::vector<std::complex<double>>& v, const char* who) {
  for (const auto& x : v)
    if (!std::isfinite(x.real()) || !std::isfinite(x.imag()))
      throw std::runtime_error(std::string(who) + ": non-finite state");
}

/// Stride-subsample one frame [spatial..., ch] to the store resolution.
inline void store_frame(const std::vector<double>& frame, const std::vector<Index>& sim,
                        const std::vector<Index>& sto, Index ch, std::vector<double>& out) {
  if (sim.size() == 1) {
    if (sim[0] % sto[0] != 0)
      throw std::invalid_argument("store resolution must divide the simulation grid");
    const Index st = sim[0] / sto[0];
    for (Index i = 0; i < sto[0]; ++i)
      for (Index c = 0; c < ch; ++c) out.push_back(frame[static_cast<size_t>(i * st * ch + c)]);
  } else {
    if (sim[0] % sto[0] != 0 || sim[1] % sto[1] != 0)
      throw std::invalid_argument("store resolution must divide the simulation grid");
    const Index sy = sim[0] / sto[0], sx = sim[1] / sto[1];
    for (Index i = 0; i < sto[0]; ++i)
      for (Index j = 0; j < sto[1]; ++j)
        for (Index c = 0; c < ch; ++c)
          out.push_back(frame[static_cast<size_t>(((i * sy) * sim[1] + j * sx) * ch + c)]);
  }
}

/// Exact spectral solution of constant-speed transport: each mode picks up a
/// phase e^{-2 pi i f alpha t / L}.
inline std::vector<double> solve_advection(const PdeParams& p, const std::vector<double>& ic,
                                           const SolveConfig& cfg) {
  const Index n = cfg.grid.sizes[0];
  const double L = cfg.grid.extents[0];
  const double alpha = p.get("alpha");
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> uhat, shifted(static_cast<size_t>(n)),
      frame_c(static_cast<size_t>(n));
  std::vector<double> work(ic);
  fft.fwd(uhat, work);
  std::vector<double> out;
  const double dt_frame = cfg.t_end / static_cast<double>(cfg.nt - 1);
  for (Index f = 0; f < cfg.nt; ++f) {
    const double t = dt_frame * static_cast<double>(f);
    for (Index m = 0; m < n; ++m) {
      const double freq = fftdet::freq_of(m, n);
      shifted[static_cast<size_t>(m)] =
          uhat[static_cast<size_t>(m)] *
          std::polar(1.0, -2 * M_PI * freq * alpha * t / L);
    }
    std::vector<double> frame(static_cast<size_t>(n));
    fft.inv(frame, shifted);
    store_frame(frame, cfg.grid.sizes, cfg.store_sizes, 1, out);
  }
  return out;
}

/// Pseudo-spectral integrating-factor RK4 for the conservative flux equation
/// u_t + d/dx(alpha u^2 - beta u_x + gamma u_xx + delta u_xxx) = 0 on [0, 2pi].
inline std::vector<double> solve_combined(const PdeParams& p, const std::vector<double>& ic,
                                          const SolveConfig& cfg) {
  const Index n = cfg.grid.sizes[0];
  const double alpha = p.get("alpha"), beta = p.get("beta"), gamma = p.get("gamma");
  const double delta = p.has("delta") ? p.get("delta") : 0.0;
  Eigen::FFT<double> fft;
  using C = std::complex<double>;
  std::vector<double> kv(static_cast<size_t>(n));
  std::vector<C> lin(static_cast<size_t>(n));
  const Index kcut = n / 3;  // 2/3 dealiasing
  for (Index m = 0; m < n; ++m) {
    const double k = fftdet::freq_of(m, n);  // L = 2 pi, so wavenumber = freq
    kv[static_cast<size_t>(m)] = k;
    lin[static_cast<size_t>(m)] = C(-beta * k * k - delta * k * k * k * k, gamma * k * k * k);
  }
  std::vector<C> uhat;
  std::vector<double> work(ic);
  fft.fwd(uhat, work);
  auto nonlinear = [&](const std::vector<C>& uh) {
    std::vector<double> u(static_cast<size_t>(n));
    std::vector<C> tmp(uh);
    fft.inv(u, tmp);
    for (auto& x : u) x = x * x;
    std::vector<C> w2;
    fft.fwd(w2, u);
    for (Index m = 0; m < n; ++m) {
      const double k = kv[static_cast<size_t>(m)];
      if (std::abs(k) > static_cast<double>(kcut))
        w2[static_cast<size_t>(m)] = C(0, 0);
      else
        w2[static_cast<size_t>(m)] *= C(0, -alpha * k);  // -d/dx(alpha u^2)
    }
    return w2;
  };
  std::vector<double> out;
  const double dt_frame = cfg.t_end / static_cast<double>(cfg.nt - 1);
  auto emit = [&](const std::vector<C>& uh) {
    std::vector<C> tmp(uh);
    std::vector<double> frame(static_cast<size_t>(n));
    fft.inv(frame, tmp);
    check_finite(frame, "combined solver");
    store_frame(frame, cfg.grid.sizes, cfg.store_sizes, 1, out);
  };
  emit(uhat);
  for (Index f = 1; f < cfg.nt; ++f) {
    Index nsub = cfg.substeps;
    if (nsub <= 0) {
      // advective CFL for the dealiased band; dispersion/diffusion are exact
      std::vector<double> u(static_cast<size_t>(n));
      std::vector<C> tmp(uhat);
      fft.inv(u, tmp);
      double umax = 0;
      for (double x : u) umax = std::max(umax, std::abs(x));
      const double speed = std::max(2 * alpha * umax * umax / std::max(umax, 1e-9), 0.05);
      const double dt_stab = 0.4 / (static_cast<double>(kcut) * speed);
      nsub = static_cast<Index>(std::ceil(dt_frame / dt_stab));
      nsub = std::max<Index>(nsub, 1);
    }
    const double dt = dt_frame / static_cast<double>(nsub);
    std::vector<C> E(static_cast<size_t>(n)), E2(static_cast<size_t>(n));
    for (Index m = 0; m < n; ++m) {
      E[static_cast<size_t>(m)] = std::exp(lin[static_cast<size_t>(m)] * (dt / 2));
      E2[static_cast<size_t>(m)] = std::exp(lin[static_cast<size_t>(m)] * dt);
    }
    for (Index s = 0; s < nsub; ++s) {
      const auto k1 = nonlinear(uhat);
      std::vector<C> u1(static_cast<size_t>(n));
      for (Index m = 0; m < n; ++m)
        u1[static_cast<size_t>(m)] =
            E[static_cast<size_t>(m)] *
            (uhat[static_cast<size_t>(m)] + (dt / 2) * k1[static_cast<size_t>(m)]);
      const auto k2 = nonlinear(u1);
      std::vector<C> u2(static_cast<size_t>(n));
      for (Index m = 0; m < n; ++m)
        u2[static_cast<size_t>(m)] =
            E[static_cast<size_t>(m)] * uhat[static_cast<size_t>(m)] +
            (dt / 2) * k2[static_cast<size_t>(m)];
      const auto k3 = nonlinear(u2);
      std::vector<C> u3(static_cast<size_t>(n));
      for (Index m = 0; m < n; ++m)
        u3[static_cast<size_t>(m)] =
            E2[static_cast<size_t>(m)] * uhat[static_cast<size_t>(m)] +
            dt * E[static_cast<size_t>(m)] * k3[static_cast<size_t>(m)];
      const auto k4 = nonlinear(u3);
      for (Index m = 0; m < n; ++m) {
        const size_t i = static_cast<size_t>(m);
        uhat[i] = E2[i] * uhat[i] +
                  (dt / 6.0) * (E2[i] * k1[i] + 2.0 * E[i] * (k2[i] + k3[i]) + k4[i]);
      }
    }
    check_finite_c(uhat, "combined solver");
    emit(uhat);
  }
  return out;
}

/// Damped wave equation, leapfrog in time with centered 5-point Laplacian;
/// the damping term is averaged over n+1/n-1 so the update stays explicit.
inline std::vector<double> solve_wave(const PdeParams& p, const std::vector<double>& ic,
                                      const SolveConfig& cfg) {
  const Index ny = cfg.grid.sizes[0], nx = cfg.grid.sizes[1];
  const double hy = cfg.grid.extents[0] / static_cast<double>(ny);
  const double hx = cfg.grid.extents[1] / static_cast<double>(nx);
  const double c = p.get("c"), kd = p.get("k");
  const double dt_frame = cfg.t_end / static_cast<double>(cfg.nt - 1);
  const double dt_stab = 0.5 * std::min(hx, hy) / (c * std::sqrt(2.0));
  Index nsub = cfg.substeps;
  if (nsub <= 0) nsub = std::max<Index>(1, static_cast<Index>(std::ceil(dt_frame / dt_stab)));
  const double dt = dt_frame / static_cast<double>(nsub);
  if (c * dt * std::sqrt(1.0 / (hx * hx) + 1.0 / (hy * hy)) > 1.0)
    throw std::runtime_error("wave solver: CFL violated at the requested step count");
  auto lap = [&](const std::vector<double>& w, Index i, Index j) {
    const Index ip = (i + 1) % ny, im = (i + ny - 1) % ny;
    const Index jp = (j + 1) % nx, jm = (j + nx - 1) % nx;
    return (w[static_cast<size_t>(ip * nx + j)] + w[static_cast<size_t>(im * nx + j)] -
            2 * w[static_cast<size_t>(i * nx + j)]) /
               (hy * hy) +
           (w[static_cast<size_t>(i * nx + jp)] + w[static_cast<size_t>(i * nx + jm)] -
            2 * w[static_cast<size_t>(i * nx + j)]) /
               (hx * hx);
  };
  std::vector<double> prev(ic), cur(static_cast<size_t>(ny * nx)),
      next(static_cast<size_t>(ny * nx));
  // first step from rest (zero initial velocity): Taylor half-update
  for (Index i = 0; i < ny; ++i)
    for (Index j = 0; j < nx; ++j)
      cur[static_cast<size_t>(i * nx + j)] =
          prev[static_cast<size_t>(i * nx + j)] + 0.5 * dt * dt * c * c * lap(prev, i, j);
  std::vector<double> out;
  store_frame(prev, cfg.grid.sizes, cfg.store_sizes, 1, out);
  Index done = 1;  // substeps taken so far (cur is at t = dt)
  for (Index f = 1; f < cfg.nt; ++f) {
    const Index target = f * nsub;
    while (done < target) {
      const double a = 1.0 + kd * dt / 2, b = 1.0 - kd * dt / 2;
      for (Index i = 0; i < ny; ++i)
        for (Index j = 0; j < nx; ++j) {
          const size_t at = static_cast<size_t>(i * nx + j);
          next[at] = (2 * cur[at] - b * prev[at] + dt * dt * c * c * lap(cur, i, j)) / a;
        }
      std::swap(prev, cur);
      std::swap(cur, next);
      ++done;
    }
    check_finite(cur, "wave solver");
    store_frame(cur, cfg.grid.sizes, cfg.store_sizes, 1, out);
  }
  return out;
}

/// Explicit Euler with 5-point Laplacian at grid spacing 2; the autocatalytic
/// term feeds v at the expense of u.
inline std::vector<double> solve_gray_scott(const PdeParams& p, const std::vector<double>& ic,
                                            const SolveConfig& cfg) {
  const Index ny = cfg.grid.sizes[0], nx = cfg.grid.sizes[1];
  const double h = 2.0;
  const double F = p.get("F"), kk = p.get("k"), Du = p.get("Du"), Dv = p.get("Dv");
  const double dt_frame = cfg.t_end / static_cast<double>(cfg.nt - 1);
  Index nsub = cfg.substeps;
  if (nsub <= 0) nsub = std::max<Index>(1, static_cast<Index>(std::ceil(dt_frame / 1.0)));
  const double dt = dt_frame / static_cast<double>(nsub);
  if (dt > h * h / (4.0 * std::max(Du, Dv)))
    throw std::runtime_error("gray-scott solver: diffusion step size unstable");
  std::vector<double> uv(ic), nx2(ic.size());
  auto lap = [&](const std::vector<double>& w, Index i, Index j, Index ch) {
    const Index ip = (i + 1) % ny, im = (i + ny - 1) % ny;
    const Index jp = (j + 1) % nx, jm = (j + nx - 1) % nx;
    return (w[static_cast<size_t>(2 * (ip * nx + j) + ch)] +
            w[static_cast<size_t>(2 * (im * nx + j) + ch)] +
            w[static_cast<size_t>(2 * (i * nx + jp) + ch)] +
            w[static_cast<size_t>(2 * (i * nx + jm) + ch)] -
            4 * w[static_cast<size_t>(2 * (i * nx + j) + ch)]) /
           (h * h);
  };
  std::vector<double> out;
  store_frame(uv, cfg.grid.sizes, cfg.store_sizes, 2, out);
  for (Index f = 1; f < cfg.nt; ++f) {
    for (Index s = 0; s < nsub; ++s) {
      for (Index i = 0; i < ny; ++i)
        for (Index j = 0; j < nx; ++j) {
          const size_t at = static_cast<size_t>(2 * (i * nx + j));
          const double u = uv[at], v = uv[at + 1];
          const double r = u * v * v;
          nx2[at] = u + dt * (Du * lap(uv, i, j, 0) - r + F * (1.0 - u));
          nx2[at + 1] = v + dt * (Dv * lap(uv, i, j, 1) + r - (F + kk) * v);
        }
      std::swap(uv, nx2);
    }
    check_finite(uv, "gray-scott solver");
    store_frame(uv, cfg.grid.sizes, cfg.store_sizes, 2, out);
  }
  return out;
}

/// 2-D vorticity transport: pseudo-spectral advection with 2/3 dealiasing,
/// exact integrating factor for the viscous term, RK4 in time.
inline std::vector<double> solve_vorticity(const PdeParams& p, const std::vector<double>& ic,
                                           const SolveConfig& cfg) {
  const Index ny = cfg.grid.sizes[0], nx = cfg.grid.sizes[1];
  const Index nn = ny * nx;
  const double nu = p.get("nu");
  using C = std::complex<double>;
  std::vector<double> ky(static_cast<size_t>(nn)), kx(static_cast<size_t>(nn)),
      k2(static_cast<size_t>(nn));
  std::vector<bool> keep(static_cast<size_t>(nn));
  for (Index i = 0; i < ny; ++i)
    for (Index j = 0; j < nx; ++j) {
      const size_t at = static_cast<size_t>(i * nx + j);
      ky[at] = fftdet::freq_of(i, ny);
      kx[at] = fftdet::freq_of(j, nx);
      k2[at] = kx[at] * kx[at] + ky[at] * ky[at];
      keep[at] = std::abs(kx[at]) <= static_cast<double>(nx) / 3.0 &&
                 std::abs(ky[at]) <= static_cast<double>(ny) / 3.0;
    }
  std::vector<C> what(static_cast<size_t>(nn));
  for (Index i = 0; i < nn; ++i) what[static_cast<size_t>(i)] = C(ic[static_cast<size_t>(i)], 0);
  fftdet::fft2(what, ny, nx, false);
  auto to_phys = [&](const std::vector<C>& h) {
    std::vector<C> t(h);
    fftdet::fft2(t, ny, nx, true);
    std::vector<double> r(static_cast<size_t>(nn));
    for (Index i = 0; i < nn; ++i) r[static_cast<size_t>(i)] = t[static_cast<size_t>(i)].real();
    return r;
  };
  auto nonlinear = [&](const std::vector<C>& wh) {
    std::vector<C> psih(static_cast<size_t>(nn)), dx(static_cast<size_t>(nn)),
        dy(static_cast<size_t>(nn)), ux(static_cast<size_t>(nn)), uy(static_cast<size_t>(nn));
    for (Index i = 0; i < nn; ++i) {
      const size_t a = static_cast<size_t>(i);
      psih[a] = k2[a] > 0 ? wh[a] / k2[a] : C(0, 0);
      dx[a] = C(0, kx[a]) * wh[a];
      dy[a] = C(0, ky[a]) * wh[a];
      ux[a] = C(0, ky[a]) * psih[a];   // u = d(psi)/dy
      uy[a] = C(0, -kx[a]) * psih[a];  // v = -d(psi)/dx
    }
    const auto wx = to_phys(dx), wy = to_phys(dy), u = to_phys(ux), v = to_phys(uy);
    std::vector<C> adv(static_cast<size_t>(nn));
    for (Index i = 0; i < nn; ++i) {
      const size_t a = static_cast<size_t>(i);
      adv[a] = C(-(u[a] * wx[a] + v[a] * wy[a]), 0);
    }
    fftdet::fft2(adv, ny, nx, false);
    for (Index i = 0; i < nn; ++i)
      if (!keep[static_cast<size_t>(i)]) adv[static_cast<size_t>(i)] = C(0, 0);
    return adv;
  };
  std::vector<double> out;
  {
    auto w0 = to_phys(what);
    check_finite(w0, "vorticity solver");
    store_frame(w0, cfg.grid.sizes, cfg.store_sizes, 1, out);
  }
  const double dt_frame = cfg.t_end / static_cast<double>(cfg.nt - 1);
  const double hmin = std::min(cfg.grid.extents[0] / static_cast<double>(ny),
                               cfg.grid.extents[1] / static_cast<double>(nx));
  for (Index f = 1; f < cfg.nt; ++f) {
    Index nsub = cfg.substeps;
    if (nsub <= 0) {
      std::vector<C> psih(static_cast<size_t>(nn)), ux(static_cast<size_t>(nn)),
          uy(static_cast<size_t>(nn));
      for (Index i = 0; i < nn; ++i) {
        const size_t a = static_cast<size_t>(i);
        psih[a] = k2[a] > 0 ? what[a] / k2[a] : C(0, 0);
        ux[a] = C(0, ky[a]) * psih[a];
        uy[a] = C(0, -kx[a]) * psih[a];
      }
      const auto u = to_phys(ux), v = to_phys(uy);
      double umax = 1e-6;
      for (Index i = 0; i < nn; ++i)
        umax = std::max({umax, std::abs(u[static_cast<size_t>(i)]),
                         std::abs(v[static_cast<size_t>(i)])});
      const double dt_stab = 0.5 * hmin / umax;
      nsub = std::max<Index>(1, static_cast<Index>(std::ceil(dt_frame / dt_stab)));
    }
    const double dt = dt_frame / static_cast<double>(nsub);
    std::vector<C> E(static_cast<size_t>(nn)), E2(static_cast<size_t>(nn));
    for (Index i = 0; i < nn; ++i) {
      E[static_cast<size_t>(i)] = std::exp(-nu * k2[static_cast<size_t>(i)] * dt / 2);
      E2[static_cast<size_t>(i)] = std::exp(-nu * k2[static_cast<size_t>(i)] * dt);
    }
    for (Index s = 0; s < nsub; ++s) {
      const auto k1v = nonlinear(what);
      std::vector<C> u1(static_cast<size_t>(nn));
      for (Index i = 0; i < nn; ++i) {
        const size_t a = static_cast<size_t>(i);
        u1[a] = E[a] * (what[a] + (dt / 2) * k1v[a]);
      }
      const auto k2v = nonlinear(u1);
      std::vector<C> u2(static_cast<size_t>(nn));
      for (Index i = 0; i < nn; ++i) {
        const size_t a = static_cast<size_t>(i);
        u2[a] = E[a] * what[a] + (dt / 2) * k2v[a];
      }
      const auto k3v = nonlinear(u2);
      std::vector<C> u3(static_cast<size_t>(nn));
      for (Index i = 0; i < nn; ++i) {
        const size_t a = static_cast<size_t>(i);
        u3[a] = E2[a] * what[a] + dt * E[a] * k3v[a];
      }
      const auto k4v = nonlinear(u3);
      for (Index i = 0; i < nn; ++i) {
        const size_t a = static_cast<size_t>(i);
        what[a] = E2[a] * what[a] +
                  (dt / 6.0) * (E2[a] * k1v[a] + 2.0 * E[a] * (k2v[a] + k3v[a]) + k4v[a]);
      }
    }
    auto w = to_phys(what);
    check_finite(w, "vorticity solver");
    store_frame(w, cfg.grid.sizes, cfg.store_sizes, 1, out);
  }
  return out;
}

}  // namespace solvedet

/// One trajectory at the stored resolution: [nt, store..., channels].
inline std::vector<double> solve(const PdeParams& p, const std::vector<double>& ic,
                                 const SolveConfig& cfg) {
  if (static_cast<Index>(ic.size()) != cfg.grid.sites() * n_channels(p.system))
    throw std::invalid_argument("solve: initial condition does not match the grid");
  if (cfg.nt < 2) throw std::invalid_argument("solve: need at least two stored frames");
  switch (p.system) {
    case System::Advection: return solvedet::solve_advection(p, ic, cfg);
    case System::Combined: return solvedet::solve_combined(p, ic, cfg);
    case System::Wave: return solvedet::solve_wave(p, ic, cfg);
    case System::GrayScott: return solvedet::solve_gray_scott(p, ic, cfg);
    case System::Vorticity: return solvedet::solve_vorticity(p, ic, cfg);
  }
  throw std::logic_error("bad system");
}

/// Batched dataset generation: one parameter draw per batch, fresh initial
/// conditions per trajectory, written to the binary container.
inline Dataset generate_dataset(System system, Regime regime, Index n_traj, Index batch_size,
                                std::uint64_t seed, const SolveConfig& cfg) {
  if (batch_size <= 0 || n_traj % batch_size != 0)
    throw std::invalid_argument("generate_dataset: n_traj must be a multiple of batch_size");
  Dataset d;
  d.system = to_string(system);
  d.regime = to_string(regime);
  d.n_traj = n_traj;
  d.batch_size = batch_size;
  d.nt = cfg.nt;
  d.spatial = cfg.store_sizes;
  d.channels = n_channels(system);
  d.dt = cfg.t_end / static_cast<double>(cfg.nt - 1);
  d.seed = seed;
  GridSpec store_grid = sim_grid(system, cfg.store_sizes);
  for (double c : grid_coords(store_grid)) d.grid.push_back(static_cast<float>(c));
  RngStream root(seed);
  const Index n_batches = n_traj / batch_size;
  for (Index b = 0; b < n_batches; ++b) {
    RngStream prng = root.fork(2 * static_cast<std::uint64_t>(b));
    RngStream icrng = root.fork(2 * static_cast<std::uint64_t>(b) + 1);
    const PdeParams params = sample_params(system, regime, prng);
    d.batch_params.push_back(params.coef);
    for (Index t = 0; t < batch_size; ++t) {
      const auto ic = sample_initial_condition(system, icrng, cfg.grid);
      const auto traj = solve(params, ic, cfg);
      for (double v : traj) d.fields.push_back(static_cast<float>(v));
    }
  }
  d.validate();
  return d;
}

/// Random spatial subsample shared across all frames of one trajectory.
struct GridSubsample {
  std::vector<Index> indices;         // selected site indices, sampling order
  std::vector<float> coords;          // [k, d]
  std::vector<float> values;          // [nt, k, ch]
};

inline GridSubsample subsample_grid(const Dataset& d, Index traj_idx, double pi,
                                    RngStream& rng) {
  if (pi <= 0.0 || pi > 1.0) throw std::invalid_argument("subsample_grid: fraction out of range");
  const Index P = d.sites();
  const Index k = static_cast<Index>(std::floor(pi * static_cast<double>(P)));
  if (k == 0) throw std::invalid_argument("subsample_grid: empty subsample");
  GridSubsample out;
  if (pi == 1.0) {
    out.indices.resize(static_cast<size_t>(P));
    for (Index i = 0; i < P; ++i) out.indices[static_cast<size_t>(i)] = i;
  } else {
    out.indices = rng.sample_without_replacement(P, k);
  }
  const Index dim = static_cast<Index>(d.spatial.size());
  for (Index i : out.indices)
    for (Index a = 0; a < dim; ++a)
      out.coords.push_back(d.grid[static_cast<size_t>(i * dim + a)]);
  const float* tr = d.traj(traj_idx);
  for (Index t = 0; t < d.nt; ++t)
    for (Index i : out.indices)
      for (Index c = 0; c < d.channels; ++c)
        out.values.push_back(tr[(t * P + i) * d.channels + c]);
  return out;
}

}  // namespace enma::pde
