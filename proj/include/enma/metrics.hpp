#pragma once

#include <algorithm>
#include <cstdio>

#include "enma/generator.hpp"

namespace enma {
namespace eval {

/// Relative MSE over all entries of one trajectory:
/// ||pred - truth||^2 / ||truth||^2. The dataset-level value is the mean of
/// per-trajectory values.
inline double relative_mse(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("relative_mse: shape mismatch");
  double num = 0, den = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    num += d * d;
    den += truth[i] * truth[i];
  }
  if (den <= 0) throw std::domain_error("relative_mse: zero-norm truth");
  return num / den;
}

/// CRPS of the empirical ensemble CDF at a scalar truth:
/// mean_i |X_i - y| - (1 / 2E^2) sum_ij |X_i - X_j|.
/// fair = true uses the unbiased 1 / (2E(E-1)) spread normalizer instead.
inline double crps_ensemble(const std::vector<double>& members, double y, bool fair = false) {
  const size_t e = members.size();
  if (e < 2) throw std::invalid_argument("crps_ensemble: need at least two members");
  double acc = 0, spread = 0;
  for (double x : members) acc += std::abs(x - y);
  for (double a : members)
    for (double b : members) spread += std::abs(a - b);
  const double denom =
      fair ? 2.0 * static_cast<double>(e) * static_cast<double>(e - 1)
           : 2.0 * static_cast<double>(e) * static_cast<double>(e);
  return acc / static_cast<double>(e) - spread / denom;
}

/// Empirical quantile with linear interpolation between order statistics
/// (h = (n - 1) q convention).
inline double empirical_quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("empirical_quantile: empty sample");
  if (q < 0 || q > 1) throw std::invalid_argument("empirical_quantile: level out of range");
  std::sort(v.begin(), v.end());
  const double h = q * static_cast<double>(v.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - std::floor(h)) * (v[lo + 1] - v[lo]);
}

inline const std::vector<double>& rmsce_levels() {
  static const std::vector<double> levels{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  return levels;
}

/// Root-mean-square calibration error over central-interval levels
/// {0.1 .. 0.9}: per level, empirical coverage is the fraction of evaluation
/// points whose truth lies inside the ensemble's central q-interval (bounds
/// from empirical quantiles, inclusive).
/// ensemble: [E][n_points]; truth: [n_points].
inline double rmsce(const std::vector<std::vector<double>>& ensemble,
                    const std::vector<double>& truth) {
  if (ensemble.size() < 2) throw std::invalid_argument("rmsce: need at least two members");
  if (truth.empty()) throw std::invalid_argument("rmsce: no evaluation points");
  for (const auto& m : ensemble)
    if (m.size() != truth.size()) throw std::invalid_argument("rmsce: member shape mismatch");
  const size_t n = truth.size();
  std::vector<std::vector<double>> sorted(n, std::vector<double>(ensemble.size()));
  for (size_t p = 0; p < n; ++p) {
    for (size_t e = 0; e < ensemble.size(); ++e) sorted[p][e] = ensemble[e][p];
    std::sort(sorted[p].begin(), sorted[p].end());
  }
  auto quant = [](const std::vector<double>& v, double q) {
    const double h = q * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(h));
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + (h - std::floor(h)) * (v[lo + 1] - v[lo]);
  };
  double acc = 0;
  for (double q : rmsce_levels()) {
    size_t inside = 0;
    for (size_t p = 0; p < n; ++p) {
      const double lo = quant(sorted[p], (1.0 - q) / 2.0);
      const double hi = quant(sorted[p], (1.0 + q) / 2.0);
      if (truth[p] >= lo && truth[p] <= hi) ++inside;
    }
    const double cov = static_cast<double>(inside) / static_cast<double>(n);
    acc += (cov - q) * (cov - q);
  }
  return std::sqrt(acc / static_cast<double>(rmsce_levels().size()));
}

/// One evaluated trajectory: E members over (steps x points) entries plus the
/// matching ground truth.
struct EnsembleForecast {
  std::vector<std::vector<double>> members;  // [E][steps * points]
  std::vector<double> truth;                 // [steps * points]
  Index steps = 0, points = 0;

  void validate() const {
    if (members.empty()) throw std::invalid_argument("EnsembleForecast: no members");
    if (steps < 1 || points < 1 ||
        truth.size() != static_cast<size_t>(steps * points))
      throw std::invalid_argument("EnsembleForecast: truth shape mismatch");
    for (const auto& m : members)
      if (m.size() != truth.size())
        throw std::invalid_argument("EnsembleForecast: member shape mismatch");
  }
};

struct MetricRow {
  Index traj = 0, step = 0;
  std::string metric;
  double value = 0;
};

struct EvalReport {
  std::vector<MetricRow> rows;                           // per (trajectory, step, metric)
  std::map<std::string, std::vector<double>> per_traj;   // metric -> one value per trajectory
  std::map<std::string, double> aggregate;               // mean over trajectories
};

/// Per-step values pool the spatial points of that forecast step; per-
/// trajectory values pool every entry. CRPS/RMSCE are emitted only when the
/// ensemble has at least two members.
inline EvalReport evaluate(const std::vector<EnsembleForecast>& trajs, bool fair_crps = false) {
  if (trajs.empty()) throw std::invalid_argument("evaluate: no trajectories");
  EvalReport rep;
  for (size_t ti = 0; ti < trajs.size(); ++ti) {
    const EnsembleForecast& f = trajs[ti];
    f.validate();
    const size_t e_count = f.members.size();
    const size_t total = f.truth.size();
    std::vector<double> mean(total, 0.0);
    for (const auto& m : f.members)
      for (size_t i = 0; i < total; ++i) mean[i] += m[i];
    for (auto& v : mean) v /= static_cast<double>(e_count);

    for (Index s = 0; s < f.steps; ++s) {
      const size_t off = static_cast<size_t>(s * f.points), np = static_cast<size_t>(f.points);
      std::vector<double> ps(mean.begin() + off, mean.begin() + off + np);
      std::vector<double> ts(f.truth.begin() + off, f.truth.begin() + off + np);
      rep.rows.push_back({static_cast<Index>(ti), s, "rel_mse", relative_mse(ps, ts)});
      if (e_count >= 2) {
        double crps = 0;
        std::vector<double> point(e_count);
        for (size_t p = 0; p < np; ++p) {
          for (size_t e = 0; e < e_count; ++e) point[e] = f.members[e][off + p];
          crps += crps_ensemble(point, ts[p], fair_crps);
        }
        rep.rows.push_back({static_cast<Index>(ti), s, "crps", crps / static_cast<double>(np)});
        std::vector<std::vector<double>> ens(e_count, std::vector<double>(np));
        for (size_t e = 0; e < e_count; ++e)
          for (size_t p = 0; p < np; ++p) ens[e][p] = f.members[e][off + p];
        rep.rows.push_back({static_cast<Index>(ti), s, "rmsce", rmsce(ens, ts)});
      }
    }

    rep.per_traj["rel_mse"].push_back(relative_mse(mean, f.truth));
    if (e_count >= 2) {
      double crps = 0;
      std::vector<double> point(e_count);
      for (size_t p = 0; p < total; ++p) {
        for (size_t e = 0; e < e_count; ++e) point[e] = f.members[e][p];
        crps += crps_ensemble(point, f.truth[p], fair_crps);
      }
      rep.per_traj["crps"].push_back(crps / static_cast<double>(total));
      rep.per_traj["rmsce"].push_back(rmsce(f.members, f.truth));
    }
  }
  for (const auto& [name, vals] : rep.per_traj) {
    double s = 0;
    for (double v : vals) s += v;
    rep.aggregate[name] = s / static_cast<double>(vals.size());
  }
  return rep;
}

namespace detail {

inline std::string fmt_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline void write_echo(std::ostream& out, const std::string& config_echo) {
  if (config_echo.empty()) return;
  std::istringstream in(config_echo);
  std::string line;
  while (std::getline(in, line)) out << "# " << line << "\n";
}

}  // namespace detail

/// Rows CSV: trajectory, forecast step, metric, value. The config echo, if
/// given, is embedded as leading '#' comment lines.
inline void write_report_rows_csv(const std::string& path, const EvalReport& rep,
                                  const std::string& config_echo = "") {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("report: cannot open " + path);
  detail::write_echo(f, config_echo);
  f << "trajectory,step,metric,value\n";
  for (const auto& r : rep.rows)
    f << r.traj << "," << r.step << "," << r.metric << "," << detail::fmt_g9(r.value) << "\n";
  if (!f) throw std::runtime_error("report: write failed for " + path);
}

/// Aggregate CSV: one row per metric, mean over trajectories.
inline void write_report_aggregate_csv(const std::string& path, const EvalReport& rep,
                                       const std::string& config_echo = "") {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("report: cannot open " + path);
  detail::write_echo(f, config_echo);
  f << "metric,value\n";
  for (const auto& [name, v] : rep.aggregate)
    f << name << "," << detail::fmt_g9(v) << "\n";
  if (!f) throw std::runtime_error("report: write failed for " + path);
}

/// E stochastic continuations of the same history with seeds
/// base_seed .. base_seed + E - 1.
template <typename S>
std::vector<Tensor<S>> generate_ensemble(const gen::Generator<S>& g, const Tensor<S>& history,
                                         Index horizon, Index ensemble,
                                         std::uint64_t base_seed) {
  if (ensemble < 1) throw std::invalid_argument("generate_ensemble: need at least one member");
  std::vector<Tensor<S>> out;
  out.reserve(static_cast<size_t>(ensemble));
  for (Index e = 0; e < ensemble; ++e) {
    RngStream rng(base_seed + static_cast<std::uint64_t>(e));
    out.push_back(gen::rollout(g, history, horizon, rng));
  }
  return out;
}

}  // namespace eval
}  // namespace enma
