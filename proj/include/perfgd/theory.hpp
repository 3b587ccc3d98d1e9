#pragma once

// Empirical checks of the error-scaling predictions, run in a population-limit
// mode: expectations are exact, the only error sources are the injected
// statistic noise and the finite-difference bias, so each predicted scaling
// law can be isolated. Statistic errors are uniform(-delta, delta) in the
// bounded regime and N(0, tau^2) in the subgaussian regime.

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "env.hpp"
#include "estim.hpp"
#include "oracle.hpp"
#include "types.hpp"

namespace perfgd {

struct TheoryConstants {
  double F = 1;         // bound on |f'|
  double M = 1;         // bound on |f''|
  double G = 1;         // gradient upper bound
  double g = 0.1;       // gradient lower bound, doubles as the stop threshold
  double ell_max = 1;   // loss bound
  double L_lip = 1;     // gradient Lipschitz constant
  double delta = 0;     // bound on the statistic error
  double tau = 0;       // subgaussian scale of the statistic error
  double gamma_fail = 0.05;
};

struct SweepResult {
  std::string axis;              // name of the swept quantity
  std::string measure;           // name of the measured quantity
  std::vector<double> values;
  std::vector<double> measured;
  int repetitions = 0;
  double loglog_slope = std::numeric_limits<double>::quiet_NaN();
};

// scalar statistic map with its exact derivative; the population-limit stand-in
// for a one-dimensional mean family under the loss theta * z
struct MeanMap {
  std::function<double(double)> f;
  std::function<double(double)> df;
};

inline MeanMap linear_map(double a1, double a0) {
  return {[=](double th) { return a1 * th + a0; }, [=](double) { return a1; }};
}
inline MeanMap quadratic_map(double a2, double a1, double a0) {
  return {[=](double th) { return a2 * th * th + a1 * th + a0; },
          [=](double th) { return 2 * a2 * th + a1; }};
}
inline MeanMap mean_map(const EnvSpec& env) {
  if (stat_dim(env) != 1 || param_dim(env) != 1)
    throw SpecError("population mode needs a scalar mean family");
  return {[env](double th) { return true_f(env, Vec::Constant(1, th))(0); },
          [env](double th) { return true_jacobian(env, Vec::Constant(1, th))(0, 0); }};
}

// population performative gradient of theta * f(theta)
inline double mean_map_grad(const MeanMap& map, double th) { return map.f(th) + th * map.df(th); }

inline std::vector<double> log_grid(double lo, double hi, int npts) {
  if (!(lo > 0) || !(hi > lo) || npts < 2) throw DomainError("log grid needs 0 < lo < hi, npts >= 2");
  std::vector<double> grid(npts);
  const double step = (std::log(hi) - std::log(lo)) / (npts - 1);
  for (int i = 0; i < npts; ++i) grid[i] = std::exp(std::log(lo) + i * step);
  return grid;
}

// least-squares slope of log y against log x over the positive pairs
inline double fit_loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (std::size_t i = 0; i < xs.size() && i < ys.size(); ++i) {
    if (!(xs[i] > 0) || !(ys[i] > 0)) continue;
    const double lx = std::log(xs[i]), ly = std::log(ys[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++m;
  }
  if (m < 2) throw DomainError("need at least two positive points for a log-log fit");
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

// stopping threshold matched to the statistic error level
inline double stopping_rule(double delta, double c) {
  if (delta <= 0) throw DomainError("stopping rule needs delta > 0");
  return c * std::pow(delta, 0.2);
}

// mean absolute gradient error at a fixed theta, single-step finite difference,
// with the previous iterate placed one gradient step of size eta away
inline SweepResult grad_error_sweep_eta(const MeanMap& map, double delta,
                                        const std::vector<double>& etas, int reps = 200,
                                        std::uint64_t seed = 0, double theta = 1.0) {
  if (reps < 100) throw DomainError("eta sweep needs at least 100 repetitions");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-delta, delta);
  const double true_g = mean_map_grad(map, theta);
  SweepResult out;
  out.axis = "eta";
  out.measure = "mean_abs_grad_error";
  out.repetitions = reps;
  for (const double eta : etas) {
    const double theta_prev = theta + eta * std::abs(true_g);
    double acc = 0;
    for (int r = 0; r < reps; ++r) {
      const double fh = map.f(theta) + (delta > 0 ? unif(rng) : 0.0);
      const double fh_prev = map.f(theta_prev) + (delta > 0 ? unif(rng) : 0.0);
      const double slope = (fh_prev - fh) / (theta_prev - theta);
      acc += std::abs(fh + theta * slope - true_g);
    }
    out.values.push_back(eta);
    out.measured.push_back(acc / reps);
  }
  return out;
}

enum class SpacingMode { Uniform, Geometric };

// variance of the split-estimator slope as the horizon grows, on a monotone
// synthetic history with per-step spacing s = g * eta
inline SweepResult horizon_variance_sweep(const MeanMap& map, double tau,
                                          const std::vector<int>& horizons, double eta,
                                          SpacingMode mode = SpacingMode::Uniform, double g = 1.0,
                                          int reps = 1000, std::uint64_t seed = 0) {
  if (reps < 500) throw DomainError("horizon sweep needs at least 500 repetitions");
  const double s = g * eta;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, tau > 0 ? tau : 1.0);
  SweepResult out;
  out.axis = "H";
  out.measure = "slope_variance";
  out.repetitions = reps;
  const Vec theta_t = Vec::Zero(1);
  for (const int H : horizons) {
    if (!(tau > 0)) {
      // every repetition sees the same noiseless history, so the slope is a
      // constant and its variance is zero by definition
      out.values.push_back(H);
      out.measured.push_back(0.0);
      continue;
    }
    std::vector<double> dist(H);  // distance of the i-th most recent entry
    for (int i = 1; i <= H; ++i)
      dist[i - 1] = mode == SpacingMode::Uniform ? s * i : s * (std::pow(2.0, i) - 1);
    double sum = 0, sumsq = 0;
    for (int r = 0; r < reps; ++r) {
      History hist;
      for (int i = H; i >= 1; --i) {
        const double th = -dist[i - 1];
        const double fh = map.f(th) + (tau > 0 ? noise(rng) : 0.0);
        hist.push(Vec::Constant(1, th), Vec::Constant(1, fh));
      }
      std::vector<Vec> parts(H);
      for (int i = 0; i < H; ++i)
        parts[i] = Vec::Constant(1, map.f(0.0) + (tau > 0 ? noise(rng) : 0.0));
      const double slope =
          finite_diff_jacobian_split(hist, theta_t, parts, static_cast<std::size_t>(H)).matrix(0, 0);
      sum += slope;
      sumsq += slope * slope;
    }
    out.values.push_back(H);
    out.measured.push_back(std::max(0.0, (sumsq - sum * sum / reps) / (reps - 1)));
  }
  out.loglog_slope = tau > 0 ? fit_loglog_slope(out.values, out.measured) : 0.0;
  return out;
}

struct PopulationRunConfig {
  double eta = 0.1;
  int T = 200;
  std::size_t H = 1;
  double delta = 0;  // injected statistic error bound
  int reps = 30;
  std::uint64_t seed = 0;
  Vec theta0;        // empty means the centroid of the domain
};

// min-so-far true squared gradient norm along a population-limit run; averaged
// over repetitions when noise is injected
inline SweepResult convergence_curve(const EnvSpec& env, const LossSpec& loss,
                                     const PopulationRunConfig& cfg,
                                     const std::function<Vec(const Vec&)>& true_grad) {
  if (stat_dim(env) != 1 || param_dim(env) != 1)
    throw SpecError("population mode needs a scalar mean family");
  if (loss.kind != LossKind::LinearRevenue)
    throw SpecError("population mode supports the linear loss");
  const MeanMap map = mean_map(env);
  SweepResult out;
  out.axis = "t";
  out.measure = "min_sq_gradnorm";
  out.repetitions = cfg.reps;
  out.values.resize(cfg.T);
  out.measured.assign(cfg.T, 0.0);
  for (int t = 0; t < cfg.T; ++t) out.values[t] = t;
  for (int r = 0; r < cfg.reps; ++r) {
    std::mt19937_64 rng(cfg.seed + static_cast<std::uint64_t>(r));
    std::uniform_real_distribution<double> unif(-cfg.delta, cfg.delta);
    double theta = cfg.theta0.size() > 0 ? cfg.theta0(0) : centroid(env.domain)(0);
    History hist(cfg.H);
    double min_sq = std::numeric_limits<double>::infinity();
    for (int t = 0; t < cfg.T; ++t) {
      min_sq = std::min(min_sq, true_grad(Vec::Constant(1, theta)).squaredNorm());
      out.measured[t] += min_sq / cfg.reps;
      const double fh = map.f(theta) + (cfg.delta > 0 ? unif(rng) : 0.0);
      double ghat = loss.sign * fh;  // plain gradient until history accrues
      bool degenerate = false;
      if (hist.size() > 0) {
        try {
          const double slope =
              finite_diff_jacobian(hist, Vec::Constant(1, theta), Vec::Constant(1, fh), cfg.H)
                  .matrix(0, 0);
          ghat = loss.sign * (fh + theta * slope);
        } catch (const EstimError&) {
          degenerate = true;  // theta frozen, so the minimum stops improving
        }
      }
      if (degenerate) {
        for (int rest = t + 1; rest < cfg.T; ++rest) out.measured[rest] += min_sq / cfg.reps;
        break;
      }
      hist.push(Vec::Constant(1, theta), Vec::Constant(1, fh));
      theta = project(Vec::Constant(1, theta - cfg.eta * ghat), env.domain)(0);
    }
  }
  return out;
}

struct Theorem4Schedule {
  double eta;
  double horizon;
};

// step size and horizon prescriptions balancing finite-difference bias against
// noise concentration; constants are the theory's, not tuned values
inline Theorem4Schedule theorem4_schedule(const TheoryConstants& tc, double T) {
  if (!(tc.M > 0 && tc.G > 0 && tc.g > 0 && tc.tau > 0 && tc.gamma_fail > 0 && T > 0))
    throw DomainError("schedule needs positive M, G, g, tau, gamma_fail, T");
  if (tc.g > tc.G) throw DomainError("schedule needs g <= G");
  const double logterm = std::log(T / tc.gamma_fail);
  if (!(logterm > 0)) throw DomainError("schedule needs T > gamma_fail");
  Theorem4Schedule sch;
  sch.eta = std::pow(tc.g, 2.0 / 3.0) /
            (std::sqrt(tc.M) * std::pow(tc.G, 5.0 / 3.0) * std::cbrt(tc.tau) *
             std::pow(logterm, 1.0 / 6.0) * std::pow(T, 5.0 / 6.0));
  sch.horizon = std::pow(tc.tau, 0.4) * std::pow(logterm, 0.2) /
                (std::pow(tc.M, 0.4) * std::pow(tc.g, 0.8)) * std::pow(sch.eta, -0.8);
  return sch;
}

}  // namespace perfgd
