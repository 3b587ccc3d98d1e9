#pragma once

// The three training drivers. Each deployment round samples a fresh batch at
// the current theta (sub-seed derived from the trial seed and the round index,
// so trajectories are reproducible regardless of scheduling), records the
// iterate, and updates. A terminal evaluation row at t = T is recorded without
// an update, so a full run yields T+1 rows.

#include <chrono>
#include <cstddef>
#include <vector>

#include "env.hpp"
#include "estim.hpp"
#include "grad.hpp"
#include "types.hpp"

namespace perfgd {

enum class Algo { RGD, RRM, PerfGD };
enum class Estimator { GaussianClosedForm, Reinforce, RegressionReparam };
enum class HorizonMode { WindowH, FullHistory };
enum class StopReason { MaxIters, GradBelowG, DegenerateHistory };

struct OptimConfig {
  double eta = 0.1;       // step size
  int H = 1;              // estimation horizon (window length)
  int T = 100;            // max deployment rounds
  int n = 500;            // samples per deployment
  double g = 0;           // stop once the gradient-estimate norm drops below; 0 = run to T
  RngSeed seed;
  Estimator estimator = Estimator::GaussianClosedForm;
  HorizonMode horizon_mode = HorizonMode::WindowH;
  bool split_dataset = false;      // independent per-part statistics for the jacobian
  int init_steps = -1;             // plain-gradient warmup rounds; -1 means H
  Vec theta0;                      // empty means the centroid of the domain
  double beta_ridge = 0;           // ridge for the regression-coefficient statistic
  bool sample_covariance = false;  // estimate the noise scale from each batch
};

struct IterRow {
  int t;
  Vec theta;
  Vec fhat;
  double gradnorm;  // norm of the estimate driving the update
  double loss;      // batch-mean loss at the deployed theta
  double wall_seconds;
};

struct TrialRecord {
  std::vector<IterRow> rows;
  StopReason stop = StopReason::MaxIters;
};

inline void validate(const OptimConfig& cfg, const EnvSpec& env) {
  if (!(cfg.eta > 0)) throw ConfigError("eta must be positive");
  if (cfg.H < 1) throw ConfigError("H must be at least 1");
  if (cfg.T < 1) throw ConfigError("T must be at least 1");
  if (cfg.n < 1) throw ConfigError("n must be at least 1");
  if (cfg.g < 0) throw ConfigError("g must be nonnegative");
  if (cfg.split_dataset && cfg.n < cfg.H) throw ConfigError("split estimation needs n >= H");
  if (cfg.init_steps < -1) throw ConfigError("init_steps must be -1 (default) or >= 0");
  if (cfg.beta_ridge < 0) throw ConfigError("beta_ridge must be nonnegative");
  if (cfg.theta0.size() > 0 && cfg.theta0.size() != param_dim(env))
    throw ConfigError("theta0 dimension does not match the environment");
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline Vec start_point(const OptimConfig& cfg, const EnvSpec& env) {
  return cfg.theta0.size() > 0 ? project(cfg.theta0, env.domain) : centroid(env.domain);
}

// one projected gradient step; shared so warmup rounds match run_rgd bitwise
inline Vec gd_step(const Vec& theta, double eta, const Vec& g, const Box& box) {
  return project(Vec(theta - eta * g), box);
}

inline Vec statistic(const EnvSpec& env, const Batch& b, const OptimConfig& cfg) {
  if (env.family == Family::Regression) return estimate_beta(b, cfg.beta_ridge);
  return estimate_f(b, env);
}

inline Batch batch_rows(const Batch& b, int begin, int end) {
  Batch out;
  out.features = b.features.middleRows(begin, end - begin);
  if (b.labels) out.labels = b.labels->segment(begin, end - begin);
  if (b.clusters) out.clusters = b.clusters->segment(begin, end - begin);
  return out;
}

inline Vec pick(const Vec& v, const std::vector<int>& idx) {
  Vec out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out(i) = v(idx[i]);
  return out;
}

// least-squares jacobian over the structurally nonzero block only, scattered
// back into the full k x p shape
inline JacobianEstimate jacobian_for(const EnvSpec& env, const History& hist, const Vec& theta,
                                     const Vec& fhat, const std::vector<Vec>& parts,
                                     std::size_t window) {
  const JacobianSupport sup = jacobian_support(env);
  const int k = stat_dim(env), p = param_dim(env);
  const bool restricted =
      static_cast<int>(sup.stat_rows.size()) != k || static_cast<int>(sup.param_cols.size()) != p;
  if (!restricted)
    return parts.empty() ? finite_diff_jacobian(hist, theta, fhat, window)
                         : finite_diff_jacobian_split(hist, theta, parts, window);
  History sub;
  for (std::size_t i = 0; i < hist.size(); ++i)
    sub.push(pick(hist.theta(i), sup.param_cols), pick(hist.fhat(i), sup.stat_rows));
  std::vector<Vec> sub_parts;
  sub_parts.reserve(parts.size());
  for (const Vec& f : parts) sub_parts.push_back(pick(f, sup.stat_rows));
  JacobianEstimate est =
      parts.empty()
          ? finite_diff_jacobian(sub, pick(theta, sup.param_cols), pick(fhat, sup.stat_rows), window)
          : finite_diff_jacobian_split(sub, pick(theta, sup.param_cols), sub_parts, window);
  Mat full = Mat::Zero(k, p);
  for (std::size_t r = 0; r < sup.stat_rows.size(); ++r)
    for (std::size_t c = 0; c < sup.param_cols.size(); ++c)
      full(sup.stat_rows[r], sup.param_cols[c]) = est.matrix(static_cast<int>(r), static_cast<int>(c));
  est.matrix = std::move(full);
  return est;
}

inline Vec shift_term(const EnvSpec& env, const OptimConfig& cfg, const Batch& b, const Vec& theta,
                      const LossSpec& loss, const Vec& fhat, const Mat& J) {
  if (cfg.estimator == Estimator::RegressionReparam) return grad2_regression(b, theta, loss, J);
  if (env.family == Family::GaussianMixture || env.family == Family::Classification) {
    const Vec vars =
        cfg.sample_covariance ? sample_comp_vars(b, stat_dim(env)) : noise_comp_vars(env);
    return cfg.estimator == Estimator::GaussianClosedForm
               ? grad2_gaussian(b, theta, loss, fhat, J, vars)
               : grad2_reinforce(b, theta, loss, fhat, J, gaussian_scores(vars));
  }
  const Mat Sigma = cfg.sample_covariance ? sample_covariance(b) : noise_covariance(env);
  return cfg.estimator == Estimator::GaussianClosedForm
             ? grad2_gaussian(b, theta, loss, fhat, J, Sigma)
             : grad2_reinforce(b, theta, loss, fhat, J, gaussian_scores(Sigma));
}

inline Vec erm_linear_revenue(const Batch& b, const LossSpec& loss, const Box& box) {
  const Vec c = loss.sign * b.features.colwise().mean().transpose();
  Vec th(box.dim());
  for (int j = 0; j < box.dim(); ++j) th(j) = c(j) >= 0 ? box.lo(j) : box.hi(j);
  return th;
}

inline Vec erm_ridge_squared(const Batch& b, const LossSpec& loss, const Box& box) {
  const int p = b.d() - 1;
  const auto X = b.features.leftCols(p);
  const Mat A = X.transpose() * X + b.n() * loss.lambda * Mat::Identity(p, p);
  return project(Vec(A.ldlt().solve(X.transpose() * b.features.col(p))), box);
}

// damped Newton with Armijo backtracking; the ridge term makes the hessian
// uniformly positive definite
inline Vec erm_ridge_xent(const Batch& b, const LossSpec& loss, const Box& box, Vec th) {
  for (int it = 0; it < 10000; ++it) {
    const Vec g = grad1(b, th, loss);
    if (g.norm() <= 1e-8) return project(th, box);
    Mat Hs = Mat::Zero(2, 2);
    for (int i = 0; i < b.n(); ++i) {
      const double x = b.features(i, 0);
      const double s = sigmoid(th(0) + th(1) * x);
      const double w = s * (1 - s);
      Hs(0, 0) += w;
      Hs(0, 1) += w * x;
      Hs(1, 1) += w * x * x;
    }
    Hs(1, 0) = Hs(0, 1);
    Hs /= b.n();
    Hs += loss.lambda * Mat::Identity(2, 2);
    const Vec d = Hs.llt().solve(-g);
    const double f0 = mean_loss(b, th, loss);
    const double slope = g.dot(d);
    double alpha = 1.0;
    while (alpha > 1e-12 && mean_loss(b, Vec(th + alpha * d), loss) > f0 + 1e-4 * alpha * slope)
      alpha *= 0.5;
    th += alpha * d;
  }
  throw EstimError("empirical risk minimizer did not converge");
}

inline Vec erm_minimizer(const Batch& b, const LossSpec& loss, const Box& box, const Vec& warm) {
  switch (loss.kind) {
    case LossKind::LinearRevenue:
      return erm_linear_revenue(b, loss, box);
    case LossKind::RidgeSquared:
      return erm_ridge_squared(b, loss, box);
    case LossKind::RidgeCrossEntropy:
      return erm_ridge_xent(b, loss, box, warm);
  }
  throw SpecError("unknown loss kind");
}

}  // namespace detail

inline TrialRecord run_rgd(const EnvSpec& env, const LossSpec& loss, const OptimConfig& cfg) {
  validate(cfg, env);
  TrialRecord rec;
  Vec theta = detail::start_point(cfg, env);
  for (int t = 0; t <= cfg.T; ++t) {
    const auto tick = std::chrono::steady_clock::now();
    const Batch b = sample(env, theta, cfg.n, RngSeed{derive_seed(cfg.seed.seed, t)});
    const Vec fh = detail::statistic(env, b, cfg);
    const Vec g1 = grad1(b, theta, loss);
    const double gn = g1.norm();
    const double ls = mean_loss(b, theta, loss);
    rec.rows.push_back({t, theta, fh, gn, ls, detail::seconds_since(tick)});
    if (cfg.g > 0 && gn < cfg.g) {
      rec.stop = StopReason::GradBelowG;
      return rec;
    }
    if (t == cfg.T) break;
    theta = detail::gd_step(theta, cfg.eta, g1, env.domain);
  }
  rec.stop = StopReason::MaxIters;
  return rec;
}

inline TrialRecord run_rrm(const EnvSpec& env, const LossSpec& loss, const OptimConfig& cfg) {
  validate(cfg, env);
  TrialRecord rec;
  Vec theta = detail::start_point(cfg, env);
  for (int t = 0; t <= cfg.T; ++t) {
    const auto tick = std::chrono::steady_clock::now();
    const Batch b = sample(env, theta, cfg.n, RngSeed{derive_seed(cfg.seed.seed, t)});
    const Vec fh = detail::statistic(env, b, cfg);
    const Vec g1 = grad1(b, theta, loss);
    const double gn = g1.norm();
    const double ls = mean_loss(b, theta, loss);
    rec.rows.push_back({t, theta, fh, gn, ls, detail::seconds_since(tick)});
    if (cfg.g > 0 && gn < cfg.g) {
      rec.stop = StopReason::GradBelowG;
      return rec;
    }
    if (t == cfg.T) break;
    theta = detail::erm_minimizer(b, loss, env.domain, theta);
  }
  rec.stop = StopReason::MaxIters;
  return rec;
}

inline TrialRecord run_perfgd(const EnvSpec& env, const LossSpec& loss, const OptimConfig& cfg) {
  validate(cfg, env);
  if ((cfg.estimator == Estimator::RegressionReparam) != (env.family == Family::Regression))
    throw ConfigError("estimator does not match the environment family");
  TrialRecord rec;
  const int init = cfg.init_steps < 0 ? cfg.H : cfg.init_steps;
  History hist(cfg.horizon_mode == HorizonMode::WindowH ? static_cast<std::size_t>(cfg.H) : 0);
  Vec theta = detail::start_point(cfg, env);
  for (int t = 0; t <= cfg.T; ++t) {
    const auto tick = std::chrono::steady_clock::now();
    const Batch b = sample(env, theta, cfg.n, RngSeed{derive_seed(cfg.seed.seed, t)});
    const Vec fh = detail::statistic(env, b, cfg);
    const Vec g1 = grad1(b, theta, loss);
    Vec ghat = g1;
    bool degenerate = false;
    if (t >= init) {
      const std::size_t window =
          cfg.horizon_mode == HorizonMode::WindowH ? static_cast<std::size_t>(cfg.H) : hist.size();
      try {
        std::vector<Vec> parts;
        if (cfg.split_dataset && hist.size() > 0) {
          const std::size_t m = std::min(window, hist.size());
          parts.reserve(m);
          for (std::size_t i = 0; i < m; ++i) {
            const int begin = static_cast<int>(i * static_cast<std::size_t>(b.n()) / m);
            const int end = static_cast<int>((i + 1) * static_cast<std::size_t>(b.n()) / m);
            parts.push_back(detail::statistic(env, detail::batch_rows(b, begin, end), cfg));
          }
        }
        const JacobianEstimate J = detail::jacobian_for(env, hist, theta, fh, parts, window);
        const Vec g2 = detail::shift_term(env, cfg, b, theta, loss, fh, J.matrix);
        ghat = g1 + g2;
      } catch (const EstimError&) {
        degenerate = true;  // recorded with the plain-gradient norm, then the trial stops
      }
    }
    const double gn = ghat.norm();
    rec.rows.push_back({t, theta, fh, gn, mean_loss(b, theta, loss), detail::seconds_since(tick)});
    if (degenerate) {
      rec.stop = StopReason::DegenerateHistory;
      return rec;
    }
    if (cfg.g > 0 && gn < cfg.g) {
      rec.stop = StopReason::GradBelowG;
      return rec;
    }
    if (t == cfg.T) break;
    hist.push(theta, fh);
    theta = detail::gd_step(theta, cfg.eta, ghat, env.domain);
  }
  rec.stop = StopReason::MaxIters;
  return rec;
}

inline TrialRecord run(Algo algo, const EnvSpec& env, const LossSpec& loss,
                       const OptimConfig& cfg) {
  switch (algo) {
    case Algo::RGD:
      return run_rgd(env, loss, cfg);
    case Algo::RRM:
      return run_rrm(env, loss, cfg);
    case Algo::PerfGD:
      return run_perfgd(env, loss, cfg);
  }
  throw SpecError("unknown algorithm");
}

}  // namespace perfgd
