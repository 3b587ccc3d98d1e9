#pragma once

// Ground truth: population performative losses in closed form, their exact
// gradients, analytic optima and stable points, and a brute-force grid search
// for cross-checking. The classification family has no algebraic closed form;
// its class expectations are evaluated by adaptive Gauss-Hermite quadrature.

#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <optional>

#include "env.hpp"
#include "grad.hpp"
#include "types.hpp"

namespace perfgd {

struct GroundTruth {
  std::optional<Params> theta_opt;
  std::optional<Params> theta_stab;
  std::optional<double> loss_at_opt;
  std::optional<double> loss_at_stab;
};

namespace detail {

struct QuadRule {
  Vec nodes;    // roots of the degree-n Hermite polynomial
  Vec weights;  // normalized so they sum to 1
};

// Golub-Welsch on the Hermite Jacobi matrix; cached per node count
inline const QuadRule& hermite_rule(int n) {
  static std::map<int, QuadRule> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  Mat T = Mat::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double b = std::sqrt(k / 2.0);
    T(k, k - 1) = b;
    T(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(T);
  QuadRule rule;
  rule.nodes = es.eigenvalues();
  rule.weights = es.eigenvectors().row(0).transpose().array().square();
  return cache.emplace(n, std::move(rule)).first->second;
}

// E[g(X)] for X ~ N(mu, var), node count doubled until two ladder rungs agree
inline double expect_normal(const std::function<double(double)>& g, double mu, double var,
                            double tol = 1e-12) {
  const double s = std::sqrt(2.0 * var);
  double prev = 0;
  bool have_prev = false;
  for (int n : {20, 40, 80, 160, 320}) {
    const QuadRule& rule = hermite_rule(n);
    double acc = 0;
    for (int i = 0; i < n; ++i) acc += rule.weights(i) * g(mu + s * rule.nodes(i));
    if (have_prev && std::abs(acc - prev) <= tol * std::max(1.0, std::abs(acc))) return acc;
    prev = acc;
    have_prev = true;
  }
  throw EstimError("quadrature did not converge");
}

// mixture mean is affine in theta: pooled slope and intercept
inline void mixture_affine(const MixtureSpec& m, double& slope, double& intercept) {
  slope = m.gamma * m.c1.a1 + (1 - m.gamma) * m.c2.a1;
  intercept = m.gamma * m.c1.a0 + (1 - m.gamma) * m.c2.a0;
}

inline void check_loss_kind(const EnvSpec& env, const LossSpec& loss) {
  LossKind want = LossKind::LinearRevenue;
  if (env.family == Family::Classification) want = LossKind::RidgeCrossEntropy;
  if (env.family == Family::Regression) want = LossKind::RidgeSquared;
  if (loss.kind != want) throw SpecError("loss kind does not match this environment's closed form");
}

}  // namespace detail

// exact population performative loss at theta
inline double closed_form_loss(const EnvSpec& env, const LossSpec& loss, const Vec& theta) {
  detail::check_loss_kind(env, loss);
  switch (env.family) {
    case Family::LinearMeanGaussian: {
      const auto& m = std::get<LinearMeanSpec>(env.model);
      const double th = theta(0);
      return loss.sign * (m.a1 * th * th + m.a0 * th);
    }
    case Family::SqrtMeanGaussian: {
      const auto& m = std::get<SqrtMeanSpec>(env.model);
      const double th = theta(0);
      return loss.sign * th * std::sqrt(detail::sqrt_mean_arg(m, th));
    }
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(env.model);
      double A, B;
      detail::mixture_affine(m, A, B);
      const double th = theta(0);
      return loss.sign * (A * th * th + B * th);
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(env.model);
      return loss.sign * (theta.dot(m.mu0) - m.eps * theta.squaredNorm());
    }
    case Family::Classification: {
      const auto& m = std::get<ClassificationSpec>(env.model);
      const double f = m.mu1 - m.eps * theta(1);
      const auto ham = [&](double x) { return detail::softplus(theta(0) + theta(1) * x); };
      const auto spam = [&](double x) { return detail::softplus(-(theta(0) + theta(1) * x)); };
      return (1 - m.gamma) * detail::expect_normal(ham, m.mu0, m.var0) +
             m.gamma * detail::expect_normal(spam, f, m.var1) +
             0.5 * loss.lambda * theta.squaredNorm();
    }
    case Family::Regression: {
      const auto& m = std::get<RegressionSpec>(env.model);
      const double c = m.x_mean * m.x_mean + m.x_var;
      const double th = theta(0);
      const double gap = (1 - m.b1) * th - m.b0;
      return 0.5 * c * gap * gap + 0.5 * m.noise_var + 0.5 * loss.lambda * th * th;
    }
  }
  throw SpecError("unknown family");
}

// exact gradient of the loss in theta with the distribution frozen at theta
inline Vec analytic_grad1(const EnvSpec& env, const LossSpec& loss, const Vec& theta) {
  detail::check_loss_kind(env, loss);
  switch (env.family) {
    case Family::LinearMeanGaussian: {
      const auto& m = std::get<LinearMeanSpec>(env.model);
      return Vec::Constant(1, loss.sign * (m.a1 * theta(0) + m.a0));
    }
    case Family::SqrtMeanGaussian: {
      const auto& m = std::get<SqrtMeanSpec>(env.model);
      return Vec::Constant(1, loss.sign * std::sqrt(detail::sqrt_mean_arg(m, theta(0))));
    }
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(env.model);
      double A, B;
      detail::mixture_affine(m, A, B);
      return Vec::Constant(1, loss.sign * (A * theta(0) + B));
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(env.model);
      return loss.sign * (m.mu0 - m.eps * theta);
    }
    case Family::Classification: {
      const auto& m = std::get<ClassificationSpec>(env.model);
      const double f = m.mu1 - m.eps * theta(1);
      const auto s0 = [&](double x) { return detail::sigmoid(theta(0) + theta(1) * x); };
      const auto s1 = [&](double x) { return detail::sigmoid(theta(0) + theta(1) * x) - 1.0; };
      Vec g(2);
      g(0) = (1 - m.gamma) * detail::expect_normal(s0, m.mu0, m.var0) +
             m.gamma * detail::expect_normal(s1, f, m.var1);
      g(1) = (1 - m.gamma) * detail::expect_normal([&](double x) { return s0(x) * x; }, m.mu0, m.var0) +
             m.gamma * detail::expect_normal([&](double x) { return s1(x) * x; }, f, m.var1);
      return g + loss.lambda * theta;
    }
    case Family::Regression: {
      const auto& m = std::get<RegressionSpec>(env.model);
      const double c = m.x_mean * m.x_mean + m.x_var;
      const double th = theta(0);
      return Vec::Constant(1, c * ((1 - m.b1) * th - m.b0) + loss.lambda * th);
    }
  }
  throw SpecError("unknown family");
}

// exact full performative gradient, distribution shift included
inline Vec analytic_perf_grad(const EnvSpec& env, const LossSpec& loss, const Vec& theta) {
  detail::check_loss_kind(env, loss);
  switch (env.family) {
    case Family::LinearMeanGaussian: {
      const auto& m = std::get<LinearMeanSpec>(env.model);
      return Vec::Constant(1, loss.sign * (2 * m.a1 * theta(0) + m.a0));
    }
    case Family::SqrtMeanGaussian: {
      const auto& m = std::get<SqrtMeanSpec>(env.model);
      const double r = std::sqrt(detail::sqrt_mean_arg(m, theta(0)));
      return Vec::Constant(1, loss.sign * (r + theta(0) * m.a1 / (2 * r)));
    }
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(env.model);
      double A, B;
      detail::mixture_affine(m, A, B);
      return Vec::Constant(1, loss.sign * (2 * A * theta(0) + B));
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(env.model);
      return loss.sign * (m.mu0 - 2 * m.eps * theta);
    }
    case Family::Classification: {
      const auto& m = std::get<ClassificationSpec>(env.model);
      const double f = m.mu1 - m.eps * theta(1);
      Vec g = analytic_grad1(env, loss, theta);
      const auto shift = [&](double x) {
        return detail::softplus(-(theta(0) + theta(1) * x)) * (x - f) / m.var1;
      };
      g(1) += m.gamma * (-m.eps) * detail::expect_normal(shift, f, m.var1);
      return g;
    }
    case Family::Regression: {
      const auto& m = std::get<RegressionSpec>(env.model);
      const double c = m.x_mean * m.x_mean + m.x_var;
      const double th = theta(0);
      return Vec::Constant(1, c * (1 - m.b1) * ((1 - m.b1) * th - m.b0) + loss.lambda * th);
    }
  }
  throw SpecError("unknown family");
}

// closed-form optimum and stable point; classification has neither in closed
// form, so all fields come back empty for it
inline GroundTruth analytic_ground_truth(const EnvSpec& env, const LossSpec& loss) {
  detail::check_loss_kind(env, loss);
  Vec opt, stab;
  switch (env.family) {
    case Family::LinearMeanGaussian: {
      const auto& m = std::get<LinearMeanSpec>(env.model);
      opt = Vec::Constant(1, -m.a0 / (2 * m.a1));
      stab = Vec::Constant(1, -m.a0 / m.a1);
      break;
    }
    case Family::SqrtMeanGaussian: {
      const auto& m = std::get<SqrtMeanSpec>(env.model);
      opt = Vec::Constant(1, -2 * m.a0 / (3 * m.a1));
      stab = Vec::Constant(1, -m.a0 / m.a1);
      break;
    }
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(env.model);
      double A, B;
      detail::mixture_affine(m, A, B);
      opt = Vec::Constant(1, -0.5 * B / A);
      stab = Vec::Constant(1, -B / A);
      break;
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(env.model);
      opt = m.mu0 / (2 * m.eps);
      stab = m.mu0 / m.eps;
      break;
    }
    case Family::Classification:
      return {};
    case Family::Regression: {
      const auto& m = std::get<RegressionSpec>(env.model);
      const double c = m.x_mean * m.x_mean + m.x_var;
      opt = Vec::Constant(1, c * m.b0 / (c * (1 - m.b1) + loss.lambda / (1 - m.b1)));
      stab = Vec::Constant(1, c * m.b0 / (c * (1 - m.b1) + loss.lambda));
      break;
    }
  }
  GroundTruth gt;
  gt.theta_opt = Params{project(opt, env.domain), env.domain};
  gt.theta_stab = Params{project(stab, env.domain), env.domain};
  gt.loss_at_opt = closed_form_loss(env, loss, gt.theta_opt->values);
  gt.loss_at_stab = closed_form_loss(env, loss, gt.theta_stab->values);
  return gt;
}

namespace detail {

// one axis of the search lattice; end point clamped to the box edge
inline double grid_point(double lo, double hi, double res, int i) {
  return std::min(lo + i * res, hi);
}
inline int grid_count(double lo, double hi, double res) {
  return static_cast<int>(std::floor((hi - lo) / res + 0.5)) + 1;
}

}  // namespace detail

// brute-force argmin of the closed-form loss; dense scan for p <= 2,
// coordinate descent above that; ties go to the earliest lattice point
inline Params grid_search_opt(const EnvSpec& env, const LossSpec& loss, double res) {
  const Box& box = env.domain;
  const int p = box.dim();
  Vec best;
  if (p == 1) {
    double best_loss = 0;
    const int n0 = detail::grid_count(box.lo(0), box.hi(0), res);
    for (int i = 0; i < n0; ++i) {
      Vec th = Vec::Constant(1, detail::grid_point(box.lo(0), box.hi(0), res, i));
      const double l = closed_form_loss(env, loss, th);
      if (best.size() == 0 || l < best_loss) {
        best = th;
        best_loss = l;
      }
    }
  } else if (p == 2) {
    double best_loss = 0;
    const int n0 = detail::grid_count(box.lo(0), box.hi(0), res);
    const int n1 = detail::grid_count(box.lo(1), box.hi(1), res);
    for (int i = 0; i < n0; ++i)
      for (int j = 0; j < n1; ++j) {
        Vec th(2);
        th << detail::grid_point(box.lo(0), box.hi(0), res, i),
            detail::grid_point(box.lo(1), box.hi(1), res, j);
        const double l = closed_form_loss(env, loss, th);
        if (best.size() == 0 || l < best_loss) {
          best = th;
          best_loss = l;
        }
      }
  } else {
    best = centroid(box);
    for (int sweep = 0; sweep < 50; ++sweep) {
      bool moved = false;
      for (int j = 0; j < p; ++j) {
        const int nj = detail::grid_count(box.lo(j), box.hi(j), res);
        double best_loss = 0;
        double best_coord = best(j);
        for (int i = 0; i < nj; ++i) {
          Vec th = best;
          th(j) = detail::grid_point(box.lo(j), box.hi(j), res, i);
          const double l = closed_form_loss(env, loss, th);
          if (i == 0 || l < best_loss) {
            best_loss = l;
            best_coord = th(j);
          }
        }
        if (best_coord != best(j)) {
          best(j) = best_coord;
          moved = true;
        }
      }
      if (!moved) break;
    }
  }
  return {best, box};
}

namespace detail {

// damped Newton root finder with central-difference jacobians; the systems
// here are low-dimensional and smooth
inline Vec newton_root(const std::function<Vec(const Vec&)>& g, Vec x, double tol = 1e-10,
                       int max_iter = 200) {
  const double h = 1e-6;
  for (int it = 0; it < max_iter; ++it) {
    const Vec gx = g(x);
    if (gx.norm() <= tol) return x;
    const int p = static_cast<int>(x.size());
    Mat J(p, p);
    for (int j = 0; j < p; ++j) {
      Vec hi = x, lo = x;
      hi(j) += h;
      lo(j) -= h;
      J.col(j) = (g(hi) - g(lo)) / (2 * h);
    }
    Vec step = J.fullPivLu().solve(-gx);
    double alpha = 1.0;
    while (alpha > 1e-8 && g(x + alpha * step).norm() > (1 - 1e-4 * alpha) * gx.norm())
      alpha *= 0.5;
    x += alpha * step;
  }
  throw EstimError("root finder did not converge");
}

}  // namespace detail

// numeric counterpart for families without algebraic formulas: solves
// grad = 0 for the optimum and grad1 = 0 for the stable point
inline GroundTruth numeric_ground_truth(const EnvSpec& env, const LossSpec& loss) {
  const Vec start = centroid(env.domain);
  GroundTruth gt;
  const Vec opt = detail::newton_root(
      [&](const Vec& th) { return analytic_perf_grad(env, loss, th); }, start);
  const Vec stab = detail::newton_root(
      [&](const Vec& th) { return analytic_grad1(env, loss, th); }, start);
  gt.theta_opt = Params{project(opt, env.domain), env.domain};
  gt.theta_stab = Params{project(stab, env.domain), env.domain};
  gt.loss_at_opt = closed_form_loss(env, loss, gt.theta_opt->values);
  gt.loss_at_stab = closed_form_loss(env, loss, gt.theta_stab->values);
  return gt;
}

}  // namespace perfgd
