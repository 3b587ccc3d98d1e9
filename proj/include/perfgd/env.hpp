#pragma once

// Synthetic decision-dependent data models. Each family maps a parameter
// vector theta to a sampling distribution D(theta) whose sufficient statistic
// f(theta) (component means, or the regression coefficient beta) is known in
// closed form, so estimators can be tested against ground truth.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "types.hpp"

namespace perfgd {

enum class Family {
  LinearMeanGaussian,   // z ~ N(a1 th + a0, sigma2), scalar
  SqrtMeanGaussian,     // z ~ N(sqrt(a1 th + a0), sigma2), scalar
  GaussianMixture,      // two 1-D components with affine means
  Pricing,              // z ~ N(mu0 - eps th, Sigma), d-dim demand
  Classification,       // y ~ Bern(gamma); x | y=1 ~ N(mu1 - eps th_1, var1)
  Regression,           // x ~ N(x_mean, x_var); y = (b0 + b1 th) x + noise
};

// axis-aligned box Theta with Euclidean projection (coordinatewise clamp)
struct Box {
  Vec lo, hi;
  int dim() const { return static_cast<int>(lo.size()); }
};

struct Params {
  Vec values;
  Box domain;
};

inline Box make_box(double lo, double hi, int dim = 1) {
  return {Vec::Constant(dim, lo), Vec::Constant(dim, hi)};
}

inline Vec centroid(const Box& b) { return 0.5 * (b.lo + b.hi); }

inline Vec project(const Vec& v, const Box& b) {
  return v.cwiseMax(b.lo).cwiseMin(b.hi);
}

inline Params project(const Params& p) {
  return {project(p.values, p.domain), p.domain};
}

struct Batch {
  Mat features;                   // n x d; for Regression the columns are (x, y)
  std::optional<IVec> labels;     // Classification y in {0,1}
  std::optional<IVec> clusters;   // GaussianMixture component ids
  int n() const { return static_cast<int>(features.rows()); }
  int d() const { return static_cast<int>(features.cols()); }
};

struct RngSeed {
  std::uint64_t seed = 0;
};

struct LinearMeanSpec { double a1 = 0, a0 = 0, sigma2 = 1; };
struct SqrtMeanSpec { double a1 = 0, a0 = 0, sigma2 = 1; };
struct MixtureComponent { double a1 = 0, a0 = 0, var = 1; };
struct MixtureSpec {
  double gamma = 0.5;             // weight of component 1
  MixtureComponent c1, c2;
};
struct PricingSpec {
  Vec mu0;
  double eps = 0;                 // price sensitivity
  Mat Sigma;                      // demand covariance, SPD
};
struct ClassificationSpec {
  double gamma = 0.5;             // P(y = 1), the performative class
  double mu0 = 0, var0 = 1;       // x | y=0, fixed
  double mu1 = 0, var1 = 1;       // x | y=1 has mean mu1 - eps*theta_1
  double eps = 0;
};
struct RegressionSpec {
  double x_mean = 0, x_var = 1;
  double b0 = 0, b1 = 0;          // beta(theta) = b0 + b1*theta
  double noise_var = 1;
};

struct EnvSpec {
  Family family = Family::LinearMeanGaussian;
  std::variant<LinearMeanSpec, SqrtMeanSpec, MixtureSpec, PricingSpec,
               ClassificationSpec, RegressionSpec>
      model;
  Box domain;

  static EnvSpec linear_mean(double a1, double a0, double sigma2, Box box) {
    return {Family::LinearMeanGaussian, LinearMeanSpec{a1, a0, sigma2}, std::move(box)};
  }
  static EnvSpec sqrt_mean(double a1, double a0, double sigma2, Box box) {
    return {Family::SqrtMeanGaussian, SqrtMeanSpec{a1, a0, sigma2}, std::move(box)};
  }
  static EnvSpec mixture(double gamma, MixtureComponent c1, MixtureComponent c2, Box box) {
    return {Family::GaussianMixture, MixtureSpec{gamma, c1, c2}, std::move(box)};
  }
  static EnvSpec pricing(Vec mu0, double eps, Mat Sigma, Box box) {
    return {Family::Pricing, PricingSpec{std::move(mu0), eps, std::move(Sigma)}, std::move(box)};
  }
  static EnvSpec classification(double gamma, double mu0, double var0, double mu1,
                                double var1, double eps, Box box) {
    return {Family::Classification, ClassificationSpec{gamma, mu0, var0, mu1, var1, eps},
            std::move(box)};
  }
  static EnvSpec regression(double x_mean, double x_var, double b0, double b1,
                            double noise_var, Box box) {
    return {Family::Regression, RegressionSpec{x_mean, x_var, b0, b1, noise_var},
            std::move(box)};
  }
};

// parameter dimension p
inline int param_dim(const EnvSpec& s) {
  switch (s.family) {
    case Family::Pricing: return static_cast<int>(std::get<PricingSpec>(s.model).mu0.size());
    case Family::Classification: return 2;
    default: return 1;
  }
}

// dimension k of the sufficient statistic f(theta)
inline int stat_dim(const EnvSpec& s) {
  switch (s.family) {
    case Family::GaussianMixture: return 2;
    case Family::Pricing: return static_cast<int>(std::get<PricingSpec>(s.model).mu0.size());
    case Family::Classification: return 2;
    default: return 1;
  }
}

// sample-space dimension of one batch row
inline int feature_dim(const EnvSpec& s) {
  switch (s.family) {
    case Family::Pricing: return static_cast<int>(std::get<PricingSpec>(s.model).mu0.size());
    case Family::Regression: return 2;
    default: return 1;
  }
}

inline void validate(const EnvSpec& s) {
  const int p = param_dim(s);
  if (s.domain.lo.size() != p || s.domain.hi.size() != p)
    throw SpecError("domain box dimension does not match parameter dimension");
  if ((s.domain.lo.array() > s.domain.hi.array()).any())
    throw SpecError("domain box has lo > hi");
  switch (s.family) {
    case Family::LinearMeanGaussian:
      if (std::get<LinearMeanSpec>(s.model).sigma2 <= 0) throw SpecError("sigma2 must be positive");
      break;
    case Family::SqrtMeanGaussian:
      if (std::get<SqrtMeanSpec>(s.model).sigma2 <= 0) throw SpecError("sigma2 must be positive");
      break;
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(s.model);
      if (!(m.gamma > 0 && m.gamma < 1)) throw SpecError("mixture weight must lie in (0,1)");
      if (m.c1.var <= 0 || m.c2.var <= 0) throw SpecError("component variances must be positive");
      break;
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(s.model);
      if (m.Sigma.rows() != m.mu0.size() || m.Sigma.cols() != m.mu0.size())
        throw SpecError("pricing covariance dimension mismatch");
      if (!m.Sigma.isApprox(m.Sigma.transpose()))
        throw SpecError("pricing covariance must be symmetric");
      Eigen::LLT<Mat> llt(m.Sigma);
      if (llt.info() != Eigen::Success)
        throw SpecError("pricing covariance must be positive definite");
      break;
    }
    case Family::Classification: {
      const auto& m = std::get<ClassificationSpec>(s.model);
      if (!(m.gamma > 0 && m.gamma < 1)) throw SpecError("label frequency must lie in (0,1)");
      if (m.var0 <= 0 || m.var1 <= 0) throw SpecError("class variances must be positive");
      break;
    }
    case Family::Regression: {
      const auto& m = std::get<RegressionSpec>(s.model);
      if (m.x_var <= 0 || m.noise_var <= 0) throw SpecError("variances must be positive");
      break;
    }
  }
}

namespace detail {
inline double sqrt_mean_arg(const SqrtMeanSpec& m, double th) {
  const double a = m.a1 * th + m.a0;
  if (a < 0) throw DomainError("sqrt-mean argument a1*theta + a0 is negative");
  return a;
}
}  // namespace detail

// exact sufficient statistic: component mean(s), or beta(theta) for Regression
inline Vec true_f(const EnvSpec& s, const Vec& th) {
  switch (s.family) {
    case Family::LinearMeanGaussian: {
      const auto& m = std::get<LinearMeanSpec>(s.model);
      return Vec::Constant(1, m.a1 * th(0) + m.a0);
    }
    case Family::SqrtMeanGaussian: {
      const auto& m = std::get<SqrtMeanSpec>(s.model);
      return Vec::Constant(1, std::sqrt(detail::sqrt_mean_arg(m, th(0))));
    }
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(s.model);
      Vec f(2);
      f << m.c1.a1 * th(0) + m.c1.a0, m.c2.a1 * th(0) + m.c2.a0;
      return f;
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(s.model);
      return m.mu0 - m.eps * th;
    }
    case Family::Classification: {
      const auto& m = std::get<ClassificationSpec>(s.model);
      Vec f(2);
      f << m.mu0, m.mu1 - m.eps * th(1);
      return f;
    }
    case Family::Regression: {
      const auto& m = std::get<RegressionSpec>(s.model);
      return Vec::Constant(1, m.b0 + m.b1 * th(0));
    }
  }
  throw SpecError("unknown family");
}

// exact df/dtheta, k x p
inline Mat true_jacobian(const EnvSpec& s, const Vec& th) {
  switch (s.family) {
    case Family::LinearMeanGaussian:
      return Mat::Constant(1, 1, std::get<LinearMeanSpec>(s.model).a1);
    case Family::SqrtMeanGaussian: {
      const auto& m = std::get<SqrtMeanSpec>(s.model);
      const double a = detail::sqrt_mean_arg(m, th(0));
      return Mat::Constant(1, 1, m.a1 / (2.0 * std::sqrt(a)));
    }
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(s.model);
      Mat j(2, 1);
      j << m.c1.a1, m.c2.a1;
      return j;
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(s.model);
      const int d = static_cast<int>(m.mu0.size());
      return -m.eps * Mat::Identity(d, d);
    }
    case Family::Classification: {
      Mat j = Mat::Zero(2, 2);
      j(1, 1) = -std::get<ClassificationSpec>(s.model).eps;
      return j;
    }
    case Family::Regression:
      return Mat::Constant(1, 1, std::get<RegressionSpec>(s.model).b1);
  }
  throw SpecError("unknown family");
}

// nonzero block of df/dtheta the finite-difference estimator should fit; all
// entries outside stat_rows x param_cols are structurally zero
struct JacobianSupport {
  std::vector<int> stat_rows, param_cols;
};

inline JacobianSupport jacobian_support(const EnvSpec& s) {
  if (s.family == Family::Classification) return {{1}, {1}};
  JacobianSupport sup;
  for (int i = 0; i < stat_dim(s); ++i) sup.stat_rows.push_back(i);
  for (int j = 0; j < param_dim(s); ++j) sup.param_cols.push_back(j);
  return sup;
}

// known sampling-noise covariance for the single-population families
inline Mat noise_covariance(const EnvSpec& s) {
  switch (s.family) {
    case Family::LinearMeanGaussian:
      return Mat::Constant(1, 1, std::get<LinearMeanSpec>(s.model).sigma2);
    case Family::SqrtMeanGaussian:
      return Mat::Constant(1, 1, std::get<SqrtMeanSpec>(s.model).sigma2);
    case Family::Pricing:
      return std::get<PricingSpec>(s.model).Sigma;
    default:
      throw SpecError("family has per-component noise; use noise_comp_vars");
  }
}

// known per-component variances for the clustered and labeled families
inline Vec noise_comp_vars(const EnvSpec& s) {
  Vec v(2);
  switch (s.family) {
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(s.model);
      v << m.c1.var, m.c2.var;
      return v;
    }
    case Family::Classification: {
      const auto& m = std::get<ClassificationSpec>(s.model);
      v << m.var0, m.var1;
      return v;
    }
    default:
      throw SpecError("family has a single noise covariance; use noise_covariance");
  }
}

inline Batch sample(const EnvSpec& s, const Vec& th, int n, RngSeed seed) {
  if (n < 1) throw SpecError("sample size must be at least 1");
  validate(s);
  std::mt19937_64 rng(seed.seed);
  std::normal_distribution<double> stdn(0.0, 1.0);
  Batch b;
  switch (s.family) {
    case Family::LinearMeanGaussian: {
      const auto& m = std::get<LinearMeanSpec>(s.model);
      const double mu = m.a1 * th(0) + m.a0, sd = std::sqrt(m.sigma2);
      b.features.resize(n, 1);
      for (int i = 0; i < n; ++i) b.features(i, 0) = mu + sd * stdn(rng);
      break;
    }
    case Family::SqrtMeanGaussian: {
      const auto& m = std::get<SqrtMeanSpec>(s.model);
      const double mu = std::sqrt(detail::sqrt_mean_arg(m, th(0)));
      const double sd = std::sqrt(m.sigma2);
      b.features.resize(n, 1);
      for (int i = 0; i < n; ++i) b.features(i, 0) = mu + sd * stdn(rng);
      break;
    }
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(s.model);
      const double mu1 = m.c1.a1 * th(0) + m.c1.a0, sd1 = std::sqrt(m.c1.var);
      const double mu2 = m.c2.a1 * th(0) + m.c2.a0, sd2 = std::sqrt(m.c2.var);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      b.features.resize(n, 1);
      IVec cl(n);
      for (int i = 0; i < n; ++i) {
        const bool first = unif(rng) < m.gamma;
        cl(i) = first ? 0 : 1;
        b.features(i, 0) = first ? mu1 + sd1 * stdn(rng) : mu2 + sd2 * stdn(rng);
      }
      b.clusters = cl;
      break;
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(s.model);
      const int d = static_cast<int>(m.mu0.size());
      Eigen::LLT<Mat> llt(m.Sigma);
      const Mat L = llt.matrixL();
      const Vec mu = m.mu0 - m.eps * th;
      b.features.resize(n, d);
      Vec u(d);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) u(j) = stdn(rng);
        b.features.row(i) = (mu + L * u).transpose();
      }
      break;
    }
    case Family::Classification: {
      const auto& m = std::get<ClassificationSpec>(s.model);
      const double fmu = m.mu1 - m.eps * th(1);
      const double sd0 = std::sqrt(m.var0), sd1 = std::sqrt(m.var1);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      b.features.resize(n, 1);
      IVec y(n);
      for (int i = 0; i < n; ++i) {
        const bool spam = unif(rng) < m.gamma;
        y(i) = spam ? 1 : 0;
        b.features(i, 0) = spam ? fmu + sd1 * stdn(rng) : m.mu0 + sd0 * stdn(rng);
      }
      b.labels = y;
      break;
    }
    case Family::Regression: {
      const auto& m = std::get<RegressionSpec>(s.model);
      const double beta = m.b0 + m.b1 * th(0);
      const double sdx = std::sqrt(m.x_var), sdy = std::sqrt(m.noise_var);
      b.features.resize(n, 2);
      for (int i = 0; i < n; ++i) {
        const double x = m.x_mean + sdx * stdn(rng);
        b.features(i, 0) = x;
        b.features(i, 1) = beta * x + sdy * stdn(rng);
      }
      break;
    }
  }
  return b;
}

}  // namespace perfgd
