#pragma once

// Point losses and the two halves of the performative gradient. grad1 is the
// ordinary parameter gradient at a frozen batch. grad2 is the distribution
// shift term, estimated either from the gaussian closed form or from a
// user-supplied log-density score; the two paths run the same operation
// sequence so they agree bitwise when given the gaussian score.

#include <cmath>
#include <functional>
#include <memory>

#include "env.hpp"
#include "estim.hpp"
#include "types.hpp"

namespace perfgd {

enum class LossKind { LinearRevenue, RidgeCrossEntropy, RidgeSquared };

struct LossSpec {
  LossKind kind = LossKind::LinearRevenue;
  double lambda = 0;  // ridge weight
  double sign = -1;   // orientation of the linear loss (-1: revenue maximized)
};

inline LossSpec linear_revenue(double sign = -1.0) {
  return {LossKind::LinearRevenue, 0.0, sign};
}
inline LossSpec ridge_xent(double lambda) { return {LossKind::RidgeCrossEntropy, lambda, 1.0}; }
inline LossSpec ridge_squared(double lambda) { return {LossKind::RidgeSquared, lambda, 1.0}; }

namespace detail {

inline double softplus(double u) { return std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u))); }
inline double sigmoid(double u) {
  return u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
}

inline int component_of(const Batch& b, int i) {
  if (b.clusters) return (*b.clusters)(i);
  if (b.labels) return (*b.labels)(i);
  return 0;
}

}  // namespace detail

// label-free point loss; for the squared loss z packs (x..., y)
inline double loss_value(const LossSpec& loss, const Vec& z, const Vec& theta) {
  switch (loss.kind) {
    case LossKind::LinearRevenue:
      return loss.sign * theta.dot(z);
    case LossKind::RidgeSquared: {
      const int p = static_cast<int>(z.size()) - 1;
      const double r = theta.dot(z.head(p)) - z(p);
      return 0.5 * r * r + 0.5 * loss.lambda * theta.squaredNorm();
    }
    case LossKind::RidgeCrossEntropy:
      throw SpecError("cross-entropy loss needs a label");
  }
  throw SpecError("unknown loss kind");
}

// binary cross-entropy on the score theta_0 + theta_1 * x, plus ridge
inline double loss_value(const LossSpec& loss, const Vec& x, int label, const Vec& theta) {
  if (loss.kind != LossKind::RidgeCrossEntropy) return loss_value(loss, x, theta);
  const double u = theta(0) + theta(1) * x(0);
  return detail::softplus(u) - label * u + 0.5 * loss.lambda * theta.squaredNorm();
}

inline Vec batch_losses(const Batch& b, const Vec& theta, const LossSpec& loss) {
  Vec out(b.n());
  if (loss.kind == LossKind::RidgeCrossEntropy) {
    if (!b.labels) throw SpecError("cross-entropy loss needs labels");
    for (int i = 0; i < b.n(); ++i)
      out(i) = loss_value(loss, b.features.row(i).transpose(), (*b.labels)(i), theta);
  } else {
    for (int i = 0; i < b.n(); ++i)
      out(i) = loss_value(loss, b.features.row(i).transpose(), theta);
  }
  return out;
}

inline double mean_loss(const Batch& b, const Vec& theta, const LossSpec& loss) {
  return batch_losses(b, theta, loss).mean();
}

// batch average of the per-sample parameter gradient, distribution held fixed
inline Vec grad1(const Batch& b, const Vec& theta, const LossSpec& loss) {
  switch (loss.kind) {
    case LossKind::LinearRevenue:
      return loss.sign * b.features.colwise().mean().transpose();
    case LossKind::RidgeSquared: {
      const int p = b.d() - 1;
      const auto X = b.features.leftCols(p);
      const Vec r = X * theta - b.features.col(p);
      return Vec(X.transpose() * r / b.n() + loss.lambda * theta);
    }
    case LossKind::RidgeCrossEntropy: {
      if (!b.labels) throw SpecError("cross-entropy loss needs labels");
      Vec acc = Vec::Zero(2);
      for (int i = 0; i < b.n(); ++i) {
        const double x = b.features(i, 0);
        const double d = detail::sigmoid(theta(0) + theta(1) * x) - (*b.labels)(i);
        acc(0) += d;
        acc(1) += d * x;
      }
      return Vec(acc / b.n() + loss.lambda * theta);
    }
  }
  throw SpecError("unknown loss kind");
}

struct GradEstimate {
  Vec grad1;  // frozen-distribution term
  Vec grad2;  // distribution-shift term
  Vec total;
};

// closed-form gaussian shift term, one population with covariance Sigma:
// (1/n) sum_i loss_i * J' Sigma^{-1} (z_i - fhat)
inline Vec grad2_gaussian(const Batch& b, const Vec& theta, const LossSpec& loss,
                          const Vec& fhat, const Mat& J, const Mat& Sigma) {
  Eigen::LLT<Mat> llt(Sigma);
  if (llt.info() != Eigen::Success) throw EstimError("noise covariance not positive definite");
  const Vec l = batch_losses(b, theta, loss);
  Vec acc = Vec::Zero(J.cols());
  for (int i = 0; i < b.n(); ++i) {
    const Vec z = b.features.row(i).transpose();
    const Vec score = llt.solve(z - fhat);
    acc.noalias() += l(i) * (J.transpose() * score);
  }
  return acc / b.n();
}

// per-component variant: scalar feature, component from cluster or label, each
// sample scores only its own component's mean; summing samples componentwise
// and dividing by n is the (n_c/n)-weighted sum of per-component estimators
inline Vec grad2_gaussian(const Batch& b, const Vec& theta, const LossSpec& loss,
                          const Vec& fhat, const Mat& J, const Vec& comp_vars) {
  const Vec l = batch_losses(b, theta, loss);
  Vec acc = Vec::Zero(J.cols());
  for (int i = 0; i < b.n(); ++i) {
    const Vec z = b.features.row(i).transpose();
    const int c = detail::component_of(b, i);
    Vec score = Vec::Zero(fhat.size());
    score(c) = (z(0) - fhat(c)) / comp_vars(c);
    acc.noalias() += l(i) * (J.transpose() * score);
  }
  return acc / b.n();
}

inline Vec grad2_gaussian(const Batch& b, const Vec& theta, const LossSpec& loss,
                          const Vec& fhat, const JacobianEstimate& J, const Mat& Sigma) {
  return grad2_gaussian(b, theta, loss, fhat, J.matrix, Sigma);
}
inline Vec grad2_gaussian(const Batch& b, const Vec& theta, const LossSpec& loss,
                          const Vec& fhat, const JacobianEstimate& J, const Vec& comp_vars) {
  return grad2_gaussian(b, theta, loss, fhat, J.matrix, comp_vars);
}

// gradient of log p(z | f) with respect to the statistic f
using ScoreFn = std::function<Vec(const Vec& z, const Vec& fhat, int comp)>;

inline ScoreFn gaussian_scores(const Mat& Sigma) {
  auto llt = std::make_shared<Eigen::LLT<Mat>>(Sigma);
  if (llt->info() != Eigen::Success) throw EstimError("noise covariance not positive definite");
  return [llt](const Vec& z, const Vec& fhat, int) { return Vec(llt->solve(z - fhat)); };
}

inline ScoreFn gaussian_scores(const Vec& comp_vars) {
  return [comp_vars](const Vec& z, const Vec& fhat, int comp) {
    Vec score = Vec::Zero(fhat.size());
    score(comp) = (z(0) - fhat(comp)) / comp_vars(comp);
    return score;
  };
}

// score-function shift term: (1/n) sum_i loss_i * J' score(z_i)
inline Vec grad2_reinforce(const Batch& b, const Vec& theta, const LossSpec& loss,
                           const Vec& fhat, const Mat& J, const ScoreFn& score_fn) {
  const Vec l = batch_losses(b, theta, loss);
  Vec acc = Vec::Zero(J.cols());
  for (int i = 0; i < b.n(); ++i) {
    const Vec z = b.features.row(i).transpose();
    const Vec score = score_fn(z, fhat, detail::component_of(b, i));
    if (!score.allFinite()) throw EstimError("non-finite log-density score");
    acc.noalias() += l(i) * (J.transpose() * score);
  }
  return acc / b.n();
}

inline Vec grad2_reinforce(const Batch& b, const Vec& theta, const LossSpec& loss,
                           const Vec& fhat, const JacobianEstimate& J, const ScoreFn& score_fn) {
  return grad2_reinforce(b, theta, loss, fhat, J.matrix, score_fn);
}

// shift term for the regression statistic: y rides on beta(theta), x does not,
// so the per-sample shift contribution is -(theta'x - y) * Jbeta' x
inline Vec grad2_regression(const Batch& b, const Vec& theta, const LossSpec& loss,
                            const Mat& Jbeta) {
  if (loss.kind != LossKind::RidgeSquared)
    throw SpecError("reparameterized shift term applies to the squared loss");
  const int p = b.d() - 1;
  Vec acc = Vec::Zero(Jbeta.cols());
  for (int i = 0; i < b.n(); ++i) {
    const Vec x = b.features.row(i).head(p).transpose();
    const double r = b.features(i, p) - theta.dot(x);
    acc.noalias() += r * (Jbeta.transpose() * x);
  }
  return acc / b.n();
}

// full reparameterized performative gradient; beta itself does not enter the
// formula (y carries it), it is accepted to keep the call shape uniform
inline Vec grad_regression(const Batch& b, const Vec& theta, const LossSpec& loss,
                           const Vec& /*beta*/, const Mat& Jbeta) {
  return grad1(b, theta, loss) + grad2_regression(b, theta, loss, Jbeta);
}
inline Vec grad_regression(const Batch& b, const Vec& theta, const LossSpec& loss,
                           const Vec& beta, const JacobianEstimate& Jbeta) {
  return grad_regression(b, theta, loss, beta, Jbeta.matrix);
}

// sample covariance (one population) for the estimated-covariance ablation
inline Mat sample_covariance(const Batch& b) {
  if (b.n() < 2) throw EstimError("need at least two samples for a covariance");
  const Mat centered = b.features.rowwise() - b.features.colwise().mean();
  return centered.transpose() * centered / (b.n() - 1);
}

// per-component sample variances for clustered or labeled scalar batches
inline Vec sample_comp_vars(const Batch& b, int k) {
  Vec sum = Vec::Zero(k), sumsq = Vec::Zero(k);
  Eigen::VectorXi cnt = Eigen::VectorXi::Zero(k);
  for (int i = 0; i < b.n(); ++i) {
    const int c = detail::component_of(b, i);
    sum(c) += b.features(i, 0);
    sumsq(c) += b.features(i, 0) * b.features(i, 0);
    cnt(c) += 1;
  }
  Vec out(k);
  for (int c = 0; c < k; ++c) {
    if (cnt(c) < 2) throw EstimError("a component has fewer than two samples");
    out(c) = (sumsq(c) - sum(c) * sum(c) / cnt(c)) / (cnt(c) - 1);
  }
  return out;
}

}  // namespace perfgd
