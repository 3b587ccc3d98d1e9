#pragma once

// Estimation of the sufficient statistic f(theta) from a batch and of its
// derivative df/dtheta from the deployment history. The Jacobian is the
// least-squares fit J = argmin ||J*dTheta - dF||_F over the last H deployments,
// differences anchored at the current (theta_t, fhat_t); solved via
// column-pivoted QR with orthogonal completion so rank-deficient histories get
// the minimum-norm solution.

#include <cstddef>
#include <deque>
#include <vector>

#include "env.hpp"
#include "types.hpp"

namespace perfgd {

// rolling window of past (theta_s, fhat_s) pairs, oldest first.
// capacity 0 means unbounded (full-trajectory retention).
class History {
 public:
  explicit History(std::size_t capacity = 0) : cap_(capacity) {}

  void push(const Vec& theta, const Vec& fhat) {
    entries_.push_back({theta, fhat});
    if (cap_ > 0 && entries_.size() > cap_) entries_.pop_front();
  }
  void push(const Params& theta, const Vec& fhat) { push(theta.values, fhat); }
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return cap_; }
  const Vec& theta(std::size_t i) const { return entries_[i].theta; }
  const Vec& fhat(std::size_t i) const { return entries_[i].fhat; }

 private:
  struct Entry {
    Vec theta, fhat;
  };
  std::deque<Entry> entries_;
  std::size_t cap_;
};

struct JacobianEstimate {
  Mat matrix;                // k x p estimate of df/dtheta
  double residual = 0;       // Frobenius norm of the least-squares residual
  int rank = 0;              // effective rank of dTheta at the 1e-10 threshold
  bool underdetermined = false;  // fewer usable columns than p
  bool rank_deficient = false;
};

// sample mean per component (concatenated in fixed component order)
inline Vec estimate_f(const Batch& b, const EnvSpec& spec) {
  if (b.n() < 1) throw EstimError("empty batch");
  switch (spec.family) {
    case Family::GaussianMixture: {
      if (!b.clusters) throw EstimError("mixture batch lacks cluster assignments");
      Vec sum = Vec::Zero(2);
      Eigen::Vector2i cnt(0, 0);
      for (int i = 0; i < b.n(); ++i) {
        const int c = (*b.clusters)(i);
        sum(c) += b.features(i, 0);
        cnt(c) += 1;
      }
      if (cnt(0) == 0 || cnt(1) == 0) throw EstimError("mixture component has no samples");
      return sum.array() / cnt.cast<double>().array();
    }
    case Family::Classification: {
      if (!b.labels) throw EstimError("classification batch lacks labels");
      Vec sum = Vec::Zero(2);
      Eigen::Vector2i cnt(0, 0);
      for (int i = 0; i < b.n(); ++i) {
        const int y = (*b.labels)(i);
        sum(y) += b.features(i, 0);
        cnt(y) += 1;
      }
      if (cnt(0) == 0 || cnt(1) == 0) throw EstimError("a label class has no samples");
      return sum.array() / cnt.cast<double>().array();
    }
    case Family::Regression:
      throw EstimError("regression statistic is beta; use estimate_beta");
    default:
      return b.features.colwise().mean().transpose();
  }
}

// ridge least squares of the last feature column on the preceding columns;
// ridge defaults to 0 (pure OLS)
inline Vec estimate_beta(const Batch& b, double ridge = 0.0) {
  const int p = b.d() - 1;
  if (p < 1) throw EstimError("batch has no regressors");
  if (b.n() <= p) throw EstimError("need more samples than regressors");
  const auto X = b.features.leftCols(p);
  const Vec y = b.features.col(p);
  Mat A = X.transpose() * X + ridge * Mat::Identity(p, p);
  Eigen::FullPivLU<Mat> lu(A);
  if (!lu.isInvertible()) throw EstimError("singular normal equations (ridge = 0)");
  return lu.solve(X.transpose() * y);
}

namespace detail {

// shared least-squares core: columns of dTh/dF are per-deployment differences
inline JacobianEstimate solve_jacobian(const Mat& dTh, const Mat& dF, int p) {
  // drop columns with exactly zero parameter movement
  std::vector<int> keep;
  for (int j = 0; j < dTh.cols(); ++j)
    if (!dTh.col(j).isZero(0.0)) keep.push_back(j);
  if (keep.empty()) throw EstimError("degenerate history: no parameter movement");

  const int m = static_cast<int>(keep.size());
  Mat A(m, dTh.rows()), B(m, dF.rows());
  for (int j = 0; j < m; ++j) {
    A.row(j) = dTh.col(keep[j]).transpose();
    B.row(j) = dF.col(keep[j]).transpose();
  }

  Eigen::CompleteOrthogonalDecomposition<Mat> cod;
  cod.setThreshold(1e-10);
  cod.compute(A);
  const Mat X = cod.solve(B);  // p x k, minimum-norm least squares

  JacobianEstimate est;
  est.matrix = X.transpose();
  est.residual = (A * X - B).norm();
  est.rank = static_cast<int>(cod.rank());
  est.underdetermined = m < p;
  est.rank_deficient = est.rank < std::min(m, p);
  return est;
}

}  // namespace detail

// df/dtheta ~ dF * pinv(dTh) from the last min(H, available) history entries,
// all differences taken against the current (theta_t, fhat_t)
inline JacobianEstimate finite_diff_jacobian(const History& hist, const Vec& theta_t,
                                             const Vec& fhat_t, std::size_t H) {
  if (hist.size() == 0) throw EstimError("empty history");
  const std::size_t m = std::min<std::size_t>(H, hist.size());
  const int p = static_cast<int>(theta_t.size());
  const int k = static_cast<int>(fhat_t.size());
  Mat dTh(p, m), dF(k, m);
  const std::size_t first = hist.size() - m;
  for (std::size_t j = 0; j < m; ++j) {
    dTh.col(j) = hist.theta(first + j) - theta_t;
    dF.col(j) = hist.fhat(first + j) - fhat_t;
  }
  return detail::solve_jacobian(dTh, dF, p);
}

inline JacobianEstimate finite_diff_jacobian(const History& hist, const Params& theta_t,
                                             const Vec& fhat_t, std::size_t H) {
  return finite_diff_jacobian(hist, theta_t.values, fhat_t, H);
}

// split variant: the deployment-t batch was partitioned into parts with
// independent estimates fhat_t_parts[i]; pair i uses the i-th most recent
// history entry, so per-column errors are independent
inline JacobianEstimate finite_diff_jacobian_split(const History& hist, const Vec& theta_t,
                                                   const std::vector<Vec>& fhat_t_parts,
                                                   std::size_t H) {
  if (hist.size() == 0) throw EstimError("empty history");
  if (fhat_t_parts.empty()) throw EstimError("no split estimates");
  const std::size_t m = std::min({H, hist.size(), fhat_t_parts.size()});
  const int p = static_cast<int>(theta_t.size());
  const int k = static_cast<int>(fhat_t_parts[0].size());
  Mat dTh(p, m), dF(k, m);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t idx = hist.size() - 1 - i;
    dTh.col(i) = hist.theta(idx) - theta_t;
    dF.col(i) = hist.fhat(idx) - fhat_t_parts[i];
  }
  return detail::solve_jacobian(dTh, dF, p);
}

}  // namespace perfgd
