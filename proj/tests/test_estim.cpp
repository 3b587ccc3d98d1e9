#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <vector>

#include "fixtures.hpp"
#include "perfgd/estim.hpp"

using namespace perfgd;
using fixtures::vec1;

namespace {

Batch scalar_batch(std::initializer_list<double> xs) {
  Batch b;
  b.features = Mat(static_cast<int>(xs.size()), 1);
  int i = 0;
  for (double x : xs) b.features(i++, 0) = x;
  return b;
}

}  // namespace

TEST_CASE("History evicts oldest beyond capacity", "[estim]") {
  History h(3);
  for (int i = 0; i < 5; ++i) h.push(vec1(i), vec1(10.0 * i));
  REQUIRE(h.size() == 3);
  CHECK(h.theta(0)(0) == 2.0);
  CHECK(h.theta(2)(0) == 4.0);
  CHECK(h.fhat(1)(0) == 30.0);

  History unbounded;
  for (int i = 0; i < 5; ++i) unbounded.push(vec1(i), vec1(i));
  CHECK(unbounded.size() == 5);
}

TEST_CASE("estimate_f averages the batch", "[estim]") {
  EnvSpec lin = fixtures::linear_env();
  CHECK(estimate_f(scalar_batch({2, 2, 2}), lin)(0) == 2.0);
  CHECK(estimate_f(scalar_batch({1, 2, 3, 6}), lin)(0) == 3.0);

  Batch empty;
  empty.features = Mat(0, 1);
  CHECK_THROWS_AS(estimate_f(empty, lin), EstimError);
}

TEST_CASE("estimate_f splits clustered and labeled batches", "[estim]") {
  Batch b = scalar_batch({1, 10, 3});
  IVec ids(3);
  ids << 0, 1, 0;

  SECTION("mixture clusters") {
    b.clusters = ids;
    Vec f = estimate_f(b, fixtures::mixture_env());
    REQUIRE(f.size() == 2);
    CHECK(f(0) == 2.0);
    CHECK(f(1) == 10.0);
  }

  SECTION("classification labels") {
    b.labels = ids;
    Vec f = estimate_f(b, fixtures::classification_env());
    CHECK(f(0) == 2.0);
    CHECK(f(1) == 10.0);
  }

  SECTION("missing assignments") {
    CHECK_THROWS_AS(estimate_f(b, fixtures::mixture_env()), EstimError);
    CHECK_THROWS_AS(estimate_f(b, fixtures::classification_env()), EstimError);
  }

  SECTION("empty component") {
    IVec all0 = IVec::Zero(3);
    b.clusters = all0;
    CHECK_THROWS_AS(estimate_f(b, fixtures::mixture_env()), EstimError);
    b.clusters.reset();
    b.labels = all0;
    CHECK_THROWS_AS(estimate_f(b, fixtures::classification_env()), EstimError);
  }
}

TEST_CASE("estimate_f rejects regression batches", "[estim]") {
  Batch b;
  b.features = Mat::Ones(4, 2);
  CHECK_THROWS_AS(estimate_f(b, fixtures::regression_env()), EstimError);
}

TEST_CASE("estimate_f is permutation invariant on integer data", "[estim]") {
  std::vector<double> xs = {3, 7, 11, 5, 2, 9, 4, 8};
  std::vector<int> cs = {0, 1, 0, 1, 0, 1, 0, 1};
  Batch a, b;
  a.features = Mat(8, 1);
  b.features = Mat(8, 1);
  IVec ca(8), cb(8);
  for (int i = 0; i < 8; ++i) {
    a.features(i, 0) = xs[i];
    ca(i) = cs[i];
    int j = 7 - i;
    b.features(i, 0) = xs[j];
    cb(i) = cs[j];
  }
  CHECK(estimate_f(a, fixtures::linear_env()) == estimate_f(b, fixtures::linear_env()));
  a.clusters = ca;
  b.clusters = cb;
  CHECK(estimate_f(a, fixtures::mixture_env()) == estimate_f(b, fixtures::mixture_env()));
}

TEST_CASE("estimate_beta solves the normal equations", "[estim]") {
  Batch b;
  b.features = Mat(3, 2);
  b.features << 1, 3, 2, 6, 3, 9;
  CHECK(estimate_beta(b)(0) == 3.0);

  b.features.col(1).setZero();
  CHECK(estimate_beta(b)(0) == 0.0);

  b.features << 1, 3, 2, 6, 3, 9;
  double ols = estimate_beta(b)(0);
  double shrunk = estimate_beta(b, 10.0)(0);
  CHECK(shrunk < ols);
  CHECK(shrunk > 0.0);

  Batch degenerate;
  degenerate.features = Mat::Zero(3, 2);
  degenerate.features.col(1).setOnes();
  CHECK_THROWS_AS(estimate_beta(degenerate), EstimError);

  Batch tiny;
  tiny.features = Mat::Ones(1, 2);
  CHECK_THROWS_AS(estimate_beta(tiny), EstimError);
}

TEST_CASE("estimate_beta residual is orthogonal to the regressors", "[estim]") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd(0.0, 1.0);
  Batch b;
  b.features = Mat(50, 3);
  for (int i = 0; i < 50; ++i) {
    double x0 = nd(rng), x1 = nd(rng);
    b.features(i, 0) = x0;
    b.features(i, 1) = x1;
    b.features(i, 2) = 2.0 * x0 - x1 + 0.3 * nd(rng);
  }
  Vec beta = estimate_beta(b);
  Vec resid = b.features.col(2) - b.features.leftCols(2) * beta;
  CHECK((b.features.leftCols(2).transpose() * resid).norm() < 1e-8);
}

TEST_CASE("estimate_beta recovers the reparametrized slope from samples", "[estim]") {
  EnvSpec env = fixtures::regression_env();
  Batch b = sample(env, vec1(0.0), 100000, RngSeed{77});
  Vec beta = estimate_beta(b);
  REQUIRE(beta.size() == 1);
  CHECK(std::abs(beta(0) - 1.67) < 0.05);
}

TEST_CASE("finite_diff_jacobian on a single secant", "[estim]") {
  History h;
  h.push(vec1(0.0), vec1(0.0));
  JacobianEstimate est = finite_diff_jacobian(h, vec1(0.1), vec1(0.2), 1);
  CHECK(est.matrix(0, 0) == Catch::Approx(2.0).margin(1e-12));
  CHECK(est.rank == 1);
  CHECK_FALSE(est.underdetermined);
  CHECK_FALSE(est.rank_deficient);

  Params p;
  p.values = vec1(0.1);
  CHECK(finite_diff_jacobian(h, p, vec1(0.2), 1).matrix == est.matrix);
}

TEST_CASE("finite_diff_jacobian of a constant map is zero", "[estim]") {
  History h;
  h.push(vec1(0.0), vec1(5.0));
  h.push(vec1(0.5), vec1(5.0));
  JacobianEstimate est = finite_diff_jacobian(h, vec1(1.0), vec1(5.0), 2);
  CHECK(est.matrix(0, 0) == 0.0);
  CHECK(est.residual == 0.0);
}

TEST_CASE("finite_diff_jacobian tracks a quadratic map's slope", "[estim]") {
  History h;
  for (double th : {0.8, 0.85, 0.9, 0.95}) h.push(vec1(th), vec1(th * th));
  JacobianEstimate est = finite_diff_jacobian(h, vec1(1.0), vec1(1.0), 4);
  CHECK(std::abs(est.matrix(0, 0) - 2.0) < 0.2);
}

TEST_CASE("finite_diff_jacobian is exact on affine maps", "[estim]") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat M(2, 3);
  M << 1.5, -0.3, 0.2, 0.0, 2.0, -1.1;
  Vec c(2);
  c << 0.4, -0.9;

  History h;
  for (int s = 0; s < 5; ++s) {
    Vec th(3);
    for (int i = 0; i < 3; ++i) th(i) = nd(rng);
    h.push(th, Vec(M * th + c));
  }
  Vec th_t(3);
  th_t << 0.1, 0.2, 0.3;
  JacobianEstimate est = finite_diff_jacobian(h, th_t, Vec(M * th_t + c), 5);
  CHECK((est.matrix - M).norm() < 1e-8 * M.norm());
  CHECK(est.rank == 3);
}

TEST_CASE("finite_diff_jacobian uses only the trailing window", "[estim]") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 1.0);
  History full, tail;
  for (int s = 0; s < 6; ++s) {
    Vec th = vec1(nd(rng)), f = vec1(nd(rng));
    full.push(th, f);
    if (s >= 3) tail.push(th, f);
  }
  JacobianEstimate a = finite_diff_jacobian(full, vec1(2.0), vec1(1.0), 3);
  JacobianEstimate b = finite_diff_jacobian(tail, vec1(2.0), vec1(1.0), 3);
  CHECK(a.matrix == b.matrix);
  CHECK(a.residual == b.residual);
}

TEST_CASE("finite_diff_jacobian drops zero-movement columns", "[estim]") {
  History h;
  h.push(vec1(0.5), vec1(9.0));  // same theta as the anchor, must be ignored
  h.push(vec1(0.0), vec1(0.0));
  JacobianEstimate est = finite_diff_jacobian(h, vec1(0.5), vec1(1.0), 2);
  CHECK(est.matrix(0, 0) == Catch::Approx(2.0).margin(1e-12));
  CHECK(est.rank == 1);
}

TEST_CASE("finite_diff_jacobian flags degenerate and deficient histories", "[estim]") {
  History empty;
  CHECK_THROWS_AS(finite_diff_jacobian(empty, vec1(0.0), vec1(0.0), 2), EstimError);

  History frozen;
  frozen.push(vec1(0.5), vec1(1.0));
  frozen.push(vec1(0.5), vec1(2.0));
  CHECK_THROWS_AS(finite_diff_jacobian(frozen, vec1(0.5), vec1(0.0), 2), EstimError);

  History single;
  Vec th0 = Vec::Zero(2);
  single.push(th0, vec1(0.0));
  Vec th_t(2);
  th_t << 1.0, 0.0;
  JacobianEstimate under = finite_diff_jacobian(single, th_t, vec1(3.0), 2);
  CHECK(under.underdetermined);
  CHECK(under.rank == 1);
  // minimum-norm solution puts nothing outside the observed direction
  CHECK(under.matrix(0, 0) == Catch::Approx(3.0).margin(1e-12));
  CHECK(under.matrix(0, 1) == Catch::Approx(0.0).margin(1e-12));

  History collinear;
  collinear.push(th0, vec1(0.0));
  Vec th1(2);
  th1 << 0.5, 0.0;
  collinear.push(th1, vec1(1.5));
  JacobianEstimate def = finite_diff_jacobian(collinear, th_t, vec1(3.0), 2);
  CHECK(def.rank == 1);
  CHECK(def.rank_deficient);
}

TEST_CASE("split estimator matches the plain one when estimates coincide", "[estim]") {
  History h;
  h.push(vec1(0.0), vec1(0.0));
  JacobianEstimate plain = finite_diff_jacobian(h, vec1(0.1), vec1(0.2), 1);
  JacobianEstimate split = finite_diff_jacobian_split(h, vec1(0.1), {vec1(0.2)}, 1);
  CHECK(plain.matrix == split.matrix);

  History h4;
  for (double th : {0.0, 0.2, 0.4, 0.6}) h4.push(vec1(th), vec1(3.0 * th));
  std::vector<Vec> parts(4, vec1(3.0 * 0.8));
  // split pairs columns newest-first, so agreement is exact only up to
  // the decomposition's column order
  JacobianEstimate p4 = finite_diff_jacobian(h4, vec1(0.8), vec1(3.0 * 0.8), 4);
  JacobianEstimate s4 = finite_diff_jacobian_split(h4, vec1(0.8), parts, 4);
  CHECK((p4.matrix - s4.matrix).norm() < 1e-12);

  CHECK_THROWS_AS(finite_diff_jacobian_split(h4, vec1(0.8), {}, 4), EstimError);
}

TEST_CASE("longer horizons shrink the split estimator's variance", "[estim]") {
  const double tau = 0.1, eta = 0.25;
  const int reps = 2000;
  std::mt19937_64 rng(101);
  std::normal_distribution<double> noise(0.0, tau);

  auto slope_var = [&](int H) {
    double sum = 0, sumsq = 0;
    for (int r = 0; r < reps; ++r) {
      History h;
      std::vector<Vec> parts;
      for (int s = 0; s < H; ++s) h.push(vec1(s * eta), vec1(s * eta + noise(rng)));
      for (int s = 0; s < H; ++s) parts.push_back(vec1(H * eta + noise(rng)));
      double j = finite_diff_jacobian_split(h, vec1(H * eta), parts, H).matrix(0, 0);
      sum += j;
      sumsq += j * j;
    }
    return sumsq / reps - (sum / reps) * (sum / reps);
  };

  double v2 = slope_var(2);
  double v8 = slope_var(8);
  CHECK(v8 < v2);
}
