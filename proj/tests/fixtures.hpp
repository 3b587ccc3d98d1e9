#pragma once

#include <random>

#include "perfgd/env.hpp"

// the six reference environments used across the test suites; constants here
// are written out independently of the bench presets on purpose
namespace fixtures {

using perfgd::Box;
using perfgd::EnvSpec;
using perfgd::Mat;
using perfgd::MixtureComponent;
using perfgd::Vec;

inline EnvSpec linear_env(double a1 = 1.0, double a0 = 1.0, double sigma2 = 0.1) {
  return EnvSpec::linear_mean(a1, a0, sigma2, perfgd::make_box(-1.0, 1.0));
}

inline EnvSpec sqrt_env() {
  return EnvSpec::sqrt_mean(1.0, 1.0, 1.0, perfgd::make_box(-1.0, 1.0));
}

inline EnvSpec mixture_env() {
  return EnvSpec::mixture(0.5, MixtureComponent{1.0, -0.5, 1.0}, MixtureComponent{-0.3, 1.0, 0.25},
                          perfgd::make_box(-1.0, 1.0));
}

inline Vec pricing_mu0() {
  Vec mu0(5);
  mu0 << 6.55, 6.72, 6.60, 6.54, 6.42;
  return mu0;
}

inline EnvSpec pricing_env() {
  return EnvSpec::pricing(pricing_mu0(), 1.5, Mat::Identity(5, 5), perfgd::make_box(0.0, 5.0, 5));
}

inline EnvSpec classification_env() {
  return EnvSpec::classification(0.5, 1.0, 0.25, -1.0, 0.25, 3.0, perfgd::make_box(-5.0, 5.0, 2));
}

inline EnvSpec regression_env() {
  return EnvSpec::regression(1.67, 1.0, 1.67, 1.67, 4.12, perfgd::make_box(-10.0, 10.0));
}

inline Vec vec1(double x) { return Vec::Constant(1, x); }

inline Vec random_in_box(const Box& b, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec v(b.dim());
  for (int i = 0; i < b.dim(); ++i) v(i) = b.lo(i) + u(rng) * (b.hi(i) - b.lo(i));
  return v;
}

}  // namespace fixtures
