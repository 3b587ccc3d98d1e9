#pragma once

// shared aliases, error types, and seed derivation for the perfgd library

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace perfgd {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using IVec = Eigen::VectorXi;

// malformed environment description (bad variance, non-PD covariance, ...)
struct SpecError : std::runtime_error {
  explicit SpecError(const std::string& m) : std::runtime_error(m) {}
};

// parameter outside the family's valid domain (e.g. negative value under sqrt)
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& m) : std::runtime_error(m) {}
};

// estimation cannot proceed (empty component, singular system, no movement)
struct EstimError : std::runtime_error {
  explicit EstimError(const std::string& m) : std::runtime_error(m) {}
};

// invalid experiment/optimizer configuration
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// sub-seed for deployment t of a trial; stable so trajectories do not depend
// on evaluation order
inline std::uint64_t derive_seed(std::uint64_t trial_seed, std::uint64_t t) {
  return splitmix64(splitmix64(trial_seed) ^ splitmix64(~t));
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace perfgd
