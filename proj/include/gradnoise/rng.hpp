#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace gradnoise {

// Seed splitting rule: derive_seed(seed, stream) = splitmix64(seed ^ splitmix64(stream)).
// Every sub-seed in the project (datasets, runs, oracle samples, probes) is
// produced this way, so a single run can be reproduced in isolation.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

// Stream identifiers used with derive_seed.
namespace stream {
inline constexpr std::uint64_t kBatch = 1;
inline constexpr std::uint64_t kNoise = 2;
inline constexpr std::uint64_t kOracle = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kTeacher = 5;
inline constexpr std::uint64_t kProbe = 6;
inline constexpr std::uint64_t kSubset = 7;
inline constexpr std::uint64_t kDatasetBase = 1000;
inline constexpr std::uint64_t kRunBase = 2000;
}  // namespace stream

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd out(d);
  for (Eigen::Index i = 0; i < d; ++i) out[i] = normal(rng);
  return out;
}

}  // namespace gradnoise
