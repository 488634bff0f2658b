#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "sparseiv/math.hpp"

namespace sparseiv {

/// splitmix64 finalizer; used to turn (base seed, index) pairs into
/// well-separated stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return mix_seed(base + 0x9E3779B97F4A7C15ULL * (index + 1));
}

/// Deterministic normal/uniform sampler. mt19937_64 output is fully
/// specified by the standard and the normal transform is the inverse CDF,
/// so streams are reproducible across platforms and thread schedules.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform() {  // strictly inside (0,1)
    const std::uint64_t u = gen_() >> 11;
    return (static_cast<double>(u) + 0.5) * 0x1.0p-53;
  }

  double normal() { return normal_quantile(uniform()); }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  std::uint64_t raw() { return gen_(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = gen_();
    } while (r >= limit);
    return r % n;
  }

  /// Fisher-Yates shuffle of 0..n-1.
  std::vector<int> permutation(int n) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(below(static_cast<std::uint64_t>(i) + 1));
      std::swap(idx[i], idx[j]);
    }
    return idx;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace sparseiv
