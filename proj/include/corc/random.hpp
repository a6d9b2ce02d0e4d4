#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace corc {

// Deterministic random stream. Distributions are implemented here rather
// than with std::*_distribution so that reports are byte-identical across
// standard library versions, not just across runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // splitmix-style warmup so nearby seeds decorrelate
    next_u64();
    next_u64();
  }

  // Derives an independent stream, e.g. one per Monte Carlo trial.
  static Rng for_trial(std::uint64_t base_seed, std::uint64_t trial_index) {
    return Rng(base_seed ^ (0x9E3779B97F4A7C15ull * (trial_index + 1)));
  }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // index in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  double normal() {
    // Box-Muller; one draw per call keeps the stream position predictable.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Student-t with `dof` degrees of freedom (dof >= 1), via normal / chi.
  double student_t(int dof) {
    const double z = normal();
    double chi2 = 0.0;
    for (int i = 0; i < dof; ++i) {
      const double g = normal();
      chi2 += g * g;
    }
    return z / std::sqrt(chi2 / static_cast<double>(dof));
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace corc
