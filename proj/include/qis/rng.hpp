#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace qis {

// Deterministic RNG with engine-independent distributions, so identical seeds
// give bit-identical streams everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() {  // [0, 1)
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal(double mean = 0.0, double sigma = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + sigma * spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return mean + sigma * r * std::cos(2.0 * M_PI * u2);
  }

  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  // J distinct indices from [0, m), selection order randomized (Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t m, std::size_t j) {
    std::vector<std::size_t> pool(m);
    for (std::size_t i = 0; i < m; ++i) pool[i] = i;
    for (std::size_t i = 0; i < j; ++i) {
      std::size_t k = i + static_cast<std::size_t>(below(m - i));
      std::swap(pool[i], pool[k]);
    }
    pool.resize(j);
    return pool;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace qis
