#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "continua/tensor.hpp"

namespace continua {

/// Derives an independent stream seed from a base seed. Used to decouple
/// data generation, parameter init, shuffling and evaluation noise so that
/// changing one consumer does not shift the draws of another.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// mt19937_64 with hand-rolled output mappings. The engine is specified
/// bit-for-bit by the standard and the mappings below avoid
/// std::*_distribution, so draws are reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t integer() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// +1 or -1 with equal probability.
  double rademacher() { return (engine_() >> 63) ? 1.0 : -1.0; }

  /// Uniform index in [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) throw Error("Rng::index: empty range");
    const auto i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

  /// Fisher-Yates; std::shuffle is not seed-stable across implementations.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor randn(Rng& rng, Shape shape) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.normal();
  return Tensor::from_data(std::move(shape), std::move(d));
}

inline Tensor rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(d));
}

inline Tensor rand_rademacher(Rng& rng, Shape shape) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.rademacher();
  return Tensor::from_data(std::move(shape), std::move(d));
}

}  // namespace continua
