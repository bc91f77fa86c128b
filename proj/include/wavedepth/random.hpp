#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "wavedepth/tensor.hpp"

namespace wavedepth {

// Seeded generator with platform-independent uniform/normal draws (the
// standard distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next() % n); }

  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(shape);
    for (double& v : t.values()) v = uniform(lo, hi);
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

// Decorrelates consecutive integer seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace wavedepth
