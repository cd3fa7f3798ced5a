#pragma once

#include "ngkf/types.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace ngkf {

// Named consumer streams derived from one experiment seed.
enum class Stream : std::uint64_t {
  TrueParameters = 1,
  Inputs = 2,
  Observations = 3,
  MonteCarloFisher = 4,
  Initialization = 5,
  Tests = 99,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// mt19937_64 seeded with splitmix64(seed ^ splitmix64(stream)). Uniforms take
// the top 53 bits; normals use Box-Muller keeping only the cosine variate, so
// every draw consumes exactly two uniforms. The std:: distributions are not
// used because their output is implementation-defined.
class Rng {
 public:
  Rng(std::uint64_t seed, Stream stream)
      : engine_(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(stream)))) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1], safe for log.
  double uniform_open() { return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53; }

  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename Scalar = double>
  Vector<Scalar> normal_vector(Eigen::Index n) {
    Vector<Scalar> v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<Scalar>(normal());
    return v;
  }

  template <typename Scalar = double>
  Matrix<Scalar> normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix<Scalar> m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<Scalar>(normal());
    return m;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ngkf
