#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "lvt/core/tensor.hpp"

namespace lvt {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Independent stream for (seed, stream id); used so that per-item generation
// does not depend on iteration order or thread count.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(splitmix64(seed ^ splitmix64(stream + 0x5851F42D4C957F2Dull)));
}

// Uniform on the open interval (0, 1).
template <class S = double>
S uniform_open(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double v = u(rng);
  while (v <= 0.0) v = u(rng);
  return static_cast<S>(v);
}

template <class S = double>
S gumbel(Rng& rng) {
  return static_cast<S>(-std::log(-std::log(uniform_open<double>(rng))));
}

template <class S>
Tensor<S> randn(Shape shape, Rng& rng, S stddev = S{1}) {
  Tensor<S> t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.vec()) v = static_cast<S>(n(rng) * stddev);
  return t;
}

template <class S>
Tensor<S> rand_uniform(Shape shape, Rng& rng, S lo, S hi) {
  Tensor<S> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.vec()) v = static_cast<S>(u(rng));
  return t;
}

template <class S>
Tensor<S> gumbel_noise(Shape shape, Rng& rng) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.vec()) v = gumbel<S>(rng);
  return t;
}

}  // namespace lvt
