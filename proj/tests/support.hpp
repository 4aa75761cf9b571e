#pragma once

#include <cmath>
#include <random>

#include "spiboter/autodiff.hpp"

namespace testing {

using spiboter::ad::Array;
using spiboter::ad::Shape;
using spiboter::ad::Value;

inline Array random_array(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Array a(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& x : a.data()) x = u(rng);
  return a;
}

// Reduces a tensor to a scalar with fixed random weights so that every
// entry gets a distinct, non-trivial upstream gradient.
inline Value probe(const Value& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return spiboter::ad::sum(v * spiboter::ad::constant(random_array(v.shape(), rng)));
}

inline double max_abs_diff(const Array& a, const Array& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace testing
