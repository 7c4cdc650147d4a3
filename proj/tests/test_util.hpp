#pragma once

#include <cstdint>

#include "htr/rng.hpp"
#include "htr/tensor.hpp"

namespace htr::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_integer_tensor(Shape shape, Rng& rng, int lo = -4, int hi = 4) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform_int(lo, hi);
  return t;
}

/// Random T×K row-stochastic matrix with entries bounded away from zero.
inline Tensor random_distribution(std::size_t frames, std::size_t classes, Rng& rng) {
  Tensor d({frames, classes});
  for (std::size_t t = 0; t < frames; ++t) {
    double z = 0;
    for (std::size_t k = 0; k < classes; ++k) z += (d(t, k) = rng.uniform(0.05, 1.0));
    for (std::size_t k = 0; k < classes; ++k) d(t, k) /= z;
  }
  return d;
}

}  // namespace htr::testing
