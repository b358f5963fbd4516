#pragma once

#include <algorithm>
#include <cmath>

#include "dhn/linalg.hpp"
#include "dhn/rng.hpp"
#include "doctest.h"

namespace dhn::testing {

// |a-b| within tol relative to the larger magnitude, floored at 1.
inline void check_close(double a, double b, double tol) {
  CAPTURE(a);
  CAPTURE(b);
  CAPTURE(tol);
  CHECK(std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)}));
}

inline Mat randm(int rows, int cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (double& v : m.a) v = scale * rng.normal();
  return m;
}

inline Mat randm_pos(int rows, int cols, Rng& rng, double lo, double hi) {
  Mat m(rows, cols);
  for (double& v : m.a) v = rng.uniform(lo, hi);
  return m;
}

}  // namespace dhn::testing
