#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace elt::testing {

// Plain two-point central difference; kept separate from the library's own
// stencil so tests do not grade the code with itself.
inline double fd(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace elt::testing
