#pragma once

#include <cmath>
#include <utility>

namespace corc {

// Golden-section search for the minimum of a unimodal (convex) scalar
// function on [lo, hi]. Shrinks the bracket until its width is at most
// `tol` or `max_iters` probes have been spent, whichever comes first.
// Returns (argmin, min value). Flat stretches are fine: any point of a
// flat bottom is a valid minimizer of a convex function.
template <typename F>
std::pair<double, double> golden_min(F&& f, double lo, double hi, double tol,
                                     int max_iters = 200) {
  constexpr double kInvPhi = 0.6180339887498949;  // 1/phi
  double a = lo, b = hi;
  double c = b - kInvPhi * (b - a);
  double d = a + kInvPhi * (b - a);
  double fc = f(c), fd = f(d);
  for (int i = 0; i < max_iters && (b - a) > tol; ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - kInvPhi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + kInvPhi * (b - a);
      fd = f(d);
    }
  }
  const double mid = 0.5 * (a + b);
  return {mid, f(mid)};
}

// Maximization counterpart.
template <typename F>
std::pair<double, double> golden_max(F&& f, double lo, double hi, double tol,
                                     int max_iters = 200) {
  auto [x, v] = golden_min([&](double t) { return -f(t); }, lo, hi, tol, max_iters);
  return {x, -v};
}

}  // namespace corc
