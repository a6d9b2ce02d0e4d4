#pragma once

#include <span>

#include "corc/losses.hpp"

namespace corc {

// Disutility function phi of an optimized-certainty-equivalent risk
// measure: nondecreasing, convex, phi(0) = 0, 1 in the subdifferential at 0.
// Built-in kinds:
//   identity  phi(x) = x                     (OCE risk = expectation)
//   cvar      phi(x) = [x]_+ / (1 - delta)   (OCE risk = CVaR at level delta)
//   entropic  phi(x) = exp(x) - 1
class Disutility {
 public:
  enum class Kind { identity, cvar, entropic };

  static Disutility identity() { return Disutility(Kind::identity, 0.0); }
  static Disutility cvar(double delta);
  static Disutility entropic() { return Disutility(Kind::entropic, 0.0); }

  // Entropic evaluation throws NonFiniteObjective past x = 700 instead of
  // silently returning infinity.
  double operator()(double x) const;
  // Left derivative at kink points (cvar at x = 0).
  double deriv(double x) const;
  double second_deriv(double x) const;

  Kind kind() const { return kind_; }
  double delta() const { return delta_; }

 private:
  Disutility(Kind kind, double delta) : kind_(kind), delta_(delta) {}
  Kind kind_;
  double delta_;
};

// Target risk level plus the OCE shift and search interval.
struct RiskSpec {
  double alpha = 0.0;
  double t = 0.0;
  Disutility phi = Disutility::identity();
  ParamInterval interval;
};

// True iff t lies in the window [B(lambda_min), alpha] required for CVaR
// control of merely monotone losses.
bool cvar_window_valid(double t, double bound_at_lambda_min, double alpha);

// Empirical risk functional
//   h(lambda) = (B(lambda) + sum_i L_i(lambda)) / (N + 1).
// Accumulation order is fixed (bound term first, then losses in input
// order) so repeated runs are bit-identical. Throws BoundViolation if any
// loss exceeds the bound at this lambda, EmptyCalibration if losses is
// empty.
double empirical_h(std::span<const LossFn> losses, const BoundFn& bound, double lambda);

// Transformed functional
//   h~_t(lambda) = (t + phi(B(lambda)-t) + sum_i [t + phi(L_i(lambda)-t)]) / (N+1).
// With the identity disutility the transform t + (x - t) collapses to x
// algebraically and is evaluated as x, so the result equals empirical_h
// bit for bit.
double empirical_h_tilde(std::span<const LossFn> losses, const BoundFn& bound,
                         double lambda, double t, const Disutility& phi);

// Empirical CVaR at level delta in [0, 1): the variational objective
// t + mean([x - t]_+) / (1 - delta) minimized over t, which the sorted-tail
// closed form attains at the lower-interpolated delta-quantile.
double cvar_empirical(std::span<const double> samples, double delta);

// Empirical OCE risk inf_t t + mean(phi(x_i - t)), by golden-section over
// t in [min(samples), max(samples)] (the minimizer lies there because
// 1 is a subgradient of phi at 0), bracket refined to 1e-10.
double oce_risk_empirical(std::span<const double> samples, const Disutility& phi);

}  // namespace corc
