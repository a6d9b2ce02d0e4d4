#pragma once

#include <span>
#include <vector>

#include "corc/losses.hpp"
#include "corc/risk.hpp"

namespace corc {

struct CalibrationResult {
  double lambda_hat = 0.0;
  double t_used = 0.0;
  // h~ evaluated at lambda_hat; NaN when the guard returned lambda_min
  // without evaluating.
  double h_tilde_at_lambda = 0.0;
  // false means the lambda_min fallback was taken.
  bool feasible = true;
  // number of bisection midpoint evaluations (cumulative for the joint solve)
  int iterations = 0;
};

// Bisection for sup{lambda : h(lambda) <= alpha}, returning the lower
// bracket so the returned point always satisfies the constraint (the loop
// midpoint may overshoot by up to one eps step). If h(lambda_min) > alpha
// the problem is infeasible and lambda_min is returned with feasible=false.
CalibrationResult crc_bisect(std::span<const LossFn> losses, const BoundFn& bound,
                             double alpha, const ParamInterval& interval, double eps);

// Same bisection on the transformed functional h~_t. With the identity
// disutility this reproduces crc_bisect exactly, iteration for iteration.
// Losses must be nondecreasing, except under the cvar disutility with
// t >= B(lambda_min) where nonincreasing losses transform to constants.
CalibrationResult corc_bisect(std::span<const LossFn> losses, const BoundFn& bound,
                              const RiskSpec& spec, double eps);

// CVaR control for monotone losses of either direction. Returns lambda_min
// immediately (feasible=false) when alpha < B(lambda_min) or t lies outside
// [B(lambda_min), alpha]; otherwise delegates to corc_bisect with the cvar
// disutility.
CalibrationResult conformal_cvar_control(std::span<const LossFn> losses,
                                         const BoundFn& bound, double alpha,
                                         double delta, double t,
                                         const ParamInterval& interval, double eps);

// Picks the grid t maximizing the calibrated lambda on a held-out loss set.
// Grid values outside [B(lambda_min), alpha] are skipped; ties break toward
// smaller t. The holdout must be disjoint from the calibration data the
// chosen t will be used with. Throws EmptyGrid when no valid t remains.
double tune_t(std::span<const LossFn> holdout_losses, const BoundFn& bound,
              double alpha, double delta, std::span<const double> t_grid,
              const ParamInterval& interval, double eps);

// 33 uniformly spaced points on [t_lo, alpha]; empty when t_lo > alpha.
std::vector<double> default_t_grid(double t_lo, double alpha);

// Joint solve max{lambda : h~_t(lambda) <= alpha, B(lambda_min) <= t <= alpha}
// for linear losses and a linear bound, where the feasible set is convex so
// lambda_hat(t) is concave in t. Golden-section over t (80 iterations)
// around the inner bisection; the best probed point is returned.
CalibrationResult joint_lambda_t(std::span<const LossFn> losses, const BoundFn& bound,
                                 double alpha, double delta,
                                 const ParamInterval& interval, double eps);

}  // namespace corc
