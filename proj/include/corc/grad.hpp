#pragma once

#include <Eigen/Dense>
#include <functional>
#include <span>
#include <vector>

#include "corc/losses.hpp"
#include "corc/risk.hpp"

namespace corc {

// Calibrated parameter lambda(theta) together with its exact derivative.
//
// kind semantics:
//   interior_max   constraint slack at a theta-independent interval
//                  endpoint; grad is zero
//   active_jump    lambda equals one threshold of the merged step sequence
//                  (or one order statistic); grad is that threshold's
//   kkt            solution of the convex inner problem; mu is the
//                  constraint multiplier (0 when slack)
//   fallback_zero  inner problem infeasible, lambda_min returned; grad is
//                  zero exactly because lambda_min does not depend on theta
struct LambdaGrad {
  enum class Kind { interior_max, active_jump, kkt, fallback_zero };

  double value = 0.0;
  Eigen::VectorXd grad;
  Kind kind = Kind::fallback_zero;
  int active_index = -1;  // merged-sequence index, active_jump only
  double mu = 0.0;        // KKT multiplier, kkt only
};

// One jump of one calibration loss: location g(theta), its gradient
// dg/dtheta, and the jump height in loss units.
struct ThresholdStep {
  double location = 0.0;
  Eigen::VectorXd location_grad;
  double size = 0.0;
};

struct PiecewiseGradOptions {
  // When > 0, the returned gradient averages the location gradients of the
  // `average_nearest` loss thresholds closest to lambda instead of using
  // the single active one. Trades bias for variance; off by default.
  int average_nearest = 0;
};

// lambda(theta) = max{lambda : h(lambda) <= alpha} and its gradient for
// piecewise-constant losses (strictly decreasing cost assumed by the
// caller). The returned lambda is always one of the input thresholds or
// lambda_max; its gradient is the active threshold's location gradient,
// zero when the active jump belongs to the bound or when h never exceeds
// alpha. Thresholds must be globally unique; coincidences within 1e-12
// raise TieDetected and the caller should skip the gradient step.
LambdaGrad lambda_grad_piecewise(std::span<const std::vector<ThresholdStep>> loss_steps,
                                 const BoundFn& bound, double alpha,
                                 const ParamInterval& interval,
                                 const PiecewiseGradOptions& options = {});

enum class ObjectiveKind { strictly_increasing, strictly_decreasing, strictly_convex };

// Callbacks describing a strictly convex inner objective; unused for the
// monotone kinds where the objective reduces to +-lambda.
struct ConvexObjective {
  std::function<double(double)> dlambda;                  // dl/dlambda
  std::function<double(double)> d2lambda;                 // d2l/dlambda2
  std::function<Eigen::VectorXd(double)> dlambda_dtheta;  // d2l/(dtheta dlambda)
};

// Convex inner problem with linear losses a_i(theta) * lambda and linear
// bound b * lambda:
//   min  l~(theta, lambda)  s.t.  h~_t(lambda) <= alpha,  lambda in [lo, hi].
struct KktProblem {
  Eigen::VectorXd slopes;       // a_i(theta)
  Eigen::MatrixXd slope_grads;  // N x D, row i = da_i/dtheta
  double bound_slope = 0.0;
  Disutility phi = Disutility::identity();
  double t = 0.0;
  double alpha = 0.0;
  ParamInterval interval;
  ObjectiveKind objective_kind = ObjectiveKind::strictly_decreasing;
  ConvexObjective objective;  // required iff strictly_convex
};

// Solves the scalar inner problem and differentiates its solution through
// the KKT stationarity and complementary-slackness equations (2x2 implicit
// function solve). Raises KinkAtSolution when a cvar sample sits within
// 1e-9 of the disutility kink at the solution, SingularKkt when the KKT
// Jacobian has condition number above 1e12.
LambdaGrad lambda_grad_kkt(const KktProblem& problem);

struct ScoreWithGrad {
  double value = 0.0;
  Eigen::VectorXd grad;
};

// Split-conformal quantile rule lambda = 1 - s_(k), k = ceil((N+1)(1-alpha))
// over the scores augmented with a +infinity sentinel; the gradient is the
// negated gradient of the selected score. When the sentinel is selected
// (alpha < 1/(N+1)) the interval minimum is returned with zero gradient.
LambdaGrad conftr_quantile_grad(std::span<const ScoreWithGrad> scores, double alpha,
                                const ParamInterval& interval = {0.0, 1.0});

struct CostPartials {
  Eigen::VectorXd dtheta;
  double dlambda = 0.0;
};

// Chain rule dl/dtheta = dl/dtheta + dl/dlambda * dlambda/dtheta.
Eigen::VectorXd full_cost_grad(const LambdaGrad& lambda_grad, const CostPartials& partials);

// Central finite differences, the independent check for every analytic
// gradient above.
Eigen::VectorXd central_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& theta, double step = 1e-6);

}  // namespace corc
