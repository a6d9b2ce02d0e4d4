#include "corc/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "corc/errors.hpp"
#include "corc/golden.hpp"

namespace corc {

namespace {

// Shared bisection core. `evaluate` must be nondecreasing in lambda.
template <typename H>
CalibrationResult bisect_sup(H&& evaluate, double alpha, const ParamInterval& interval,
                             double eps, double t_used) {
  interval.validate();
  if (!(eps > 0.0)) throw std::invalid_argument("bisection requires eps > 0");

  const double h_lo = evaluate(interval.lo);
  if (h_lo > alpha) {
    return {interval.lo, t_used, h_lo, /*feasible=*/false, 0};
  }
  double lo = interval.lo;
  double hi = interval.hi;
  int iterations = 0;
  while (hi - lo > eps) {
    const double mid = 0.5 * (lo + hi);
    ++iterations;
    if (evaluate(mid) <= alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return {lo, t_used, evaluate(lo), /*feasible=*/true, iterations};
}

void require_calibratable(std::span<const LossFn> losses, const BoundFn& bound,
                          const RiskSpec& spec) {
  const bool cvar_monotone_regime =
      spec.phi.kind() == Disutility::Kind::cvar && spec.t >= bound(spec.interval.lo);
  if (cvar_monotone_regime) return;  // nonincreasing losses transform to constants
  for (const LossFn& l : losses) {
    if (!is_nondecreasing(l)) {
      throw MonotonicityViolation(
          "calibration requires nondecreasing losses for this disutility");
    }
  }
}

}  // namespace

CalibrationResult crc_bisect(std::span<const LossFn> losses, const BoundFn& bound,
                             double alpha, const ParamInterval& interval, double eps) {
  for (const LossFn& l : losses) {
    if (!is_nondecreasing(l)) {
      throw MonotonicityViolation("crc_bisect requires nondecreasing losses");
    }
  }
  return bisect_sup([&](double lambda) { return empirical_h(losses, bound, lambda); },
                    alpha, interval, eps, /*t_used=*/0.0);
}

CalibrationResult corc_bisect(std::span<const LossFn> losses, const BoundFn& bound,
                              const RiskSpec& spec, double eps) {
  require_calibratable(losses, bound, spec);
  return bisect_sup(
      [&](double lambda) {
        return empirical_h_tilde(losses, bound, lambda, spec.t, spec.phi);
      },
      spec.alpha, spec.interval, eps, spec.t);
}

CalibrationResult conformal_cvar_control(std::span<const LossFn> losses,
                                         const BoundFn& bound, double alpha,
                                         double delta, double t,
                                         const ParamInterval& interval, double eps) {
  interval.validate();
  const double b_lo = bound(interval.lo);
  if (alpha < b_lo || !cvar_window_valid(t, b_lo, alpha)) {
    return {interval.lo, t, std::numeric_limits<double>::quiet_NaN(),
            /*feasible=*/false, 0};
  }
  const RiskSpec spec{alpha, t, Disutility::cvar(delta), interval};
  return corc_bisect(losses, bound, spec, eps);
}

double tune_t(std::span<const LossFn> holdout_losses, const BoundFn& bound,
              double alpha, double delta, std::span<const double> t_grid,
              const ParamInterval& interval, double eps) {
  const double b_lo = bound(interval.lo);
  std::vector<double> grid(t_grid.begin(), t_grid.end());
  std::sort(grid.begin(), grid.end());

  bool found = false;
  double best_t = 0.0;
  double best_lambda = -std::numeric_limits<double>::infinity();
  for (double t : grid) {
    if (!cvar_window_valid(t, b_lo, alpha)) continue;
    const CalibrationResult r =
        conformal_cvar_control(holdout_losses, bound, alpha, delta, t, interval, eps);
    // strict improvement only: ascending iteration keeps the smallest tied t
    if (!found || r.lambda_hat > best_lambda) {
      found = true;
      best_t = t;
      best_lambda = r.lambda_hat;
    }
  }
  if (!found) throw EmptyGrid("tune_t: no grid value inside [B(lambda_min), alpha]");
  return best_t;
}

std::vector<double> default_t_grid(double t_lo, double alpha) {
  if (t_lo > alpha) return {};
  constexpr int kPoints = 33;
  std::vector<double> grid(kPoints);
  for (int i = 0; i < kPoints; ++i) {
    grid[i] = t_lo + (alpha - t_lo) * static_cast<double>(i) / (kPoints - 1);
  }
  return grid;
}

CalibrationResult joint_lambda_t(std::span<const LossFn> losses, const BoundFn& bound,
                                 double alpha, double delta,
                                 const ParamInterval& interval, double eps) {
  interval.validate();
  for (const LossFn& l : losses) {
    if (!std::holds_alternative<LinearLoss>(l)) {
      throw Unsupported("joint_lambda_t requires linear losses");
    }
  }
  if (bound.kind() != BoundFn::Kind::linear) {
    throw Unsupported("joint_lambda_t requires a linear bound");
  }

  const double t_lo = bound(interval.lo);
  if (t_lo > alpha) {
    return {interval.lo, t_lo, std::numeric_limits<double>::quiet_NaN(),
            /*feasible=*/false, 0};
  }

  CalibrationResult best;
  bool have_best = false;
  int total_iterations = 0;
  const auto lambda_of_t = [&](double t) {
    CalibrationResult r = conformal_cvar_control(losses, bound, alpha, delta, t,
                                                 interval, eps);
    total_iterations += r.iterations;
    if (!have_best || r.lambda_hat > best.lambda_hat ||
        (r.lambda_hat == best.lambda_hat && t < best.t_used)) {
      best = r;
      have_best = true;
    }
    return r.lambda_hat;
  };

  if (alpha == t_lo) {
    lambda_of_t(t_lo);
  } else {
    // lambda_hat(t) is concave on [t_lo, alpha]; 80 golden iterations shrink
    // the bracket below 1e-16 relative width.
    golden_max(lambda_of_t, t_lo, alpha, 0.0, 80);
    lambda_of_t(t_lo);  // flat optima often sit at the window edge
  }
  best.iterations = total_iterations;
  return best;
}

}  // namespace corc
