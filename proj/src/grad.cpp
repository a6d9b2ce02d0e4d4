#include "corc/grad.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "corc/errors.hpp"

namespace corc {

namespace {

constexpr double kTieTolerance = 1e-12;
constexpr double kKinkTolerance = 1e-9;
constexpr double kMaxKktCondition = 1e12;
// guards exact-integer quantile indices against accumulated rounding
constexpr double kQuantileNudge = 1e-9;

struct MergedStep {
  double location;
  double height;       // contribution to h, already divided by N+1
  int loss_index;      // -1 for bound-origin steps
  const Eigen::VectorXd* grad;  // nullptr for bound-origin steps
};

}  // namespace

LambdaGrad lambda_grad_piecewise(std::span<const std::vector<ThresholdStep>> loss_steps,
                                 const BoundFn& bound, double alpha,
                                 const ParamInterval& interval,
                                 const PiecewiseGradOptions& options) {
  interval.validate();
  if (loss_steps.empty()) {
    throw EmptyCalibration("lambda_grad_piecewise: no calibration losses");
  }
  if (bound.kind() == BoundFn::Kind::linear) {
    throw Unsupported("lambda_grad_piecewise requires a piecewise-constant bound");
  }

  const double n_plus_1 = static_cast<double>(loss_steps.size() + 1);

  Eigen::Index dim = -1;
  std::vector<MergedStep> steps;
  for (std::size_t i = 0; i < loss_steps.size(); ++i) {
    for (const ThresholdStep& s : loss_steps[i]) {
      if (s.size < 0.0) {
        throw std::invalid_argument("lambda_grad_piecewise: jump sizes must be >= 0");
      }
      if (dim < 0) {
        dim = s.location_grad.size();
      } else if (s.location_grad.size() != dim) {
        throw DimensionMismatch("lambda_grad_piecewise: inconsistent gradient dimensions");
      }
      steps.push_back({s.location, s.size / n_plus_1, static_cast<int>(i),
                       &s.location_grad});
    }
  }
  if (dim < 0) dim = 0;

  double base = 0.0;  // h before any threshold
  if (bound.kind() == BoundFn::Kind::constant) {
    base = bound.constant_value() / n_plus_1;
  } else {
    const StepLoss& bs = bound.step_loss();
    base = bs.base() / n_plus_1;
    for (std::size_t j = 0; j < bs.jump_count(); ++j) {
      steps.push_back({bs.locations()[j], bs.size_at(j) / n_plus_1, -1, nullptr});
    }
  }

  std::sort(steps.begin(), steps.end(),
            [](const MergedStep& a, const MergedStep& b) { return a.location < b.location; });
  for (std::size_t j = 1; j < steps.size(); ++j) {
    if (steps[j].location - steps[j - 1].location < kTieTolerance) {
      throw TieDetected("lambda_grad_piecewise: coincident thresholds");
    }
  }

  // h is left-continuous: a step at g contributes only for lambda > g, so
  // steps strictly below the interval are part of the value at lambda_min.
  double running = base;
  std::size_t first = 0;
  while (first < steps.size() && steps[first].location < interval.lo) {
    running += steps[first].height;
    ++first;
  }
  if (running > alpha) {
    return {interval.lo, Eigen::VectorXd::Zero(dim), LambdaGrad::Kind::fallback_zero};
  }

  int crossing = -1;
  for (std::size_t j = first; j < steps.size(); ++j) {
    running += steps[j].height;
    if (running > alpha) {
      crossing = static_cast<int>(j);
      break;
    }
  }

  if (crossing < 0 || steps[static_cast<std::size_t>(crossing)].location > interval.hi) {
    // h stays at or below alpha on the whole interval
    return {interval.hi, Eigen::VectorXd::Zero(dim), LambdaGrad::Kind::interior_max};
  }

  const MergedStep& active = steps[static_cast<std::size_t>(crossing)];
  LambdaGrad out;
  out.value = active.location;
  out.kind = LambdaGrad::Kind::active_jump;
  out.active_index = crossing;
  if (active.grad == nullptr) {
    out.grad = Eigen::VectorXd::Zero(dim);  // bound threshold, theta-independent
    return out;
  }

  if (options.average_nearest <= 0) {
    out.grad = *active.grad;
    return out;
  }

  // Variance-reduced variant: mean gradient of the M loss thresholds
  // closest to lambda (bound thresholds carry no model gradient).
  std::vector<const MergedStep*> loss_only;
  loss_only.reserve(steps.size());
  for (const MergedStep& s : steps) {
    if (s.grad != nullptr) loss_only.push_back(&s);
  }
  std::sort(loss_only.begin(), loss_only.end(),
            [&](const MergedStep* a, const MergedStep* b) {
              return std::abs(a->location - out.value) < std::abs(b->location - out.value);
            });
  const std::size_t m =
      std::min<std::size_t>(static_cast<std::size_t>(options.average_nearest), loss_only.size());
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(dim);
  for (std::size_t j = 0; j < m; ++j) avg += *loss_only[j]->grad;
  out.grad = avg / static_cast<double>(m);
  return out;
}

namespace {

// h~ restricted to linear losses/bound, plus the partial derivatives the
// implicit-function solve needs.
struct LinearHTilde {
  const KktProblem& p;
  double n_plus_1;

  double value(double lambda) const {
    const double t = p.t;
    double acc = t + p.phi(p.bound_slope * lambda - t);
    for (Eigen::Index i = 0; i < p.slopes.size(); ++i) {
      acc += t + p.phi(p.slopes[i] * lambda - t);
    }
    return acc / n_plus_1;
  }

  double dlambda(double lambda) const {
    double acc = p.phi.deriv(p.bound_slope * lambda - p.t) * p.bound_slope;
    for (Eigen::Index i = 0; i < p.slopes.size(); ++i) {
      acc += p.phi.deriv(p.slopes[i] * lambda - p.t) * p.slopes[i];
    }
    return acc / n_plus_1;
  }

  double d2lambda(double lambda) const {
    double acc = p.phi.second_deriv(p.bound_slope * lambda - p.t) * p.bound_slope *
                 p.bound_slope;
    for (Eigen::Index i = 0; i < p.slopes.size(); ++i) {
      acc += p.phi.second_deriv(p.slopes[i] * lambda - p.t) * p.slopes[i] * p.slopes[i];
    }
    return acc / n_plus_1;
  }

  Eigen::VectorXd dtheta(double lambda) const {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(p.slope_grads.cols());
    for (Eigen::Index i = 0; i < p.slopes.size(); ++i) {
      acc += p.phi.deriv(p.slopes[i] * lambda - p.t) * lambda * p.slope_grads.row(i).transpose();
    }
    return acc / n_plus_1;
  }

  Eigen::VectorXd dlambda_dtheta(double lambda) const {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(p.slope_grads.cols());
    for (Eigen::Index i = 0; i < p.slopes.size(); ++i) {
      const double x = p.slopes[i] * lambda - p.t;
      const double w = p.phi.second_deriv(x) * p.slopes[i] * lambda + p.phi.deriv(x);
      acc += w * p.slope_grads.row(i).transpose();
    }
    return acc / n_plus_1;
  }

  void check_kinks(double lambda) const {
    if (p.phi.kind() != Disutility::Kind::cvar) return;
    if (std::abs(p.bound_slope * lambda - p.t) < kKinkTolerance) {
      throw KinkAtSolution("lambda_grad_kkt: bound term on the cvar kink");
    }
    for (Eigen::Index i = 0; i < p.slopes.size(); ++i) {
      if (std::abs(p.slopes[i] * lambda - p.t) < kKinkTolerance) {
        throw KinkAtSolution("lambda_grad_kkt: sample on the cvar kink");
      }
    }
  }
};

// root of a monotone nondecreasing function on [lo, hi]; f(lo) <= 0 <= f(hi)
template <typename F>
double bisect_root(F&& f, double lo, double hi) {
  for (int i = 0; i < 200 && hi - lo > 1e-14 * std::max(1.0, std::abs(hi)); ++i) {
    const double mid = 0.5 * (lo + hi);
    if (f(mid) <= 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

LambdaGrad solve_two_by_two(const LinearHTilde& h, const KktProblem& p, double lambda,
                            double mu, double obj_d2, const Eigen::VectorXd& obj_cross) {
  const double h_val = h.value(lambda);
  const double h_l = h.dlambda(lambda);
  const double h_ll = h.d2lambda(lambda);
  const Eigen::VectorXd h_th = h.dtheta(lambda);
  const Eigen::VectorXd h_lth = h.dlambda_dtheta(lambda);

  Eigen::Matrix2d m;
  m << obj_d2 + mu * h_ll, h_l,  //
      mu * h_l, h_val - p.alpha;

  const Eigen::JacobiSVD<Eigen::Matrix2d> svd(m);
  const double smin = svd.singularValues()(1);
  const double smax = svd.singularValues()(0);
  if (smin <= 0.0 || smax / smin > kMaxKktCondition) {
    throw SingularKkt("lambda_grad_kkt: KKT Jacobian condition number above 1e12");
  }

  const Eigen::Index dim = p.slope_grads.cols();
  Eigen::MatrixXd g(2, dim);
  g.row(0) = (obj_cross + mu * h_lth).transpose();
  g.row(1) = (mu * h_th).transpose();

  const Eigen::MatrixXd solution = -m.inverse() * g;

  LambdaGrad out;
  out.value = lambda;
  out.grad = solution.row(0).transpose();
  out.kind = LambdaGrad::Kind::kkt;
  out.mu = mu;
  return out;
}

}  // namespace

LambdaGrad lambda_grad_kkt(const KktProblem& p) {
  p.interval.validate();
  if (p.slopes.size() != p.slope_grads.rows()) {
    throw DimensionMismatch("lambda_grad_kkt: slopes vs slope_grads row count");
  }
  if (p.slopes.size() == 0) throw EmptyCalibration("lambda_grad_kkt: no losses");
  if (p.bound_slope < 0.0) {
    throw std::invalid_argument("lambda_grad_kkt: bound slope must be >= 0");
  }
  const bool nondecreasing_h =
      (p.slopes.array() >= 0.0).all() ||
      (p.phi.kind() == Disutility::Kind::cvar && p.t >= p.bound_slope * p.interval.lo);
  if (!nondecreasing_h) {
    throw Unsupported(
        "lambda_grad_kkt: h~ must be nondecreasing (negative slopes need the cvar "
        "disutility with t >= B(lambda_min))");
  }

  const LinearHTilde h{p, static_cast<double>(p.slopes.size() + 1)};
  const Eigen::Index dim = p.slope_grads.cols();
  const double lo = p.interval.lo;
  const double hi = p.interval.hi;

  if (h.value(lo) > p.alpha) {
    return {lo, Eigen::VectorXd::Zero(dim), LambdaGrad::Kind::fallback_zero};
  }

  switch (p.objective_kind) {
    case ObjectiveKind::strictly_increasing:
      // smallest feasible lambda; the interval endpoint is theta-independent
      return {lo, Eigen::VectorXd::Zero(dim), LambdaGrad::Kind::interior_max};

    case ObjectiveKind::strictly_decreasing: {
      if (h.value(hi) <= p.alpha) {
        return {hi, Eigen::VectorXd::Zero(dim), LambdaGrad::Kind::interior_max};
      }
      const double lambda =
          bisect_root([&](double l) { return h.value(l) - p.alpha; }, lo, hi);
      h.check_kinks(lambda);
      const double h_l = h.dlambda(lambda);
      if (h_l <= 0.0) {
        throw SingularKkt("lambda_grad_kkt: active constraint with zero slope");
      }
      const double mu = 1.0 / h_l;  // stationarity of -lambda + mu * h~
      return solve_two_by_two(h, p, lambda, mu, /*obj_d2=*/0.0,
                              Eigen::VectorXd::Zero(dim));
    }

    case ObjectiveKind::strictly_convex: {
      if (!p.objective.dlambda || !p.objective.d2lambda || !p.objective.dlambda_dtheta) {
        throw std::invalid_argument(
            "lambda_grad_kkt: strictly_convex kind needs objective callbacks");
      }
      // unconstrained minimizer of the objective over the interval
      double lambda_u;
      if (p.objective.dlambda(lo) >= 0.0) {
        lambda_u = lo;
      } else if (p.objective.dlambda(hi) <= 0.0) {
        lambda_u = hi;
      } else {
        lambda_u = bisect_root([&](double l) { return p.objective.dlambda(l); }, lo, hi);
      }

      if (h.value(lambda_u) <= p.alpha) {
        if (lambda_u == lo || lambda_u == hi) {
          return {lambda_u, Eigen::VectorXd::Zero(dim), LambdaGrad::Kind::interior_max};
        }
        // slack constraint: differentiate the objective stationarity alone
        return solve_two_by_two(h, p, lambda_u, /*mu=*/0.0,
                                p.objective.d2lambda(lambda_u),
                                p.objective.dlambda_dtheta(lambda_u));
      }

      // constraint active left of the unconstrained minimizer
      const double lambda =
          bisect_root([&](double l) { return h.value(l) - p.alpha; }, lo, lambda_u);
      h.check_kinks(lambda);
      const double h_l = h.dlambda(lambda);
      if (h_l <= 0.0) {
        throw SingularKkt("lambda_grad_kkt: active constraint with zero slope");
      }
      const double mu = -p.objective.dlambda(lambda) / h_l;
      return solve_two_by_two(h, p, lambda, mu, p.objective.d2lambda(lambda),
                              p.objective.dlambda_dtheta(lambda));
    }
  }
  throw Unsupported("lambda_grad_kkt: unknown objective kind");
}

LambdaGrad conftr_quantile_grad(std::span<const ScoreWithGrad> scores, double alpha,
                                const ParamInterval& interval) {
  interval.validate();
  if (scores.empty()) throw EmptyCalibration("conftr_quantile_grad: no scores");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("conftr_quantile_grad requires alpha in (0, 1)");
  }
  const std::size_t n = scores.size();
  const Eigen::Index dim = scores[0].grad.size();
  for (const ScoreWithGrad& s : scores) {
    if (s.grad.size() != dim) {
      throw DimensionMismatch("conftr_quantile_grad: inconsistent gradient dimensions");
    }
  }

  const double rank = static_cast<double>(n + 1) * (1.0 - alpha);
  const std::size_t k = static_cast<std::size_t>(std::ceil(rank - kQuantileNudge));
  if (k > n) {
    // the +infinity sentinel is selected: alpha < 1/(N+1)
    return {interval.lo, Eigen::VectorXd::Zero(dim), LambdaGrad::Kind::fallback_zero};
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a].value < scores[b].value;
  });

  const std::size_t sel = order[k - 1];
  const double s_k = scores[sel].value;
  if ((k >= 2 && s_k - scores[order[k - 2]].value < kTieTolerance) ||
      (k < n && scores[order[k]].value - s_k < kTieTolerance)) {
    throw TieDetected("conftr_quantile_grad: tie at the selected order statistic");
  }

  LambdaGrad out;
  out.value = 1.0 - s_k;
  out.grad = -scores[sel].grad;
  out.kind = LambdaGrad::Kind::active_jump;
  out.active_index = static_cast<int>(k - 1);
  return out;
}

Eigen::VectorXd full_cost_grad(const LambdaGrad& lambda_grad, const CostPartials& partials) {
  if (lambda_grad.grad.size() != partials.dtheta.size()) {
    throw DimensionMismatch("full_cost_grad: gradient dimensions disagree");
  }
  return partials.dtheta + partials.dlambda * lambda_grad.grad;
}

Eigen::VectorXd central_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& theta, double step) {
  Eigen::VectorXd out(theta.size());
  Eigen::VectorXd probe = theta;
  for (Eigen::Index q = 0; q < theta.size(); ++q) {
    probe[q] = theta[q] + step;
    const double up = f(probe);
    probe[q] = theta[q] - step;
    const double down = f(probe);
    probe[q] = theta[q];
    out[q] = (up - down) / (2.0 * step);
  }
  return out;
}

}  // namespace corc
