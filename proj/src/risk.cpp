#include "corc/risk.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "corc/errors.hpp"
#include "corc/golden.hpp"

namespace corc {

namespace {
constexpr double kEntropicArgMax = 700.0;  // exp(700) ~ 1e304, still finite
}

Disutility Disutility::cvar(double delta) {
  if (!(delta >= 0.0 && delta < 1.0)) {
    throw std::invalid_argument("cvar disutility requires delta in [0, 1)");
  }
  return Disutility(Kind::cvar, delta);
}

double Disutility::operator()(double x) const {
  switch (kind_) {
    case Kind::identity:
      return x;
    case Kind::cvar:
      return x > 0.0 ? x / (1.0 - delta_) : 0.0;
    case Kind::entropic:
      if (x > kEntropicArgMax) {
        throw NonFiniteObjective("entropic disutility overflow: argument > 700");
      }
      return std::expm1(x);
  }
  return 0.0;  // unreachable
}

double Disutility::deriv(double x) const {
  switch (kind_) {
    case Kind::identity:
      return 1.0;
    case Kind::cvar:
      return x > 0.0 ? 1.0 / (1.0 - delta_) : 0.0;
    case Kind::entropic:
      if (x > kEntropicArgMax) {
        throw NonFiniteObjective("entropic disutility overflow: argument > 700");
      }
      return std::exp(x);
  }
  return 0.0;  // unreachable
}

double Disutility::second_deriv(double x) const {
  switch (kind_) {
    case Kind::identity:
      return 0.0;
    case Kind::cvar:
      return 0.0;  // undefined exactly at the kink; callers guard x == 0
    case Kind::entropic:
      if (x > kEntropicArgMax) {
        throw NonFiniteObjective("entropic disutility overflow: argument > 700");
      }
      return std::exp(x);
  }
  return 0.0;  // unreachable
}

bool cvar_window_valid(double t, double bound_at_lambda_min, double alpha) {
  return bound_at_lambda_min <= t && t <= alpha;
}

double empirical_h(std::span<const LossFn> losses, const BoundFn& bound, double lambda) {
  if (losses.empty()) throw EmptyCalibration("empirical_h: no calibration losses");
  const double b = bound(lambda);
  double acc = b;
  for (const LossFn& l : losses) {
    const double v = eval_loss(l, lambda);
    if (v > b) {
      throw BoundViolation("empirical_h: loss exceeds bound at lambda");
    }
    acc += v;
  }
  return acc / static_cast<double>(losses.size() + 1);
}

double empirical_h_tilde(std::span<const LossFn> losses, const BoundFn& bound,
                         double lambda, double t, const Disutility& phi) {
  if (phi.kind() == Disutility::Kind::identity) {
    return empirical_h(losses, bound, lambda);
  }
  if (losses.empty()) throw EmptyCalibration("empirical_h_tilde: no calibration losses");
  const double b = bound(lambda);
  double acc = t + phi(b - t);
  for (const LossFn& l : losses) {
    const double v = eval_loss(l, lambda);
    if (v > b) {
      throw BoundViolation("empirical_h_tilde: loss exceeds bound at lambda");
    }
    acc += t + phi(v - t);
  }
  return acc / static_cast<double>(losses.size() + 1);
}

double cvar_empirical(std::span<const double> samples, double delta) {
  if (samples.empty()) throw EmptySamples("cvar_empirical: no samples");
  if (!(delta >= 0.0 && delta < 1.0)) {
    throw std::invalid_argument("cvar_empirical requires delta in [0, 1)");
  }
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();

  // Lower-interpolated empirical delta-quantile minimizes the variational
  // objective: at t = x_(k) with k = ceil(n*delta), the subgradient
  // 1 - #{x_i > t} / (n (1-delta)) straddles zero.
  const std::size_t k =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(delta * static_cast<double>(n))));
  const double t = sorted[k - 1];

  double tail = 0.0;
  for (std::size_t i = k; i < n; ++i) tail += sorted[i] - t;
  return t + tail / ((1.0 - delta) * static_cast<double>(n));
}

double oce_risk_empirical(std::span<const double> samples, const Disutility& phi) {
  if (samples.empty()) throw EmptySamples("oce_risk_empirical: no samples");
  double lo = samples[0], hi = samples[0];
  for (double x : samples) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const auto objective = [&](double t) {
    double acc = 0.0;
    for (double x : samples) acc += phi(x - t);
    return t + acc / static_cast<double>(samples.size());
  };
  if (hi - lo < 1e-10) return objective(lo);
  // Convex in t, so golden section is exact up to the bracket width.
  return golden_min(objective, lo, hi, 1e-10, 400).second;
}

}  // namespace corc
