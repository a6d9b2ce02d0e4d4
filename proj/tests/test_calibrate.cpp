#include <doctest.h>

#include <cmath>
#include <vector>

#include "corc/calibrate.hpp"
#include "corc/errors.hpp"
#include "corc/random.hpp"

using namespace corc;

namespace {

// dense-grid oracle for sup{lambda in grid : h~(lambda) <= alpha}
double grid_sup(const std::vector<LossFn>& losses, const BoundFn& bound, double alpha,
                const ParamInterval& interval, double t, const Disutility& phi,
                double spacing = 1e-4) {
  double best = std::numeric_limits<double>::quiet_NaN();
  const int n = static_cast<int>(std::floor((interval.hi - interval.lo) / spacing));
  for (int i = 0; i <= n; ++i) {
    const double lambda = interval.lo + i * spacing;
    if (empirical_h_tilde(losses, bound, lambda, t, phi) <= alpha) best = lambda;
  }
  return best;
}

std::vector<LossFn> indicator_losses(const std::vector<double>& thresholds) {
  std::vector<LossFn> out;
  for (double q : thresholds) out.push_back(StepLoss(0.0, {{q, 1.0}}));
  return out;
}

std::vector<LossFn> random_step_losses(Rng& rng, int max_losses = 8, int max_jumps = 5) {
  std::vector<LossFn> losses;
  const int n = 1 + static_cast<int>(rng.uniform_index(max_losses));
  for (int i = 0; i < n; ++i) {
    std::vector<StepLoss::Jump> jumps;
    const int j = 1 + static_cast<int>(rng.uniform_index(max_jumps));
    for (int k = 0; k < j; ++k) jumps.push_back({rng.uniform(), rng.uniform(0.0, 0.4)});
    losses.push_back(StepLoss(0.0, std::move(jumps)));
  }
  return losses;
}

}  // namespace

TEST_CASE("crc_bisect against the dense-grid oracle") {
  const std::vector<LossFn> losses = indicator_losses({0.2, 0.4, 0.6, 0.8});
  const BoundFn bound = BoundFn::constant(1.0);
  const ParamInterval interval{0.0, 1.0};
  const double eps = 1e-6;

  const double oracle =
      grid_sup(losses, bound, 0.5, interval, 0.0, Disutility::identity());
  CHECK(oracle == doctest::Approx(0.4).epsilon(5e-4));

  const CalibrationResult r = crc_bisect(losses, bound, 0.5, interval, eps);
  CHECK(r.feasible);
  CHECK(std::abs(r.lambda_hat - oracle) <= eps + 1e-4);
  CHECK(r.h_tilde_at_lambda <= 0.5);

  SUBCASE("constraint never binds") {
    const CalibrationResult top = crc_bisect(losses, bound, 2.0, interval, eps);
    CHECK(top.feasible);
    CHECK(interval.hi - top.lambda_hat <= eps);
  }
  SUBCASE("infeasible at lambda_min falls back") {
    const std::vector<LossFn> ones = {StepLoss(1.0, {})};
    const CalibrationResult r2 = crc_bisect(ones, bound, 0.5, interval, eps);
    CHECK_FALSE(r2.feasible);
    CHECK(r2.lambda_hat == interval.lo);
    CHECK(r2.iterations == 0);
  }
  SUBCASE("nonincreasing losses are rejected") {
    const std::vector<LossFn> bad = {LinearLoss{-1.0}};
    CHECK_THROWS_AS(crc_bisect(bad, BoundFn::linear(1.0), 0.5, interval, eps),
                    MonotonicityViolation);
  }
  SUBCASE("eps must be positive") {
    CHECK_THROWS_AS(crc_bisect(losses, bound, 0.5, interval, 0.0), std::invalid_argument);
  }
}

TEST_CASE("corc_bisect with identity equals crc_bisect exactly") {
  Rng rng(31);
  const BoundFn bound = BoundFn::constant(2.5);
  for (int inst = 0; inst < 200; ++inst) {
    const std::vector<LossFn> losses = random_step_losses(rng);
    const double alpha = rng.uniform(0.0, 1.5);
    const ParamInterval interval{0.0, 1.0};
    const CalibrationResult a = crc_bisect(losses, bound, alpha, interval, 1e-6);
    const RiskSpec spec{alpha, rng.uniform(-1.0, 1.0), Disutility::identity(), interval};
    const CalibrationResult b = corc_bisect(losses, bound, spec, 1e-6);
    CHECK(a.lambda_hat == b.lambda_hat);
    CHECK(a.iterations == b.iterations);
    CHECK(a.feasible == b.feasible);
    CHECK(a.h_tilde_at_lambda == b.h_tilde_at_lambda);
  }
}

TEST_CASE("corc_bisect under the cvar disutility") {
  const std::vector<LossFn> losses = indicator_losses({0.2, 0.4, 0.6, 0.8});
  const BoundFn bound = BoundFn::constant(1.0);
  const ParamInterval interval{0.0, 1.0};
  const double eps = 1e-6;

  SUBCASE("matches the grid oracle") {
    // the transformed bound term alone contributes (0.3 + 10 * 0.7) / 5, so
    // the risk cap must sit above that for a nonempty feasible set
    const RiskSpec spec{3.0, 0.3, Disutility::cvar(0.9), interval};
    const CalibrationResult r = corc_bisect(losses, bound, spec, eps);
    const double oracle = grid_sup(losses, bound, 3.0, interval, 0.3, spec.phi);
    REQUIRE(std::isfinite(oracle));
    CHECK(std::abs(r.lambda_hat - oracle) <= eps + 1e-4);
  }
  SUBCASE("t at the bound ceiling makes h~ constant at t") {
    // all positive parts vanish; feasibility is decided by t <= alpha alone
    const RiskSpec ok{1.5, 1.0, Disutility::cvar(0.8), interval};
    const CalibrationResult top = corc_bisect(losses, bound, ok, eps);
    CHECK(top.feasible);
    CHECK(interval.hi - top.lambda_hat <= eps);

    const RiskSpec bad{0.5, 1.0, Disutility::cvar(0.8), interval};
    const CalibrationResult bottom = corc_bisect(losses, bound, bad, eps);
    CHECK_FALSE(bottom.feasible);
    CHECK(bottom.lambda_hat == interval.lo);
  }
}

TEST_CASE("conformal_cvar_control guard and mixed monotone losses") {
  const ParamInterval interval{0.0, 1.0};
  const double eps = 1e-6;

  SUBCASE("alpha below B(lambda_min) returns lambda_min immediately") {
    const std::vector<LossFn> losses = {StepLoss(0.0, {{0.5, 1.0}})};
    const CalibrationResult r = conformal_cvar_control(
        losses, BoundFn::constant(1.0), 0.5, 0.9, 0.7, interval, eps);
    CHECK_FALSE(r.feasible);
    CHECK(r.lambda_hat == 0.0);
    CHECK(r.iterations == 0);
  }
  SUBCASE("t outside the window returns lambda_min, randomized") {
    Rng rng(41);
    for (int inst = 0; inst < 1000; ++inst) {
      const std::vector<LossFn> losses = random_step_losses(rng);
      const double alpha = rng.uniform(0.1, 1.2);
      const double b0 = 0.0;  // constant-zero lower edge via linear bound
      double t = rng.uniform(-2.0, 3.0);
      if (t >= b0 && t <= alpha) t = alpha + 0.5 + rng.uniform();  // force invalid
      const CalibrationResult r = conformal_cvar_control(
          losses, BoundFn::linear(2.0), alpha, 0.8, t, interval, eps);
      CHECK_FALSE(r.feasible);
      CHECK(r.lambda_hat == interval.lo);
    }
  }
  SUBCASE("mixed-sign linear losses match the grid oracle") {
    const std::vector<LossFn> losses = {LinearLoss{1.0}, LinearLoss{-1.0}};
    const BoundFn bound = BoundFn::linear(2.0);
    const Disutility phi = Disutility::cvar(0.5);
    const CalibrationResult r =
        conformal_cvar_control(losses, bound, 1.0, 0.5, 0.0, interval, eps);
    const double oracle = grid_sup(losses, bound, 1.0, interval, 0.0, phi);
    REQUIRE(std::isfinite(oracle));
    CHECK(oracle == doctest::Approx(0.5).epsilon(5e-4));
    CHECK(std::abs(r.lambda_hat - oracle) <= eps + 1e-4);
    CHECK(r.feasible);
  }
  SUBCASE("delta zero equals corc_bisect with the positive-part disutility") {
    const std::vector<LossFn> losses = {LinearLoss{1.0}, LinearLoss{0.5}};
    const BoundFn bound = BoundFn::linear(2.0);
    const CalibrationResult a =
        conformal_cvar_control(losses, bound, 0.8, 0.0, 0.1, interval, eps);
    const RiskSpec spec{0.8, 0.1, Disutility::cvar(0.0), interval};
    const CalibrationResult b = corc_bisect(losses, bound, spec, eps);
    CHECK(a.lambda_hat == b.lambda_hat);
  }
}

TEST_CASE("tune_t picks the largest lambda with smaller-t ties") {
  const ParamInterval interval{0.0, 1.0};
  const BoundFn bound = BoundFn::linear(2.0);
  const std::vector<LossFn> holdout = {LinearLoss{1.0}, LinearLoss{0.7}, LinearLoss{-0.5}};
  const double alpha = 0.8, delta = 0.5, eps = 1e-6;

  SUBCASE("single valid value") {
    const std::vector<double> grid = {-1.0, 0.3, 2.0};
    CHECK(tune_t(holdout, bound, alpha, delta, grid, interval, eps) == 0.3);
  }
  SUBCASE("two-point grid matches direct comparison") {
    const std::vector<double> grid = {0.0, alpha};
    const double chosen = tune_t(holdout, bound, alpha, delta, grid, interval, eps);
    const double lam0 =
        conformal_cvar_control(holdout, bound, alpha, delta, 0.0, interval, eps).lambda_hat;
    const double lam1 =
        conformal_cvar_control(holdout, bound, alpha, delta, alpha, interval, eps).lambda_hat;
    if (lam1 > lam0) {
      CHECK(chosen == alpha);
    } else {
      CHECK(chosen == 0.0);  // ties break toward smaller t
    }
  }
  SUBCASE("no valid grid point") {
    const std::vector<double> grid = {-3.0, 5.0};
    CHECK_THROWS_AS(tune_t(holdout, bound, alpha, delta, grid, interval, eps), EmptyGrid);
  }
  SUBCASE("default grid spans the window with 33 points") {
    const std::vector<double> grid = default_t_grid(0.0, 0.8);
    REQUIRE(grid.size() == 33);
    CHECK(grid.front() == 0.0);
    CHECK(grid.back() == doctest::Approx(0.8));
    CHECK(default_t_grid(1.0, 0.5).empty());
  }
}

TEST_CASE("joint_lambda_t") {
  const ParamInterval interval{0.0, 1.0};
  const double eps = 1e-6;

  SUBCASE("nonpositive slopes and a zero bound reach lambda_max") {
    const std::vector<LossFn> losses = {LinearLoss{-1.0}, LinearLoss{0.0}};
    const CalibrationResult r =
        joint_lambda_t(losses, BoundFn::linear(0.0), 0.3, 0.5, interval, eps);
    CHECK(r.feasible);
    CHECK(interval.hi - r.lambda_hat <= eps);
  }

  SUBCASE("single positive slope against the 2-D grid oracle") {
    const std::vector<LossFn> losses = {LinearLoss{1.0}};
    const BoundFn bound = BoundFn::linear(1.0);
    const ParamInterval wide{0.0, 10.0};
    const double alpha = 1.0, delta = 0.0;

    double best = -1.0;
    const Disutility phi = Disutility::cvar(delta);
    for (int ti = 0; ti <= 1000; ++ti) {
      const double t = alpha * ti / 1000.0;
      for (int li = 0; li <= 10000; ++li) {
        const double lambda = 10.0 * li / 10000.0;
        if (empirical_h_tilde(losses, bound, lambda, t, phi) <= alpha) {
          best = std::max(best, lambda);
        }
      }
    }
    CHECK(best == doctest::Approx(1.0).epsilon(2e-3));

    const CalibrationResult r = joint_lambda_t(losses, bound, alpha, delta, wide, eps);
    CHECK(r.lambda_hat >= best - eps - 1e-3);
    CHECK(r.h_tilde_at_lambda <= alpha);
  }

  SUBCASE("dominates every fixed-t grid point") {
    Rng rng(53);
    for (int inst = 0; inst < 30; ++inst) {
      std::vector<LossFn> losses;
      const int n = 2 + static_cast<int>(rng.uniform_index(10));
      for (int i = 0; i < n; ++i) losses.push_back(LinearLoss{rng.uniform(-2.0, 2.0)});
      const BoundFn bound = BoundFn::linear(2.5);
      const double alpha = rng.uniform(0.2, 2.0);
      const double delta = 0.9 * rng.uniform();

      const CalibrationResult joint =
          joint_lambda_t(losses, bound, alpha, delta, interval, eps);
      double grid_best = 0.0;
      for (int g = 0; g < 100; ++g) {
        const double t = alpha * g / 99.0;
        grid_best = std::max(grid_best,
                             conformal_cvar_control(losses, bound, alpha, delta, t,
                                                    interval, eps)
                                 .lambda_hat);
      }
      CHECK(joint.lambda_hat >= grid_best - 1e-4);
    }
  }

  SUBCASE("structural requirements") {
    const std::vector<LossFn> step = {StepLoss(0.0, {{0.5, 1.0}})};
    CHECK_THROWS_AS(joint_lambda_t(step, BoundFn::linear(2.0), 0.5, 0.5, interval, eps),
                    Unsupported);
    const std::vector<LossFn> lin = {LinearLoss{1.0}};
    CHECK_THROWS_AS(joint_lambda_t(lin, BoundFn::constant(1.0), 0.5, 0.5, interval, eps),
                    Unsupported);
  }
}

TEST_CASE("bisection lambda is monotone in alpha") {
  Rng rng(61);
  const BoundFn bound = BoundFn::constant(2.5);
  const ParamInterval interval{0.0, 1.0};
  for (int inst = 0; inst < 100; ++inst) {
    const std::vector<LossFn> losses = random_step_losses(rng);
    const double a1 = rng.uniform(0.0, 1.2);
    const double a2 = a1 + rng.uniform(0.0, 0.5);
    const CalibrationResult r1 = crc_bisect(losses, bound, a1, interval, 1e-6);
    const CalibrationResult r2 = crc_bisect(losses, bound, a2, interval, 1e-6);
    CHECK(r1.lambda_hat <= r2.lambda_hat);
  }
}

TEST_CASE("bisection against the oracle on random instances") {
  Rng rng(71);
  const BoundFn bound = BoundFn::constant(2.5);
  const ParamInterval interval{0.0, 1.0};
  const double eps = 1e-6;
  for (int inst = 0; inst < 100; ++inst) {
    const std::vector<LossFn> losses = random_step_losses(rng);
    const double alpha = rng.uniform(0.1, 1.4);
    const CalibrationResult r = crc_bisect(losses, bound, alpha, interval, eps);
    const double oracle =
        grid_sup(losses, bound, alpha, interval, 0.0, Disutility::identity());
    if (std::isfinite(oracle)) {
      CHECK(std::abs(r.lambda_hat - oracle) <= eps + 1e-4);
    } else {
      CHECK_FALSE(r.feasible);
    }
  }
}
