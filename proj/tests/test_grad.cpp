#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "corc/calibrate.hpp"
#include "corc/errors.hpp"
#include "corc/grad.hpp"
#include "corc/random.hpp"

using namespace corc;

namespace {

Eigen::VectorXd random_vector(Rng& rng, int dim, double scale = 1.0) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = scale * rng.normal();
  return v;
}

bool grad_close(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                double tol = 1e-5) {
  const double denom = std::max(1.0, analytic.norm());
  return (analytic - numeric).norm() / denom <= tol;
}

}  // namespace

TEST_CASE("piecewise gradient on the two-pixel example") {
  // one image, positive-pixel scores 0.3 and 0.7 with gradients x1, x2,
  // jump sizes 0.5, B = 1, alpha = 0.8: the running h crosses 0.8 at the
  // second threshold
  Eigen::VectorXd x1(2), x2(2);
  x1 << 1.0, 2.0;
  x2 << -3.0, 0.5;
  std::vector<std::vector<ThresholdStep>> steps(1);
  steps[0].push_back({0.3, x1, 0.5});
  steps[0].push_back({0.7, x2, 0.5});

  const LambdaGrad g =
      lambda_grad_piecewise(steps, BoundFn::constant(1.0), 0.8, {0.0, 1.0});
  CHECK(g.value == 0.7);
  CHECK(g.kind == LambdaGrad::Kind::active_jump);
  CHECK(g.grad == x2);

  SUBCASE("vacuous constraint returns lambda_max with zero gradient") {
    const LambdaGrad top =
        lambda_grad_piecewise(steps, BoundFn::constant(1.0), 1.0, {0.0, 1.0});
    CHECK(top.value == 1.0);
    CHECK(top.kind == LambdaGrad::Kind::interior_max);
    CHECK(top.grad.isZero(0.0));
  }
  SUBCASE("infeasible problem falls back to lambda_min") {
    const LambdaGrad bottom =
        lambda_grad_piecewise(steps, BoundFn::constant(1.0), 0.3, {0.0, 1.0});
    CHECK(bottom.value == 0.0);
    CHECK(bottom.kind == LambdaGrad::Kind::fallback_zero);
    CHECK(bottom.grad.isZero(0.0));
  }
  SUBCASE("coincident thresholds raise TieDetected") {
    std::vector<std::vector<ThresholdStep>> tied(1);
    tied[0].push_back({0.5, x1, 0.5});
    tied[0].push_back({0.5 + 1e-13, x2, 0.5});
    CHECK_THROWS_AS(
        lambda_grad_piecewise(tied, BoundFn::constant(1.0), 0.8, {0.0, 1.0}),
        TieDetected);
  }
  SUBCASE("linear bound is out of scope for the piecewise case") {
    CHECK_THROWS_AS(
        lambda_grad_piecewise(steps, BoundFn::linear(1.0), 0.8, {0.0, 1.0}),
        Unsupported);
  }
  SUBCASE("crossing at a bound jump carries zero gradient") {
    const BoundFn bound = BoundFn::step(StepLoss(0.0, {{0.55, 1.0}}));
    // with alpha = 0.5: base h = 0, loss jump at 0.3 -> 0.25, bound jump at
    // 0.55 -> 0.75 crosses
    const LambdaGrad g2 = lambda_grad_piecewise(steps, bound, 0.5, {0.0, 1.0});
    CHECK(g2.value == 0.55);
    CHECK(g2.kind == LambdaGrad::Kind::active_jump);
    CHECK(g2.grad.isZero(0.0));
  }
  SUBCASE("variance-reduced option averages the nearest loss thresholds") {
    PiecewiseGradOptions options;
    options.average_nearest = 2;
    const LambdaGrad g2 =
        lambda_grad_piecewise(steps, BoundFn::constant(1.0), 0.8, {0.0, 1.0}, options);
    CHECK(g2.value == 0.7);
    CHECK((g2.grad - 0.5 * (x1 + x2)).norm() <= 1e-15);

    options.average_nearest = 1;  // reduces to the exact single-threshold gradient
    const LambdaGrad g1 =
        lambda_grad_piecewise(steps, BoundFn::constant(1.0), 0.8, {0.0, 1.0}, options);
    CHECK(g1.grad == x2);
  }
}

TEST_CASE("piecewise gradient agrees with central finite differences") {
  Rng rng(101);
  const int dim = 4;
  int checked = 0;
  for (int inst = 0; inst < 200; ++inst) {
    // random feature matrix; thresholds are theta . x_j
    const int n_losses = 1 + static_cast<int>(rng.uniform_index(4));
    const int jumps_per_loss = 1 + static_cast<int>(rng.uniform_index(4));
    std::vector<Eigen::MatrixXd> features(n_losses);
    for (auto& f : features) {
      f.resize(jumps_per_loss, dim);
      for (int r = 0; r < jumps_per_loss; ++r)
        for (int c = 0; c < dim; ++c) f(r, c) = rng.normal();
    }
    const Eigen::VectorXd theta = random_vector(rng, dim);
    const double alpha = rng.uniform(0.3, 0.95);

    const auto lambda_of = [&](const Eigen::VectorXd& th) {
      std::vector<std::vector<ThresholdStep>> steps(n_losses);
      const double size = 1.0 / jumps_per_loss;
      for (int i = 0; i < n_losses; ++i) {
        for (int r = 0; r < jumps_per_loss; ++r) {
          steps[i].push_back(
              {th.dot(features[i].row(r)), features[i].row(r).transpose(), size});
        }
      }
      return lambda_grad_piecewise(steps, BoundFn::constant(1.0), alpha, {-50.0, 50.0});
    };

    LambdaGrad g;
    try {
      g = lambda_of(theta);
    } catch (const TieDetected&) {
      continue;  // degenerate draw
    }
    if (g.kind != LambdaGrad::Kind::active_jump) continue;

    const Eigen::VectorXd fd = central_difference(
        [&](const Eigen::VectorXd& th) { return lambda_of(th).value; }, theta, 1e-6);
    CHECK(grad_close(g.grad, fd));
    // the returned lambda is always one of the thresholds
    bool found = false;
    for (int i = 0; i < n_losses && !found; ++i) {
      for (int r = 0; r < jumps_per_loss; ++r) {
        if (theta.dot(features[i].row(r)) == g.value) found = true;
      }
    }
    CHECK(found);
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("kkt gradient on the hand-solved instance") {
  // slopes theta and 2 theta, bound slope 3, identity phi, alpha = 1:
  // the constraint (1 + theta) lambda = 1 binds, lambda = 0.5 at theta = 1
  // and dlambda/dtheta = -alpha / (1 + theta)^2 = -0.25
  KktProblem p;
  p.slopes = Eigen::VectorXd(2);
  p.slopes << 1.0, 2.0;
  p.slope_grads = Eigen::MatrixXd(2, 1);
  p.slope_grads << 1.0, 2.0;
  p.bound_slope = 3.0;
  p.phi = Disutility::identity();
  p.t = 0.0;
  p.alpha = 1.0;
  p.interval = {0.0, 10.0};
  p.objective_kind = ObjectiveKind::strictly_decreasing;

  const LambdaGrad g = lambda_grad_kkt(p);
  CHECK(g.value == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(g.kind == LambdaGrad::Kind::kkt);
  CHECK(g.grad[0] == doctest::Approx(-0.25).epsilon(1e-8));
  CHECK(g.mu > 0.0);
}

TEST_CASE("kkt slack-constraint branches") {
  SUBCASE("strictly convex objective with an interior theta-independent minimum") {
    KktProblem p;
    p.slopes = Eigen::VectorXd::Constant(1, 0.2);
    p.slope_grads = Eigen::MatrixXd::Zero(1, 3);
    p.bound_slope = 1.0;
    p.phi = Disutility::identity();
    p.alpha = 5.0;  // slack everywhere
    p.interval = {0.0, 1.0};
    p.objective_kind = ObjectiveKind::strictly_convex;
    p.objective.dlambda = [](double l) { return 2.0 * (l - 0.3); };
    p.objective.d2lambda = [](double) { return 2.0; };
    p.objective.dlambda_dtheta = [](double) { return Eigen::VectorXd::Zero(3); };

    const LambdaGrad g = lambda_grad_kkt(p);
    CHECK(g.value == doctest::Approx(0.3).epsilon(1e-10));
    CHECK(g.kind == LambdaGrad::Kind::kkt);
    CHECK(g.mu == 0.0);
    CHECK(g.grad.isZero(1e-12));
  }
  SUBCASE("cvar with t above every term leaves the whole interval feasible") {
    KktProblem p;
    p.slopes = Eigen::VectorXd::Constant(2, 0.5);
    p.slope_grads = Eigen::MatrixXd::Ones(2, 2);
    p.bound_slope = 1.0;
    p.phi = Disutility::cvar(0.8);
    p.t = 2.0;     // above bound_slope * hi
    p.alpha = 2.0;  // h~ == t <= alpha
    p.interval = {0.0, 1.0};
    p.objective_kind = ObjectiveKind::strictly_decreasing;

    const LambdaGrad g = lambda_grad_kkt(p);
    CHECK(g.value == 1.0);
    CHECK(g.kind == LambdaGrad::Kind::interior_max);
    CHECK(g.grad.isZero(0.0));
  }
  SUBCASE("infeasible problem falls back to lambda_min with zero gradient") {
    KktProblem p;
    p.slopes = Eigen::VectorXd::Constant(1, 1.0);
    p.slope_grads = Eigen::MatrixXd::Ones(1, 2);
    p.bound_slope = 1.0;
    p.phi = Disutility::identity();
    p.t = 0.0;
    p.alpha = -1.0;  // h~(0) = 0 > alpha
    p.interval = {0.0, 1.0};
    p.objective_kind = ObjectiveKind::strictly_decreasing;
    const LambdaGrad g = lambda_grad_kkt(p);
    CHECK(g.kind == LambdaGrad::Kind::fallback_zero);
    CHECK(g.value == 0.0);
    CHECK(g.grad.isZero(0.0));
  }
}

TEST_CASE("kkt degeneracy guards") {
  SUBCASE("sample on the cvar kink raises KinkAtSolution") {
    // alpha chosen so the active lambda* = 0.5 puts a_1 lambda* exactly at t
    KktProblem p;
    p.slopes = Eigen::VectorXd(2);
    p.slopes << 1.0, 2.0;
    p.slope_grads = Eigen::MatrixXd::Ones(2, 1);
    p.bound_slope = 3.0;
    p.phi = Disutility::cvar(0.5);
    p.t = 0.5;
    p.alpha = 1.5;  // h~(0.5) = (2.5 + 0.5 + 1.5) / 3 with phi(x) = 2 [x]_+
    p.interval = {0.0, 1.0};
    p.objective_kind = ObjectiveKind::strictly_decreasing;
    CHECK_THROWS_AS(lambda_grad_kkt(p), KinkAtSolution);
  }
  SUBCASE("singular KKT matrix raises SingularKkt") {
    // strictly convex objective whose unconstrained minimum sits exactly on
    // the constraint boundary: the (2,2) entry vanishes with mu = 0
    KktProblem p;
    p.slopes = Eigen::VectorXd::Constant(1, 1.0);
    p.slope_grads = Eigen::MatrixXd::Zero(1, 1);
    p.bound_slope = 1.0;
    p.phi = Disutility::identity();
    p.t = 0.0;
    p.interval = {0.0, 1.0};
    p.objective_kind = ObjectiveKind::strictly_convex;
    p.objective.dlambda = [](double l) { return 2.0 * (l - 0.5); };
    p.objective.d2lambda = [](double) { return 2.0; };
    p.objective.dlambda_dtheta = [](double) { return Eigen::VectorXd::Zero(1); };
    p.alpha = 0.5;  // h~(0.5) = (0.5 + 0.5) / 2 = 0.5 exactly at the minimum
    CHECK_THROWS_AS(lambda_grad_kkt(p), SingularKkt);
  }
}

TEST_CASE("kkt gradient agrees with finite differences on random instances") {
  Rng rng(113);
  const int dim = 3;
  int checked_active = 0;
  int checked_convex = 0;
  for (int inst = 0; inst < 300; ++inst) {
    const int n = 2 + static_cast<int>(rng.uniform_index(6));
    Eigen::MatrixXd features(n, dim);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < dim; ++c) features(r, c) = rng.normal();
    const Eigen::VectorXd theta = random_vector(rng, dim, 0.7);
    const double bound_slope = 12.0;
    const bool use_cvar = rng.bernoulli(0.5);
    const Disutility phi = use_cvar ? Disutility::cvar(0.5 * rng.uniform()) : Disutility::identity();
    const double t = use_cvar ? rng.uniform(0.0, 0.5) : 0.0;
    const double alpha = rng.uniform(0.4, 2.0);
    const bool convex_objective = rng.bernoulli(0.4);
    const double target = rng.uniform(0.2, 0.8);

    const auto make_problem = [&](const Eigen::VectorXd& th) {
      KktProblem p;
      p.slopes.resize(n);
      p.slope_grads.resize(n, dim);
      for (int r = 0; r < n; ++r) {
        // slope_i = softplus-ish positive map of th . x_r keeps h~ nondecreasing
        const double u = th.dot(features.row(r));
        p.slopes[r] = std::log1p(std::exp(u)) + 0.05;
        const double sig = 1.0 / (1.0 + std::exp(-u));
        p.slope_grads.row(r) = sig * features.row(r);
      }
      p.bound_slope = bound_slope;
      p.phi = phi;
      p.t = t;
      p.alpha = alpha;
      p.interval = {0.0, 1.0};
      if (convex_objective) {
        p.objective_kind = ObjectiveKind::strictly_convex;
        p.objective.dlambda = [target](double l) { return 2.0 * (l - target); };
        p.objective.d2lambda = [](double) { return 2.0; };
        p.objective.dlambda_dtheta = [dim](double) { return Eigen::VectorXd::Zero(dim); };
      } else {
        p.objective_kind = ObjectiveKind::strictly_decreasing;
      }
      return p;
    };

    LambdaGrad g;
    try {
      g = lambda_grad_kkt(make_problem(theta));
    } catch (const KinkAtSolution&) {
      continue;
    } catch (const SingularKkt&) {
      continue;
    }
    if (g.kind != LambdaGrad::Kind::kkt) continue;
    // complementary slackness at the solution
    if (g.mu != 0.0) {
      const auto p = make_problem(theta);
      const std::vector<LossFn> losses = [&] {
        std::vector<LossFn> out;
        for (int r = 0; r < n; ++r) out.push_back(LinearLoss{p.slopes[r]});
        return out;
      }();
      const double resid =
          empirical_h_tilde(losses, BoundFn::linear(bound_slope), g.value, t, phi) - alpha;
      CHECK(std::abs(g.mu * resid) <= 1e-8);
    }

    bool degenerate_nearby = false;
    Eigen::VectorXd fd(dim);
    try {
      fd = central_difference(
          [&](const Eigen::VectorXd& th) { return lambda_grad_kkt(make_problem(th)).value; },
          theta, 1e-6);
    } catch (const Error&) {
      degenerate_nearby = true;
    }
    if (degenerate_nearby) continue;
    CHECK(grad_close(g.grad, fd));
    (g.mu != 0.0 ? checked_active : checked_convex) += 1;
  }
  CHECK(checked_active + checked_convex > 120);
  CHECK(checked_active > 20);
}

TEST_CASE("conftr quantile gradient") {
  const int dim = 2;
  std::vector<ScoreWithGrad> scores;
  Rng rng(131);
  for (int i = 1; i <= 9; ++i) {
    scores.push_back({0.1 * i, random_vector(rng, dim)});
  }

  SUBCASE("nine uniform scores at alpha 0.1 select the ninth order statistic") {
    const LambdaGrad g = conftr_quantile_grad(scores, 0.1);
    CHECK(g.value == doctest::Approx(1.0 - 0.9).epsilon(1e-12));
    CHECK(g.kind == LambdaGrad::Kind::active_jump);
    CHECK(g.grad == (-scores[8].grad).eval());
  }
  SUBCASE("alpha below 1/(N+1) selects the sentinel") {
    const LambdaGrad g = conftr_quantile_grad(scores, 0.05);
    CHECK(g.kind == LambdaGrad::Kind::fallback_zero);
    CHECK(g.value == 0.0);
    CHECK(g.grad.isZero(0.0));
  }
  SUBCASE("single score at alpha one half") {
    const std::vector<ScoreWithGrad> one = {scores[4]};
    const LambdaGrad g = conftr_quantile_grad(one, 0.5);
    CHECK(g.value == doctest::Approx(1.0 - one[0].value));
    CHECK(g.grad == (-one[0].grad).eval());
  }
  SUBCASE("tie at the selected order statistic") {
    std::vector<ScoreWithGrad> tied = scores;
    tied[7].value = tied[8].value;
    CHECK_THROWS_AS(conftr_quantile_grad(tied, 0.1), TieDetected);
  }
  SUBCASE("finite differences confirm the gradient") {
    Eigen::MatrixXd features(9, dim);
    for (int r = 0; r < 9; ++r)
      for (int c = 0; c < dim; ++c) features(r, c) = rng.normal();
    const Eigen::VectorXd theta = random_vector(rng, dim);
    const auto lambda_of = [&](const Eigen::VectorXd& th) {
      std::vector<ScoreWithGrad> s;
      for (int r = 0; r < 9; ++r) {
        s.push_back({th.dot(features.row(r)), features.row(r).transpose()});
      }
      return conftr_quantile_grad(s, 0.25, {-100.0, 100.0});
    };
    const LambdaGrad g = lambda_of(theta);
    REQUIRE(g.kind == LambdaGrad::Kind::active_jump);
    const Eigen::VectorXd fd = central_difference(
        [&](const Eigen::VectorXd& th) { return lambda_of(th).value; }, theta, 1e-6);
    CHECK(grad_close(g.grad, fd));
  }
}

TEST_CASE("conftr lambda equals crc_bisect on the miscoverage step losses") {
  Rng rng(137);
  for (int inst = 0; inst < 50; ++inst) {
    const int n = 3 + static_cast<int>(rng.uniform_index(30));
    std::vector<ScoreWithGrad> scores;
    std::vector<LossFn> losses;
    for (int i = 0; i < n; ++i) {
      const double s = rng.uniform(0.05, 0.95);
      scores.push_back({s, Eigen::VectorXd::Zero(1)});
      // miscoverage 1[s > 1 - lambda] = 1[(1 - s) < lambda]
      losses.push_back(StepLoss(0.0, {{1.0 - s, 1.0}}));
    }
    const double alpha = rng.uniform(1.5 / (n + 1), 0.6);
    LambdaGrad g;
    try {
      g = conftr_quantile_grad(scores, alpha);
    } catch (const TieDetected&) {
      continue;
    }
    const CalibrationResult r =
        crc_bisect(losses, BoundFn::constant(1.0), alpha, {0.0, 1.0}, 1e-9);
    CHECK(std::abs(g.value - r.lambda_hat) <= 1e-6);
  }
}

TEST_CASE("full_cost_grad chain rule") {
  LambdaGrad lg;
  lg.value = 0.5;
  lg.grad = Eigen::VectorXd(1);
  lg.grad << -0.25;
  lg.kind = LambdaGrad::Kind::kkt;

  Eigen::VectorXd zero1 = Eigen::VectorXd::Zero(1);
  SUBCASE("dlambda weight of 2 against the hand instance") {
    const Eigen::VectorXd g = full_cost_grad(lg, {zero1, 2.0});
    CHECK(g[0] == doctest::Approx(-0.5));
  }
  SUBCASE("zero dlambda leaves dtheta unchanged") {
    Eigen::VectorXd dtheta(1);
    dtheta << 3.0;
    CHECK(full_cost_grad(lg, {dtheta, 0.0})[0] == 3.0);
  }
  SUBCASE("zero lambda gradient leaves dtheta unchanged") {
    LambdaGrad flat;
    flat.grad = Eigen::VectorXd::Zero(1);
    flat.kind = LambdaGrad::Kind::interior_max;
    Eigen::VectorXd dtheta(1);
    dtheta << 3.0;
    CHECK(full_cost_grad(flat, {dtheta, 5.0})[0] == 3.0);
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(full_cost_grad(lg, {Eigen::VectorXd::Zero(3), 1.0}),
                    DimensionMismatch);
  }
}
