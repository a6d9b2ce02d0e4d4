#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "corc/errors.hpp"
#include "corc/losses.hpp"
#include "corc/random.hpp"

using namespace corc;

TEST_CASE("step loss is left-continuous at jumps") {
  const StepLoss loss(0.0, {{0.4, 1.0}});
  CHECK(loss(0.4) == 0.0);  // strict inequality: the jump at 0.4 is excluded
  CHECK(loss(0.4000001) == 1.0);
  CHECK(loss(std::nextafter(0.4, std::numeric_limits<double>::infinity())) == 1.0);
  CHECK(loss(std::nextafter(0.4, 0.0)) == 0.0);
}

TEST_CASE("linear loss evaluation") {
  const LinearLoss loss{-2.0};
  CHECK(loss(0.5) == -1.0);
  CHECK(is_nondecreasing(LossFn{LinearLoss{0.0}}));
  CHECK_FALSE(is_nondecreasing(LossFn{LinearLoss{-0.1}}));
}

TEST_CASE("step loss construction sorts, merges, validates") {
  const StepLoss merged(0.1, {{0.5, 0.2}, {0.2, 0.1}, {0.5, 0.3}});
  CHECK(merged.jump_count() == 2);
  CHECK(merged.locations()[0] == 0.2);
  CHECK(merged.size_at(1) == doctest::Approx(0.5));
  CHECK(merged.total() == doctest::Approx(0.7));
  CHECK(merged(10.0) == doctest::Approx(0.7));

  CHECK_THROWS_AS(StepLoss(0.0, {{0.5, -0.1}}), std::invalid_argument);
  CHECK_THROWS_AS(StepLoss(std::nan(""), {}), std::invalid_argument);
}

TEST_CASE("step loss is nondecreasing across random grids") {
  Rng rng(3);
  for (int inst = 0; inst < 50; ++inst) {
    std::vector<StepLoss::Jump> jumps;
    const int j = static_cast<int>(rng.uniform_index(8));
    for (int k = 0; k < j; ++k) jumps.push_back({rng.uniform(-1.0, 2.0), rng.uniform()});
    const StepLoss loss(rng.uniform(), std::move(jumps));
    double prev = -std::numeric_limits<double>::infinity();
    for (double lambda = -1.5; lambda <= 2.5; lambda += 0.01) {
      const double v = loss(lambda);
      CHECK(v >= prev);
      prev = v;
    }
  }
}

TEST_CASE("fnr_step_loss matches the direct fraction") {
  SUBCASE("two positives") {
    const std::vector<double> scores = {0.3, 0.7};
    const StepLoss loss = fnr_step_loss(scores);
    CHECK(loss(0.5) == doctest::Approx(0.5));
    CHECK(loss(0.2) == 0.0);
    CHECK(loss(0.8) == doctest::Approx(1.0));
  }
  SUBCASE("threshold below and above a single score") {
    const std::vector<double> one = {0.9};
    CHECK(fnr_step_loss(one)(0.1) == 0.0);
    CHECK(fnr_step_loss(one)(1.0) == 1.0);
  }
  SUBCASE("no positive pixels") {
    CHECK_THROWS_AS(fnr_step_loss({}), NoPositivePixels);
  }
  SUBCASE("oracle equivalence over random score sets") {
    Rng rng(7);
    for (int inst = 0; inst < 30; ++inst) {
      const int n = 1 + static_cast<int>(rng.uniform_index(20));
      std::vector<double> scores(n);
      for (double& s : scores) s = 0.1 * std::floor(10.0 * rng.uniform());  // force ties
      const StepLoss loss = fnr_step_loss(scores);
      for (double lambda = -0.1; lambda <= 1.1; lambda += 0.013) {
        double fraction = 0.0;
        for (double s : scores) fraction += (s < lambda) ? 1.0 : 0.0;
        fraction /= n;
        CHECK(loss(lambda) == doctest::Approx(fraction).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("validate_bound") {
  SUBCASE("step losses under a constant bound") {
    std::vector<LossFn> losses;
    for (double q : {0.2, 0.4, 0.6, 0.8}) losses.push_back(StepLoss(0.0, {{q, 1.0}}));
    const std::vector<double> grid = {0.0, 0.25, 0.5, 0.75, 1.0};
    CHECK(validate_bound(losses, BoundFn::constant(1.0), grid));
  }
  SUBCASE("linear loss steeper than the linear bound") {
    const std::vector<LossFn> losses = {LinearLoss{101.0}};
    const std::vector<double> grid = {0.5, 1.0};
    CHECK_FALSE(validate_bound(losses, BoundFn::linear(100.0), grid));
  }
  SUBCASE("empty loss list is vacuously bounded") {
    const std::vector<double> grid = {0.0, 1.0};
    CHECK(validate_bound({}, BoundFn::constant(0.0), grid));
  }
  SUBCASE("violation between grid points is caught at jump locations") {
    // loss jumps at 0.5, bound only at 0.6: violated on (0.5, 0.6] which the
    // coarse grid misses entirely
    const std::vector<LossFn> losses = {StepLoss(0.0, {{0.5, 1.0}})};
    const BoundFn bound = BoundFn::step(StepLoss(0.0, {{0.6, 1.0}}));
    const std::vector<double> grid = {0.25, 0.75};
    CHECK_FALSE(validate_bound(losses, bound, grid));
  }
}

TEST_CASE("loss text format round-trips") {
  SUBCASE("parse specific lines") {
    const LossFn step = parse_loss_line("step 0.5 0.2:0.1 0.7:0.3");
    CHECK(eval_loss(step, 0.3) == doctest::Approx(0.6));
    const LossFn linear = parse_loss_line("linear -2.5");
    CHECK(eval_loss(linear, 2.0) == doctest::Approx(-5.0));
    CHECK_THROWS_AS(parse_loss_line("spline 1 2 3"), ParseError);
    CHECK_THROWS_AS(parse_loss_line("step"), ParseError);
    CHECK_THROWS_AS(parse_loss_line("step 0 0.5"), ParseError);
  }
  SUBCASE("format then parse preserves values") {
    Rng rng(13);
    for (int inst = 0; inst < 40; ++inst) {
      LossFn loss;
      if (rng.bernoulli(0.5)) {
        std::vector<StepLoss::Jump> jumps;
        const int j = static_cast<int>(rng.uniform_index(6));
        for (int k = 0; k < j; ++k) jumps.push_back({rng.uniform(), rng.uniform()});
        loss = StepLoss(rng.uniform(), std::move(jumps));
      } else {
        loss = LinearLoss{rng.uniform(-10.0, 10.0)};
      }
      const LossFn reparsed = parse_loss_line(format_loss(loss));
      for (double lambda = 0.0; lambda <= 1.0; lambda += 0.09) {
        CHECK(eval_loss(reparsed, lambda) == eval_loss(loss, lambda));
      }
    }
  }
  SUBCASE("loss file stream with comments") {
    std::istringstream in("# header\nstep 0 0.5:1\n\nlinear 3\n");
    const std::vector<LossFn> losses = read_losses(in);
    REQUIRE(losses.size() == 2);
    CHECK(eval_loss(losses[0], 0.6) == 1.0);
    CHECK(eval_loss(losses[1], 2.0) == 6.0);
  }
  SUBCASE("bound specs") {
    CHECK(parse_bound_spec("const 1.5")(0.3) == 1.5);
    CHECK(parse_bound_spec("linear 100")(0.5) == 50.0);
    CHECK(parse_bound_spec("step 0 0.5:2")(0.7) == 2.0);
    CHECK_THROWS_AS(parse_bound_spec("linear -1"), std::invalid_argument);
    CHECK_THROWS_AS(parse_bound_spec("weird 1"), ParseError);
  }
}

TEST_CASE("param interval validation") {
  CHECK_THROWS_AS((ParamInterval{1.0, 0.0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS(
      (ParamInterval{0.0, std::numeric_limits<double>::infinity()}.validate()),
      std::invalid_argument);
  CHECK_NOTHROW((ParamInterval{0.0, 1.0}.validate()));
}
