#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace corc {

// Closed bounded parameter interval [lo, hi].
struct ParamInterval {
  double lo = 0.0;
  double hi = 1.0;
  void validate() const;  // throws std::invalid_argument
};

// Left-continuous nondecreasing piecewise-constant loss:
//   L(lambda) = base + sum of size_j over jumps with location_j < lambda.
// The inequality is strict, so the value at a jump location excludes that
// jump. Jumps are sorted at construction and duplicate locations merge by
// summing sizes; sizes must be nonnegative.
class StepLoss {
 public:
  struct Jump {
    double location;
    double size;
  };

  StepLoss() = default;
  StepLoss(double base, std::vector<Jump> jumps);

  // Exact-stairs form: the value at lambda is levels[k-1] (or base when
  // k = 0) where k counts locations strictly below lambda. Avoids the
  // rounding drift of accumulating many tiny jump sizes; locations must be
  // strictly increasing and levels nondecreasing from base.
  static StepLoss from_levels(double base, std::vector<double> locations,
                              std::vector<double> levels);

  double operator()(double lambda) const;

  double base() const { return base_; }
  std::size_t jump_count() const { return locations_.size(); }
  const std::vector<double>& locations() const { return locations_; }
  double size_at(std::size_t j) const { return cumulative_[j + 1] - cumulative_[j]; }
  // Value past the last jump: base + sum of all sizes.
  double total() const { return cumulative_.back(); }

 private:
  double base_ = 0.0;
  std::vector<double> locations_;   // strictly increasing
  std::vector<double> cumulative_;  // cumulative_[k] = base + sizes of first k jumps
};

// L(lambda) = slope * lambda. Slope of either sign; nondecreasing iff >= 0.
struct LinearLoss {
  double slope = 0.0;
  double operator()(double lambda) const { return slope * lambda; }
};

using LossFn = std::variant<StepLoss, LinearLoss>;

double eval_loss(const LossFn& loss, double lambda);

// True when the loss is nondecreasing in lambda (StepLoss always is).
bool is_nondecreasing(const LossFn& loss);

// Worst-case upper bound B(lambda); nondecreasing by construction.
class BoundFn {
 public:
  enum class Kind { constant, linear, step };

  static BoundFn constant(double value);
  static BoundFn linear(double slope);  // slope >= 0 required
  static BoundFn step(StepLoss s);

  double operator()(double lambda) const;
  Kind kind() const { return kind_; }
  double constant_value() const { return value_; }
  double linear_slope() const { return value_; }
  const StepLoss& step_loss() const { return step_; }

 private:
  BoundFn(Kind kind, double value, StepLoss step)
      : kind_(kind), value_(value), step_(std::move(step)) {}
  Kind kind_ = Kind::constant;
  double value_ = 0.0;
  StepLoss step_;
};

// Builds the false-negative-fraction loss of a single example from the
// scores of its positive pixels: one jump of size 1/|positives| at each
// score, duplicates merged. Throws NoPositivePixels on an empty list (the
// loss divides by the positive count, so such examples must be dropped).
StepLoss fnr_step_loss(std::span<const double> positive_pixel_scores);

// Checks L_i(lambda) <= B(lambda) for every loss at every grid point, and
// additionally just before and just after every step-loss jump location.
bool validate_bound(std::span<const LossFn> losses, const BoundFn& bound,
                    std::span<const double> grid);

// --- line-oriented text format ------------------------------------------
// One loss per line:
//   step <base> <g1>:<c1> <g2>:<c2> ...
//   linear <slope>
// Bound specs use the same tokens plus "const <value>".

LossFn parse_loss_line(std::string_view line);
std::string format_loss(const LossFn& loss);
BoundFn parse_bound_spec(std::string_view spec);

std::vector<LossFn> read_losses(std::istream& in);
std::vector<LossFn> read_loss_file(const std::string& path);
void write_losses(std::ostream& out, std::span<const LossFn> losses);

}  // namespace corc
