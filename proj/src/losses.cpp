#include "corc/losses.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "corc/errors.hpp"

namespace corc {

void ParamInterval::validate() const {
  if (!std::isfinite(lo) || !std::isfinite(hi)) {
    throw std::invalid_argument("ParamInterval must be finite");
  }
  if (lo > hi) {
    throw std::invalid_argument("ParamInterval requires lo <= hi");
  }
}

StepLoss::StepLoss(double base, std::vector<Jump> jumps) : base_(base) {
  if (!std::isfinite(base)) {
    throw std::invalid_argument("StepLoss base must be finite");
  }
  for (const Jump& j : jumps) {
    if (!std::isfinite(j.location) || !std::isfinite(j.size)) {
      throw std::invalid_argument("StepLoss jumps must be finite");
    }
    if (j.size < 0.0) {
      throw std::invalid_argument("StepLoss jump sizes must be nonnegative");
    }
  }
  std::sort(jumps.begin(), jumps.end(),
            [](const Jump& a, const Jump& b) { return a.location < b.location; });

  locations_.reserve(jumps.size());
  cumulative_.reserve(jumps.size() + 1);
  cumulative_.push_back(base_);
  for (const Jump& j : jumps) {
    if (!locations_.empty() && locations_.back() == j.location) {
      cumulative_.back() += j.size;  // merge duplicates
    } else {
      locations_.push_back(j.location);
      cumulative_.push_back(cumulative_.back() + j.size);
    }
  }
}

StepLoss StepLoss::from_levels(double base, std::vector<double> locations,
                               std::vector<double> levels) {
  if (locations.size() != levels.size()) {
    throw std::invalid_argument("StepLoss::from_levels: locations/levels size mismatch");
  }
  StepLoss out;
  out.base_ = base;
  out.cumulative_.reserve(levels.size() + 1);
  out.cumulative_.push_back(base);
  double prev_location = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < locations.size(); ++j) {
    if (!std::isfinite(locations[j]) || locations[j] <= prev_location) {
      throw std::invalid_argument("StepLoss::from_levels: locations must strictly increase");
    }
    if (!std::isfinite(levels[j]) || levels[j] < out.cumulative_.back()) {
      throw std::invalid_argument("StepLoss::from_levels: levels must be nondecreasing");
    }
    prev_location = locations[j];
    out.cumulative_.push_back(levels[j]);
  }
  out.locations_ = std::move(locations);
  return out;
}

double StepLoss::operator()(double lambda) const {
  if (locations_.empty()) return base_;
  // count of locations strictly below lambda
  const auto it = std::lower_bound(locations_.begin(), locations_.end(), lambda);
  return cumulative_[static_cast<std::size_t>(it - locations_.begin())];
}

double eval_loss(const LossFn& loss, double lambda) {
  if (!std::isfinite(lambda)) {
    throw std::invalid_argument("eval_loss: lambda must be finite");
  }
  return std::visit([lambda](const auto& l) { return l(lambda); }, loss);
}

bool is_nondecreasing(const LossFn& loss) {
  if (std::holds_alternative<StepLoss>(loss)) return true;
  return std::get<LinearLoss>(loss).slope >= 0.0;
}

BoundFn BoundFn::constant(double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("bound must be finite");
  return BoundFn(Kind::constant, value, StepLoss{});
}

BoundFn BoundFn::linear(double slope) {
  if (!std::isfinite(slope)) throw std::invalid_argument("bound must be finite");
  if (slope < 0.0) {
    throw std::invalid_argument("linear bound slope must be >= 0 (bound must be nondecreasing)");
  }
  return BoundFn(Kind::linear, slope, StepLoss{});
}

BoundFn BoundFn::step(StepLoss s) { return BoundFn(Kind::step, 0.0, std::move(s)); }

double BoundFn::operator()(double lambda) const {
  switch (kind_) {
    case Kind::constant:
      return value_;
    case Kind::linear:
      return value_ * lambda;
    case Kind::step:
      return step_(lambda);
  }
  return 0.0;  // unreachable
}

StepLoss fnr_step_loss(std::span<const double> positive_pixel_scores) {
  if (positive_pixel_scores.empty()) {
    throw NoPositivePixels("fnr_step_loss: example has no positive pixels");
  }
  // Exact stairs count/n rather than accumulated 1/n jumps: the loss must
  // reach exactly 1 so the B = 1 bound holds with no rounding slack.
  std::vector<double> sorted(positive_pixel_scores.begin(), positive_pixel_scores.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  std::vector<double> locations;
  std::vector<double> levels;
  locations.reserve(sorted.size());
  levels.reserve(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (!locations.empty() && locations.back() == sorted[i]) {
      levels.back() = static_cast<double>(i + 1) / n;  // merge duplicate scores
    } else {
      locations.push_back(sorted[i]);
      levels.push_back(static_cast<double>(i + 1) / n);
    }
  }
  return StepLoss::from_levels(0.0, std::move(locations), std::move(levels));
}

bool validate_bound(std::span<const LossFn> losses, const BoundFn& bound,
                    std::span<const double> grid) {
  std::vector<double> points(grid.begin(), grid.end());
  auto add_jump_points = [&points](const StepLoss& s) {
    for (double g : s.locations()) {
      points.push_back(g);
      points.push_back(std::nextafter(g, std::numeric_limits<double>::infinity()));
    }
  };
  for (const LossFn& l : losses) {
    if (const auto* s = std::get_if<StepLoss>(&l)) add_jump_points(*s);
  }
  if (bound.kind() == BoundFn::Kind::step) add_jump_points(bound.step_loss());

  for (double lambda : points) {
    const double b = bound(lambda);
    for (const LossFn& l : losses) {
      if (eval_loss(l, lambda) > b) return false;
    }
  }
  return true;
}

namespace {

double parse_number(std::string_view token, std::string_view context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(std::string(token), &pos);
    if (pos != token.size()) throw std::invalid_argument("trailing chars");
    return v;
  } catch (const std::exception&) {
    throw ParseError("bad number '" + std::string(token) + "' in " + std::string(context));
  }
}

std::vector<std::string_view> split_tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

StepLoss parse_step_tokens(std::span<const std::string_view> tokens, std::string_view context) {
  if (tokens.empty()) throw ParseError("step loss needs a base value");
  const double base = parse_number(tokens[0], context);
  std::vector<StepLoss::Jump> jumps;
  for (std::size_t k = 1; k < tokens.size(); ++k) {
    const std::string_view tok = tokens[k];
    const std::size_t colon = tok.find(':');
    if (colon == std::string_view::npos) {
      throw ParseError("expected g:c jump token, got '" + std::string(tok) + "'");
    }
    jumps.push_back({parse_number(tok.substr(0, colon), context),
                     parse_number(tok.substr(colon + 1), context)});
  }
  return StepLoss(base, std::move(jumps));
}

}  // namespace

LossFn parse_loss_line(std::string_view line) {
  const auto tokens = split_tokens(line);
  if (tokens.empty()) throw ParseError("empty loss line");
  if (tokens[0] == "step") {
    return parse_step_tokens(std::span(tokens).subspan(1), "step loss");
  }
  if (tokens[0] == "linear") {
    if (tokens.size() != 2) throw ParseError("linear loss needs exactly one slope");
    return LinearLoss{parse_number(tokens[1], "linear loss")};
  }
  throw ParseError("unknown loss kind '" + std::string(tokens[0]) + "'");
}

std::string format_loss(const LossFn& loss) {
  std::ostringstream out;
  out.precision(17);
  if (const auto* s = std::get_if<StepLoss>(&loss)) {
    out << "step " << s->base();
    for (std::size_t j = 0; j < s->jump_count(); ++j) {
      out << ' ' << s->locations()[j] << ':' << s->size_at(j);
    }
  } else {
    out << "linear " << std::get<LinearLoss>(loss).slope;
  }
  return out.str();
}

BoundFn parse_bound_spec(std::string_view spec) {
  const auto tokens = split_tokens(spec);
  if (tokens.empty()) throw ParseError("empty bound spec");
  if (tokens[0] == "const") {
    if (tokens.size() != 2) throw ParseError("const bound needs exactly one value");
    return BoundFn::constant(parse_number(tokens[1], "const bound"));
  }
  if (tokens[0] == "linear") {
    if (tokens.size() != 2) throw ParseError("linear bound needs exactly one slope");
    return BoundFn::linear(parse_number(tokens[1], "linear bound"));
  }
  if (tokens[0] == "step") {
    return BoundFn::step(parse_step_tokens(std::span(tokens).subspan(1), "step bound"));
  }
  throw ParseError("unknown bound kind '" + std::string(tokens[0]) + "'");
}

std::vector<LossFn> read_losses(std::istream& in) {
  std::vector<LossFn> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (split_tokens(line).empty()) continue;
    out.push_back(parse_loss_line(line));
  }
  return out;
}

std::vector<LossFn> read_loss_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open loss file: " + path);
  return read_losses(in);
}

void write_losses(std::ostream& out, std::span<const LossFn> losses) {
  for (const LossFn& l : losses) out << format_loss(l) << '\n';
}

}  // namespace corc
