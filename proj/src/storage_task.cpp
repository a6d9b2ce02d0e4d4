#include "corc/storage_task.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "corc/errors.hpp"

namespace corc {

void StorageTaskConfig::validate() const {
  if (!(charge_max > 0.0 && discharge_max > 0.0)) {
    throw InvalidConfig("storage task needs charge_max > 0 and discharge_max > 0");
  }
  if (!(quad_penalty > 0.0)) throw InvalidConfig("storage task needs quad_penalty > 0");
  if (!(delta >= 0.0 && delta < 1.0)) throw InvalidConfig("storage task delta must be in [0, 1)");
  if (!(bound_slope > 0.0)) throw InvalidConfig("storage task bound_slope must be > 0");
  if (feature_dim < 2) throw InvalidConfig("storage task feature_dim must be >= 2");
  if (n_train < 1 || n_cal < 1 || n_test < 1) {
    throw InvalidConfig("storage task counts must all be >= 1");
  }
}

double StorageTaskConfig::price_cap() const {
  return 0.9 * bound_slope / std::max(charge_max, discharge_max);
}

StorageExample storage_generate_example(const StorageTaskConfig& config, Rng& rng) {
  Rng truth_rng(config.seed ^ 0x70726963657472ull);
  Eigen::VectorXd w_price(config.feature_dim);
  w_price[0] = 10.0;
  for (int j = 1; j < config.feature_dim; ++j) w_price[j] = 3.0 * truth_rng.normal();
  // feature 3 carries a little real signal but also scales the noise
  // (below), so an unbiased least-squares forecast is not the risk-optimal
  // one: shading that coordinate trades a sliver of expected profit for a
  // lighter loss tail and a larger calibrated lambda
  if (config.feature_dim > 3) w_price[3] = 12.0;

  StorageExample ex;
  ex.features.resize(config.feature_dim);
  ex.features[0] = 1.0;
  for (int j = 1; j < config.feature_dim; ++j) ex.features[j] = rng.normal();
  // Heavy-tailed, heteroscedastic noise: tails are driven by the volatile
  // coordinate, and thin tails would make CVaR control vacuous at every
  // reasonable alpha.
  const double volatility =
      5.0 + 45.0 * (config.feature_dim > 3 ? std::abs(ex.features[3]) : 1.0);
  const double cap = config.price_cap();
  ex.price = std::clamp(w_price.dot(ex.features) + volatility * rng.student_t(3), -cap, cap);
  return ex;
}

StorageDataset storage_generate(const StorageTaskConfig& config) {
  config.validate();
  Rng rng(config.seed);
  StorageDataset data;
  data.train.reserve(config.n_train);
  data.cal.reserve(config.n_cal);
  data.test.reserve(config.n_test);
  for (int i = 0; i < config.n_train; ++i) data.train.push_back(storage_generate_example(config, rng));
  for (int i = 0; i < config.n_cal; ++i) data.cal.push_back(storage_generate_example(config, rng));
  for (int i = 0; i < config.n_test; ++i) data.test.push_back(storage_generate_example(config, rng));
  return data;
}

double storage_decision(double y_hat, const StorageTaskConfig& config) {
  if (!std::isfinite(y_hat)) throw std::invalid_argument("storage_decision: y_hat must be finite");
  const double unconstrained = -y_hat / (2.0 * config.quad_penalty);
  return std::clamp(unconstrained, -config.discharge_max, config.charge_max);
}

double storage_decision_deriv(double y_hat, const StorageTaskConfig& config) {
  const double unconstrained = -y_hat / (2.0 * config.quad_penalty);
  if (unconstrained <= -config.discharge_max || unconstrained >= config.charge_max) return 0.0;
  return -1.0 / (2.0 * config.quad_penalty);
}

std::vector<LossFn> storage_risk_losses(const Eigen::VectorXd& theta,
                                        std::span<const StorageExample> examples,
                                        const StorageTaskConfig& config) {
  std::vector<LossFn> losses;
  losses.reserve(examples.size());
  for (const StorageExample& ex : examples) {
    const double slope = storage_decision(theta.dot(ex.features), config) * ex.price;
    if (slope > config.bound_slope) {
      throw BoundViolation("storage_risk_losses: financial slope exceeds bound_slope");
    }
    losses.push_back(LinearLoss{slope});
  }
  return losses;
}

StorageKktInputs storage_kkt_inputs(const Eigen::VectorXd& theta,
                                    std::span<const StorageExample> examples,
                                    const StorageTaskConfig& config) {
  StorageKktInputs out;
  out.slopes.resize(static_cast<Eigen::Index>(examples.size()));
  out.slope_grads.resize(static_cast<Eigen::Index>(examples.size()), theta.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const StorageExample& ex = examples[i];
    const double y_hat = theta.dot(ex.features);
    const double z = storage_decision(y_hat, config);
    const double dz = storage_decision_deriv(y_hat, config);
    out.slopes[static_cast<Eigen::Index>(i)] = z * ex.price;
    out.slope_grads.row(static_cast<Eigen::Index>(i)) = ex.price * dz * ex.features.transpose();
  }
  return out;
}

StorageCost storage_task_cost(const Eigen::VectorXd& theta, double lambda,
                              std::span<const StorageExample> examples,
                              const StorageTaskConfig& config) {
  if (examples.empty()) throw EmptySamples("storage_task_cost: no examples");
  StorageCost out;
  out.dtheta = Eigen::VectorXd::Zero(theta.size());
  out.dlambda_dtheta = Eigen::VectorXd::Zero(theta.size());
  const double eps = config.quad_penalty;
  for (const StorageExample& ex : examples) {
    const double y_hat = theta.dot(ex.features);
    const double z = storage_decision(y_hat, config);
    const double dz = storage_decision_deriv(y_hat, config);
    out.value += ex.price * lambda * z + eps * lambda * lambda * z * z;
    out.dlambda += ex.price * z + 2.0 * eps * lambda * z * z;
    out.d2lambda += 2.0 * eps * z * z;
    const double dcost_dz = lambda * ex.price + 2.0 * eps * lambda * lambda * z;
    out.dtheta += dcost_dz * dz * ex.features;
    const double ddlambda_dz = ex.price + 4.0 * eps * lambda * z;
    out.dlambda_dtheta += ddlambda_dz * dz * ex.features;
  }
  const double inv = 1.0 / static_cast<double>(examples.size());
  out.value *= inv;
  out.dlambda *= inv;
  out.d2lambda *= inv;
  out.dtheta *= inv;
  out.dlambda_dtheta *= inv;
  return out;
}

std::vector<double> storage_realized_losses(const Eigen::VectorXd& theta, double lambda,
                                            std::span<const StorageExample> examples,
                                            const StorageTaskConfig& config) {
  std::vector<double> out;
  out.reserve(examples.size());
  for (const StorageExample& ex : examples) {
    out.push_back(lambda * storage_decision(theta.dot(ex.features), config) * ex.price);
  }
  return out;
}

Eigen::VectorXd storage_pretrain(const StorageTaskConfig& config,
                                 std::span<const StorageExample> train) {
  if (train.empty()) throw InvalidConfig("storage_pretrain: empty training set");
  const Eigen::Index dim = config.feature_dim;
  Eigen::MatrixXd gram = 1e-8 * Eigen::MatrixXd::Identity(dim, dim);
  Eigen::VectorXd moment = Eigen::VectorXd::Zero(dim);
  for (const StorageExample& ex : train) {
    gram += ex.features * ex.features.transpose();
    moment += ex.price * ex.features;
  }
  return gram.ldlt().solve(moment);
}

void storage_write_csv(std::ostream& out, std::span<const StorageExample> examples) {
  if (examples.empty()) return;
  const Eigen::Index dim = examples[0].features.size();
  for (Eigen::Index j = 0; j < dim; ++j) out << 'f' << j << ',';
  out << "price\n";
  out.precision(17);
  for (const StorageExample& ex : examples) {
    for (Eigen::Index j = 0; j < dim; ++j) out << ex.features[j] << ',';
    out << ex.price << '\n';
  }
}

std::vector<StorageExample> storage_read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("storage_read_csv: missing header");
  std::size_t columns = 1;
  for (char c : line) {
    if (c == ',') ++columns;
  }
  if (columns < 2) throw ParseError("storage_read_csv: expected features...,price");
  const Eigen::Index dim = static_cast<Eigen::Index>(columns - 1);

  std::vector<StorageExample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    StorageExample ex;
    ex.features.resize(dim);
    for (Eigen::Index j = 0; j < dim; ++j) {
      if (!std::getline(ss, cell, ',')) throw ParseError("storage_read_csv: short row");
      ex.features[j] = std::stod(cell);
    }
    if (!std::getline(ss, cell, ',')) throw ParseError("storage_read_csv: missing price");
    ex.price = std::stod(cell);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace corc
