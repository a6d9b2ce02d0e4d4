#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "corc/grad.hpp"
#include "corc/losses.hpp"
#include "corc/random.hpp"

namespace corc {

// Single-period battery arbitrage at desk scale: a linear price forecast
// y_hat = theta^T x drives the net charge decision
//   z* = argmin_z { y_hat z + quad_penalty z^2 : -discharge_max <= z <= charge_max },
// deployed scaled as lambda z*. The controlled risk is the financial term
// lambda z* y, linear in lambda with slope of either sign.
struct StorageTaskConfig {
  double charge_max = 0.5;     // upper box edge for z
  double discharge_max = 0.2;  // lower box edge magnitude (selling)
  // Strictly convex part of the task loss, scaled so the unconstrained
  // argmin -y/(2 quad_penalty) stays inside the box across the generator's
  // typical price range; a tiny penalty would leave every decision clipped
  // and the decision theta-insensitive almost everywhere.
  double quad_penalty = 60.0;
  double delta = 0.9;          // CVaR level
  double alpha = 5.0;          // risk cap, scaled synthetic units
  double bound_slope = 100.0;  // B(lambda) = bound_slope * lambda
  int feature_dim = 8;         // includes the intercept feature x[0] = 1
  int n_train = 400;
  int n_cal = 400;
  int n_test = 400;
  std::uint64_t seed = 0;
  void validate() const;

  // Largest |price| the generator emits; keeps every financial slope at or
  // below 0.9 * bound_slope so the bound is valid by construction.
  double price_cap() const;
};

struct StorageExample {
  Eigen::VectorXd features;
  double price = 0.0;
};

struct StorageDataset {
  std::vector<StorageExample> train;
  std::vector<StorageExample> cal;
  std::vector<StorageExample> test;
};

// Linear-plus-noise prices with Student-t(3) noise: tail risk is real, so
// CVaR control binds. Deterministic per seed.
StorageDataset storage_generate(const StorageTaskConfig& config);
StorageExample storage_generate_example(const StorageTaskConfig& config, Rng& rng);

// Exact argmin of y_hat z + quad_penalty z^2 over the box.
double storage_decision(double y_hat, const StorageTaskConfig& config);
// d z* / d y_hat: -1/(2 quad_penalty) strictly inside the box, 0 clipped.
double storage_decision_deriv(double y_hat, const StorageTaskConfig& config);

// Financial-risk losses L_i(lambda) = (z*_i y_i) lambda for calibration.
// Throws BoundViolation if any slope exceeds bound_slope.
std::vector<LossFn> storage_risk_losses(const Eigen::VectorXd& theta,
                                        std::span<const StorageExample> examples,
                                        const StorageTaskConfig& config);

struct StorageKktInputs {
  Eigen::VectorXd slopes;       // z*_i y_i
  Eigen::MatrixXd slope_grads;  // rows d(z* y)/dtheta
};
StorageKktInputs storage_kkt_inputs(const Eigen::VectorXd& theta,
                                    std::span<const StorageExample> examples,
                                    const StorageTaskConfig& config);

struct StorageCost {
  double value = 0.0;
  Eigen::VectorXd dtheta;
  double dlambda = 0.0;
  double d2lambda = 0.0;
  Eigen::VectorXd dlambda_dtheta;
};

// Mean task loss f(y, lambda z*) = y (lambda z*) + quad_penalty (lambda z*)^2
// with all the partials the KKT path needs.
StorageCost storage_task_cost(const Eigen::VectorXd& theta, double lambda,
                              std::span<const StorageExample> examples,
                              const StorageTaskConfig& config);

// Realized financial losses lambda z* y, one per example.
std::vector<double> storage_realized_losses(const Eigen::VectorXd& theta, double lambda,
                                            std::span<const StorageExample> examples,
                                            const StorageTaskConfig& config);

// Ridge least squares on the training split; the shared starting point.
Eigen::VectorXd storage_pretrain(const StorageTaskConfig& config,
                                 std::span<const StorageExample> train);

// CSV: one row per example, "f0,...,f{D-1},price".
void storage_write_csv(std::ostream& out, std::span<const StorageExample> examples);
std::vector<StorageExample> storage_read_csv(std::istream& in);

}  // namespace corc
