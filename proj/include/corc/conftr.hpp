#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

#include "corc/grad.hpp"
#include "corc/random.hpp"

namespace corc {

// Split-conformal classification demo: prediction sets
// C(x) = {k : s(x, k) <= 1 - lambda} with lambda calibrated from the true
// class scores, trained end to end against a soft set-size cost.
struct ConftrConfig {
  int n_classes = 4;
  int feature_dim = 6;  // includes the intercept feature x[0] = 1
  int n_train = 200;
  int n_cal = 100;
  int n_test = 200;
  double alpha = 0.1;
  double temperature = 0.1;
  std::uint64_t seed = 0;
  void validate() const;
};

struct ConftrExample {
  Eigen::VectorXd features;
  int label = 0;
};

struct ConftrDataset {
  std::vector<ConftrExample> train;
  std::vector<ConftrExample> cal;
  std::vector<ConftrExample> test;
};

ConftrDataset conftr_generate(const ConftrConfig& config);
ConftrExample conftr_generate_example(const ConftrConfig& config, Rng& rng);

// theta is the K x D class-scorer matrix flattened row-major; the
// nonconformity of class k is s(x, k) = 1 - sigmoid(theta_k . x) in (0, 1).
double conftr_score(const Eigen::VectorXd& theta, const ConftrConfig& config,
                    const Eigen::VectorXd& features, int label);
// Gradient of s(x, k) with respect to flattened theta (one nonzero block).
Eigen::VectorXd conftr_score_grad(const Eigen::VectorXd& theta, const ConftrConfig& config,
                                  const Eigen::VectorXd& features, int label);

// True-class scores with gradients, the calibration inputs.
std::vector<ScoreWithGrad> conftr_cal_scores(const Eigen::VectorXd& theta,
                                             const ConftrConfig& config,
                                             std::span<const ConftrExample> cal);

struct ConftrDemoResult {
  LambdaGrad lambda;
  double avg_set_size = 0.0;
};

// Calibrates lambda from the true-class calibration scores and reports the
// mean hard prediction-set size on the evaluation examples.
ConftrDemoResult conftr_demo(const Eigen::VectorXd& theta, const ConftrConfig& config,
                             std::span<const ConftrExample> cal,
                             std::span<const ConftrExample> eval, double alpha);

// Fraction of evaluation examples whose true class lands in the set.
double conftr_coverage(const Eigen::VectorXd& theta, const ConftrConfig& config,
                       std::span<const ConftrExample> eval, double lambda);

double conftr_hard_set_size(const Eigen::VectorXd& theta, const ConftrConfig& config,
                            std::span<const ConftrExample> eval, double lambda);

struct ConftrCost {
  double value = 0.0;
  Eigen::VectorXd dtheta;
  double dlambda = 0.0;
};

// Soft set size max(0, sum_k sigmoid(((1 - lambda) - s_k) / T) - 1),
// averaged over examples.
ConftrCost conftr_soft_size_cost(const Eigen::VectorXd& theta, const ConftrConfig& config,
                                 double lambda, std::span<const ConftrExample> examples);

// Brief per-class logistic fit shared by both arms.
Eigen::VectorXd conftr_pretrain(const ConftrConfig& config,
                                std::span<const ConftrExample> train, int steps = 30,
                                double learning_rate = 0.5);

}  // namespace corc
