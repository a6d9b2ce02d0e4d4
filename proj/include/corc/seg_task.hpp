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

// Synthetic pixel-labeling task: linear scores theta^T x per pixel,
// thresholded at lambda over a logit-scale interval. The controlled risk is
// the per-image false-negative fraction and the trained cost is a soft
// false-positive fraction. lambda_lo sits far below every realistic pixel
// score so the control problem is feasible at lambda_min for every alpha
// down to 1/(N+1).
struct SegTaskConfig {
  int pixels_per_image = 64;
  int feature_dim = 8;  // includes the intercept feature x[0] = 1
  int n_train = 200;
  int n_cal = 100;
  int n_test = 200;
  double alpha = 0.1;
  double temperature = 0.1;
  double lambda_lo = -8.0;
  double lambda_hi = 8.0;
  std::uint64_t seed = 0;
  void validate() const;
  ParamInterval interval() const { return {lambda_lo, lambda_hi}; }
};

struct SegImage {
  Eigen::MatrixXd features;  // pixels x feature_dim
  Eigen::VectorXi labels;    // 0/1 per pixel
  int positive_count() const { return labels.sum(); }
};

struct SegDataset {
  std::vector<SegImage> train;
  std::vector<SegImage> cal;
  std::vector<SegImage> test;
};

// Deterministic per seed. Labels are Bernoulli draws of a logistic
// ground-truth score plus noise; images are redrawn until they contain at
// least one positive pixel.
SegDataset seg_generate(const SegTaskConfig& config);
SegImage seg_generate_image(const SegTaskConfig& config, Rng& rng);

// Per-image FNR step loss of the linear scorer; images without positive
// pixels are dropped by callers, never passed here.
StepLoss seg_fnr_loss(const Eigen::VectorXd& theta, const SegImage& image);
std::vector<LossFn> seg_fnr_losses(const Eigen::VectorXd& theta,
                                   std::span<const SegImage> images);

// Calibrated FNR threshold and its exact gradient (piecewise case, B = 1).
// Images with no positive pixels are dropped.
LambdaGrad seg_fnr_lambda(const Eigen::VectorXd& theta, std::span<const SegImage> cal,
                          double alpha, const ParamInterval& interval,
                          const PiecewiseGradOptions& options = {});

struct SegCost {
  double value = 0.0;
  Eigen::VectorXd dtheta;
  double dlambda = 0.0;
};

// Mean over images (skipping those without negative pixels) of the soft
// false-positive fraction: mean over negative pixels of
// sigmoid((theta^T x - lambda) / T). Strictly decreasing in lambda.
SegCost seg_soft_fpr_cost(const Eigen::VectorXd& theta, double lambda,
                          std::span<const SegImage> images, double temperature);

// Hard rates at threshold lambda (prediction positive iff score >= lambda).
double seg_hard_fnr(const Eigen::VectorXd& theta, double lambda,
                    std::span<const SegImage> images);
double seg_hard_fpr(const Eigen::VectorXd& theta, double lambda,
                    std::span<const SegImage> images);

// A deliberately brief logistic fit; the starting point both the post-hoc
// baseline and fine-tuning share.
Eigen::VectorXd seg_pretrain(const SegTaskConfig& config, std::span<const SegImage> train,
                             int steps = 30, double learning_rate = 0.5);

// CSV: one row per pixel, "image,f0,...,f{D-1},label".
void seg_write_csv(std::ostream& out, std::span<const SegImage> images);
std::vector<SegImage> seg_read_csv(std::istream& in);

}  // namespace corc
