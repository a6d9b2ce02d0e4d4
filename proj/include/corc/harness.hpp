#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "corc/calibrate.hpp"
#include "corc/conftr.hpp"
#include "corc/losses.hpp"
#include "corc/random.hpp"
#include "corc/seg_task.hpp"
#include "corc/storage_task.hpp"

namespace corc {

// Worker count: CORC_THREADS when set, hardware concurrency otherwise.
unsigned thread_count();

// Runs body(0..n-1) across workers. Results must go to preallocated
// per-index slots; aggregation stays single-threaded so reports do not
// depend on the worker count. The first exception thrown by any worker is
// rethrown after the join.
void parallel_for(int n, const std::function<void(int)>& body);

enum class RiskKind { expectation, cvar };

struct TrialReport {
  std::vector<double> lambda_hats;
  std::vector<double> test_losses;
  std::vector<double> test_costs;  // empty when the sampler reports no cost

  double mean_lambda = 0.0, lambda_se = 0.0;
  double mean_risk = 0.0, mean_risk_se = 0.0;
  double cvar_risk = 0.0, cvar_risk_se = 0.0;
  double mean_cost = 0.0, mean_cost_se = 0.0;

  // Fills the aggregates; cvar_* only for the cvar kind (bootstrap SE,
  // 1000 resamples).
  void finalize(RiskKind kind, double delta, std::uint64_t bootstrap_seed = 7);
};

// Per-trial rows, byte-stable across runs with the same seed and config.
std::string trial_report_csv(const TrialReport& report);

struct GuaranteeCheck {
  TrialReport report;
  double pooled_risk = 0.0;
  double threshold = 0.0;  // alpha + 3 SE for means, 1.05 alpha for cvar
  bool passed = false;
};

// One trial: fill cal with N losses and test with the held-out loss.
using TrialSampler = std::function<void(Rng&, std::vector<LossFn>&, LossFn&)>;
using Calibrator = std::function<CalibrationResult(std::span<const LossFn>)>;

// Draws n_trials independent (calibration set, test loss) pairs, calibrates
// each, and pools the realized test losses: the pooled mean or pooled
// empirical CVaR estimates exactly the marginal quantity the guarantees
// bound. Trials run in parallel with per-trial streams seed ^ trial.
GuaranteeCheck validate_guarantee(const TrialSampler& sampler, const Calibrator& calibrator,
                                  int n_trials, RiskKind kind, double delta, double alpha,
                                  std::uint64_t seed);

// Task wrappers. Each pretrains a model on an independent pool first;
// storage additionally tunes t on a second independent pool.
GuaranteeCheck seg_guarantee(const SegTaskConfig& config, int n_trials, double eps,
                             std::uint64_t seed);
GuaranteeCheck storage_guarantee(const StorageTaskConfig& config, int n_trials, double eps,
                                 std::uint64_t seed);
// Pure synthetic sampler: unit step losses with Uniform(0,1) jump
// locations, B = 1.
GuaranteeCheck synthetic_guarantee(int n_cal, double alpha, int n_trials,
                                   std::uint64_t seed);

double storage_tune_t_on_pool(const StorageTaskConfig& config, const Eigen::VectorXd& theta,
                              int pool_size, double eps, std::uint64_t seed);

// ---- conformal risk training ---------------------------------------------

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double cal_fraction = 0.5;
  double learning_rate = 0.1;
  double alpha = 0.1;
  double delta = 0.9;  // cvar tasks only
  enum class TPolicy { fixed, retune_per_epoch, joint };
  TPolicy t_policy = TPolicy::joint;
  double t_fixed = 0.0;
  double eps = 1e-6;
  std::uint64_t seed = 0;
  void validate() const;
};

struct StepCounters {
  int batches = 0;
  int skipped_grad_steps = 0;  // TieDetected / KinkAtSolution fallbacks
};

// One minibatch update: random cal/pred split, lambda(theta) and its
// gradient from the calibration half, chain-rule cost gradient from the
// prediction half, one plain gradient-descent step. Returns the mean batch
// cost before the update. On a degenerate gradient the step uses the
// partial cost gradient alone and counts the skip.
double seg_train_step(Eigen::VectorXd& theta, std::span<const SegImage> batch,
                      const SegTaskConfig& task, const TrainConfig& config, Rng& rng,
                      StepCounters& counters);
double storage_train_step(Eigen::VectorXd& theta, std::span<const StorageExample> batch,
                          const StorageTaskConfig& task, const TrainConfig& config,
                          double tuned_t, Rng& rng, StepCounters& counters);
double conftr_train_step(Eigen::VectorXd& theta, std::span<const ConftrExample> batch,
                         const ConftrConfig& task, const TrainConfig& config, Rng& rng,
                         StepCounters& counters);

struct TrainResult {
  Eigen::VectorXd theta;
  std::vector<double> epoch_costs;  // mean batch cost per epoch
  int skipped_grad_steps = 0;
  CalibrationResult final_calibration;  // on the held-out calibration split
  double test_risk = 0.0;               // hard FNR / CVaR of financial loss / miscoverage
  double test_cost = 0.0;               // hard FPR / mean task loss / set size
};

// Epochs of reshuffled minibatch steps over the training split only; the
// held-out calibration split is touched once, after training, to produce
// the final lambda. Test metrics are evaluated at that lambda.
TrainResult train_seg(const SegDataset& data, const SegTaskConfig& task,
                      const Eigen::VectorXd& theta0, const TrainConfig& config);
TrainResult train_storage(const StorageDataset& data, const StorageTaskConfig& task,
                          const Eigen::VectorXd& theta0, const TrainConfig& config);
TrainResult train_conftr(const ConftrDataset& data, const ConftrConfig& task,
                         const Eigen::VectorXd& theta0, const TrainConfig& config);

// Decision-focused baseline for the storage task: plain gradient descent on
// the unscaled task loss (lambda fixed at 1, differentiating through the
// decision clip), then the usual post-hoc calibration. With the
// single-period closed-form decision this is a deliberately weak stand-in
// for a full fine-tuning baseline.
TrainResult train_storage_taskloss(const StorageDataset& data,
                                   const StorageTaskConfig& task,
                                   const Eigen::VectorXd& theta0, const TrainConfig& config);

// Post-hoc baseline: same splits and final calibration, no training.
TrainResult posthoc_seg(const SegDataset& data, const SegTaskConfig& task,
                        const Eigen::VectorXd& theta, const TrainConfig& config);
TrainResult posthoc_storage(const StorageDataset& data, const StorageTaskConfig& task,
                            const Eigen::VectorXd& theta, const TrainConfig& config);
TrainResult posthoc_conftr(const ConftrDataset& data, const ConftrConfig& task,
                           const Eigen::VectorXd& theta, const TrainConfig& config);

// ---- sweeps ---------------------------------------------------------------

enum class SweepKind { t_sensitivity, calib_size, alpha_grid, delta_grid };

struct SweepRow {
  double grid_value = 0.0;
  double mean_lambda = 0.0, std_lambda = 0.0;
  double pooled_risk = 0.0;
  double risk_threshold = 0.0;
  double mean_cost = 0.0, std_cost = 0.0;
  bool guarantee_ok = false;
};

struct SweepConfig {
  std::string task = "storage";  // "storage" or "seg"
  SweepKind kind = SweepKind::t_sensitivity;
  std::vector<double> grid;  // calib_size entries are rounded to ints
  int seeds = 20;
  StorageTaskConfig storage;
  SegTaskConfig seg;
  double eps = 1e-6;
  std::uint64_t seed = 0;
};

std::vector<SweepRow> run_sweep(const SweepConfig& config);
std::string sweep_csv(std::span<const SweepRow> rows);

}  // namespace corc
