#include "corc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "corc/errors.hpp"

namespace corc {

namespace {

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double se_of_mean(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

double std_of(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(n - 1));
}

double bootstrap_cvar_se(std::span<const double> values, double delta, int resamples,
                         std::uint64_t seed) {
  if (values.size() < 2) return 0.0;
  Rng rng(seed);
  std::vector<double> resample(values.size());
  std::vector<double> stats(static_cast<std::size_t>(resamples));
  for (int b = 0; b < resamples; ++b) {
    for (double& x : resample) {
      x = values[rng.uniform_index(values.size())];
    }
    stats[static_cast<std::size_t>(b)] = cvar_empirical(resample, delta);
  }
  return std_of(stats);
}

}  // namespace

unsigned thread_count() {
  if (const char* env = std::getenv("CORC_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return static_cast<unsigned>(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

void parallel_for(int n, const std::function<void(int)>& body) {
  if (n <= 0) return;
  const unsigned workers = std::min<unsigned>(thread_count(), static_cast<unsigned>(n));
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (std::thread& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

void TrialReport::finalize(RiskKind kind, double delta, std::uint64_t bootstrap_seed) {
  mean_lambda = mean_of(lambda_hats);
  lambda_se = se_of_mean(lambda_hats);
  mean_risk = mean_of(test_losses);
  mean_risk_se = se_of_mean(test_losses);
  if (kind == RiskKind::cvar && !test_losses.empty()) {
    cvar_risk = cvar_empirical(test_losses, delta);
    cvar_risk_se = bootstrap_cvar_se(test_losses, delta, 1000, bootstrap_seed);
  }
  if (!test_costs.empty()) {
    mean_cost = mean_of(test_costs);
    mean_cost_se = se_of_mean(test_costs);
  }
}

std::string trial_report_csv(const TrialReport& report) {
  std::ostringstream out;
  out.precision(17);
  const bool with_cost = !report.test_costs.empty();
  out << (with_cost ? "trial,lambda_hat,test_loss,test_cost\n"
                    : "trial,lambda_hat,test_loss\n");
  for (std::size_t i = 0; i < report.lambda_hats.size(); ++i) {
    out << i << ',' << report.lambda_hats[i] << ',' << report.test_losses[i];
    if (with_cost) out << ',' << report.test_costs[i];
    out << '\n';
  }
  return out.str();
}

GuaranteeCheck validate_guarantee(const TrialSampler& sampler, const Calibrator& calibrator,
                                  int n_trials, RiskKind kind, double delta, double alpha,
                                  std::uint64_t seed) {
  if (n_trials < 1) throw std::invalid_argument("validate_guarantee needs n_trials >= 1");
  GuaranteeCheck check;
  check.report.lambda_hats.resize(static_cast<std::size_t>(n_trials));
  check.report.test_losses.resize(static_cast<std::size_t>(n_trials));

  parallel_for(n_trials, [&](int i) {
    Rng rng = Rng::for_trial(seed, static_cast<std::uint64_t>(i));
    std::vector<LossFn> cal;
    LossFn test = LinearLoss{0.0};
    sampler(rng, cal, test);
    const CalibrationResult result = calibrator(cal);
    check.report.lambda_hats[static_cast<std::size_t>(i)] = result.lambda_hat;
    check.report.test_losses[static_cast<std::size_t>(i)] =
        eval_loss(test, result.lambda_hat);
  });

  check.report.finalize(kind, delta, seed ^ 0xb00257ull);
  if (kind == RiskKind::expectation) {
    check.pooled_risk = check.report.mean_risk;
    check.threshold = alpha + 3.0 * check.report.mean_risk_se;
  } else {
    check.pooled_risk = check.report.cvar_risk;
    check.threshold = 1.05 * alpha;
  }
  check.passed = check.pooled_risk <= check.threshold;
  return check;
}

GuaranteeCheck seg_guarantee(const SegTaskConfig& config, int n_trials, double eps,
                             std::uint64_t seed) {
  config.validate();
  const SegDataset pool = seg_generate(config);
  const Eigen::VectorXd theta = seg_pretrain(config, pool.train);
  const BoundFn bound = BoundFn::constant(1.0);
  const ParamInterval interval = config.interval();

  const TrialSampler sampler = [&](Rng& rng, std::vector<LossFn>& cal, LossFn& test) {
    cal.clear();
    cal.reserve(static_cast<std::size_t>(config.n_cal));
    for (int i = 0; i < config.n_cal; ++i) {
      cal.push_back(seg_fnr_loss(theta, seg_generate_image(config, rng)));
    }
    test = seg_fnr_loss(theta, seg_generate_image(config, rng));
  };
  const Calibrator calibrator = [&](std::span<const LossFn> losses) {
    return crc_bisect(losses, bound, config.alpha, interval, eps);
  };
  return validate_guarantee(sampler, calibrator, n_trials, RiskKind::expectation, 0.0,
                            config.alpha, seed);
}

double storage_tune_t_on_pool(const StorageTaskConfig& config, const Eigen::VectorXd& theta,
                              int pool_size, double eps, std::uint64_t seed) {
  Rng rng(seed ^ 0x74756e65ull);
  std::vector<StorageExample> pool;
  pool.reserve(static_cast<std::size_t>(pool_size));
  for (int i = 0; i < pool_size; ++i) pool.push_back(storage_generate_example(config, rng));
  const std::vector<LossFn> losses = storage_risk_losses(theta, pool, config);
  const BoundFn bound = BoundFn::linear(config.bound_slope);
  const std::vector<double> grid = default_t_grid(0.0, config.alpha);
  return tune_t(losses, bound, config.alpha, config.delta, grid, {0.0, 1.0}, eps);
}

GuaranteeCheck storage_guarantee(const StorageTaskConfig& config, int n_trials, double eps,
                                 std::uint64_t seed) {
  config.validate();
  const StorageDataset pool = storage_generate(config);
  const Eigen::VectorXd theta = storage_pretrain(config, pool.train);
  const double t = storage_tune_t_on_pool(config, theta, config.n_train, eps, seed);
  const BoundFn bound = BoundFn::linear(config.bound_slope);
  const ParamInterval interval{0.0, 1.0};

  const TrialSampler sampler = [&](Rng& rng, std::vector<LossFn>& cal, LossFn& test) {
    cal.clear();
    cal.reserve(static_cast<std::size_t>(config.n_cal));
    for (int i = 0; i < config.n_cal; ++i) {
      const StorageExample ex = storage_generate_example(config, rng);
      cal.push_back(LinearLoss{storage_decision(theta.dot(ex.features), config) * ex.price});
    }
    const StorageExample ex = storage_generate_example(config, rng);
    test = LinearLoss{storage_decision(theta.dot(ex.features), config) * ex.price};
  };
  const Calibrator calibrator = [&](std::span<const LossFn> losses) {
    return conformal_cvar_control(losses, bound, config.alpha, config.delta, t, interval,
                                  eps);
  };
  return validate_guarantee(sampler, calibrator, n_trials, RiskKind::cvar, config.delta,
                            config.alpha, seed);
}

GuaranteeCheck synthetic_guarantee(int n_cal, double alpha, int n_trials,
                                   std::uint64_t seed) {
  if (n_cal < 1) throw std::invalid_argument("synthetic_guarantee needs n_cal >= 1");
  const BoundFn bound = BoundFn::constant(1.0);
  const TrialSampler sampler = [n_cal](Rng& rng, std::vector<LossFn>& cal, LossFn& test) {
    cal.clear();
    cal.reserve(static_cast<std::size_t>(n_cal));
    for (int i = 0; i < n_cal; ++i) {
      cal.push_back(StepLoss(0.0, {{rng.uniform(), 1.0}}));
    }
    test = StepLoss(0.0, {{rng.uniform(), 1.0}});
  };
  const Calibrator calibrator = [&bound, alpha](std::span<const LossFn> losses) {
    return crc_bisect(losses, bound, alpha, {0.0, 1.0}, 1e-6);
  };
  return validate_guarantee(sampler, calibrator, n_trials, RiskKind::expectation, 0.0,
                            alpha, seed);
}

// ---- training ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 0) throw InvalidConfig("epochs must be >= 0");
  if (batch_size < 2) throw InvalidConfig("batch_size must be >= 2 (both splits nonempty)");
  if (!(cal_fraction > 0.0 && cal_fraction < 1.0)) {
    throw InvalidConfig("cal_fraction must be in (0, 1)");
  }
  if (learning_rate < 0.0) throw InvalidConfig("learning_rate must be >= 0");
  if (!(eps > 0.0)) throw InvalidConfig("eps must be > 0");
  if (!(delta >= 0.0 && delta < 1.0)) throw InvalidConfig("delta must be in [0, 1)");
}

namespace {

// Random cal/pred split of batch indices; both halves nonempty.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_batch(
    std::size_t batch_size, double cal_fraction, Rng& rng) {
  if (batch_size < 2) throw BatchTooSmall("train step needs a batch of >= 2 examples");
  std::vector<std::size_t> indices(batch_size);
  std::iota(indices.begin(), indices.end(), 0);
  rng.shuffle(indices);
  std::size_t n_cal = static_cast<std::size_t>(
      std::lround(cal_fraction * static_cast<double>(batch_size)));
  n_cal = std::clamp<std::size_t>(n_cal, 1, batch_size - 1);
  return {std::vector<std::size_t>(indices.begin(), indices.begin() + static_cast<long>(n_cal)),
          std::vector<std::size_t>(indices.begin() + static_cast<long>(n_cal), indices.end())};
}

template <typename Example>
std::vector<Example> pick(std::span<const Example> from, const std::vector<std::size_t>& idx) {
  std::vector<Example> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(from[i]);
  return out;
}

}  // namespace

double seg_train_step(Eigen::VectorXd& theta, std::span<const SegImage> batch,
                      const SegTaskConfig& task, const TrainConfig& config, Rng& rng,
                      StepCounters& counters) {
  const auto [cal_idx, pred_idx] = split_batch(batch.size(), config.cal_fraction, rng);
  const std::vector<SegImage> cal = pick(batch, cal_idx);
  const std::vector<SegImage> pred = pick(batch, pred_idx);

  LambdaGrad lambda;
  bool degenerate = false;
  try {
    lambda = seg_fnr_lambda(theta, cal, config.alpha, task.interval());
  } catch (const TieDetected&) {
    // gradient undefined on ties; keep the calibrated value, drop dlambda/dtheta
    const CalibrationResult fallback =
        crc_bisect(seg_fnr_losses(theta, cal), BoundFn::constant(1.0), config.alpha,
                   task.interval(), config.eps);
    lambda.value = fallback.lambda_hat;
    lambda.grad = Eigen::VectorXd::Zero(theta.size());
    lambda.kind = LambdaGrad::Kind::fallback_zero;
    degenerate = true;
  }

  const SegCost cost = seg_soft_fpr_cost(theta, lambda.value, pred, task.temperature);
  const Eigen::VectorXd grad =
      degenerate ? cost.dtheta : full_cost_grad(lambda, {cost.dtheta, cost.dlambda});
  theta -= config.learning_rate * grad;
  ++counters.batches;
  if (degenerate) ++counters.skipped_grad_steps;
  return cost.value;
}

double storage_train_step(Eigen::VectorXd& theta, std::span<const StorageExample> batch,
                          const StorageTaskConfig& task, const TrainConfig& config,
                          double tuned_t, Rng& rng, StepCounters& counters) {
  const auto [cal_idx, pred_idx] = split_batch(batch.size(), config.cal_fraction, rng);
  const std::vector<StorageExample> cal = pick(batch, cal_idx);
  const std::vector<StorageExample> pred = pick(batch, pred_idx);
  const BoundFn bound = BoundFn::linear(task.bound_slope);
  const ParamInterval interval{0.0, 1.0};

  const std::vector<LossFn> cal_losses = storage_risk_losses(theta, cal, task);
  double t = config.t_fixed;
  if (config.t_policy == TrainConfig::TPolicy::retune_per_epoch) {
    t = tuned_t;
  } else if (config.t_policy == TrainConfig::TPolicy::joint) {
    t = joint_lambda_t(cal_losses, bound, config.alpha, config.delta, interval, config.eps)
            .t_used;
  }

  KktProblem problem;
  StorageKktInputs inputs = storage_kkt_inputs(theta, cal, task);
  problem.slopes = std::move(inputs.slopes);
  problem.slope_grads = std::move(inputs.slope_grads);
  problem.bound_slope = task.bound_slope;
  problem.phi = Disutility::cvar(config.delta);
  problem.t = t;
  problem.alpha = config.alpha;
  problem.interval = interval;
  problem.objective_kind = ObjectiveKind::strictly_decreasing;

  LambdaGrad lambda;
  bool degenerate = false;
  try {
    lambda = lambda_grad_kkt(problem);
  } catch (const KinkAtSolution&) {
    degenerate = true;
  } catch (const SingularKkt&) {
    degenerate = true;
  }
  if (degenerate) {
    const CalibrationResult fallback = conformal_cvar_control(
        cal_losses, bound, config.alpha, config.delta, t, interval, config.eps);
    lambda.value = fallback.lambda_hat;
    lambda.grad = Eigen::VectorXd::Zero(theta.size());
    lambda.kind = LambdaGrad::Kind::fallback_zero;
  }

  const StorageCost cost = storage_task_cost(theta, lambda.value, pred, task);
  const Eigen::VectorXd grad =
      degenerate ? cost.dtheta : full_cost_grad(lambda, {cost.dtheta, cost.dlambda});
  theta -= config.learning_rate * grad;
  ++counters.batches;
  if (degenerate) ++counters.skipped_grad_steps;
  return cost.value;
}

double conftr_train_step(Eigen::VectorXd& theta, std::span<const ConftrExample> batch,
                         const ConftrConfig& task, const TrainConfig& config, Rng& rng,
                         StepCounters& counters) {
  const auto [cal_idx, pred_idx] = split_batch(batch.size(), config.cal_fraction, rng);
  const std::vector<ConftrExample> cal = pick(batch, cal_idx);
  const std::vector<ConftrExample> pred = pick(batch, pred_idx);

  const std::vector<ScoreWithGrad> scores = conftr_cal_scores(theta, task, cal);
  LambdaGrad lambda;
  bool degenerate = false;
  try {
    lambda = conftr_quantile_grad(scores, config.alpha);
  } catch (const TieDetected&) {
    // quantile value is still well defined under ties, only its gradient is not
    std::vector<double> values;
    values.reserve(scores.size());
    for (const ScoreWithGrad& s : scores) values.push_back(s.value);
    std::sort(values.begin(), values.end());
    const double rank = static_cast<double>(values.size() + 1) * (1.0 - config.alpha);
    const std::size_t k = static_cast<std::size_t>(std::ceil(rank - 1e-9));
    lambda.value = k > values.size() ? 0.0 : 1.0 - values[k - 1];
    lambda.grad = Eigen::VectorXd::Zero(theta.size());
    lambda.kind = LambdaGrad::Kind::fallback_zero;
    degenerate = true;
  }

  const ConftrCost cost = conftr_soft_size_cost(theta, task, lambda.value, pred);
  const Eigen::VectorXd grad =
      degenerate ? cost.dtheta : full_cost_grad(lambda, {cost.dtheta, cost.dlambda});
  theta -= config.learning_rate * grad;
  ++counters.batches;
  if (degenerate) ++counters.skipped_grad_steps;
  return cost.value;
}

namespace {

// Epoch loop shared by the three tasks: reshuffle, consume batches of
// batch_size (a short tail of >= 2 examples still forms a batch), record
// the mean pre-update batch cost.
template <typename Example, typename Step>
void run_epochs(std::span<const Example> train, const TrainConfig& config, Rng& rng,
                std::vector<double>& epoch_costs, Step&& step) {
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double cost_sum = 0.0;
    int batches = 0;
    std::size_t start = 0;
    while (start < order.size()) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      if (end - start >= 2) {
        std::vector<Example> batch;
        batch.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
        cost_sum += step(batch);
        ++batches;
      }
      start = end;
    }
    epoch_costs.push_back(batches == 0 ? 0.0 : cost_sum / static_cast<double>(batches));
  }
}

}  // namespace

TrainResult train_seg(const SegDataset& data, const SegTaskConfig& task,
                      const Eigen::VectorXd& theta0, const TrainConfig& config) {
  config.validate();
  if (data.train.empty() || data.cal.empty() || data.test.empty()) {
    throw InvalidConfig("train_seg: all three splits must be nonempty");
  }
  TrainResult result;
  result.theta = theta0;
  Rng rng(config.seed ^ 0x7365677472ull);
  StepCounters counters;
  run_epochs<SegImage>(data.train, config, rng, result.epoch_costs,
                       [&](const std::vector<SegImage>& batch) {
                         return seg_train_step(result.theta, batch, task, config, rng,
                                               counters);
                       });
  result.skipped_grad_steps = counters.skipped_grad_steps;

  // fresh calibration data, never seen by the training loop
  result.final_calibration =
      crc_bisect(seg_fnr_losses(result.theta, data.cal), BoundFn::constant(1.0),
                 config.alpha, task.interval(), config.eps);
  const double lambda = result.final_calibration.lambda_hat;
  result.test_risk = seg_hard_fnr(result.theta, lambda, data.test);
  result.test_cost = seg_hard_fpr(result.theta, lambda, data.test);
  return result;
}

TrainResult train_storage(const StorageDataset& data, const StorageTaskConfig& task,
                          const Eigen::VectorXd& theta0, const TrainConfig& config) {
  config.validate();
  if (data.train.empty() || data.cal.empty() || data.test.empty()) {
    throw InvalidConfig("train_storage: all three splits must be nonempty");
  }
  const BoundFn bound = BoundFn::linear(task.bound_slope);
  const ParamInterval interval{0.0, 1.0};

  TrainResult result;
  result.theta = theta0;
  Rng rng(config.seed ^ 0x73746f7261ull);
  StepCounters counters;

  const auto tune_on_train = [&](const Eigen::VectorXd& theta) {
    return tune_t(storage_risk_losses(theta, data.train, task), bound, config.alpha,
                  config.delta, default_t_grid(0.0, config.alpha), interval, config.eps);
  };

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double tuned_t = config.t_fixed;
    if (config.t_policy == TrainConfig::TPolicy::retune_per_epoch) {
      tuned_t = tune_on_train(result.theta);
    }
    rng.shuffle(order);
    double cost_sum = 0.0;
    int batches = 0;
    std::size_t start = 0;
    while (start < order.size()) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      if (end - start >= 2) {
        std::vector<StorageExample> batch;
        batch.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) batch.push_back(data.train[order[i]]);
        cost_sum += storage_train_step(result.theta, batch, task, config, tuned_t, rng,
                                       counters);
        ++batches;
      }
      start = end;
    }
    result.epoch_costs.push_back(batches == 0 ? 0.0 : cost_sum / static_cast<double>(batches));
  }
  result.skipped_grad_steps = counters.skipped_grad_steps;

  // final t from the training split only, then a fresh calibration split
  const double t_final =
      config.t_policy == TrainConfig::TPolicy::fixed ? config.t_fixed
                                                     : tune_on_train(result.theta);
  result.final_calibration =
      conformal_cvar_control(storage_risk_losses(result.theta, data.cal, task), bound,
                             config.alpha, config.delta, t_final, interval, config.eps);
  const double lambda = result.final_calibration.lambda_hat;
  const std::vector<double> realized =
      storage_realized_losses(result.theta, lambda, data.test, task);
  result.test_risk = cvar_empirical(realized, config.delta);
  result.test_cost = storage_task_cost(result.theta, lambda, data.test, task).value;
  return result;
}

TrainResult train_conftr(const ConftrDataset& data, const ConftrConfig& task,
                         const Eigen::VectorXd& theta0, const TrainConfig& config) {
  config.validate();
  if (data.train.empty() || data.cal.empty() || data.test.empty()) {
    throw InvalidConfig("train_conftr: all three splits must be nonempty");
  }
  TrainResult result;
  result.theta = theta0;
  Rng rng(config.seed ^ 0x636f6e6674ull);
  StepCounters counters;
  run_epochs<ConftrExample>(data.train, config, rng, result.epoch_costs,
                            [&](const std::vector<ConftrExample>& batch) {
                              return conftr_train_step(result.theta, batch, task, config,
                                                       rng, counters);
                            });
  result.skipped_grad_steps = counters.skipped_grad_steps;

  const std::vector<ScoreWithGrad> scores = conftr_cal_scores(result.theta, task, data.cal);
  LambdaGrad lg;
  try {
    lg = conftr_quantile_grad(scores, config.alpha);
  } catch (const TieDetected&) {
    lg.value = 0.0;
    lg.kind = LambdaGrad::Kind::fallback_zero;
  }
  result.final_calibration = {lg.value, 0.0, 0.0, lg.kind != LambdaGrad::Kind::fallback_zero, 0};
  result.test_risk = 1.0 - conftr_coverage(result.theta, task, data.test, lg.value);
  result.test_cost = conftr_hard_set_size(result.theta, task, data.test, lg.value);
  return result;
}

TrainResult train_storage_taskloss(const StorageDataset& data,
                                   const StorageTaskConfig& task,
                                   const Eigen::VectorXd& theta0, const TrainConfig& config) {
  config.validate();
  TrainResult result;
  result.theta = theta0;
  Rng rng(config.seed ^ 0x7461736b6cull);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double cost_sum = 0.0;
    int batches = 0;
    std::size_t start = 0;
    while (start < order.size()) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      if (end - start >= 2) {
        std::vector<StorageExample> batch;
        batch.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) batch.push_back(data.train[order[i]]);
        const StorageCost cost = storage_task_cost(result.theta, 1.0, batch, task);
        result.theta -= config.learning_rate * cost.dtheta;
        cost_sum += cost.value;
        ++batches;
      }
      start = end;
    }
    result.epoch_costs.push_back(batches == 0 ? 0.0 : cost_sum / static_cast<double>(batches));
  }

  const BoundFn bound = BoundFn::linear(task.bound_slope);
  const double t_final =
      config.t_policy == TrainConfig::TPolicy::fixed
          ? config.t_fixed
          : tune_t(storage_risk_losses(result.theta, data.train, task), bound, config.alpha,
                   config.delta, default_t_grid(0.0, config.alpha), {0.0, 1.0}, config.eps);
  result.final_calibration =
      conformal_cvar_control(storage_risk_losses(result.theta, data.cal, task), bound,
                             config.alpha, config.delta, t_final, {0.0, 1.0}, config.eps);
  const double lambda = result.final_calibration.lambda_hat;
  const std::vector<double> realized =
      storage_realized_losses(result.theta, lambda, data.test, task);
  result.test_risk = cvar_empirical(realized, config.delta);
  result.test_cost = storage_task_cost(result.theta, lambda, data.test, task).value;
  return result;
}

TrainResult posthoc_seg(const SegDataset& data, const SegTaskConfig& task,
                        const Eigen::VectorXd& theta, const TrainConfig& config) {
  TrainConfig frozen = config;
  frozen.epochs = 0;
  return train_seg(data, task, theta, frozen);
}

TrainResult posthoc_storage(const StorageDataset& data, const StorageTaskConfig& task,
                            const Eigen::VectorXd& theta, const TrainConfig& config) {
  TrainConfig frozen = config;
  frozen.epochs = 0;
  return train_storage(data, task, theta, frozen);
}

TrainResult posthoc_conftr(const ConftrDataset& data, const ConftrConfig& task,
                           const Eigen::VectorXd& theta, const TrainConfig& config) {
  TrainConfig frozen = config;
  frozen.epochs = 0;
  return train_conftr(data, task, theta, frozen);
}

// ---- sweeps -----------------------------------------------------------------

namespace {

SweepRow storage_sweep_row(const SweepConfig& sweep, SweepKind kind, double grid_value) {
  StorageTaskConfig base = sweep.storage;
  double fixed_t = 0.0;
  bool use_fixed_t = false;
  switch (kind) {
    case SweepKind::t_sensitivity:
      fixed_t = grid_value;
      use_fixed_t = true;
      break;
    case SweepKind::calib_size:
      base.n_cal = static_cast<int>(std::lround(grid_value));
      break;
    case SweepKind::alpha_grid:
      base.alpha = grid_value;
      break;
    case SweepKind::delta_grid:
      base.delta = grid_value;
      break;
  }
  base.validate();

  std::vector<double> lambdas(static_cast<std::size_t>(sweep.seeds));
  std::vector<double> costs(static_cast<std::size_t>(sweep.seeds));
  std::vector<std::vector<double>> pooled(static_cast<std::size_t>(sweep.seeds));

  parallel_for(sweep.seeds, [&](int s) {
    StorageTaskConfig cfg = base;
    cfg.seed = sweep.seed ^ (0x51ed2700ull + static_cast<std::uint64_t>(s) * 0x9E3779B97F4A7C15ull);
    const StorageDataset data = storage_generate(cfg);
    const Eigen::VectorXd theta = storage_pretrain(cfg, data.train);
    const BoundFn bound = BoundFn::linear(cfg.bound_slope);
    double t = fixed_t;
    if (!use_fixed_t) {
      t = tune_t(storage_risk_losses(theta, data.train, cfg), bound, cfg.alpha, cfg.delta,
                 default_t_grid(0.0, cfg.alpha), {0.0, 1.0}, sweep.eps);
    }
    const CalibrationResult r =
        conformal_cvar_control(storage_risk_losses(theta, data.cal, cfg), bound, cfg.alpha,
                               cfg.delta, t, {0.0, 1.0}, sweep.eps);
    lambdas[static_cast<std::size_t>(s)] = r.lambda_hat;
    pooled[static_cast<std::size_t>(s)] =
        storage_realized_losses(theta, r.lambda_hat, data.test, cfg);
    costs[static_cast<std::size_t>(s)] =
        storage_task_cost(theta, r.lambda_hat, data.test, cfg).value;
  });

  std::vector<double> all_losses;
  for (const std::vector<double>& p : pooled) {
    all_losses.insert(all_losses.end(), p.begin(), p.end());
  }

  SweepRow row;
  row.grid_value = grid_value;
  row.mean_lambda = mean_of(lambdas);
  row.std_lambda = std_of(lambdas);
  row.pooled_risk = cvar_empirical(all_losses, base.delta);
  row.risk_threshold = 1.05 * base.alpha;
  row.mean_cost = mean_of(costs);
  row.std_cost = std_of(costs);
  row.guarantee_ok = row.pooled_risk <= row.risk_threshold;
  return row;
}

SweepRow seg_sweep_row(const SweepConfig& sweep, SweepKind kind, double grid_value) {
  SegTaskConfig base = sweep.seg;
  switch (kind) {
    case SweepKind::alpha_grid:
      base.alpha = grid_value;
      break;
    case SweepKind::calib_size:
      base.n_cal = static_cast<int>(std::lround(grid_value));
      break;
    default:
      throw Unsupported("seg sweeps support only the alpha and calib-size kinds");
  }
  base.validate();

  std::vector<double> lambdas(static_cast<std::size_t>(sweep.seeds));
  std::vector<double> costs(static_cast<std::size_t>(sweep.seeds));
  std::vector<std::vector<double>> pooled(static_cast<std::size_t>(sweep.seeds));

  parallel_for(sweep.seeds, [&](int s) {
    SegTaskConfig cfg = base;
    cfg.seed = sweep.seed ^ (0x5e65700ull + static_cast<std::uint64_t>(s) * 0x9E3779B97F4A7C15ull);
    const SegDataset data = seg_generate(cfg);
    const Eigen::VectorXd theta = seg_pretrain(cfg, data.train);
    const CalibrationResult r =
        crc_bisect(seg_fnr_losses(theta, data.cal), BoundFn::constant(1.0), cfg.alpha,
                   cfg.interval(), sweep.eps);
    lambdas[static_cast<std::size_t>(s)] = r.lambda_hat;
    std::vector<double> fnrs;
    fnrs.reserve(data.test.size());
    for (const SegImage& image : data.test) {
      if (image.positive_count() == 0) continue;
      fnrs.push_back(eval_loss(seg_fnr_loss(theta, image), r.lambda_hat));
    }
    pooled[static_cast<std::size_t>(s)] = std::move(fnrs);
    costs[static_cast<std::size_t>(s)] = seg_hard_fpr(theta, r.lambda_hat, data.test);
  });

  std::vector<double> all_losses;
  for (const std::vector<double>& p : pooled) {
    all_losses.insert(all_losses.end(), p.begin(), p.end());
  }

  SweepRow row;
  row.grid_value = grid_value;
  row.mean_lambda = mean_of(lambdas);
  row.std_lambda = std_of(lambdas);
  row.pooled_risk = mean_of(all_losses);
  row.risk_threshold = base.alpha + 3.0 * se_of_mean(all_losses);
  row.mean_cost = mean_of(costs);
  row.std_cost = std_of(costs);
  row.guarantee_ok = row.pooled_risk <= row.risk_threshold;
  return row;
}

}  // namespace

std::vector<SweepRow> run_sweep(const SweepConfig& config) {
  if (config.grid.empty()) throw EmptyGrid("run_sweep: empty grid");
  if (config.seeds < 1) throw InvalidConfig("run_sweep: seeds must be >= 1");
  std::vector<SweepRow> rows;
  rows.reserve(config.grid.size());
  for (double g : config.grid) {
    if (config.task == "storage") {
      rows.push_back(storage_sweep_row(config, config.kind, g));
    } else if (config.task == "seg") {
      rows.push_back(seg_sweep_row(config, config.kind, g));
    } else {
      throw InvalidConfig("run_sweep: unknown task '" + config.task + "'");
    }
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream out;
  out.precision(17);
  out << "grid_value,mean_lambda,std_lambda,pooled_risk,risk_threshold,mean_cost,std_cost,"
         "guarantee_ok\n";
  for (const SweepRow& r : rows) {
    out << r.grid_value << ',' << r.mean_lambda << ',' << r.std_lambda << ','
        << r.pooled_risk << ',' << r.risk_threshold << ',' << r.mean_cost << ','
        << r.std_cost << ',' << (r.guarantee_ok ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace corc
