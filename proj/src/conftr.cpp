#include "corc/conftr.hpp"

#include <cmath>

#include "corc/errors.hpp"

namespace corc {

namespace {

double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

Eigen::VectorXd class_prototype(const ConftrConfig& config, int k) {
  Rng truth_rng(config.seed ^ (0x636c61737300ull + static_cast<std::uint64_t>(k)));
  Eigen::VectorXd mu(config.feature_dim);
  mu[0] = 1.0;
  for (int j = 1; j < config.feature_dim; ++j) mu[j] = 2.0 * truth_rng.normal();
  return mu;
}

}  // namespace

void ConftrConfig::validate() const {
  if (n_classes < 2) throw InvalidConfig("conftr demo needs n_classes >= 2");
  if (feature_dim < 2) throw InvalidConfig("conftr demo needs feature_dim >= 2");
  if (n_train < 1 || n_cal < 1 || n_test < 1) {
    throw InvalidConfig("conftr demo counts must all be >= 1");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidConfig("conftr demo alpha must be in (0, 1)");
  if (!(temperature > 0.0)) throw InvalidConfig("conftr demo temperature must be > 0");
}

ConftrExample conftr_generate_example(const ConftrConfig& config, Rng& rng) {
  ConftrExample ex;
  ex.label = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(config.n_classes)));
  ex.features = class_prototype(config, ex.label);
  for (int j = 1; j < config.feature_dim; ++j) ex.features[j] += rng.normal();
  ex.features[0] = 1.0;
  return ex;
}

ConftrDataset conftr_generate(const ConftrConfig& config) {
  config.validate();
  Rng rng(config.seed);
  ConftrDataset data;
  for (int i = 0; i < config.n_train; ++i) data.train.push_back(conftr_generate_example(config, rng));
  for (int i = 0; i < config.n_cal; ++i) data.cal.push_back(conftr_generate_example(config, rng));
  for (int i = 0; i < config.n_test; ++i) data.test.push_back(conftr_generate_example(config, rng));
  return data;
}

double conftr_score(const Eigen::VectorXd& theta, const ConftrConfig& config,
                    const Eigen::VectorXd& features, int label) {
  const Eigen::Index dim = config.feature_dim;
  const double logit = theta.segment(label * dim, dim).dot(features);
  return 1.0 - sigmoid(logit);
}

Eigen::VectorXd conftr_score_grad(const Eigen::VectorXd& theta, const ConftrConfig& config,
                                  const Eigen::VectorXd& features, int label) {
  const Eigen::Index dim = config.feature_dim;
  const double p = sigmoid(theta.segment(label * dim, dim).dot(features));
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
  grad.segment(label * dim, dim) = -p * (1.0 - p) * features;
  return grad;
}

std::vector<ScoreWithGrad> conftr_cal_scores(const Eigen::VectorXd& theta,
                                             const ConftrConfig& config,
                                             std::span<const ConftrExample> cal) {
  std::vector<ScoreWithGrad> scores;
  scores.reserve(cal.size());
  for (const ConftrExample& ex : cal) {
    scores.push_back({conftr_score(theta, config, ex.features, ex.label),
                      conftr_score_grad(theta, config, ex.features, ex.label)});
  }
  return scores;
}

ConftrDemoResult conftr_demo(const Eigen::VectorXd& theta, const ConftrConfig& config,
                             std::span<const ConftrExample> cal,
                             std::span<const ConftrExample> eval, double alpha) {
  const std::vector<ScoreWithGrad> scores = conftr_cal_scores(theta, config, cal);
  ConftrDemoResult out;
  out.lambda = conftr_quantile_grad(scores, alpha);
  out.avg_set_size = conftr_hard_set_size(theta, config, eval, out.lambda.value);
  return out;
}

double conftr_coverage(const Eigen::VectorXd& theta, const ConftrConfig& config,
                       std::span<const ConftrExample> eval, double lambda) {
  if (eval.empty()) return 0.0;
  int covered = 0;
  for (const ConftrExample& ex : eval) {
    if (conftr_score(theta, config, ex.features, ex.label) <= 1.0 - lambda) ++covered;
  }
  return static_cast<double>(covered) / static_cast<double>(eval.size());
}

double conftr_hard_set_size(const Eigen::VectorXd& theta, const ConftrConfig& config,
                            std::span<const ConftrExample> eval, double lambda) {
  if (eval.empty()) return 0.0;
  long total = 0;
  for (const ConftrExample& ex : eval) {
    for (int k = 0; k < config.n_classes; ++k) {
      if (conftr_score(theta, config, ex.features, k) <= 1.0 - lambda) ++total;
    }
  }
  return static_cast<double>(total) / static_cast<double>(eval.size());
}

ConftrCost conftr_soft_size_cost(const Eigen::VectorXd& theta, const ConftrConfig& config,
                                 double lambda, std::span<const ConftrExample> examples) {
  if (examples.empty()) throw EmptySamples("conftr_soft_size_cost: no examples");
  ConftrCost out;
  out.dtheta = Eigen::VectorXd::Zero(theta.size());
  const double inv_temp = 1.0 / config.temperature;
  const Eigen::Index dim = config.feature_dim;
  for (const ConftrExample& ex : examples) {
    double inner = -1.0;
    double dlambda = 0.0;
    Eigen::VectorXd dtheta = Eigen::VectorXd::Zero(theta.size());
    for (int k = 0; k < config.n_classes; ++k) {
      const double logit = theta.segment(k * dim, dim).dot(ex.features);
      const double s_k = 1.0 - sigmoid(logit);
      const double member = sigmoid(((1.0 - lambda) - s_k) * inv_temp);
      const double slope = member * (1.0 - member) * inv_temp;
      inner += member;
      dlambda -= slope;
      // ds_k/dtheta_k = -sigmoid'(logit) x, and d member/d s_k = -slope
      dtheta.segment(k * dim, dim) +=
          slope * sigmoid(logit) * (1.0 - sigmoid(logit)) * ex.features;
    }
    if (inner > 0.0) {
      out.value += inner;
      out.dlambda += dlambda;
      out.dtheta += dtheta;
    }
  }
  const double inv = 1.0 / static_cast<double>(examples.size());
  out.value *= inv;
  out.dlambda *= inv;
  out.dtheta *= inv;
  return out;
}

Eigen::VectorXd conftr_pretrain(const ConftrConfig& config,
                                std::span<const ConftrExample> train, int steps,
                                double learning_rate) {
  if (train.empty()) throw InvalidConfig("conftr_pretrain: empty training set");
  const Eigen::Index dim = config.feature_dim;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(config.n_classes) * dim);
  for (int step = 0; step < steps; ++step) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
    for (const ConftrExample& ex : train) {
      for (int k = 0; k < config.n_classes; ++k) {
        const double target = ex.label == k ? 1.0 : 0.0;
        const double p = sigmoid(theta.segment(k * dim, dim).dot(ex.features));
        grad.segment(k * dim, dim) += (p - target) * ex.features;
      }
    }
    theta -= learning_rate / static_cast<double>(train.size()) * grad;
  }
  return theta;
}

}  // namespace corc
