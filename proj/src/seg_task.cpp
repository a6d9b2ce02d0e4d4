#include "corc/seg_task.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "corc/errors.hpp"

namespace corc {

namespace {

double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

// Pixel score: the raw linear logit. The decision interval must reach low
// enough that essentially no positive pixel scores below lambda_min,
// otherwise the control problem is infeasible at small alpha.
double pixel_score(const Eigen::VectorXd& theta, const SegImage& image, Eigen::Index i) {
  return theta.dot(image.features.row(i));
}

}  // namespace

void SegTaskConfig::validate() const {
  if (pixels_per_image < 1 || feature_dim < 2) {
    throw InvalidConfig("seg task needs pixels_per_image >= 1 and feature_dim >= 2");
  }
  if (n_train < 1 || n_cal < 1 || n_test < 1) {
    throw InvalidConfig("seg task counts must all be >= 1");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidConfig("seg task alpha must be in (0, 1)");
  if (!(temperature > 0.0)) throw InvalidConfig("seg task temperature must be > 0");
  if (!(lambda_lo < lambda_hi)) throw InvalidConfig("seg task needs lambda_lo < lambda_hi");
}

SegImage seg_generate_image(const SegTaskConfig& config, Rng& rng) {
  // Pixels come from four feature clusters: background negatives, easy
  // positives opposite the background along one latent direction, a rare
  // hard positive cluster that hides in the background along that direction
  // but separates along a second one, and a small decoy negative cluster
  // that also carries the second direction. The hard positives pin the
  // calibrated FNR threshold, so operating at a high threshold requires
  // weighting the second direction; the decoys make that weighting costly
  // for a pure likelihood fit. Labels are Bernoulli draws of a sharp
  // logistic ground-truth score plus noise.
  SegImage image;
  image.features.resize(config.pixels_per_image, config.feature_dim);
  image.labels.resize(config.pixels_per_image);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    for (int i = 0; i < config.pixels_per_image; ++i) {
      const double cluster = rng.uniform();
      double mean1 = -1.2, mean2 = 0.0, truth = -1.2;  // background
      if (cluster >= 0.50 && cluster < 0.82) {
        mean1 = 1.2;  // easy positives
        truth = 1.2;
      } else if (cluster >= 0.82 && cluster < 0.92) {
        mean1 = -0.8;  // hard positives hide in the background along axis 1
        mean2 = 1.8;
        truth = 1.2;
      } else if (cluster >= 0.92) {
        mean1 = -0.4;  // decoy negatives share the hard positives' signature
        mean2 = 1.4;
        truth = -1.2;
      }
      image.features(i, 0) = 1.0;
      image.features(i, 1) = mean1 + 0.6 * rng.normal();
      if (config.feature_dim > 2) image.features(i, 2) = mean2 + 0.6 * rng.normal();
      for (int j = 3; j < config.feature_dim; ++j) image.features(i, j) = rng.normal();
      image.labels[i] = rng.bernoulli(sigmoid(4.0 * truth + 0.5 * rng.normal())) ? 1 : 0;
    }
    if (image.positive_count() > 0) return image;
  }
  throw Error("seg_generate_image: could not draw an image with a positive pixel");
}

SegDataset seg_generate(const SegTaskConfig& config) {
  config.validate();
  Rng rng(config.seed);
  SegDataset data;
  data.train.reserve(config.n_train);
  data.cal.reserve(config.n_cal);
  data.test.reserve(config.n_test);
  for (int i = 0; i < config.n_train; ++i) data.train.push_back(seg_generate_image(config, rng));
  for (int i = 0; i < config.n_cal; ++i) data.cal.push_back(seg_generate_image(config, rng));
  for (int i = 0; i < config.n_test; ++i) data.test.push_back(seg_generate_image(config, rng));
  return data;
}

StepLoss seg_fnr_loss(const Eigen::VectorXd& theta, const SegImage& image) {
  std::vector<double> scores;
  scores.reserve(static_cast<std::size_t>(image.labels.size()));
  for (Eigen::Index i = 0; i < image.labels.size(); ++i) {
    if (image.labels[i] == 1) scores.push_back(pixel_score(theta, image, i));
  }
  return fnr_step_loss(scores);
}

std::vector<LossFn> seg_fnr_losses(const Eigen::VectorXd& theta,
                                   std::span<const SegImage> images) {
  std::vector<LossFn> losses;
  losses.reserve(images.size());
  for (const SegImage& image : images) {
    if (image.positive_count() == 0) continue;  // FNR undefined, drop
    losses.push_back(seg_fnr_loss(theta, image));
  }
  if (losses.empty()) throw EmptyCalibration("seg_fnr_losses: no usable images");
  return losses;
}

LambdaGrad seg_fnr_lambda(const Eigen::VectorXd& theta, std::span<const SegImage> cal,
                          double alpha, const ParamInterval& interval,
                          const PiecewiseGradOptions& options) {
  std::vector<std::vector<ThresholdStep>> steps;
  steps.reserve(cal.size());
  for (const SegImage& image : cal) {
    const int positives = image.positive_count();
    if (positives == 0) continue;
    std::vector<ThresholdStep> image_steps;
    image_steps.reserve(static_cast<std::size_t>(positives));
    const double size = 1.0 / static_cast<double>(positives);
    for (Eigen::Index i = 0; i < image.labels.size(); ++i) {
      if (image.labels[i] != 1) continue;
      // threshold g = theta . x, so dg/dtheta is the feature vector itself
      image_steps.push_back(
          {pixel_score(theta, image, i), image.features.row(i).transpose(), size});
    }
    steps.push_back(std::move(image_steps));
  }
  if (steps.empty()) throw EmptyCalibration("seg_fnr_lambda: no usable images");
  return lambda_grad_piecewise(steps, BoundFn::constant(1.0), alpha, interval, options);
}

SegCost seg_soft_fpr_cost(const Eigen::VectorXd& theta, double lambda,
                          std::span<const SegImage> images, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  SegCost out;
  out.dtheta = Eigen::VectorXd::Zero(theta.size());
  int used = 0;
  for (const SegImage& image : images) {
    const Eigen::Index negatives = image.labels.size() - image.positive_count();
    if (negatives == 0) continue;  // cost undefined, skip the image
    double value = 0.0;
    double dlambda = 0.0;
    Eigen::VectorXd dtheta = Eigen::VectorXd::Zero(theta.size());
    for (Eigen::Index i = 0; i < image.labels.size(); ++i) {
      if (image.labels[i] != 0) continue;
      const double s = sigmoid((pixel_score(theta, image, i) - lambda) / temperature);
      const double slope = s * (1.0 - s) / temperature;
      value += s;
      dlambda -= slope;
      dtheta += slope * image.features.row(i).transpose();
    }
    const double inv = 1.0 / static_cast<double>(negatives);
    out.value += value * inv;
    out.dlambda += dlambda * inv;
    out.dtheta += dtheta * inv;
    ++used;
  }
  if (used == 0) throw NoNegativePixels("seg_soft_fpr_cost: no image has negative pixels");
  const double inv = 1.0 / static_cast<double>(used);
  out.value *= inv;
  out.dlambda *= inv;
  out.dtheta *= inv;
  return out;
}

double seg_hard_fnr(const Eigen::VectorXd& theta, double lambda,
                    std::span<const SegImage> images) {
  double acc = 0.0;
  int used = 0;
  for (const SegImage& image : images) {
    const int positives = image.positive_count();
    if (positives == 0) continue;
    int missed = 0;
    for (Eigen::Index i = 0; i < image.labels.size(); ++i) {
      if (image.labels[i] == 1 && pixel_score(theta, image, i) < lambda) ++missed;
    }
    acc += static_cast<double>(missed) / static_cast<double>(positives);
    ++used;
  }
  return used == 0 ? 0.0 : acc / static_cast<double>(used);
}

double seg_hard_fpr(const Eigen::VectorXd& theta, double lambda,
                    std::span<const SegImage> images) {
  double acc = 0.0;
  int used = 0;
  for (const SegImage& image : images) {
    const Eigen::Index negatives = image.labels.size() - image.positive_count();
    if (negatives == 0) continue;
    int hits = 0;
    for (Eigen::Index i = 0; i < image.labels.size(); ++i) {
      if (image.labels[i] == 0 && pixel_score(theta, image, i) >= lambda) ++hits;
    }
    acc += static_cast<double>(hits) / static_cast<double>(negatives);
    ++used;
  }
  return used == 0 ? 0.0 : acc / static_cast<double>(used);
}

Eigen::VectorXd seg_pretrain(const SegTaskConfig& config, std::span<const SegImage> train,
                             int steps, double learning_rate) {
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(config.feature_dim);
  std::size_t pixel_count = 0;
  for (const SegImage& image : train) pixel_count += static_cast<std::size_t>(image.labels.size());
  if (pixel_count == 0) throw InvalidConfig("seg_pretrain: empty training set");

  for (int step = 0; step < steps; ++step) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(config.feature_dim);
    for (const SegImage& image : train) {
      for (Eigen::Index i = 0; i < image.labels.size(); ++i) {
        const double p = sigmoid(theta.dot(image.features.row(i)));
        grad += (p - static_cast<double>(image.labels[i])) * image.features.row(i).transpose();
      }
    }
    theta -= learning_rate / static_cast<double>(pixel_count) * grad;
  }
  return theta;
}

void seg_write_csv(std::ostream& out, std::span<const SegImage> images) {
  if (images.empty()) return;
  const Eigen::Index dim = images[0].features.cols();
  out << "image";
  for (Eigen::Index j = 0; j < dim; ++j) out << ",f" << j;
  out << ",label\n";
  out.precision(17);
  for (std::size_t img = 0; img < images.size(); ++img) {
    for (Eigen::Index i = 0; i < images[img].labels.size(); ++i) {
      out << img;
      for (Eigen::Index j = 0; j < dim; ++j) out << ',' << images[img].features(i, j);
      out << ',' << images[img].labels[i] << '\n';
    }
  }
}

std::vector<SegImage> seg_read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("seg_read_csv: missing header");
  std::size_t columns = 1;
  for (char c : line) {
    if (c == ',') ++columns;
  }
  if (columns < 3) throw ParseError("seg_read_csv: expected image,features...,label");
  const Eigen::Index dim = static_cast<Eigen::Index>(columns - 2);

  std::vector<SegImage> images;
  std::vector<std::vector<double>> rows;  // features of the image being read
  std::vector<int> labels;
  long current = -1;

  const auto flush = [&]() {
    if (current < 0) return;
    SegImage image;
    image.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
    image.labels.resize(static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (Eigen::Index j = 0; j < dim; ++j) image.features(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
      image.labels[static_cast<Eigen::Index>(i)] = labels[i];
    }
    images.push_back(std::move(image));
    rows.clear();
    labels.clear();
  };

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const long img = std::stol(cell);
    if (img != current) {
      flush();
      current = img;
    }
    std::vector<double> feats(static_cast<std::size_t>(dim));
    for (Eigen::Index j = 0; j < dim; ++j) {
      if (!std::getline(ss, cell, ',')) throw ParseError("seg_read_csv: short row");
      feats[static_cast<std::size_t>(j)] = std::stod(cell);
    }
    if (!std::getline(ss, cell, ',')) throw ParseError("seg_read_csv: missing label");
    rows.push_back(std::move(feats));
    labels.push_back(std::stoi(cell));
  }
  flush();
  return images;
}

}  // namespace corc
