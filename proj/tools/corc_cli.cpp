// Command-line front end: calibrate / validate / train / sweep.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>

#include "corc/conftr.hpp"
#include "corc/errors.hpp"
#include "corc/harness.hpp"

namespace {

using json = nlohmann::json;

json to_json(const corc::CalibrationResult& r) {
  return json{{"lambda_hat", r.lambda_hat},
              {"t_used", r.t_used},
              {"h_tilde_at_lambda", r.h_tilde_at_lambda},
              {"feasible", r.feasible},
              {"iterations", r.iterations}};
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw corc::ParseError("cannot open config file: " + path);
  json j;
  in >> j;
  return j;
}

corc::SegTaskConfig seg_config_from(const json& j) {
  corc::SegTaskConfig c;
  c.pixels_per_image = j.value("pixels_per_image", c.pixels_per_image);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.n_train = j.value("n_train", c.n_train);
  c.n_cal = j.value("n_cal", c.n_cal);
  c.n_test = j.value("n_test", c.n_test);
  c.alpha = j.value("alpha", c.alpha);
  c.temperature = j.value("temperature", c.temperature);
  c.lambda_lo = j.value("lambda_lo", c.lambda_lo);
  c.lambda_hi = j.value("lambda_hi", c.lambda_hi);
  c.seed = j.value("seed", c.seed);
  return c;
}

corc::StorageTaskConfig storage_config_from(const json& j) {
  corc::StorageTaskConfig c;
  c.charge_max = j.value("charge_max", c.charge_max);
  c.discharge_max = j.value("discharge_max", c.discharge_max);
  c.quad_penalty = j.value("quad_penalty", c.quad_penalty);
  c.delta = j.value("delta", c.delta);
  c.alpha = j.value("alpha", c.alpha);
  c.bound_slope = j.value("bound_slope", c.bound_slope);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.n_train = j.value("n_train", c.n_train);
  c.n_cal = j.value("n_cal", c.n_cal);
  c.n_test = j.value("n_test", c.n_test);
  c.seed = j.value("seed", c.seed);
  return c;
}

corc::ConftrConfig conftr_config_from(const json& j) {
  corc::ConftrConfig c;
  c.n_classes = j.value("n_classes", c.n_classes);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.n_train = j.value("n_train", c.n_train);
  c.n_cal = j.value("n_cal", c.n_cal);
  c.n_test = j.value("n_test", c.n_test);
  c.alpha = j.value("alpha", c.alpha);
  c.temperature = j.value("temperature", c.temperature);
  c.seed = j.value("seed", c.seed);
  return c;
}

corc::TrainConfig train_config_from(const json& j) {
  corc::TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.cal_fraction = j.value("cal_fraction", c.cal_fraction);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.alpha = j.value("alpha", c.alpha);
  c.delta = j.value("delta", c.delta);
  c.t_fixed = j.value("t_fixed", c.t_fixed);
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
  const std::string policy = j.value("t_policy", std::string("joint"));
  if (policy == "fixed") {
    c.t_policy = corc::TrainConfig::TPolicy::fixed;
  } else if (policy == "retune_per_epoch") {
    c.t_policy = corc::TrainConfig::TPolicy::retune_per_epoch;
  } else if (policy == "joint") {
    c.t_policy = corc::TrainConfig::TPolicy::joint;
  } else {
    throw corc::InvalidConfig("unknown t_policy: " + policy);
  }
  return c;
}

json train_result_json(const corc::TrainResult& r) {
  return json{{"epoch_costs", r.epoch_costs},
              {"skipped_grad_steps", r.skipped_grad_steps},
              {"final_calibration", to_json(r.final_calibration)},
              {"test_risk", r.test_risk},
              {"test_cost", r.test_cost}};
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path);
  if (!out) throw corc::Error("cannot write " + path);
  out << contents;
}

int run_calibrate(const std::string& losses_path, const std::string& bound_spec,
                  double alpha, double delta, bool has_delta, double t, bool has_t,
                  const std::string& tune_file, bool joint, double lo, double hi,
                  double eps) {
  const std::vector<corc::LossFn> losses = corc::read_loss_file(losses_path);
  const corc::BoundFn bound = corc::parse_bound_spec(bound_spec);
  const corc::ParamInterval interval{lo, hi};

  corc::CalibrationResult result;
  if (joint) {
    if (!has_delta) throw corc::InvalidConfig("--joint needs --delta");
    result = corc::joint_lambda_t(losses, bound, alpha, delta, interval, eps);
  } else if (!tune_file.empty()) {
    if (!has_delta) throw corc::InvalidConfig("--tune-t needs --delta");
    const std::vector<corc::LossFn> holdout = corc::read_loss_file(tune_file);
    const std::vector<double> grid = corc::default_t_grid(bound(interval.lo), alpha);
    const double tuned =
        corc::tune_t(holdout, bound, alpha, delta, grid, interval, eps);
    result = corc::conformal_cvar_control(losses, bound, alpha, delta, tuned, interval, eps);
  } else if (has_delta) {
    const double t_used = has_t ? t : bound(interval.lo);
    result = corc::conformal_cvar_control(losses, bound, alpha, delta, t_used, interval, eps);
  } else {
    result = corc::crc_bisect(losses, bound, alpha, interval, eps);
  }
  std::cout << to_json(result).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conformal OCE risk control and risk training"};
  app.require_subcommand(1);

  // calibrate ---------------------------------------------------------------
  auto* cal = app.add_subcommand("calibrate", "post-hoc calibration of lambda");
  std::string losses_path, bound_spec, tune_file;
  double alpha = 0.1, delta = 0.0, t_value = 0.0;
  double lo = 0.0, hi = 1.0, eps = 1e-6;
  bool joint = false;
  cal->add_option("--losses", losses_path, "loss file, one loss per line")->required();
  cal->add_option("--bound", bound_spec, "bound spec: 'const b' | 'linear b' | 'step ...'")
      ->required();
  cal->add_option("--alpha", alpha, "target risk level")->required();
  auto* delta_opt = cal->add_option("--delta", delta, "CVaR level in [0,1)");
  auto* t_opt = cal->add_option("--t", t_value, "OCE shift hyperparameter");
  cal->add_option("--tune-t", tune_file, "holdout loss file for t tuning");
  cal->add_flag("--joint", joint, "joint (lambda, t) solve for linear losses");
  cal->add_option("--lo", lo, "lambda_min");
  cal->add_option("--hi", hi, "lambda_max");
  cal->add_option("--eps", eps, "bisection tolerance");

  // validate ----------------------------------------------------------------
  auto* val = app.add_subcommand("validate", "Monte Carlo guarantee check");
  std::string task = "synthetic", risk = "mean", out_path;
  int trials = 1000, n_cal = 100;
  std::uint64_t seed = 0;
  double v_alpha = 0.1, v_delta = 0.9;
  val->add_option("--task", task, "seg | storage | synthetic")->required();
  val->add_option("--risk", risk, "mean | cvar")->required();
  val->add_option("--alpha", v_alpha, "target risk level")->required();
  val->add_option("--delta", v_delta, "CVaR level (cvar risk only)");
  val->add_option("--trials", trials, "number of Monte Carlo trials");
  val->add_option("--n", n_cal, "calibration set size per trial");
  val->add_option("--seed", seed, "base seed");
  val->add_option("--out", out_path, "per-trial CSV report path");

  // train -------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "conformal risk training");
  std::string tr_task, tr_config_path, tr_out_dir = ".";
  tr->add_option("--task", tr_task, "seg | storage | conftr")->required();
  tr->add_option("--config", tr_config_path, "JSON config file")->required();
  tr->add_option("--out", tr_out_dir, "output directory");

  // sweep -------------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "grid experiments");
  std::string sw_kind, sw_config_path, sw_out_path = "sweep.csv";
  sw->add_option("--kind", sw_kind, "t | n | alpha | delta")->required();
  sw->add_option("--config", sw_config_path, "JSON config file")->required();
  sw->add_option("--out", sw_out_path, "CSV report path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cal) {
      return run_calibrate(losses_path, bound_spec, alpha, delta, delta_opt->count() > 0,
                           t_value, t_opt->count() > 0, tune_file, joint, lo, hi, eps);
    }

    if (*val) {
      corc::GuaranteeCheck check;
      if (task == "synthetic") {
        if (risk != "mean") throw corc::InvalidConfig("synthetic task controls mean risk");
        check = corc::synthetic_guarantee(n_cal, v_alpha, trials, seed);
      } else if (task == "seg") {
        if (risk != "mean") throw corc::InvalidConfig("seg task controls mean risk");
        corc::SegTaskConfig cfg;
        cfg.alpha = v_alpha;
        cfg.n_cal = n_cal;
        cfg.seed = seed;
        check = corc::seg_guarantee(cfg, trials, 1e-6, seed);
      } else if (task == "storage") {
        if (risk != "cvar") throw corc::InvalidConfig("storage task controls cvar risk");
        corc::StorageTaskConfig cfg;
        cfg.alpha = v_alpha;
        cfg.delta = v_delta;
        cfg.n_cal = n_cal;
        cfg.seed = seed;
        check = corc::storage_guarantee(cfg, trials, 1e-6, seed);
      } else {
        throw corc::InvalidConfig("unknown task: " + task);
      }
      if (!out_path.empty()) write_file(out_path, corc::trial_report_csv(check.report));
      json summary{{"task", task},
                   {"risk", risk},
                   {"alpha", v_alpha},
                   {"trials", trials},
                   {"pooled_risk", check.pooled_risk},
                   {"threshold", check.threshold},
                   {"mean_lambda", check.report.mean_lambda},
                   {"passed", check.passed}};
      if (risk == "cvar") summary["delta"] = v_delta;
      std::cout << summary.dump(2) << '\n';
      return check.passed ? 0 : 1;
    }

    if (*tr) {
      const json cfg = load_json_file(tr_config_path);
      const corc::TrainConfig train_cfg = train_config_from(cfg);
      std::filesystem::create_directories(tr_out_dir);
      json report;

      if (tr_task == "seg") {
        const corc::SegTaskConfig task_cfg = seg_config_from(cfg.value("seg", json::object()));
        const corc::SegDataset data = corc::seg_generate(task_cfg);
        const Eigen::VectorXd theta0 = corc::seg_pretrain(task_cfg, data.train);
        const corc::TrainResult baseline = corc::posthoc_seg(data, task_cfg, theta0, train_cfg);
        const corc::TrainResult trained = corc::train_seg(data, task_cfg, theta0, train_cfg);
        report = {{"task", "seg"},
                  {"posthoc", train_result_json(baseline)},
                  {"trained", train_result_json(trained)}};
      } else if (tr_task == "storage") {
        const corc::StorageTaskConfig task_cfg =
            storage_config_from(cfg.value("storage", json::object()));
        const corc::StorageDataset data = corc::storage_generate(task_cfg);
        const Eigen::VectorXd theta0 = corc::storage_pretrain(task_cfg, data.train);
        const corc::TrainResult baseline =
            corc::posthoc_storage(data, task_cfg, theta0, train_cfg);
        const corc::TrainResult taskloss =
            corc::train_storage_taskloss(data, task_cfg, theta0, train_cfg);
        const corc::TrainResult trained =
            corc::train_storage(data, task_cfg, theta0, train_cfg);
        report = {{"task", "storage"},
                  {"posthoc", train_result_json(baseline)},
                  {"finetune_task_loss", train_result_json(taskloss)},
                  {"trained", train_result_json(trained)}};
      } else if (tr_task == "conftr") {
        const corc::ConftrConfig task_cfg =
            conftr_config_from(cfg.value("conftr", json::object()));
        const corc::ConftrDataset data = corc::conftr_generate(task_cfg);
        const Eigen::VectorXd theta0 = corc::conftr_pretrain(task_cfg, data.train);
        const corc::TrainResult baseline =
            corc::posthoc_conftr(data, task_cfg, theta0, train_cfg);
        const corc::TrainResult trained = corc::train_conftr(data, task_cfg, theta0, train_cfg);
        report = {{"task", "conftr"},
                  {"posthoc", train_result_json(baseline)},
                  {"trained", train_result_json(trained)}};
      } else {
        throw corc::InvalidConfig("unknown task: " + tr_task);
      }

      write_file(tr_out_dir + "/report.json", report.dump(2) + "\n");
      std::ostringstream curve;
      curve << "epoch,mean_cost\n";
      curve.precision(17);
      const auto& costs = report["trained"]["epoch_costs"];
      for (std::size_t e = 0; e < costs.size(); ++e) {
        curve << e << ',' << costs[e].get<double>() << '\n';
      }
      write_file(tr_out_dir + "/curve.csv", curve.str());
      std::cout << report.dump(2) << '\n';
      return 0;
    }

    if (*sw) {
      const json cfg = load_json_file(sw_config_path);
      corc::SweepConfig sweep;
      sweep.task = cfg.value("task", std::string("storage"));
      sweep.grid = cfg.value("grid", std::vector<double>{});
      sweep.seeds = cfg.value("seeds", sweep.seeds);
      sweep.eps = cfg.value("eps", sweep.eps);
      sweep.seed = cfg.value("seed", sweep.seed);
      sweep.storage = storage_config_from(cfg.value("storage", json::object()));
      sweep.seg = seg_config_from(cfg.value("seg", json::object()));
      if (sw_kind == "t") {
        sweep.kind = corc::SweepKind::t_sensitivity;
      } else if (sw_kind == "n") {
        sweep.kind = corc::SweepKind::calib_size;
      } else if (sw_kind == "alpha") {
        sweep.kind = corc::SweepKind::alpha_grid;
      } else if (sw_kind == "delta") {
        sweep.kind = corc::SweepKind::delta_grid;
      } else {
        throw corc::InvalidConfig("unknown sweep kind: " + sw_kind);
      }
      const std::vector<corc::SweepRow> rows = corc::run_sweep(sweep);
      write_file(sw_out_path, corc::sweep_csv(rows));
      bool all_ok = true;
      for (const corc::SweepRow& r : rows) {
        std::cout << "grid=" << r.grid_value << " mean_lambda=" << r.mean_lambda
                  << " pooled_risk=" << r.pooled_risk << " threshold=" << r.risk_threshold
                  << (r.guarantee_ok ? " [ok]" : " [RISK EXCEEDED]") << '\n';
        all_ok = all_ok && r.guarantee_ok;
      }
      return all_ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
