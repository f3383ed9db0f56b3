#pragma once

// Experiment orchestration behind the `gradnoise` CLI. Each subcommand has a
// compute function (no file output) and run_cli, which writes the files.
//
// Output files per subcommand:
//   train            trajectory.csv, weights.json (when record_weights)
//   compare          trajectory_sgd.csv, trajectory_sde.csv, summary.json
//   bounds-traj      bounds.json, bounds.csv
//   bounds-terminal  bounds.json, bounds.csv
//   stationary       stationary.json
//   sweep-n          sweep.csv, sweep_summary.json

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gradnoise/bounds.hpp"
#include "gradnoise/config.hpp"
#include "gradnoise/dynamics.hpp"

namespace gradnoise {

/// Parses argv, runs the subcommand and maps errors to exit codes:
/// 0 success, 2 configuration / input / capability error, 3 numerical error or divergence.
int run_cli(int argc, const char* const* argv);

/// Sets the OpenMP worker count from `jobs`, else from GRADNOISE_JOBS; leaves the default otherwise.
void configure_jobs(std::optional<int> jobs);

/// Mean over non-diverged members of (oracle loss - training loss) at the terminal weights.
/// Throws ConfigError if test losses were not tracked.
double estimate_generalization_error(const TerminalEnsemble& ensemble);

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);

/// Bound constants and schedule summary for a training config.
BoundConfig bound_config_for(const TrainConfig& train);

TrajectoryRecord run_train(const ExperimentConfig& cfg);

struct CompareResult {
  std::vector<TrajectoryRow> sgd_mean;  // rows averaged over seeds
  std::vector<TrajectoryRow> sde_mean;
  std::vector<double> sgd_test_acc;  // terminal, per seed
  std::vector<double> sde_test_acc;
  double sgd_acc = 0.0;  // terminal test accuracy of the averaged curve
  double sde_acc = 0.0;
  double abs_acc_diff = 0.0;
  double sgd_test_loss = 0.0;
  double sde_test_loss = 0.0;
};

/// Paired SGD / SDE runs on one dataset; seed s drives both modes.
CompareResult compare_sgd_sde(const ExperimentConfig& cfg);

/// Trajectory bounds on a (dataset seeds x run seeds) grid of runs with snapshots.
std::vector<BoundReport> trajectory_bounds(const ExperimentConfig& cfg);

/// Terminal bounds from a freshly trained ensemble.
std::vector<BoundReport> terminal_bounds(const ExperimentConfig& cfg);

/// Terminal bounds from an existing ensemble trained with cfg.train.
std::vector<BoundReport> terminal_bounds(const ExperimentConfig& cfg,
                                         const TerminalEnsemble& ensemble);

struct StationaryResult {
  Vector w_star;
  Vector tail_mean;
  SymmetricMatrix hessian;
  SymmetricMatrix gnc;  // mini-batch C at w_star
  SymmetricMatrix empirical;
  SymmetricMatrix general;
  std::optional<SymmetricMatrix> commuting;
  std::string commuting_error;
  SymmetricMatrix small_lr;
  double residual_general = 0.0;
  double residual_empirical = 0.0;
  double rel_error_general = 0.0;  // ||empirical - general||_F / ||general||_F
  std::optional<double> rel_error_commuting;
  double commutator = 0.0;
  double eta = 0.0;
  std::size_t samples = 0;
};

/// Streams the post-burn-in weight covariance of one run and compares it with the closed forms.
StationaryResult stationary_analysis(const ExperimentConfig& cfg);

struct SweepRow {
  std::size_t n = 0;
  std::string bound;
  double core = 0.0;
  double value = 0.0;
  double gen_error = 0.0;
  std::size_t seeds_used = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // one per (n, bound)
  std::vector<std::size_t> ns;
  std::vector<double> gen_errors;
  std::map<std::string, std::vector<double>> cores;
  std::map<std::string, double> spearman_core;
  double spearman_gen_error = 0.0;
  std::vector<std::string> growing;  // bounds whose core rises with n
};

SweepResult sweep_n(const ExperimentConfig& cfg);

}  // namespace gradnoise
