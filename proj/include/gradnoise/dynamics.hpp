#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradnoise/gradstats.hpp"
#include "gradnoise/linalg.hpp"
#include "gradnoise/problems.hpp"
#include "gradnoise/rng.hpp"

namespace gradnoise {

enum class RunMode { kSgd, kSde, kGld };

std::string mode_name(RunMode m);
RunMode parse_mode(const std::string& name);

struct LrSegment {
  std::size_t start_step = 0;
  double eta = 0.1;
};

struct InitSpec {
  enum class Kind { kDefault, kZero, kCustom };
  Kind kind = Kind::kDefault;
  double scale = 1.0;  // MLP weight scale for kDefault
  Vector custom;
};

struct TrainConfig {
  DataSpec data;
  std::size_t n = 100;
  std::size_t b = 10;
  std::size_t T = 1000;
  std::vector<LrSegment> lr_schedule{LrSegment{}};
  RunMode mode = RunMode::kSgd;
  std::uint64_t seed = 0;          // batch and noise streams
  std::uint64_t dataset_seed = 0;  // training set and oracle sample
  InitSpec init;
  std::size_t log_every = 100;
  bool record_weights = false;
  std::size_t burn_in = 0;
  std::size_t sde_refresh_every = 1;

  bool track_test = true;
  bool track_lambda1 = false;
  bool track_trace_hessian = false;
  bool track_alignment = false;
  int hessian_probes = 64;

  /// Snapshot cadence for trajectory bounds; 0 disables snapshots.
  std::size_t snapshot_every = 0;
  bool snapshot_population = false;

  /// Number of tail checkpoints (W_T included) and their spacing; spacing 0 means d.
  std::size_t tail_checkpoints = 1;
  std::size_t tail_spacing = 0;

  FloorPolicy floor;
  std::size_t matrix_cap = 512;

  /// Learning rate in effect for step t (1-based); segments are sorted by start_step.
  double eta_at(std::size_t step) const;
  std::size_t effective_tail_spacing() const;
  /// Throws ConfigError on violated invariants.
  void validate() const;
};

/// One logged row. Optional fields are absent when not tracked.
struct TrajectoryRow {
  std::size_t step = 0;
  double eta = 0.0;
  double train_loss = 0.0;
  std::optional<double> test_loss;
  std::optional<double> train_acc;
  std::optional<double> test_acc;
  double grad_norm_sq = 0.0;
  double trace_c = 0.0;
  double dist_init = 0.0;
  std::optional<double> lambda1;
  std::optional<double> gap;
  std::optional<double> gap_half;
  std::optional<double> trace_hessian;
  std::optional<double> alignment;
};

struct TrajectoryRecord {
  RunMode mode = RunMode::kSgd;
  std::uint64_t seed = 0;
  std::uint64_t dataset_seed = 0;
  std::vector<TrajectoryRow> rows;  // strictly increasing steps
  std::vector<GradSnapshot> snapshots;
  std::vector<std::size_t> weight_steps;
  std::vector<Vector> weights;  // W at weight_steps when record_weights
  std::vector<Vector> tail;     // tail checkpoints, last one is W_T
  Vector w0;
  Vector w_final;
  std::size_t steps_done = 0;
  bool diverged = false;
  std::optional<std::size_t> diverged_at;
  double max_loss_observed = 0.0;
  std::size_t sde_refresh_every = 1;
};

/// Shared inputs for runs on one dataset. `oracle` may be null when test
/// statistics and population snapshots are off. `observer`, when set, sees
/// (t, W_t) after every completed step.
struct RunContext {
  const Problem* problem = nullptr;
  const Dataset* data = nullptr;
  const Dataset* oracle = nullptr;
  std::function<void(std::size_t, const Vector&)> observer;
};

// Single updates. The mean gradient is always formed by the same chunked
// kernel over sorted indices, so SGD with b = n, SDE with b = n and GD agree bit for bit.
Vector sgd_step(const Problem& problem, const Vector& w, const Dataset& data,
                std::span<const std::size_t> batch, double eta);
Vector sde_step(const Problem& problem, const Vector& w, const Dataset& data, std::size_t b,
                double eta, Rng& rng, FloorPolicy floor = {});
Vector gld_step(const Problem& problem, const Vector& w, const Dataset& data, double eta, Rng& rng);

/// Uniform draw of b distinct indices from [0, n), returned sorted.
std::vector<std::size_t> sample_batch(std::size_t n, std::size_t b, Rng& rng);

Vector initial_weights(const TrainConfig& config);

/// Generates the dataset and oracle sample from the config and runs.
TrajectoryRecord train_run(const TrainConfig& config);

/// Runs on a caller-supplied dataset.
TrajectoryRecord train_on(const TrainConfig& config, const RunContext& ctx);

/// train_on restricted to data[J]; batch and noise streams are built exactly as in train_run.
TrajectoryRecord loo_train(const TrainConfig& config, const Dataset& data,
                           std::span<const std::size_t> subset, const Dataset* oracle = nullptr);

struct EnsembleMember {
  std::size_t dataset_index = 0;
  std::size_t run_index = 0;
  std::uint64_t dataset_seed = 0;
  std::uint64_t run_seed = 0;
  Vector w0;
  Vector w_final;
  std::vector<Vector> tail;
  double train_loss = 0.0;
  std::optional<double> test_loss;
  bool diverged = false;
};

struct TerminalEnsemble {
  std::vector<EnsembleMember> members;  // ordered by (dataset_index, run_index)
  std::size_t n_dataset_seeds = 0;
  std::size_t n_run_seeds = 0;
  Vector w0;  // initial weights of the base config
  std::size_t diverged_runs = 0;

  /// Members of dataset group k.
  std::vector<const EnsembleMember*> group(std::size_t k) const;
};

/// Seeds of the ensemble grid: dataset k uses derive_seed(base, kDatasetBase + k) and run r uses
/// derive_seed(base, kRunBase + r), where base = config.seed.
std::uint64_t ensemble_dataset_seed(std::uint64_t base, std::size_t k);
std::uint64_t ensemble_run_seed(std::uint64_t base, std::size_t r);

/// Trains every (dataset seed, run seed) pair. Runs execute in parallel and
/// are merged by index, so the result does not depend on the thread count.
TerminalEnsemble run_ensemble(const TrainConfig& config, std::size_t n_dataset_seeds,
                              std::size_t n_run_seeds);

}  // namespace gradnoise
