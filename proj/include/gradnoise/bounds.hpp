#pragma once

// Generalization-bound estimators.
//
// Every report carries `core` (R = M = 1) and `value` = core * R or core * M,
// multiplied once at the end so the scale contract holds exactly. Expectations
// over S and W are plug-in averages over the supplied runs; n_runs_used records
// how many runs entered the average.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradnoise/dynamics.hpp"
#include "gradnoise/gradstats.hpp"
#include "gradnoise/linalg.hpp"
#include "gradnoise/problems.hpp"

namespace gradnoise {

struct BoundConfig {
  double r = 1.0;
  double m = 1.0;
  std::size_t n = 0;
  std::size_t b = 1;
  double eta = 0.0;
  std::size_t T = 0;
  std::string g_choice = "n/a";
};

struct BoundReport {
  std::string name;
  double value = 0.0;
  double core = 0.0;
  std::vector<std::size_t> steps;
  std::vector<double> per_step_terms;
  std::vector<double> cumulative_core;
  std::map<std::string, double> components;
  BoundConfig config;
  std::size_t n_runs_used = 0;
  std::vector<std::string> flags;

  bool has_flag(const std::string& f) const;
};

struct GTildeChoice {
  enum class Kind { kZero, kPopulationGradient, kCustom };
  Kind kind = Kind::kPopulationGradient;
  Vector custom;

  std::string name() const;
  static GTildeChoice parse(const std::string& name);
};

/// Source of h1 in the isotropic trajectory bound.
enum class H1Source {
  kPlugIn,              // ||G - g~||^2 + tr C from the run
  kPopulationIdentity,  // tr(Sigma_mu) / b, valid for g~ = population gradient
};

struct TrajectoryBoundOptions {
  BoundConfig config;
  GTildeChoice g;
  H1Source h1 = H1Source::kPlugIn;
  FloorPolicy floor;
};

/// Snapshot lists of independent runs; entry k of every run must describe the same step.
using SnapshotRuns = std::vector<std::vector<GradSnapshot>>;

// Per-step terms, exposed for oracle tests.
double isotropic_step_term(double h1, const SpdMatrix& c);
double langevin_step_term(double dist_sq, Eigen::Index d);
double anisotropic_step_term(const SpdMatrix& pop_gnc, const SpdMatrix& scaled_c);

/// sum_k log(alpha_k / beta_k) over the diagonals of Sigma_mu and b C.
double diagonal_alignment(const Vector& pop_diag, const Vector& scaled_c_diag);

BoundReport traj_bound_isotropic(const SnapshotRuns& runs, const TrajectoryBoundOptions& opts);

/// `gld_runs` false marks a counterfactual evaluation on non-GLD runs.
BoundReport traj_bound_langevin(const SnapshotRuns& runs, const TrajectoryBoundOptions& opts,
                                bool gld_runs);

BoundReport traj_bound_anisotropic(const SnapshotRuns& runs, const TrajectoryBoundOptions& opts);

struct DataDependentRun {
  const Dataset* data = nullptr;
  std::vector<GradSnapshot> snapshots;  // only step, weight and weights are read
};

struct DataDependentOptions {
  BoundConfig config;
  FloorPolicy floor;
  std::size_t enumerate_up_to = 12;
  std::size_t sampled_subsets = 64;
  std::uint64_t seed = 0;
};

/// Subsets J of size n - 1 used at each step: all n of them when n <= enumerate_up_to,
/// otherwise `sampled_subsets` distinct dropped indices drawn from the seed.
std::vector<std::size_t> dropped_indices(std::size_t n, const DataDependentOptions& opts);

/// (b - 1) d / (n - 1)^2 + mean_J [log det C - log det C_J] with C = Sigma / b.
double data_dependent_step_term(const Matrix& grads, std::size_t b,
                                std::span<const std::size_t> dropped, FloorPolicy floor,
                                bool* floored = nullptr);

BoundReport traj_bound_data_dependent(const Problem& problem,
                                      const std::vector<DataDependentRun>& runs,
                                      const DataDependentOptions& opts);

struct TerminalBoundOptions {
  BoundConfig config;
  FloorPolicy floor;
};

/// Within-dataset and pooled terminal covariances.
struct TerminalCovariances {
  std::vector<SymmetricMatrix> within;  // one per dataset group, unbiased
  std::vector<std::size_t> samples;
  SymmetricMatrix pooled;               // around the grand mean, unbiased
  Vector grand_mean;
  std::vector<Vector> group_means;
};

TerminalCovariances terminal_covariances(const TerminalEnsemble& ensemble);

BoundReport terminal_bound_general(const TerminalEnsemble& ensemble,
                                   const TerminalBoundOptions& opts);

/// Terminal curvature of one dataset group: training-set Hessian and mini-batch GNC.
struct TerminalCurvature {
  SymmetricMatrix h;
  SymmetricMatrix c;
};

TerminalCurvature terminal_curvature(const Problem& problem, const Dataset& data, const Vector& w,
                                     std::size_t b);

enum class ClosedForm {
  kCommuting,  // eta [H (2I - eta H)]^{-1} C
  kReduced,    // (eta / 2) H^{-1} C
  kGeneral,    // full linear solve
};

ClosedForm parse_closed_form(const std::string& name);
std::string closed_form_name(ClosedForm f);

/// Throws EdgeOfStabilityError if any group has lambda_1(H) >= 2/eta.
BoundReport terminal_bound_anisotropic(const TerminalEnsemble& ensemble,
                                       const std::vector<TerminalCurvature>& curvature,
                                       const TerminalBoundOptions& opts,
                                       ClosedForm form = ClosedForm::kCommuting);

struct ReferenceChoice {
  enum class Kind { kGrandMean, kInit, kCustom };
  Kind kind = Kind::kGrandMean;
  Vector custom;

  std::string name() const;
  static ReferenceChoice parse(const std::string& name);
};

BoundReport terminal_bound_isotropic(const TerminalEnsemble& ensemble, const ReferenceChoice& ref,
                                     const TerminalBoundOptions& opts);

/// Closed form core sqrt((d/n) log((2b/(eta d)) e + 1)) for mean squared distance e.
double isotropic_terminal_core(double mean_sq_dist, Eigen::Index d, std::size_t n, std::size_t b,
                               double eta);

BoundReport terminal_bound_gradient_accum(const SnapshotRuns& runs,
                                          const TerminalBoundOptions& opts);

struct LooPair {
  std::size_t group = 0;  // identifies (dataset, J)
  Vector w_full;
  Vector w_loo;
};

BoundReport terminal_bound_loo(const std::vector<LooPair>& pairs, const TerminalBoundOptions& opts);

struct InfluenceResult {
  Vector shift;  // estimate of w*_{S_J} - w*_S
  int iterations = 0;
  double residual = 0.0;
  double grad_norm = 0.0;
  bool near_minimum = true;
};

/// (1/n) (H + damping I)^{-1} grad loss(w*, z_i) by conjugate gradients on HVPs.
/// Throws NumericalError if CG does not reach cg_tol (relative residual).
InfluenceResult influence_estimate(const Problem& problem, const Vector& w_star,
                                   const Dataset& data, std::size_t dropped, double cg_tol = 1e-10,
                                   double damping = 0.0, int max_iter = 0,
                                   double grad_tol = 1e-4);

/// tr(H^{-1} F) with H floored SPD; F is the uncentered second moment of oracle gradients.
double takeuchi_trace(const Problem& problem, const Vector& w, const Dataset& data,
                      const Dataset& oracle, FloorPolicy floor, bool* floored = nullptr);

/// Group k of the ensemble uses train_sets[k] and oracles[k].
BoundReport fim_takeuchi_bound(const Problem& problem, const TerminalEnsemble& ensemble,
                               const std::vector<const Dataset*>& train_sets,
                               const std::vector<const Dataset*>& oracles,
                               const TerminalBoundOptions& opts);

}  // namespace gradnoise
