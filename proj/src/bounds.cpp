#include "gradnoise/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

#include "gradnoise/errors.hpp"
#include "gradnoise/kernels.hpp"
#include "gradnoise/rng.hpp"
#include "gradnoise/spectral.hpp"

namespace gradnoise {

namespace {

double sqrt_nonneg(double x) { return std::sqrt(std::max(x, 0.0)); }

void add_flag(BoundReport& r, const std::string& f) {
  if (!r.has_flag(f)) r.flags.push_back(f);
}

// log det of the floored diagonal; used above the matrix cap.
double diag_log_det(const Vector& diag, FloorPolicy floor, bool& floored) {
  const double mean = diag.mean();
  const double fl = floor.eps_rel * (mean > 0.0 ? mean : 1.0);
  double acc = 0.0;
  for (Eigen::Index k = 0; k < diag.size(); ++k) {
    if (diag[k] < fl) floored = true;
    acc += std::log(std::max(diag[k], fl));
  }
  return acc;
}

double floored_log_det(const SymmetricMatrix& m, FloorPolicy floor, bool& floored,
                       std::optional<double> scale = std::nullopt) {
  const SpdMatrix s = SpdMatrix::regularize(m, floor, scale);
  floored = floored || s.floor_active();
  return log_det(s);
}

Vector g_tilde(const GradSnapshot& s, const GTildeChoice& g) {
  switch (g.kind) {
    case GTildeChoice::Kind::kZero:
      return Vector::Zero(s.full_grad.size());
    case GTildeChoice::Kind::kCustom:
      if (g.custom.size() != s.full_grad.size()) {
        throw InvalidInputError("custom reference gradient has the wrong dimension");
      }
      return g.custom;
    case GTildeChoice::Kind::kPopulationGradient:
      if (!s.pop_grad) {
        throw CapabilityError("population-gradient reference needs population snapshots");
      }
      return *s.pop_grad;
  }
  throw ConfigError("unknown reference gradient");
}

struct StepSeries {
  std::vector<std::size_t> steps;
  std::vector<double> weights;
  std::vector<double> mean_terms;
  bool floored = false;
  bool ragged = false;
};

using StepTerm = std::function<double(const GradSnapshot&, FloorPolicy, bool&)>;

StepSeries collect_steps(const SnapshotRuns& runs, FloorPolicy floor, const StepTerm& term) {
  if (runs.empty()) throw InvalidInputError("trajectory bound needs at least one run");
  std::size_t len = runs.front().size();
  StepSeries out;
  for (const auto& r : runs) {
    if (r.size() != len) out.ragged = true;
    len = std::min(len, r.size());
  }
  if (len == 0) throw InvalidInputError("trajectory bound needs snapshots; enable snapshot_every");
  for (std::size_t k = 0; k < len; ++k) {
    double acc = 0.0;
    for (const auto& r : runs) {
      if (r[k].step != runs.front()[k].step) {
        throw InvalidInputError("runs are not aligned by step");
      }
      acc += term(r[k], floor, out.floored);
    }
    out.steps.push_back(runs.front()[k].step);
    out.weights.push_back(runs.front()[k].weight);
    out.mean_terms.push_back(acc / static_cast<double>(runs.size()));
  }
  return out;
}

// core_t = sqrt(scale * sum_{s <= t} weight_s * term_s)
void fill_cumulative(BoundReport& rep, const StepSeries& s, double scale) {
  double cum = 0.0;
  rep.steps = s.steps;
  rep.per_step_terms = s.mean_terms;
  rep.cumulative_core.clear();
  for (std::size_t k = 0; k < s.mean_terms.size(); ++k) {
    cum += s.weights[k] * s.mean_terms[k];
    rep.cumulative_core.push_back(sqrt_nonneg(scale * cum));
  }
  rep.components["signed_sum"] = cum;
  if (cum < 0.0) add_flag(rep, "negative_trace_log");
  rep.core = sqrt_nonneg(scale * cum);
}

double series_core(const StepSeries& s, double scale) {
  double cum = 0.0;
  for (std::size_t k = 0; k < s.mean_terms.size(); ++k) cum += s.weights[k] * s.mean_terms[k];
  return sqrt_nonneg(scale * cum);
}

// Runs the estimator at eps and at 10 eps when flooring entered any log-det.
void floor_sensitivity(BoundReport& rep, const SnapshotRuns& runs, FloorPolicy floor,
                       const StepTerm& term, double scale, bool floored) {
  if (!floored) return;
  add_flag(rep, "floor_active");
  rep.components["core_eps"] = rep.core;
  FloorPolicy ten{floor.eps_rel * 10.0};
  rep.components["core_10eps"] = series_core(collect_steps(runs, ten, term), scale);
}

void common_flags(BoundReport& rep, const SnapshotRuns& runs, const StepSeries& s) {
  rep.n_runs_used = runs.size();
  if (s.ragged) add_flag(rep, "ragged_runs");
  for (const auto& r : runs) {
    for (const auto& snap : r) {
      if (snap.diagonal_only) {
        add_flag(rep, "diagonal_approximation");
        return;
      }
    }
  }
}

Eigen::Index snapshot_dim(const SnapshotRuns& runs) {
  for (const auto& r : runs) {
    if (!r.empty()) return r.front().full_grad.size();
  }
  throw InvalidInputError("trajectory bound needs snapshots");
}

}  // namespace

bool BoundReport::has_flag(const std::string& f) const {
  return std::find(flags.begin(), flags.end(), f) != flags.end();
}

std::string GTildeChoice::name() const {
  switch (kind) {
    case Kind::kZero:
      return "zero";
    case Kind::kPopulationGradient:
      return "population-gradient";
    case Kind::kCustom:
      return "custom";
  }
  return "unknown";
}

GTildeChoice GTildeChoice::parse(const std::string& name) {
  GTildeChoice g;
  if (name == "zero") {
    g.kind = Kind::kZero;
  } else if (name == "population-gradient") {
    g.kind = Kind::kPopulationGradient;
  } else if (name == "custom") {
    g.kind = Kind::kCustom;
  } else {
    throw ConfigError("unknown g_tilde '" + name + "' (expected zero, population-gradient or custom)");
  }
  return g;
}

// ---------------------------------------------------------------------------
// Per-step terms

double isotropic_step_term(double h1, const SpdMatrix& c) {
  if (!(h1 > 0.0)) throw NumericalError("isotropic bound: h1 must be positive");
  const auto d = static_cast<double>(c.dim());
  return d * std::log(h1 / d) - log_det(c);
}

double langevin_step_term(double dist_sq, Eigen::Index d) {
  return std::log1p(dist_sq / static_cast<double>(d));
}

double anisotropic_step_term(const SpdMatrix& pop_gnc, const SpdMatrix& scaled_c) {
  return log_det(pop_gnc) - log_det(scaled_c);
}

double diagonal_alignment(const Vector& pop_diag, const Vector& scaled_c_diag) {
  if (pop_diag.size() != scaled_c_diag.size()) throw InvalidInputError("diagonal length mismatch");
  return (pop_diag.array().log() - scaled_c_diag.array().log()).sum();
}

// ---------------------------------------------------------------------------
// Trajectory bounds

BoundReport traj_bound_isotropic(const SnapshotRuns& runs, const TrajectoryBoundOptions& opts) {
  const auto d = static_cast<double>(snapshot_dim(runs));
  const bool identity = opts.h1 == H1Source::kPopulationIdentity;
  if (identity && opts.g.kind != GTildeChoice::Kind::kPopulationGradient) {
    throw ConfigError("the population h1 identity requires g_tilde = population-gradient");
  }

  const StepTerm term = [&](const GradSnapshot& s, FloorPolicy floor, bool& floored) {
    double log_det_c = 0.0;
    if (s.diagonal_only) {
      log_det_c = diag_log_det(s.minibatch_diag, floor, floored);
    } else {
      log_det_c = floored_log_det(*s.minibatch_gnc, floor, floored);
    }
    double h1 = 0.0;
    if (identity) {
      if (!s.pop_gnc_diag) throw CapabilityError("h1 identity needs population snapshots");
      const double tr = s.pop_gnc ? SpdMatrix::regularize(*s.pop_gnc, floor).matrix().trace()
                                  : s.pop_gnc_diag->sum();
      h1 = tr / static_cast<double>(s.b);
    } else {
      h1 = (s.full_grad - g_tilde(s, opts.g)).squaredNorm() + s.trace_c;
    }
    if (!(h1 > 0.0)) throw NumericalError("isotropic bound: h1 <= 0 at step " + std::to_string(s.step));
    return d * std::log(h1 / d) - log_det_c;
  };

  BoundReport rep;
  rep.name = "traj_isotropic";
  rep.config = opts.config;
  rep.config.g_choice = opts.g.name();
  const double scale = 1.0 / static_cast<double>(opts.config.n);
  const StepSeries s = collect_steps(runs, opts.floor, term);
  fill_cumulative(rep, s, scale);
  common_flags(rep, runs, s);
  floor_sensitivity(rep, runs, opts.floor, term, scale, s.floored);
  rep.components["h1_source_identity"] = identity ? 1.0 : 0.0;

  // Both h1 estimates side by side when the population reference is used.
  if (opts.g.kind == GTildeChoice::Kind::kPopulationGradient) {
    double plug = 0.0, ident = 0.0, count = 0.0;
    for (const auto& r : runs) {
      for (const auto& snap : r) {
        if (!snap.pop_grad || !snap.pop_gnc_diag) continue;
        plug += (snap.full_grad - *snap.pop_grad).squaredNorm() + snap.trace_c;
        ident += snap.pop_gnc_diag->sum() / static_cast<double>(snap.b);
        count += 1.0;
      }
    }
    if (count > 0.0) {
      rep.components["h1_plugin_mean"] = plug / count;
      rep.components["h1_identity_mean"] = ident / count;
      rep.components["h1_relative_discrepancy"] = std::abs(plug - ident) / std::max(ident, 1e-300);
    }
  }
  rep.value = rep.core * opts.config.r;
  return rep;
}

BoundReport traj_bound_langevin(const SnapshotRuns& runs, const TrajectoryBoundOptions& opts,
                                bool gld_runs) {
  const Eigen::Index d = snapshot_dim(runs);
  const StepTerm term = [&](const GradSnapshot& s, FloorPolicy, bool&) {
    return langevin_step_term((s.full_grad - g_tilde(s, opts.g)).squaredNorm(), d);
  };
  BoundReport rep;
  rep.name = "traj_langevin";
  rep.config = opts.config;
  rep.config.g_choice = opts.g.name();
  const double scale = static_cast<double>(d) / static_cast<double>(opts.config.n);
  const StepSeries s = collect_steps(runs, opts.floor, term);
  fill_cumulative(rep, s, scale);
  common_flags(rep, runs, s);
  if (!gld_runs) add_flag(rep, "counterfactual");

  // Looser companion with log(x + 1) replaced by x.
  double linear = 0.0;
  for (const auto& r : runs) {
    for (const auto& snap : r) {
      linear += snap.weight * (snap.full_grad - g_tilde(snap, opts.g)).squaredNorm() /
                static_cast<double>(d);
    }
  }
  rep.components["linearized_core"] = sqrt_nonneg(scale * linear / static_cast<double>(runs.size()));
  rep.value = rep.core * opts.config.r;
  return rep;
}

BoundReport traj_bound_anisotropic(const SnapshotRuns& runs, const TrajectoryBoundOptions& opts) {
  const StepTerm term = [&](const GradSnapshot& s, FloorPolicy floor, bool& floored) {
    const double b = static_cast<double>(s.b);
    if (s.diagonal_only) {
      if (!s.pop_gnc_diag) throw CapabilityError("anisotropic bound needs population snapshots");
      return diag_log_det(*s.pop_gnc_diag, floor, floored) -
             diag_log_det(b * s.minibatch_diag, floor, floored);
    }
    if (!s.pop_gnc) throw CapabilityError("anisotropic bound needs population snapshots");
    return floored_log_det(*s.pop_gnc, floor, floored) -
           floored_log_det(s.minibatch_gnc->scaled(b), floor, floored);
  };
  BoundReport rep;
  rep.name = "traj_anisotropic";
  rep.config = opts.config;
  rep.config.g_choice = "population-gradient";
  const double scale = 1.0 / static_cast<double>(opts.config.n);
  const StepSeries s = collect_steps(runs, opts.floor, term);
  fill_cumulative(rep, s, scale);
  common_flags(rep, runs, s);
  floor_sensitivity(rep, runs, opts.floor, term, scale, s.floored);

  double align = 0.0, count = 0.0;
  for (const auto& r : runs) {
    for (const auto& snap : r) {
      if (!snap.pop_gnc_diag) continue;
      const Vector bc = static_cast<double>(snap.b) * snap.minibatch_diag;
      if ((bc.array() > 0.0).all() && (snap.pop_gnc_diag->array() > 0.0).all()) {
        align += diagonal_alignment(*snap.pop_gnc_diag, bc);
        count += 1.0;
      }
    }
  }
  if (count > 0.0) rep.components["mean_diagonal_alignment"] = align / count;
  rep.value = rep.core * opts.config.r;
  return rep;
}

// ---------------------------------------------------------------------------
// Data-dependent trajectory bound

std::vector<std::size_t> dropped_indices(std::size_t n, const DataDependentOptions& opts) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (n <= opts.enumerate_up_to || opts.sampled_subsets >= n) return all;
  Rng rng = make_rng(derive_seed(opts.seed, stream::kSubset));
  for (std::size_t k = 0; k < opts.sampled_subsets; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, n - 1);
    std::swap(all[k], all[pick(rng)]);
  }
  all.resize(opts.sampled_subsets);
  std::sort(all.begin(), all.end());
  return all;
}

double data_dependent_step_term(const Matrix& grads, std::size_t b,
                                std::span<const std::size_t> dropped, FloorPolicy floor,
                                bool* floored) {
  const auto n = static_cast<std::size_t>(grads.cols());
  const Eigen::Index d = grads.rows();
  if (n < 2 || n - 1 <= b) {
    throw ConfigError("data-dependent bound needs m = n - 1 > b (n = " + std::to_string(n) +
                      ", b = " + std::to_string(b) + ")");
  }
  if (dropped.empty()) throw InvalidInputError("no subsets to average over");
  const double inv_b = 1.0 / static_cast<double>(b);
  const SymmetricMatrix c =
      kernels::centered_covariance(grads, kernels::column_mean(grads)).scaled(inv_b);
  const double scale = c.trace() / static_cast<double>(d);
  bool fl = false;
  const double log_det_c = floored_log_det(c, floor, fl, scale);

  double acc = 0.0;
  Matrix sub(d, static_cast<Eigen::Index>(n - 1));
  for (std::size_t i : dropped) {
    if (i >= n) throw InvalidInputError("dropped index out of range");
    Eigen::Index col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sub.col(col++) = grads.col(static_cast<Eigen::Index>(j));
    }
    const SymmetricMatrix cj =
        kernels::centered_covariance(sub, kernels::column_mean(sub)).scaled(inv_b);
    acc += log_det_c - floored_log_det(cj, floor, fl, scale);
  }
  if (floored != nullptr) *floored = *floored || fl;
  const double nm1 = static_cast<double>(n - 1);
  return (static_cast<double>(b) - 1.0) * static_cast<double>(d) / (nm1 * nm1) +
         acc / static_cast<double>(dropped.size());
}

BoundReport traj_bound_data_dependent(const Problem& problem,
                                      const std::vector<DataDependentRun>& runs,
                                      const DataDependentOptions& opts) {
  if (runs.empty()) throw InvalidInputError("data-dependent bound needs at least one run");
  const std::size_t b = opts.config.b;

  BoundReport rep;
  rep.name = "traj_data_dependent";
  rep.config = opts.config;
  rep.n_runs_used = runs.size();

  auto evaluate = [&](FloorPolicy floor, bool& floored, std::vector<double>* mean_terms,
                      std::vector<double>* mean_cum_core, std::vector<std::size_t>* steps) {
    std::size_t len = std::numeric_limits<std::size_t>::max();
    for (const auto& r : runs) len = std::min(len, r.snapshots.size());
    if (len == 0) throw InvalidInputError("data-dependent bound needs snapshots");
    std::vector<double> terms_sum(len, 0.0), core_sum(len, 0.0);
    double total = 0.0;
    for (const auto& r : runs) {
      if (r.data == nullptr) throw InvalidInputError("data-dependent run without a dataset");
      const auto dropped = dropped_indices(r.data->size(), opts);
      double cum = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const GradSnapshot& s = r.snapshots[k];
        const Matrix grads = kernels::per_example_gradients(problem, s.weights, r.data->view());
        const double term = data_dependent_step_term(grads, b, dropped, floor, &floored);
        terms_sum[k] += term;
        cum += s.weight * term;
        core_sum[k] += sqrt_nonneg(cum);
      }
      total += sqrt_nonneg(cum);
    }
    const auto count = static_cast<double>(runs.size());
    if (mean_terms != nullptr) {
      for (std::size_t k = 0; k < len; ++k) {
        mean_terms->push_back(terms_sum[k] / count);
        mean_cum_core->push_back(core_sum[k] / count);
        steps->push_back(runs.front().snapshots[k].step);
      }
    }
    return total / count;
  };

  bool floored = false;
  rep.core = evaluate(opts.floor, floored, &rep.per_step_terms, &rep.cumulative_core, &rep.steps);
  const std::size_t n = runs.front().data->size();
  rep.components["subsets_per_step"] = static_cast<double>(dropped_indices(n, opts).size());
  rep.components["enumerated"] = n <= opts.enumerate_up_to ? 1.0 : 0.0;
  if (floored) {
    add_flag(rep, "floor_active");
    rep.components["core_eps"] = rep.core;
    bool unused = false;
    rep.components["core_10eps"] =
        evaluate(FloorPolicy{opts.floor.eps_rel * 10.0}, unused, nullptr, nullptr, nullptr);
  }
  rep.value = rep.core * opts.config.m;
  return rep;
}

// ---------------------------------------------------------------------------
// Terminal bounds

namespace {

Matrix stack(const std::vector<const Vector*>& cols) {
  Matrix m(cols.front()->size(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) m.col(static_cast<Eigen::Index>(k)) = *cols[k];
  return m;
}

std::vector<const Vector*> member_samples(const EnsembleMember& m) {
  std::vector<const Vector*> out;
  if (m.tail.empty()) {
    out.push_back(&m.w_final);
  } else {
    for (const auto& v : m.tail) out.push_back(&v);
  }
  return out;
}

// Mean over groups of log det(pooled) - log det(group matrix), both floored
// relative to tr(pooled)/d.
struct TraceLogResult {
  double mean = 0.0;
  double log_det_pooled = 0.0;
  bool any_floored = false;
  bool all_collapsed = true;  // every group floored in all d directions
  int min_effective_rank = std::numeric_limits<int>::max();
  double floor = 0.0;
};

TraceLogResult trace_log_against_pooled(const SymmetricMatrix& pooled,
                                        const std::vector<SymmetricMatrix>& groups,
                                        FloorPolicy floor) {
  const Eigen::Index d = pooled.dim();
  const double scale = pooled.trace() / static_cast<double>(d);
  TraceLogResult r;
  const SpdMatrix p = SpdMatrix::regularize(pooled, floor, scale);
  r.log_det_pooled = log_det(p);
  r.floor = p.floor();
  double acc = 0.0;
  for (const auto& g : groups) {
    const SpdMatrix s = SpdMatrix::regularize(g, floor, scale);
    r.any_floored = r.any_floored || s.floor_active();
    r.all_collapsed = r.all_collapsed && s.floored_count() == d;
    r.min_effective_rank = std::min(r.min_effective_rank, static_cast<int>(d) - s.floored_count());
    acc += r.log_det_pooled - log_det(s);
  }
  r.mean = acc / static_cast<double>(groups.size());
  return r;
}

double terminal_core(double mean_trace_log, std::size_t n) {
  return sqrt_nonneg(mean_trace_log / (2.0 * static_cast<double>(n)));
}

}  // namespace

TerminalCovariances terminal_covariances(const TerminalEnsemble& ensemble) {
  if (ensemble.members.empty()) throw ConfigError("terminal bound needs a non-empty ensemble");
  TerminalCovariances out;
  std::vector<const Vector*> all;
  for (std::size_t k = 0; k < ensemble.n_dataset_seeds; ++k) {
    std::vector<const Vector*> cols;
    for (const auto* m : ensemble.group(k)) {
      for (const auto* v : member_samples(*m)) cols.push_back(v);
    }
    if (cols.size() < 2) {
      throw ConfigError("dataset group " + std::to_string(k) +
                        " has fewer than 2 terminal samples; add run seeds or tail checkpoints");
    }
    const Matrix s = stack(cols);
    const Vector mean = s.rowwise().mean();
    out.within.push_back(sample_covariance(s, mean, true));
    out.samples.push_back(cols.size());
    out.group_means.push_back(mean);
    all.insert(all.end(), cols.begin(), cols.end());
  }
  const Matrix s = stack(all);
  out.grand_mean = s.rowwise().mean();
  out.pooled = sample_covariance(s, out.grand_mean, true);
  return out;
}

BoundReport terminal_bound_general(const TerminalEnsemble& ensemble,
                                   const TerminalBoundOptions& opts) {
  const TerminalCovariances cov = terminal_covariances(ensemble);
  const Eigen::Index d = cov.pooled.dim();

  BoundReport rep;
  rep.name = "terminal_general";
  rep.config = opts.config;
  rep.n_runs_used = ensemble.members.size();
  if (ensemble.n_dataset_seeds < 2) add_flag(rep, "single_dataset");
  if (ensemble.diverged_runs > 0) add_flag(rep, "diverged_runs");

  const TraceLogResult t = trace_log_against_pooled(cov.pooled, cov.within, opts.floor);
  rep.core = terminal_core(t.mean, opts.config.n);
  rep.components["mean_trace_log"] = t.mean;
  rep.components["log_det_pooled"] = t.log_det_pooled;
  rep.components["min_samples_per_group"] =
      static_cast<double>(*std::min_element(cov.samples.begin(), cov.samples.end()));
  rep.components["min_effective_rank"] = static_cast<double>(t.min_effective_rank);
  rep.components["floor"] = t.floor;
  // Value reached when every within-dataset covariance sits at the floor.
  rep.components["floor_cap"] =
      terminal_core(t.log_det_pooled - static_cast<double>(d) * std::log(t.floor), opts.config.n);
  if (t.mean < 0.0) add_flag(rep, "negative_trace_log");
  if (t.any_floored) {
    add_flag(rep, "floor_active");
    rep.components["core_eps"] = rep.core;
    const TraceLogResult t10 =
        trace_log_against_pooled(cov.pooled, cov.within, FloorPolicy{opts.floor.eps_rel * 10.0});
    rep.components["core_10eps"] = terminal_core(t10.mean, opts.config.n);
  }
  if (t.all_collapsed) add_flag(rep, "deterministic_limit");
  rep.value = rep.core * opts.config.r;
  return rep;
}

TerminalCurvature terminal_curvature(const Problem& problem, const Dataset& data, const Vector& w,
                                     std::size_t b) {
  return TerminalCurvature{dense_hessian(problem, w, data.view()),
                           minibatch_gnc(empirical_gnc(problem, w, data), data.size(), b)};
}

ClosedForm parse_closed_form(const std::string& name) {
  if (name == "commuting") return ClosedForm::kCommuting;
  if (name == "reduced") return ClosedForm::kReduced;
  if (name == "general") return ClosedForm::kGeneral;
  throw ConfigError("unknown closed form '" + name + "' (expected commuting, reduced or general)");
}

std::string closed_form_name(ClosedForm f) {
  switch (f) {
    case ClosedForm::kCommuting:
      return "commuting";
    case ClosedForm::kReduced:
      return "reduced";
    case ClosedForm::kGeneral:
      return "general";
  }
  return "unknown";
}

BoundReport terminal_bound_anisotropic(const TerminalEnsemble& ensemble,
                                       const std::vector<TerminalCurvature>& curvature,
                                       const TerminalBoundOptions& opts, ClosedForm form) {
  if (curvature.size() != ensemble.n_dataset_seeds) {
    throw InvalidInputError("need one terminal curvature per dataset group");
  }
  const double eta = opts.config.eta;
  if (!(eta > 0.0)) throw ConfigError("terminal anisotropic bound needs eta > 0");

  BoundReport rep;
  rep.name = "terminal_anisotropic";
  rep.config = opts.config;
  rep.n_runs_used = ensemble.members.size();
  rep.components["closed_form_" + closed_form_name(form)] = 1.0;

  double gap_min = std::numeric_limits<double>::infinity();
  double lambda_max = -std::numeric_limits<double>::infinity();
  double commutator = 0.0;
  // log det of the closed-form Lambda per group. The commuting and reduced forms are
  // products of factors and are taken factorwise, so a non-commuting pair is never symmetrized.
  auto closed_log_dets = [&](FloorPolicy floor, bool& floored) {
    std::vector<double> out;
    for (const auto& cv : curvature) {
      const auto es = eigen_decompose(cv.h);
      const Vector& lam = es.eigenvalues();
      const double top = lam.maxCoeff();
      if (top >= 2.0 / eta) {
        throw EdgeOfStabilityError("edge of stability: top curvature eigenvalue " +
                                       std::to_string(top) + " >= 2/eta",
                                   top, 2.0 / eta);
      }
      if (form == ClosedForm::kGeneral) {
        const SymmetricMatrix lambda =
            solve_stationary_covariance(cv.h, cv.c, eta, StationaryMode::kGeneral);
        out.push_back(floored_log_det(lambda, floor, floored));
        continue;
      }
      if (lam.minCoeff() <= 0.0) {
        throw DomainError("closed form needs a positive-definite curvature; use closed_form general");
      }
      const auto d = static_cast<double>(lam.size());
      double ld = floored_log_det(cv.c, floor, floored) - lam.array().log().sum();
      if (form == ClosedForm::kCommuting) {
        ld += d * std::log(eta) - (2.0 - eta * lam.array()).log().sum();
      } else {
        ld += d * std::log(0.5 * eta);
      }
      out.push_back(ld);
    }
    return out;
  };
  for (const auto& cv : curvature) {
    const double top = eigen_decompose(cv.h).eigenvalues().maxCoeff();
    lambda_max = std::max(lambda_max, top);
    gap_min = std::min(gap_min, stability_gap(top, eta));
    const double denom = cv.h.matrix().norm() * cv.c.matrix().norm();
    if (denom > 0.0) {
      const Matrix hc = cv.h.matrix() * cv.c.matrix();
      commutator = std::max(commutator, (hc - hc.transpose()).norm() / denom);
    }
  }
  rep.components["gap_min"] = gap_min;
  rep.components["lambda1_max"] = lambda_max;
  rep.components["commutator_hc"] = commutator;
  if (commutator > 1e-6) add_flag(rep, "non_commuting");

  const TerminalCovariances cov = terminal_covariances(ensemble);
  auto mean_trace_log = [&](FloorPolicy floor, bool& floored, double& log_det_pooled) {
    const SpdMatrix p = SpdMatrix::regularize(cov.pooled, floor);
    floored = floored || p.floor_active();
    log_det_pooled = log_det(p);
    double acc = 0.0;
    for (double ld : closed_log_dets(floor, floored)) acc += log_det_pooled - ld;
    return acc / static_cast<double>(curvature.size());
  };
  bool floored = false;
  double log_det_pooled = 0.0;
  const double mean = mean_trace_log(opts.floor, floored, log_det_pooled);
  rep.core = terminal_core(mean, opts.config.n);
  rep.components["mean_trace_log"] = mean;
  rep.components["log_det_pooled"] = log_det_pooled;
  if (mean < 0.0) add_flag(rep, "negative_trace_log");
  if (floored) {
    add_flag(rep, "floor_active");
    rep.components["core_eps"] = rep.core;
    bool unused = false;
    double unused_ld = 0.0;
    rep.components["core_10eps"] = terminal_core(
        mean_trace_log(FloorPolicy{opts.floor.eps_rel * 10.0}, unused, unused_ld), opts.config.n);
  }

  // The printed corollary expression, kept for comparison.
  double literal = 0.0;
  for (const auto& cv : curvature) {
    bool unused = false;
    literal += floored_log_det(cv.h, opts.floor, unused) - floored_log_det(cv.c, opts.floor, unused) +
               log_det_pooled;
  }
  literal /= static_cast<double>(curvature.size());
  rep.components["literal_corollary_trace_log"] = literal;
  if (literal >= 0.0) {
    rep.components["literal_corollary_core"] =
        std::sqrt(literal / (static_cast<double>(opts.config.n) * eta));
  }
  rep.value = rep.core * opts.config.r;
  return rep;
}

std::string ReferenceChoice::name() const {
  switch (kind) {
    case Kind::kGrandMean:
      return "grand-mean";
    case Kind::kInit:
      return "init";
    case Kind::kCustom:
      return "custom";
  }
  return "unknown";
}

ReferenceChoice ReferenceChoice::parse(const std::string& name) {
  ReferenceChoice r;
  if (name == "grand-mean") {
    r.kind = Kind::kGrandMean;
  } else if (name == "init") {
    r.kind = Kind::kInit;
  } else if (name == "custom") {
    r.kind = Kind::kCustom;
  } else {
    throw ConfigError("unknown reference '" + name + "' (expected grand-mean, init or custom)");
  }
  return r;
}

double isotropic_terminal_core(double mean_sq_dist, Eigen::Index d, std::size_t n, std::size_t b,
                               double eta) {
  if (!(eta > 0.0)) throw ConfigError("eta must be positive");
  const auto dd = static_cast<double>(d);
  const double inner = 2.0 * static_cast<double>(b) / (eta * dd) * mean_sq_dist;
  return std::sqrt(dd / static_cast<double>(n) * std::log1p(inner));
}

BoundReport terminal_bound_isotropic(const TerminalEnsemble& ensemble, const ReferenceChoice& ref,
                                     const TerminalBoundOptions& opts) {
  if (ensemble.members.empty()) throw ConfigError("terminal bound needs a non-empty ensemble");
  const Eigen::Index d = ensemble.members.front().w_final.size();
  Vector grand = Vector::Zero(d);
  for (const auto& m : ensemble.members) grand += m.w_final;
  grand /= static_cast<double>(ensemble.members.size());

  double msq = 0.0;
  for (const auto& m : ensemble.members) {
    switch (ref.kind) {
      case ReferenceChoice::Kind::kGrandMean:
        msq += (m.w_final - grand).squaredNorm();
        break;
      case ReferenceChoice::Kind::kInit:
        msq += (m.w_final - (m.w0.size() == d ? m.w0 : ensemble.w0)).squaredNorm();
        break;
      case ReferenceChoice::Kind::kCustom:
        if (ref.custom.size() != d) throw ConfigError("custom reference has the wrong dimension");
        msq += (m.w_final - ref.custom).squaredNorm();
        break;
    }
  }
  msq /= static_cast<double>(ensemble.members.size());

  BoundReport rep;
  rep.name = ref.kind == ReferenceChoice::Kind::kInit ? "terminal_isotropic_init"
                                                      : "terminal_isotropic";
  rep.config = opts.config;
  rep.config.g_choice = ref.name();
  rep.n_runs_used = ensemble.members.size();
  rep.core = isotropic_terminal_core(msq, d, opts.config.n, opts.config.b, opts.config.eta);
  rep.components["mean_sq_distance"] = msq;
  rep.components["sigma_star_sq"] =
      msq / static_cast<double>(d) + opts.config.eta / (2.0 * static_cast<double>(opts.config.b));
  rep.value = rep.core * opts.config.r;
  return rep;
}

BoundReport terminal_bound_gradient_accum(const SnapshotRuns& runs,
                                          const TerminalBoundOptions& opts) {
  const auto d = static_cast<double>(snapshot_dim(runs));
  const auto b = static_cast<double>(opts.config.b);
  BoundReport rep;
  rep.name = "terminal_gradient_accum";
  rep.config = opts.config;
  rep.n_runs_used = runs.size();

  std::size_t len = runs.front().size();
  for (const auto& r : runs) len = std::min(len, r.size());
  std::vector<double> sums(len, 0.0), steps_covered(len, 0.0);
  for (const auto& r : runs) {
    double acc = 0.0, covered = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const auto& s = r[k];
      if (s.weight > 1.0) add_flag(rep, "approximate_cadence");
      acc += s.weight * s.eta * (s.grad_norm_sq + s.trace_c);
      covered += s.weight;
      sums[k] += acc;
      steps_covered[k] = covered;
    }
  }
  const auto count = static_cast<double>(runs.size());
  const double n = static_cast<double>(opts.config.n);
  for (std::size_t k = 0; k < len; ++k) {
    const double inner = 4.0 * b * steps_covered[k] / d * (sums[k] / count);
    rep.steps.push_back(runs.front()[k].step);
    rep.cumulative_core.push_back(std::sqrt(d / n * std::log1p(inner)));
  }
  const double T = opts.config.T > 0 ? static_cast<double>(opts.config.T)
                                     : (len > 0 ? steps_covered[len - 1] : 0.0);
  const double total = len > 0 ? sums[len - 1] / count : 0.0;
  const double inner = 4.0 * b * T / d * total;
  rep.components["accumulated_sum"] = total;
  rep.components["inner"] = inner + 1.0;
  rep.core = std::sqrt(d / n * std::log1p(inner));
  rep.value = rep.core * opts.config.r;
  return rep;
}

BoundReport terminal_bound_loo(const std::vector<LooPair>& pairs, const TerminalBoundOptions& opts) {
  if (pairs.empty()) throw ConfigError("LOO bound needs paired runs");
  const double eta = opts.config.eta;
  if (!(eta > 0.0)) throw ConfigError("LOO bound needs eta > 0");
  std::map<std::size_t, std::vector<const LooPair*>> groups;
  for (const auto& p : pairs) {
    if (p.w_full.size() != p.w_loo.size() || p.w_full.size() == 0) {
      throw ConfigError("LOO pair has mismatched or empty weights");
    }
    groups[p.group].push_back(&p);
  }

  const double coef = static_cast<double>(opts.config.b) / (2.0 * eta);
  double outer = 0.0, msq_all = 0.0, frob = 0.0, frob_count = 0.0;
  for (const auto& [key, members] : groups) {
    double msq = 0.0;
    for (const auto* p : members) msq += (p->w_full - p->w_loo).squaredNorm();
    msq /= static_cast<double>(members.size());
    msq_all += msq;
    outer += std::sqrt(coef * msq);
    if (members.size() >= 2) {
      Matrix full(members.front()->w_full.size(), static_cast<Eigen::Index>(members.size()));
      Matrix loo(full.rows(), full.cols());
      for (std::size_t k = 0; k < members.size(); ++k) {
        full.col(static_cast<Eigen::Index>(k)) = members[k]->w_full;
        loo.col(static_cast<Eigen::Index>(k)) = members[k]->w_loo;
      }
      const auto cf = sample_covariance(full, full.rowwise().mean(), true);
      const auto cl = sample_covariance(loo, loo.rowwise().mean(), true);
      frob += (cf.matrix() - cl.matrix()).norm();
      frob_count += 1.0;
    }
  }
  const auto g = static_cast<double>(groups.size());
  BoundReport rep;
  rep.name = "terminal_loo";
  rep.config = opts.config;
  rep.n_runs_used = pairs.size();
  rep.core = outer / g;
  rep.components["mean_sq_shift"] = msq_all / g;
  rep.components["groups"] = g;
  if (frob_count > 0.0) rep.components["covariance_frobenius_gap"] = frob / frob_count;
  rep.value = rep.core * opts.config.m;
  return rep;
}

InfluenceResult influence_estimate(const Problem& problem, const Vector& w_star,
                                   const Dataset& data, std::size_t dropped, double cg_tol,
                                   double damping, int max_iter, double grad_tol) {
  if (dropped >= data.size()) throw InvalidInputError("dropped index out of range");
  if (damping < 0.0) throw ConfigError("damping must be >= 0");
  const Eigen::Index d = problem.dim();
  const double n = static_cast<double>(data.size());
  if (max_iter <= 0) max_iter = static_cast<int>(10 * d + 100);

  InfluenceResult out;
  out.grad_norm = full_gradient(problem, w_star, data).norm();
  out.near_minimum = out.grad_norm <= grad_tol;

  const Vector g = problem.grad(w_star, data.examples[dropped]);
  out.shift = Vector::Zero(d);
  const double g_norm = g.norm();
  if (g_norm == 0.0) return out;

  const auto examples = data.view();
  auto op = [&](const Vector& v) -> Vector { return problem.hvp(w_star, examples, v) + damping * v; };

  Vector x = Vector::Zero(d);
  Vector r = g;
  Vector p = r;
  double rs = r.squaredNorm();
  for (int it = 1; it <= max_iter; ++it) {
    const Vector ap = op(p);
    const double curv = p.dot(ap);
    if (!(curv > 0.0)) {
      throw NumericalError("influence CG met non-positive curvature " + std::to_string(curv) +
                           "; add damping");
    }
    const double alpha = rs / curv;
    x += alpha * p;
    r -= alpha * ap;
    const double rs_new = r.squaredNorm();
    out.iterations = it;
    out.residual = std::sqrt(rs_new) / g_norm;
    if (out.residual <= cg_tol) {
      out.shift = x / n;
      return out;
    }
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  throw NumericalError("influence CG did not converge: relative residual " +
                       std::to_string(out.residual) + " after " + std::to_string(max_iter) +
                       " iterations");
}

double takeuchi_trace(const Problem& problem, const Vector& w, const Dataset& data,
                      const Dataset& oracle, FloorPolicy floor, bool* floored) {
  const SpdMatrix h = SpdMatrix::regularize(dense_hessian(problem, w, data.view()), floor);
  if (floored != nullptr) *floored = *floored || h.floor_active();
  const Matrix grads = kernels::per_example_gradients(problem, w, oracle.view());
  const SymmetricMatrix f = kernels::centered_covariance(grads, Vector::Zero(grads.rows()));
  return (h.inverse() * f.matrix()).trace();
}

BoundReport fim_takeuchi_bound(const Problem& problem, const TerminalEnsemble& ensemble,
                               const std::vector<const Dataset*>& train_sets,
                               const std::vector<const Dataset*>& oracles,
                               const TerminalBoundOptions& opts) {
  if (train_sets.size() != ensemble.n_dataset_seeds || oracles.size() != ensemble.n_dataset_seeds) {
    throw InvalidInputError("need one training set and one oracle sample per dataset group");
  }
  BoundReport rep;
  rep.name = "terminal_fim_takeuchi";
  rep.config = opts.config;
  rep.n_runs_used = ensemble.members.size();

  bool floored = false;
  double outer = 0.0, trace_sum = 0.0, count = 0.0;
  for (std::size_t k = 0; k < ensemble.n_dataset_seeds; ++k) {
    const auto group = ensemble.group(k);
    if (group.empty()) throw ConfigError("empty dataset group");
    double inner = 0.0;
    for (const auto* m : group) {
      const double tr = takeuchi_trace(problem, m->w_final, *train_sets[k], *oracles[k], opts.floor,
                                       &floored);
      inner += tr;
      trace_sum += tr;
      count += 1.0;
    }
    outer += sqrt_nonneg(inner / static_cast<double>(group.size()));
  }
  rep.core = outer / static_cast<double>(ensemble.n_dataset_seeds) /
             (2.0 * static_cast<double>(opts.config.n));
  rep.components["mean_takeuchi_trace"] = trace_sum / count;
  if (floored) add_flag(rep, "hessian_floored");
  rep.value = rep.core * opts.config.m;
  return rep;
}

}  // namespace gradnoise
