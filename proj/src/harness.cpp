#include "gradnoise/harness.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradnoise/errors.hpp"
#include "gradnoise/gradstats.hpp"
#include "gradnoise/report_io.hpp"
#include "gradnoise/spectral.hpp"

namespace gradnoise {

namespace {

using nlohmann::ordered_json;

ordered_json num(double x) {
  if (std::isfinite(x)) return x;
  return format_double(x);
}

ordered_json vec_json(const Vector& v) {
  ordered_json a = ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v[i]));
  return a;
}

ordered_json mat_json(const Matrix& m) {
  ordered_json a = ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vec_json(m.row(i).transpose()));
  return a;
}

std::string out_path(const ExperimentConfig& cfg, const std::string& file) {
  return (std::filesystem::path(cfg.output_dir) / file).string();
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

// Requested names of one category, in category order; all of `defaults` when nothing is selected.
std::vector<std::string> selected(const BoundSelection& sel, const std::vector<std::string>& category,
                                  const std::vector<std::string>& defaults) {
  if (sel.names.empty()) return defaults;
  std::vector<std::string> out;
  for (const auto& name : category) {
    if (contains(sel.names, name)) out.push_back(name);
  }
  if (out.empty()) throw ConfigError("bounds.list selects no bound for this subcommand");
  return out;
}

bool oracle_needed(const TrainConfig& t) {
  return t.track_test || t.data.family() != ProblemFamily::kQuadraticGaussian;
}

// Datasets and oracle samples of the ensemble grid, seeded as in run_ensemble.
struct GridData {
  std::vector<Dataset> datasets;
  std::vector<std::optional<Dataset>> oracles;
};

GridData grid_data(const TrainConfig& train, std::size_t n_datasets, bool with_oracle) {
  GridData g;
  g.oracles.resize(n_datasets);
  for (std::size_t k = 0; k < n_datasets; ++k) {
    const std::uint64_t ds = ensemble_dataset_seed(train.seed, k);
    g.datasets.push_back(generate_dataset(train.data, ds, train.n));
    if (with_oracle) g.oracles[k] = population_oracle_sample(train.data, ds);
  }
  return g;
}

// Runs jobs [0, count) in parallel; the first exception is rethrown after the loop.
template <class Job>
void parallel_jobs(std::size_t count, Job&& job) {
  std::exception_ptr failure;
  const long total = static_cast<long>(count);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < total; ++i) {
    try {
      job(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(gradnoise_harness_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

std::optional<double> mean_opt(const std::vector<const TrajectoryRow*>& rows,
                               std::optional<double> TrajectoryRow::*field) {
  double acc = 0.0;
  for (const auto* r : rows) {
    if (!(r->*field)) return std::nullopt;
    acc += *(r->*field);
  }
  return acc / static_cast<double>(rows.size());
}

std::vector<TrajectoryRow> average_rows(const std::vector<TrajectoryRecord>& recs) {
  std::size_t len = recs.front().rows.size();
  for (const auto& r : recs) len = std::min(len, r.rows.size());
  std::vector<TrajectoryRow> out;
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<const TrajectoryRow*> rows;
    for (const auto& r : recs) rows.push_back(&r.rows[i]);
    const auto c = static_cast<double>(rows.size());
    TrajectoryRow m;
    m.step = rows.front()->step;
    m.eta = rows.front()->eta;
    for (const auto* r : rows) {
      m.train_loss += r->train_loss / c;
      m.grad_norm_sq += r->grad_norm_sq / c;
      m.trace_c += r->trace_c / c;
      m.dist_init += r->dist_init / c;
    }
    m.test_loss = mean_opt(rows, &TrajectoryRow::test_loss);
    m.train_acc = mean_opt(rows, &TrajectoryRow::train_acc);
    m.test_acc = mean_opt(rows, &TrajectoryRow::test_acc);
    m.lambda1 = mean_opt(rows, &TrajectoryRow::lambda1);
    m.gap = mean_opt(rows, &TrajectoryRow::gap);
    m.gap_half = mean_opt(rows, &TrajectoryRow::gap_half);
    m.trace_hessian = mean_opt(rows, &TrajectoryRow::trace_hessian);
    m.alignment = mean_opt(rows, &TrajectoryRow::alignment);
    out.push_back(m);
  }
  return out;
}

Vector custom_vector(const BoundSelection& sel, Eigen::Index d, const std::string& what) {
  if (static_cast<Eigen::Index>(sel.reference_custom.size()) != d) {
    throw ConfigError(what + " needs bounds.reference_custom of length " + std::to_string(d));
  }
  return Eigen::Map<const Vector>(sel.reference_custom.data(), d);
}

std::vector<const EnsembleMember*> healthy(const std::vector<const EnsembleMember*>& group) {
  std::vector<const EnsembleMember*> out;
  for (const auto* m : group) {
    if (!m->diverged) out.push_back(m);
  }
  return out;
}

ordered_json sym_summary(const SymmetricMatrix& m) { return mat_json(m.matrix()); }

void write_bounds(const ExperimentConfig& cfg, const std::vector<BoundReport>& reports) {
  write_text_file(out_path(cfg, "bounds.json"), bounds_json(reports));
  write_text_file(out_path(cfg, "bounds.csv"), bounds_table(reports).str());
}

void write_compare(const ExperimentConfig& cfg, const CompareResult& r) {
  write_text_file(out_path(cfg, "trajectory_sgd.csv"), trajectory_table(r.sgd_mean, true).str());
  write_text_file(out_path(cfg, "trajectory_sde.csv"), trajectory_table(r.sde_mean, true).str());
  ordered_json j;
  j["seeds"] = r.sgd_test_acc.size();
  j["terminal_step"] = r.sgd_mean.empty() ? 0 : r.sgd_mean.back().step;
  j["sgd_test_acc"] = num(r.sgd_acc);
  j["sde_test_acc"] = num(r.sde_acc);
  j["abs_test_acc_diff"] = num(r.abs_acc_diff);
  j["sgd_test_loss"] = num(r.sgd_test_loss);
  j["sde_test_loss"] = num(r.sde_test_loss);
  ordered_json per = ordered_json::array();
  for (std::size_t s = 0; s < r.sgd_test_acc.size(); ++s) {
    per.push_back({{"seed_index", s},
                   {"sgd_test_acc", num(r.sgd_test_acc[s])},
                   {"sde_test_acc", num(r.sde_test_acc[s])}});
  }
  j["per_seed"] = per;
  write_text_file(out_path(cfg, "summary.json"), j.dump(2) + "\n");
}

void write_stationary(const ExperimentConfig& cfg, const StationaryResult& r) {
  ordered_json j;
  j["eta"] = num(r.eta);
  j["b"] = cfg.train.b;
  j["samples"] = r.samples;
  j["w_star"] = vec_json(r.w_star);
  j["tail_mean"] = vec_json(r.tail_mean);
  j["hessian"] = sym_summary(r.hessian);
  j["gnc"] = sym_summary(r.gnc);
  j["commutator_hc"] = num(r.commutator);
  j["empirical"] = sym_summary(r.empirical);
  j["general"] = sym_summary(r.general);
  j["residual_general"] = num(r.residual_general);
  j["residual_empirical"] = num(r.residual_empirical);
  j["rel_error_general"] = num(r.rel_error_general);
  if (r.commuting) {
    j["commuting"] = sym_summary(*r.commuting);
    j["rel_error_commuting"] = num(*r.rel_error_commuting);
  } else {
    j["commuting_error"] = r.commuting_error;
  }
  j["small_lr"] = sym_summary(r.small_lr);
  write_text_file(out_path(cfg, "stationary.json"), j.dump(2) + "\n");
}

void write_sweep(const ExperimentConfig& cfg, const SweepResult& r) {
  CsvTable t({"n", "bound", "core", "value", "gen_error", "seeds_used"});
  for (const auto& row : r.rows) {
    t.add_row({std::to_string(row.n), row.bound, format_double(row.core), format_double(row.value),
               format_double(row.gen_error), std::to_string(row.seeds_used)});
  }
  write_text_file(out_path(cfg, "sweep.csv"), t.str());

  ordered_json j;
  j["n"] = r.ns;
  ordered_json ge = ordered_json::array();
  for (double g : r.gen_errors) ge.push_back(num(g));
  j["gen_error"] = ge;
  j["spearman_gen_error"] = num(r.spearman_gen_error);
  ordered_json bounds = ordered_json::object();
  for (const auto& [name, cores] : r.cores) {
    ordered_json c = ordered_json::array();
    for (double v : cores) c.push_back(num(v));
    const double rho = r.spearman_core.at(name);
    bounds[name] = {{"core", c},
                    {"spearman", num(rho)},
                    {"trend", rho < 0.0 ? "decreasing" : (rho > 0.0 ? "increasing" : "flat")}};
  }
  j["bounds"] = bounds;
  j["growing_with_n"] = r.growing;
  write_text_file(out_path(cfg, "sweep_summary.json"), j.dump(2) + "\n");
}

}  // namespace

void configure_jobs(std::optional<int> jobs) {
  if (!jobs) {
    if (const char* env = std::getenv("GRADNOISE_JOBS")) {
      try {
        jobs = std::stoi(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("GRADNOISE_JOBS is not an integer: ") + env);
      }
    }
  }
  if (jobs) {
    if (*jobs < 1) throw ConfigError("worker count must be >= 1");
    omp_set_num_threads(*jobs);
  }
}

double estimate_generalization_error(const TerminalEnsemble& ensemble) {
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& m : ensemble.members) {
    if (m.diverged) continue;
    if (!m.test_loss) throw ConfigError("generalization error needs train.track_test = true");
    acc += *m.test_loss - m.train_loss;
    ++count;
  }
  if (count == 0) throw DivergenceError("every ensemble run diverged");
  return acc / static_cast<double>(count);
}

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw InvalidInputError("Spearman correlation needs two equal-length series of length >= 2");
  }
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

BoundConfig bound_config_for(const TrainConfig& train) {
  BoundConfig c;
  c.r = train.data.subgaussian_r;
  c.m = train.data.loss_bound_m;
  c.n = train.n;
  c.b = train.b;
  c.eta = train.eta_at(train.T);
  c.T = train.T;
  return c;
}

TrajectoryRecord run_train(const ExperimentConfig& cfg) { return train_run(cfg.train); }

CompareResult compare_sgd_sde(const ExperimentConfig& cfg) {
  if (cfg.compare_seeds < 1) throw ConfigError("compare.seeds must be >= 1");
  TrainConfig base = cfg.train;
  base.track_test = true;
  base.validate();
  const auto problem = make_problem(base.data);
  const Dataset data = generate_dataset(base.data, base.dataset_seed, base.n);
  const Dataset oracle = population_oracle_sample(base.data, base.dataset_seed);

  const std::size_t seeds = cfg.compare_seeds;
  std::vector<TrajectoryRecord> sgd(seeds), sde(seeds);
  parallel_jobs(2 * seeds, [&](std::size_t job) {
    TrainConfig c = base;
    c.seed = ensemble_run_seed(cfg.seed, job / 2);
    c.mode = job % 2 == 0 ? RunMode::kSgd : RunMode::kSde;
    auto rec = train_on(c, RunContext{problem.get(), &data, &oracle, {}});
    (job % 2 == 0 ? sgd : sde)[job / 2] = std::move(rec);
  });
  for (std::size_t s = 0; s < seeds; ++s) {
    for (const auto* rec : {&sgd[s], &sde[s]}) {
      if (rec->diverged) {
        throw DivergenceError(mode_name(rec->mode) + " run for seed index " + std::to_string(s) +
                              " diverged at step " + std::to_string(*rec->diverged_at));
      }
    }
  }

  CompareResult r;
  r.sgd_mean = average_rows(sgd);
  r.sde_mean = average_rows(sde);
  for (std::size_t s = 0; s < seeds; ++s) {
    r.sgd_test_acc.push_back(sgd[s].rows.back().test_acc.value_or(std::nan("")));
    r.sde_test_acc.push_back(sde[s].rows.back().test_acc.value_or(std::nan("")));
  }
  const auto& a = r.sgd_mean.back();
  const auto& b = r.sde_mean.back();
  if (!a.test_acc || !b.test_acc) {
    throw CapabilityError("compare needs a classification problem for test accuracy");
  }
  r.sgd_acc = *a.test_acc;
  r.sde_acc = *b.test_acc;
  r.abs_acc_diff = std::abs(r.sgd_acc - r.sde_acc);
  r.sgd_test_loss = a.test_loss.value_or(0.0);
  r.sde_test_loss = b.test_loss.value_or(0.0);
  return r;
}

std::vector<BoundReport> trajectory_bounds(const ExperimentConfig& cfg) {
  const auto names = selected(cfg.bounds, trajectory_bound_names(), trajectory_bound_names());
  const GTildeChoice g = [&] {
    GTildeChoice c = GTildeChoice::parse(cfg.bounds.g_tilde);
    if (c.kind == GTildeChoice::Kind::kCustom) {
      c.custom = custom_vector(cfg.bounds, cfg.train.data.param_dim(), "g_tilde = custom");
    }
    return c;
  }();
  const bool identity = cfg.bounds.h1 == "population-identity";

  TrainConfig train = cfg.train;
  if (train.snapshot_every == 0) train.snapshot_every = 1;
  train.snapshot_population = contains(names, "traj_anisotropic") ||
                              g.kind == GTildeChoice::Kind::kPopulationGradient || identity;
  train.record_weights = false;
  train.validate();

  const auto problem = make_problem(train.data);
  const bool with_oracle =
      oracle_needed(train) ||
      (train.snapshot_population && train.data.family() != ProblemFamily::kQuadraticGaussian);
  const GridData grid = grid_data(train, cfg.dataset_seeds, with_oracle);

  const std::size_t total = cfg.dataset_seeds * cfg.run_seeds;
  std::vector<TrajectoryRecord> recs(total);
  parallel_jobs(total, [&](std::size_t job) {
    const std::size_t k = job / cfg.run_seeds;
    TrainConfig c = train;
    c.seed = ensemble_run_seed(train.seed, job % cfg.run_seeds);
    c.dataset_seed = grid.datasets[k].seed;
    const Dataset* oracle = grid.oracles[k] ? &*grid.oracles[k] : nullptr;
    recs[job] = train_on(c, RunContext{problem.get(), &grid.datasets[k], oracle, {}});
  });

  SnapshotRuns runs;
  std::vector<DataDependentRun> dd_runs;
  std::size_t diverged = 0;
  for (std::size_t job = 0; job < total; ++job) {
    if (recs[job].diverged) {
      ++diverged;
      continue;
    }
    runs.push_back(recs[job].snapshots);
    dd_runs.push_back(DataDependentRun{&grid.datasets[job / cfg.run_seeds], recs[job].snapshots});
  }
  if (runs.empty()) throw DivergenceError("every run diverged");

  TrajectoryBoundOptions opts;
  opts.config = bound_config_for(train);
  opts.g = g;
  opts.h1 = identity ? H1Source::kPopulationIdentity : H1Source::kPlugIn;
  opts.floor = train.floor;

  std::vector<BoundReport> out;
  for (const auto& name : names) {
    if (name == "traj_isotropic") {
      out.push_back(traj_bound_isotropic(runs, opts));
    } else if (name == "traj_langevin") {
      out.push_back(traj_bound_langevin(runs, opts, train.mode == RunMode::kGld));
    } else if (name == "traj_anisotropic") {
      out.push_back(traj_bound_anisotropic(runs, opts));
    } else if (name == "traj_data_dependent") {
      DataDependentOptions dd;
      dd.config = opts.config;
      dd.floor = train.floor;
      dd.enumerate_up_to = cfg.bounds.enumerate_up_to;
      dd.sampled_subsets = cfg.bounds.sampled_subsets;
      dd.seed = cfg.seed;
      out.push_back(traj_bound_data_dependent(*problem, dd_runs, dd));
    } else if (name == "terminal_gradient_accum") {
      out.push_back(terminal_bound_gradient_accum(runs, TerminalBoundOptions{opts.config, train.floor}));
    }
    if (diverged > 0) out.back().flags.push_back("diverged_runs");
  }
  return out;
}

std::vector<BoundReport> terminal_bounds(const ExperimentConfig& cfg) {
  return terminal_bounds(cfg, run_ensemble(cfg.train, cfg.dataset_seeds, cfg.run_seeds));
}

std::vector<BoundReport> terminal_bounds(const ExperimentConfig& cfg,
                                         const TerminalEnsemble& ensemble) {
  const auto names = selected(cfg.bounds, terminal_bound_names(), terminal_bound_names());
  const TrainConfig& train = cfg.train;
  const auto problem = make_problem(train.data);
  const bool need_oracle = contains(names, "terminal_fim_takeuchi");
  const GridData grid = grid_data(train, ensemble.n_dataset_seeds, need_oracle);
  const TerminalBoundOptions opts{bound_config_for(train), train.floor};
  const Eigen::Index d = train.data.param_dim();

  std::vector<BoundReport> out;
  for (const auto& name : names) {
    if (name == "terminal_general") {
      out.push_back(terminal_bound_general(ensemble, opts));
    } else if (name == "terminal_anisotropic") {
      if (static_cast<std::size_t>(d) > train.matrix_cap) {
        throw CapabilityError("terminal_anisotropic needs dense d x d curvature; d = " +
                              std::to_string(d) + " exceeds matrix_cap");
      }
      std::vector<TerminalCurvature> curv(ensemble.n_dataset_seeds);
      parallel_jobs(ensemble.n_dataset_seeds, [&](std::size_t k) {
        const auto group = healthy(ensemble.group(k));
        if (group.empty()) throw DivergenceError("every run of dataset group diverged");
        Vector w = Vector::Zero(d);
        for (const auto* m : group) w += m->w_final;
        w /= static_cast<double>(group.size());
        curv[k] = terminal_curvature(*problem, grid.datasets[k], w, train.b);
      });
      out.push_back(terminal_bound_anisotropic(ensemble, curv, opts,
                                               parse_closed_form(cfg.bounds.closed_form)));
    } else if (name == "terminal_isotropic" || name == "terminal_isotropic_init") {
      ReferenceChoice ref;
      if (name == "terminal_isotropic_init") {
        ref.kind = ReferenceChoice::Kind::kInit;
      } else {
        ref = ReferenceChoice::parse(cfg.bounds.reference);
        if (ref.kind == ReferenceChoice::Kind::kCustom) {
          ref.custom = custom_vector(cfg.bounds, d, "reference = custom");
        }
      }
      out.push_back(terminal_bound_isotropic(ensemble, ref, opts));
    } else if (name == "terminal_loo") {
      const std::size_t per = cfg.bounds.loo_subsets;
      if (per < 1 || per > train.n) throw ConfigError("bounds.loo_subsets must lie in [1, n]");
      const std::size_t jobs = ensemble.n_dataset_seeds * per * ensemble.n_run_seeds;
      std::vector<LooPair> pairs(jobs);
      parallel_jobs(jobs, [&](std::size_t job) {
        const std::size_t r = job % ensemble.n_run_seeds;
        const std::size_t kj = job / ensemble.n_run_seeds;
        const std::size_t k = kj / per;
        const std::size_t dropped = (kj % per) * train.n / per;
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < train.n; ++i) {
          if (i != dropped) keep.push_back(i);
        }
        TrainConfig c = train;
        c.seed = ensemble_run_seed(train.seed, r);
        c.dataset_seed = grid.datasets[k].seed;
        c.track_test = false;
        c.snapshot_every = 0;
        c.record_weights = false;
        const auto rec = loo_train(c, grid.datasets[k], keep);
        const EnsembleMember& full = ensemble.members[k * ensemble.n_run_seeds + r];
        pairs[job] = LooPair{kj, full.w_final, rec.w_final};
      });
      out.push_back(terminal_bound_loo(pairs, opts));
    } else if (name == "terminal_fim_takeuchi") {
      std::vector<const Dataset*> sets, oracles;
      for (std::size_t k = 0; k < ensemble.n_dataset_seeds; ++k) {
        sets.push_back(&grid.datasets[k]);
        oracles.push_back(&*grid.oracles[k]);
      }
      out.push_back(fim_takeuchi_bound(*problem, ensemble, sets, oracles, opts));
    }
    if (ensemble.diverged_runs > 0 && !out.back().has_flag("diverged_runs")) {
      out.back().flags.push_back("diverged_runs");
    }
  }
  return out;
}

StationaryResult stationary_analysis(const ExperimentConfig& cfg) {
  TrainConfig train = cfg.train;
  train.record_weights = false;
  train.snapshot_every = 0;
  train.validate();
  const auto problem = make_problem(train.data);
  const Dataset data = generate_dataset(train.data, train.dataset_seed, train.n);
  std::optional<Dataset> oracle;
  if (oracle_needed(train)) oracle = population_oracle_sample(train.data, train.dataset_seed);

  const std::size_t burn_in = cfg.stationary_burn_in > 0 ? cfg.stationary_burn_in : train.T / 5;
  if (burn_in + 2 > train.T) throw ConfigError("stationary.burn_in leaves fewer than 2 samples");
  const Eigen::Index d = problem->dim();

  // Welford accumulation of the post-burn-in weights.
  std::size_t count = 0;
  Vector mean = Vector::Zero(d);
  Matrix m2 = Matrix::Zero(d, d);
  RunContext ctx{problem.get(), &data, oracle ? &*oracle : nullptr,
                 [&](std::size_t t, const Vector& w) {
                   if (t <= burn_in) return;
                   ++count;
                   const Vector delta = w - mean;
                   mean += delta / static_cast<double>(count);
                   m2.noalias() += delta * (w - mean).transpose();
                 }};
  const auto rec = train_on(train, ctx);
  if (rec.diverged) {
    throw DivergenceError("stationary run diverged at step " + std::to_string(*rec.diverged_at));
  }

  StationaryResult r;
  r.eta = train.eta_at(train.T);
  r.samples = count;
  r.tail_mean = mean;
  r.empirical = SymmetricMatrix(m2 / static_cast<double>(count - 1));
  if (const auto* q = std::get_if<QuadraticSpec>(&train.data.params)) {
    (void)q;
    // The quadratic training loss is minimized by the sample mean of z.
    Vector zbar = Vector::Zero(d);
    for (const auto& ex : data.examples) zbar += ex.features;
    r.w_star = zbar / static_cast<double>(data.size());
  } else {
    r.w_star = mean;
  }
  r.hessian = dense_hessian(*problem, r.w_star, data.view());
  r.gnc = minibatch_gnc(empirical_gnc(*problem, r.w_star, data), train.n, train.b);
  const double hn = r.hessian.matrix().norm() * r.gnc.matrix().norm();
  if (hn > 0.0) {
    const Matrix hc = r.hessian.matrix() * r.gnc.matrix();
    r.commutator = (hc - hc.transpose()).norm() / hn;
  }

  r.general = solve_stationary_covariance(r.hessian, r.gnc, r.eta, StationaryMode::kGeneral);
  r.residual_general = stationary_residual(r.general, r.hessian, r.gnc, r.eta);
  r.residual_empirical = stationary_residual(r.empirical, r.hessian, r.gnc, r.eta);
  const double gnorm = r.general.matrix().norm();
  r.rel_error_general = (r.empirical.matrix() - r.general.matrix()).norm() / gnorm;
  try {
    r.commuting = solve_stationary_covariance(r.hessian, r.gnc, r.eta, StationaryMode::kCommuting);
    r.rel_error_commuting = (r.empirical.matrix() - r.commuting->matrix()).norm() /
                            std::max(r.commuting->matrix().norm(), 1e-300);
  } catch (const NumericalError& e) {
    if (dynamic_cast<const EdgeOfStabilityError*>(&e) != nullptr) throw;
    r.commuting_error = e.what();
  }
  r.small_lr = solve_stationary_covariance(r.hessian, r.gnc, r.eta,
                                           StationaryMode::kSmallLearningRate, train.b);
  return r;
}

SweepResult sweep_n(const ExperimentConfig& cfg) {
  if (cfg.sweep_n.size() < 2) throw ConfigError("sweep.n needs at least two sizes");
  const std::vector<std::string> defaults = {"terminal_general", "terminal_anisotropic",
                                             "terminal_isotropic", "terminal_isotropic_init"};
  ExperimentConfig local = cfg;
  local.bounds.names = selected(cfg.bounds, terminal_bound_names(), defaults);
  local.train.track_test = true;

  SweepResult out;
  std::vector<double> ns;
  for (std::size_t n : cfg.sweep_n) {
    local.train.n = n;
    local.train.validate();
    const TerminalEnsemble ens = run_ensemble(local.train, cfg.dataset_seeds, cfg.run_seeds);
    const double gen = estimate_generalization_error(ens);
    const auto reports = terminal_bounds(local, ens);
    for (const auto& rep : reports) {
      out.rows.push_back(SweepRow{n, rep.name, rep.core, rep.value, gen,
                                  ens.members.size() - ens.diverged_runs});
      out.cores[rep.name].push_back(rep.core);
    }
    out.ns.push_back(n);
    ns.push_back(static_cast<double>(n));
    out.gen_errors.push_back(gen);
  }
  out.spearman_gen_error = spearman_rho(ns, out.gen_errors);
  for (const auto& [name, cores] : out.cores) {
    const double rho = spearman_rho(ns, cores);
    out.spearman_core[name] = rho;
    if (rho > 0.0) out.growing.push_back(name);
  }
  return out;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"SGD gradient-noise dynamics and generalization-bound estimators"};
  app.require_subcommand(1);
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  int jobs = 0;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "train one run and write trajectory.csv"},
      {"compare", "paired SGD and SDE runs with an agreement summary"},
      {"bounds-traj", "trajectory-based bounds"},
      {"bounds-terminal", "terminal-state bounds over an ensemble"},
      {"stationary", "solved vs empirical stationary weight covariance"},
      {"sweep-n", "terminal bounds and generalization error across training-set sizes"}};
  std::map<std::string, CLI::App*> subs;
  std::map<std::string, std::array<CLI::Option*, 3>> opts;
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON experiment config")
        ->required()
        ->check(CLI::ExistingFile);
    opts[name] = {sub->add_option("--seed", seed, "global seed override"),
                  sub->add_option("--out", out_dir, "output directory override"),
                  sub->add_option("--jobs", jobs, "worker threads (else GRADNOISE_JOBS)")};
    subs[name] = sub;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::string command;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) command = name;
  }
  const auto& o = opts[command];

  try {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (o[0]->count() > 0) apply_seed(cfg, seed);
    if (o[1]->count() > 0) cfg.output_dir = out_dir;
    configure_jobs(o[2]->count() > 0 ? std::optional<int>(jobs) : std::nullopt);

    if (command == "train") {
      const auto rec = run_train(cfg);
      write_text_file(out_path(cfg, "trajectory.csv"), trajectory_table(rec.rows, false).str());
      if (cfg.train.record_weights) write_text_file(out_path(cfg, "weights.json"), weights_json(rec));
      if (rec.diverged) {
        throw DivergenceError("run diverged at step " + std::to_string(*rec.diverged_at));
      }
    } else if (command == "compare") {
      const auto r = compare_sgd_sde(cfg);
      write_compare(cfg, r);
      std::cout << "terminal test accuracy: sgd " << format_double(r.sgd_acc) << ", sde "
                << format_double(r.sde_acc) << ", |diff| " << format_double(r.abs_acc_diff)
                << "\n";
    } else if (command == "bounds-traj") {
      write_bounds(cfg, trajectory_bounds(cfg));
    } else if (command == "bounds-terminal") {
      write_bounds(cfg, terminal_bounds(cfg));
    } else if (command == "stationary") {
      const auto r = stationary_analysis(cfg);
      write_stationary(cfg, r);
      std::cout << "residual " << format_double(r.residual_general) << ", relative error "
                << format_double(r.rel_error_general) << " over " << r.samples << " samples\n";
    } else if (command == "sweep-n") {
      const auto r = sweep_n(cfg);
      write_sweep(cfg, r);
      std::cout << "spearman(n, gen_error) = " << format_double(r.spearman_gen_error) << "\n";
      for (const auto& [name, rho] : r.spearman_core) {
        std::cout << "spearman(n, " << name << ") = " << format_double(rho) << "\n";
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidInputError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const CapabilityError& e) {
    std::cerr << "capability error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const DomainError& e) {
    std::cerr << "domain error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace gradnoise
