#include "gradnoise/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <string>

#include "gradnoise/errors.hpp"
#include "gradnoise/kernels.hpp"
#include "gradnoise/spectral.hpp"

namespace gradnoise {

namespace {

constexpr double kDivergenceLoss = 1e12;
constexpr std::uint64_t kSpectralSeed = 0;

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

// eta * C^{1/2} factor source: the symmetric root of the floored C, or the
// elementwise root of its diagonal above the matrix cap. Empty when b == n.
struct NoiseFactor {
  bool active = false;
  bool diagonal = false;
  Matrix root;
  Vector root_diag;

  Vector apply(const Vector& normal) const {
    return diagonal ? Vector(root_diag.cwiseProduct(normal)) : Vector(root * normal);
  }
};

NoiseFactor make_noise_factor(const Matrix& grads, const Vector& mean, std::size_t b,
                              FloorPolicy floor, std::size_t matrix_cap) {
  const auto n = static_cast<std::size_t>(grads.cols());
  NoiseFactor f;
  if (n == b) return f;
  const double factor = minibatch_factor(n, b);
  f.active = true;
  if (static_cast<std::size_t>(grads.rows()) > matrix_cap) {
    f.diagonal = true;
    const Vector var = factor * kernels::centered_variance(grads, mean);
    const double scale = var.sum() / static_cast<double>(var.size());
    const double fl = floor.eps_rel * (scale > 0.0 ? scale : 1.0);
    f.root_diag = var.cwiseMax(fl).cwiseSqrt();
    return f;
  }
  const SymmetricMatrix c = kernels::centered_covariance(grads, mean).scaled(factor);
  f.root = spd_sqrt(SpdMatrix::regularize(c, floor)).matrix();
  return f;
}

double batch_loss(const Problem& problem, const Vector& w, const Dataset& data,
                  std::span<const std::size_t> idx) {
  double acc = 0.0;
  for (std::size_t i : idx) acc += problem.loss(w, data.examples[i]);
  return acc / static_cast<double>(idx.size());
}

bool is_divergent(double loss) { return !std::isfinite(loss) || loss > kDivergenceLoss; }

}  // namespace

std::string mode_name(RunMode m) {
  switch (m) {
    case RunMode::kSgd:
      return "sgd";
    case RunMode::kSde:
      return "sde";
    case RunMode::kGld:
      return "gld";
  }
  return "unknown";
}

RunMode parse_mode(const std::string& name) {
  if (name == "sgd") return RunMode::kSgd;
  if (name == "sde") return RunMode::kSde;
  if (name == "gld") return RunMode::kGld;
  throw ConfigError("unknown mode '" + name + "' (expected sgd, sde or gld)");
}

double TrainConfig::eta_at(std::size_t step) const {
  double eta = lr_schedule.front().eta;
  for (const auto& seg : lr_schedule) {
    if (seg.start_step <= step) eta = seg.eta;
  }
  return eta;
}

std::size_t TrainConfig::effective_tail_spacing() const {
  return tail_spacing > 0 ? tail_spacing : static_cast<std::size_t>(data.param_dim());
}

void TrainConfig::validate() const {
  data.validate();
  if (n < 1) throw ConfigError("n must be >= 1");
  if (b < 1 || b > n) {
    throw ConfigError("batch size b = " + std::to_string(b) + " must lie in [1, n = " +
                      std::to_string(n) + "]");
  }
  if (T < 1) throw ConfigError("T must be >= 1");
  if (lr_schedule.empty()) throw ConfigError("lr_schedule must not be empty");
  for (std::size_t k = 0; k < lr_schedule.size(); ++k) {
    if (!(lr_schedule[k].eta > 0.0) || !std::isfinite(lr_schedule[k].eta)) {
      throw ConfigError("learning rate must be positive and finite on every segment");
    }
    if (k > 0 && lr_schedule[k].start_step <= lr_schedule[k - 1].start_step) {
      throw ConfigError("lr_schedule start steps must be strictly increasing");
    }
  }
  if (lr_schedule.front().start_step > 1) {
    throw ConfigError("the first lr_schedule segment must start at step 0 or 1");
  }
  if (burn_in >= T) throw ConfigError("burn_in must be < T");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (sde_refresh_every < 1) throw ConfigError("sde_refresh_every must be >= 1");
  if (tail_checkpoints < 1) throw ConfigError("tail_checkpoints must be >= 1");
  if ((tail_checkpoints - 1) * effective_tail_spacing() >= T) {
    throw ConfigError("tail checkpoints reach before step 1; reduce tail_checkpoints or tail_spacing");
  }
  if (matrix_cap < 1) throw ConfigError("matrix_cap must be >= 1");
  if (!(floor.eps_rel > 0.0)) throw ConfigError("floor eps_rel must be positive");
  if (hessian_probes < 1) throw ConfigError("hessian_probes must be >= 1");
  if (init.kind == InitSpec::Kind::kCustom && init.custom.size() != data.param_dim()) {
    throw ConfigError("custom init has length " + std::to_string(init.custom.size()) +
                      ", expected " + std::to_string(data.param_dim()));
  }
}

std::vector<std::size_t> sample_batch(std::size_t n, std::size_t b, Rng& rng) {
  if (b > n) throw ConfigError("batch size exceeds dataset size");
  std::vector<std::size_t> idx = iota_indices(n);
  if (b < n) {
    // Partial Fisher-Yates: the first b slots become a uniform b-subset.
    for (std::size_t k = 0; k < b; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, n - 1);
      std::swap(idx[k], idx[pick(rng)]);
    }
    idx.resize(b);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

Vector sgd_step(const Problem& problem, const Vector& w, const Dataset& data,
                std::span<const std::size_t> batch, double eta) {
  if (batch.empty()) throw InvalidInputError("empty batch");
  for (std::size_t i : batch) {
    if (i >= data.size()) throw InvalidInputError("batch index out of range");
  }
  const Vector g =
      kernels::column_mean(kernels::per_example_gradients(problem, w, data.view(), batch));
  return w - eta * g;
}

Vector sde_step(const Problem& problem, const Vector& w, const Dataset& data, std::size_t b,
                double eta, Rng& rng, FloorPolicy floor) {
  const Matrix grads = kernels::per_example_gradients(problem, w, data.view());
  const Vector g = kernels::column_mean(grads);
  const NoiseFactor f = make_noise_factor(grads, g, b, floor, static_cast<std::size_t>(-1));
  Vector out = w - eta * g;
  if (f.active) out += eta * f.apply(standard_normal(rng, w.size()));
  return out;
}

Vector gld_step(const Problem& problem, const Vector& w, const Dataset& data, double eta,
                Rng& rng) {
  const Vector g =
      kernels::column_mean(kernels::per_example_gradients(problem, w, data.view()));
  return w - eta * g + eta * standard_normal(rng, w.size());
}

Vector initial_weights(const TrainConfig& config) {
  switch (config.init.kind) {
    case InitSpec::Kind::kZero:
      return Vector::Zero(config.data.param_dim());
    case InitSpec::Kind::kCustom:
      return config.init.custom;
    case InitSpec::Kind::kDefault:
      break;
  }
  return default_initial_weights(config.data, config.seed, config.init.scale);
}

namespace {

bool needs_oracle(const TrainConfig& c) {
  const bool analytic = c.data.family() == ProblemFamily::kQuadraticGaussian;
  return c.track_test || ((c.snapshot_population || c.track_alignment) && !analytic);
}

TrajectoryRow make_row(const TrainConfig& config, const RunContext& ctx, const Vector& w,
                       const Vector& w0, std::size_t step) {
  const Problem& problem = *ctx.problem;
  const Dataset& data = *ctx.data;
  const std::size_t n = data.size();
  const double eta = config.eta_at(std::max<std::size_t>(step, 1));

  TrajectoryRow row;
  row.step = step;
  row.eta = eta;
  row.train_loss = mean_loss(problem, w, data.view());
  row.train_acc = mean_accuracy(problem, w, data.view());
  if (config.track_test && ctx.oracle != nullptr) {
    row.test_loss = mean_loss(problem, w, ctx.oracle->view());
    row.test_acc = mean_accuracy(problem, w, ctx.oracle->view());
  }

  const Matrix grads = kernels::per_example_gradients(problem, w, data.view());
  const Vector g = kernels::column_mean(grads);
  row.grad_norm_sq = g.squaredNorm();
  row.trace_c = n == config.b || n < 2
                    ? 0.0
                    : minibatch_factor(n, config.b) * kernels::centered_variance(grads, g).sum();
  row.dist_init = (w - w0).norm();

  if (config.track_lambda1) {
    const auto top = top_eigenvalue(problem, w, data, 1e-6, 500, kSpectralSeed);
    row.lambda1 = top.eigenvalue;
    row.gap = stability_gap(top.eigenvalue, eta);
    row.gap_half = stability_gap_half(top.eigenvalue, eta);
  }
  if (config.track_trace_hessian) {
    row.trace_hessian = hessian_trace(problem, w, data, config.hessian_probes, kSpectralSeed);
  }
  if (config.track_alignment) {
    SnapshotOptions opts;
    opts.matrix_cap = config.matrix_cap;
    opts.population = true;
    opts.oracle = ctx.oracle;
    const auto snap = take_snapshot(problem, w, data, std::min(config.b, n), eta, step, opts);
    if (snap.diagonal_only) {
      const Vector s = snap.single_draw_diag.cwiseMax(config.floor.eps_rel *
                                                      snap.single_draw_diag.mean());
      const Vector p = snap.pop_gnc_diag->cwiseMax(config.floor.eps_rel * snap.pop_gnc_diag->mean());
      row.alignment = (p.array().log() - s.array().log()).sum();
    } else {
      row.alignment = log_det(SpdMatrix::regularize(*snap.pop_gnc, config.floor)) -
                      log_det(SpdMatrix::regularize(*snap.single_draw_gnc, config.floor));
    }
  }
  return row;
}

}  // namespace

TrajectoryRecord train_on(const TrainConfig& config, const RunContext& ctx) {
  if (ctx.problem == nullptr || ctx.data == nullptr) {
    throw InvalidInputError("run context needs a problem and a dataset");
  }
  config.validate();
  const Problem& problem = *ctx.problem;
  const Dataset& data = *ctx.data;
  const std::size_t n = data.size();
  const std::size_t b = config.b;
  if (b > n) {
    throw ConfigError("batch size b = " + std::to_string(b) + " exceeds the training set size " +
                      std::to_string(n));
  }
  if (config.mode != RunMode::kSgd && n < 2 && b < n) {
    throw ConfigError("sde mode needs n >= 2");
  }

  Rng batch_rng = make_rng(derive_seed(config.seed, stream::kBatch));
  Rng noise_rng = make_rng(derive_seed(config.seed, stream::kNoise));

  TrajectoryRecord rec;
  rec.mode = config.mode;
  rec.seed = config.seed;
  rec.dataset_seed = data.seed;
  rec.sde_refresh_every = config.sde_refresh_every;
  rec.w0 = initial_weights(config);
  if (rec.w0.size() != problem.dim()) throw ConfigError("initial weights have the wrong dimension");

  const std::vector<std::size_t> all = iota_indices(n);
  const std::size_t probe_len = std::min<std::size_t>(n, std::max<std::size_t>(b, 1));
  const std::span<const std::size_t> probe(all.data(), probe_len);

  const std::size_t spacing = config.effective_tail_spacing();
  const std::size_t first_tail = config.T - (config.tail_checkpoints - 1) * spacing;

  SnapshotOptions snap_opts;
  snap_opts.matrix_cap = config.matrix_cap;
  snap_opts.population = config.snapshot_population;
  snap_opts.oracle = ctx.oracle;

  Vector w = rec.w0;
  rec.rows.push_back(make_row(config, ctx, w, rec.w0, 0));
  rec.max_loss_observed = rec.rows.back().train_loss;
  if (config.record_weights) {
    rec.weight_steps.push_back(0);
    rec.weights.push_back(w);
  }

  NoiseFactor cached;
  for (std::size_t t = 1; t <= config.T; ++t) {
    const double eta = config.eta_at(t);

    if (config.snapshot_every > 0 && (t - 1) % config.snapshot_every == 0) {
      GradSnapshot s = take_snapshot(problem, w, data, b, eta, t, snap_opts);
      s.weight = static_cast<double>(std::min(config.snapshot_every, config.T - t + 1));
      rec.snapshots.push_back(std::move(s));
    }

    std::vector<std::size_t> batch;
    switch (config.mode) {
      case RunMode::kSgd: {
        batch = sample_batch(n, b, batch_rng);
        w = sgd_step(problem, w, data, batch, eta);
        break;
      }
      case RunMode::kSde: {
        const Matrix grads = kernels::per_example_gradients(problem, w, data.view());
        const Vector g = kernels::column_mean(grads);
        if ((t - 1) % config.sde_refresh_every == 0) {
          cached = make_noise_factor(grads, g, b, config.floor, config.matrix_cap);
        }
        Vector next = w - eta * g;
        if (cached.active) next += eta * cached.apply(standard_normal(noise_rng, w.size()));
        w = std::move(next);
        break;
      }
      case RunMode::kGld: {
        w = gld_step(problem, w, data, eta, noise_rng);
        break;
      }
    }
    rec.steps_done = t;

    const double check = w.allFinite()
                             ? batch_loss(problem, w, data, batch.empty() ? probe : batch)
                             : std::numeric_limits<double>::infinity();
    if (std::isfinite(check)) rec.max_loss_observed = std::max(rec.max_loss_observed, check);
    if (is_divergent(check)) {
      rec.diverged = true;
      rec.diverged_at = t;
      break;
    }

    if (ctx.observer) ctx.observer(t, w);
    if (t >= first_tail && (t - first_tail) % spacing == 0) rec.tail.push_back(w);

    if (t % config.log_every == 0 || t == config.T) {
      rec.rows.push_back(make_row(config, ctx, w, rec.w0, t));
      rec.max_loss_observed = std::max(rec.max_loss_observed, rec.rows.back().train_loss);
      if (is_divergent(rec.rows.back().train_loss)) {
        rec.diverged = true;
        rec.diverged_at = t;
        break;
      }
      if (config.record_weights) {
        rec.weight_steps.push_back(t);
        rec.weights.push_back(w);
      }
    }
  }
  rec.w_final = w;
  return rec;
}

TrajectoryRecord train_run(const TrainConfig& config) {
  config.validate();
  const auto problem = make_problem(config.data);
  const Dataset data = generate_dataset(config.data, config.dataset_seed, config.n);
  std::optional<Dataset> oracle;
  if (needs_oracle(config)) oracle = population_oracle_sample(config.data, config.dataset_seed);
  return train_on(config, RunContext{problem.get(), &data, oracle ? &*oracle : nullptr, {}});
}

TrajectoryRecord loo_train(const TrainConfig& config, const Dataset& data,
                           std::span<const std::size_t> subset_indices, const Dataset* oracle) {
  if (subset_indices.size() <= config.b) {
    throw ConfigError("LOO subset size m = " + std::to_string(subset_indices.size()) +
                      " must exceed batch size b = " + std::to_string(config.b));
  }
  std::vector<std::size_t> sorted(subset_indices.begin(), subset_indices.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("LOO subset has repeated indices");
  }
  const Dataset sub = subset(data, sorted);
  const auto problem = make_problem(data.spec);
  TrainConfig cfg = config;
  cfg.n = sub.size();
  return train_on(cfg, RunContext{problem.get(), &sub, oracle, {}});
}

std::vector<const EnsembleMember*> TerminalEnsemble::group(std::size_t k) const {
  std::vector<const EnsembleMember*> out;
  for (const auto& m : members) {
    if (m.dataset_index == k) out.push_back(&m);
  }
  return out;
}

std::uint64_t ensemble_dataset_seed(std::uint64_t base, std::size_t k) {
  return derive_seed(base, stream::kDatasetBase + k);
}

std::uint64_t ensemble_run_seed(std::uint64_t base, std::size_t r) {
  return derive_seed(base, stream::kRunBase + r);
}

TerminalEnsemble run_ensemble(const TrainConfig& config, std::size_t n_dataset_seeds,
                              std::size_t n_run_seeds) {
  if (n_dataset_seeds < 1 || n_run_seeds < 1) throw ConfigError("ensemble sizes must be >= 1");
  config.validate();
  const auto problem = make_problem(config.data);

  std::vector<Dataset> datasets;
  std::vector<std::optional<Dataset>> oracles(n_dataset_seeds);
  datasets.reserve(n_dataset_seeds);
  for (std::size_t k = 0; k < n_dataset_seeds; ++k) {
    const std::uint64_t ds = ensemble_dataset_seed(config.seed, k);
    datasets.push_back(generate_dataset(config.data, ds, config.n));
    if (needs_oracle(config)) oracles[k] = population_oracle_sample(config.data, ds);
  }

  TerminalEnsemble out;
  out.n_dataset_seeds = n_dataset_seeds;
  out.n_run_seeds = n_run_seeds;
  out.members.resize(n_dataset_seeds * n_run_seeds);

  std::exception_ptr failure;
  const long total = static_cast<long>(out.members.size());
#pragma omp parallel for schedule(dynamic)
  for (long job = 0; job < total; ++job) {
    const auto k = static_cast<std::size_t>(job) / n_run_seeds;
    const auto r = static_cast<std::size_t>(job) % n_run_seeds;
    try {
      TrainConfig cfg = config;
      cfg.seed = ensemble_run_seed(config.seed, r);
      cfg.dataset_seed = datasets[k].seed;
      cfg.record_weights = false;
      const auto rec = train_on(
          cfg, RunContext{problem.get(), &datasets[k], oracles[k] ? &*oracles[k] : nullptr, {}});
      EnsembleMember& m = out.members[static_cast<std::size_t>(job)];
      m.dataset_index = k;
      m.run_index = r;
      m.dataset_seed = datasets[k].seed;
      m.run_seed = cfg.seed;
      m.w0 = rec.w0;
      m.w_final = rec.w_final;
      m.tail = rec.tail;
      m.train_loss = rec.rows.back().train_loss;
      m.test_loss = rec.rows.back().test_loss;
      m.diverged = rec.diverged;
    } catch (...) {
#pragma omp critical(gradnoise_ensemble_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  out.w0 = initial_weights(config);
  for (const auto& m : out.members) out.diverged_runs += m.diverged ? 1 : 0;
  return out;
}

}  // namespace gradnoise
