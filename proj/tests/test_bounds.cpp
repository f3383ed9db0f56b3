#include <gtest/gtest.h>

#include "gradnoise/bounds.hpp"
#include "gradnoise/errors.hpp"
#include "gradnoise/kernels.hpp"
#include "test_support.hpp"

namespace gradnoise {
namespace {

using testing::make_snapshot;

BoundConfig cfg(std::size_t n, std::size_t b = 1, double eta = 0.1, std::size_t T = 1) {
  BoundConfig c;
  c.n = n;
  c.b = b;
  c.eta = eta;
  c.T = T;
  return c;
}

TrajectoryBoundOptions traj_opts(std::size_t n, GTildeChoice::Kind g = GTildeChoice::Kind::kZero) {
  TrajectoryBoundOptions o;
  o.config = cfg(n);
  o.g.kind = g;
  return o;
}

/// Ensemble whose group k holds the given terminal weights.
TerminalEnsemble make_ensemble(const std::vector<std::vector<Vector>>& groups) {
  TerminalEnsemble e;
  e.n_dataset_seeds = groups.size();
  e.n_run_seeds = groups.front().size();
  for (std::size_t k = 0; k < groups.size(); ++k) {
    for (std::size_t r = 0; r < groups[k].size(); ++r) {
      EnsembleMember m;
      m.dataset_index = k;
      m.run_index = r;
      m.w_final = groups[k][r];
      m.w0 = Vector::Zero(m.w_final.size());
      e.members.push_back(m);
    }
  }
  e.w0 = Vector::Zero(groups.front().front().size());
  return e;
}

std::vector<Vector> gaussian_cloud(Rng& rng, const Vector& center, const Matrix& root, int count) {
  std::vector<Vector> out;
  for (int i = 0; i < count; ++i) out.push_back(center + root * standard_normal(rng, center.size()));
  return out;
}

TEST(TrajIsotropic, MatchedPriorGivesZero) {
  const Vector g{{0.3, -0.2, 1.0}};
  auto opts = traj_opts(10, GTildeChoice::Kind::kCustom);
  opts.g.custom = g;
  const SnapshotRuns runs{{make_snapshot(1, g, Matrix::Identity(3, 3), 10, 1)}};
  const auto r = traj_bound_isotropic(runs, opts);
  EXPECT_NEAR(r.core, 0.0, 1e-12);
  EXPECT_NEAR(isotropic_step_term(3.0, SpdMatrix::strict(SymmetricMatrix::identity(3))), 0.0, 1e-15);
}

TEST(TrajIsotropic, ScalarExample) {
  const std::size_t n = 7;
  const SnapshotRuns runs{{make_snapshot(1, Vector{{1.0}}, Matrix::Identity(1, 1), n, 1)}};
  const auto r = traj_bound_isotropic(runs, traj_opts(n));
  EXPECT_NEAR(r.core, std::sqrt(std::log(2.0) / n), 1e-15);
  ASSERT_EQ(r.per_step_terms.size(), 1u);
  EXPECT_NEAR(r.per_step_terms[0], std::log(2.0), 1e-15);
  // sigma* = sqrt(h1 / d) is the minimizer of the per-step KL.
  const Matrix c = Matrix::Identity(1, 1);
  const double grid = testing::grid_min([&](double s2) { return testing::isotropic_kl2(s2, 2.0, c); },
                                        1e-2, 1e2);
  EXPECT_GE(grid, r.per_step_terms[0] - 1e-9);
  EXPECT_NEAR(testing::isotropic_kl2(2.0, 2.0, c), r.per_step_terms[0], 1e-15);
}

TEST(TrajIsotropic, PopulationIdentityNeedsPopulationReference) {
  auto opts = traj_opts(10);
  opts.h1 = H1Source::kPopulationIdentity;
  const SnapshotRuns runs{{make_snapshot(1, Vector{{1.0}}, Matrix::Identity(1, 1), 10, 1)}};
  EXPECT_THROW(traj_bound_isotropic(runs, opts), ConfigError);
  opts.g.kind = GTildeChoice::Kind::kPopulationGradient;
  EXPECT_THROW(traj_bound_isotropic(runs, opts), CapabilityError);
}

TEST(TrajIsotropic, ReportsBothH1Estimates) {
  const Matrix pop = Vector{{2.0, 1.0}}.asDiagonal();
  const SnapshotRuns runs{{make_snapshot(1, Vector{{1.0, 0.0}}, 0.5 * Matrix::Identity(2, 2), 10, 2,
                                         Vector{{0.0, 0.0}}, pop)}};
  auto opts = traj_opts(10, GTildeChoice::Kind::kPopulationGradient);
  const auto plug = traj_bound_isotropic(runs, opts);
  EXPECT_DOUBLE_EQ(plug.components.at("h1_plugin_mean"), 2.0);
  EXPECT_DOUBLE_EQ(plug.components.at("h1_identity_mean"), 1.5);
  opts.h1 = H1Source::kPopulationIdentity;
  const auto ident = traj_bound_isotropic(runs, opts);
  EXPECT_NEAR(ident.per_step_terms[0], 2.0 * std::log(1.5 / 2.0) - 2.0 * std::log(0.5), 1e-12);
}

TEST(TrajIsotropic, NonPositiveH1Throws) {
  const SnapshotRuns runs{{make_snapshot(1, Vector{{0.0}}, Matrix::Zero(1, 1), 10, 1)}};
  EXPECT_THROW(traj_bound_isotropic(runs, traj_opts(10)), NumericalError);
}

TEST(TrajLangevin, Examples) {
  const std::size_t n = 9;
  auto opts = traj_opts(n, GTildeChoice::Kind::kCustom);
  opts.g.custom = Vector{{0.5, 0.5}};
  const SnapshotRuns same{{make_snapshot(1, Vector{{0.5, 0.5}}, Matrix::Identity(2, 2), n, 1),
                           make_snapshot(2, Vector{{0.5, 0.5}}, Matrix::Identity(2, 2), n, 1)}};
  EXPECT_EQ(traj_bound_langevin(same, opts, true).core, 0.0);

  const SnapshotRuns one{{make_snapshot(1, Vector{{std::sqrt(std::exp(1.0) - 1.0)}},
                                        Matrix::Identity(1, 1), n, 1)}};
  const auto r = traj_bound_langevin(one, traj_opts(n), true);
  EXPECT_NEAR(r.per_step_terms[0], 1.0, 1e-15);
  EXPECT_NEAR(r.core, std::sqrt(1.0 / n), 1e-15);
  EXPECT_FALSE(r.has_flag("counterfactual"));
  EXPECT_TRUE(traj_bound_langevin(one, traj_opts(n), false).has_flag("counterfactual"));
}

TEST(TrajLangevin, NeverAboveLinearizedBound) {
  Rng rng(4);
  for (int k = 0; k < 100; ++k) {
    std::vector<GradSnapshot> run;
    for (std::size_t t = 1; t <= 5; ++t) {
      run.push_back(make_snapshot(t, testing::random_vector(rng, 3, 2.0), Matrix::Identity(3, 3), 20, 1));
    }
    const auto r = traj_bound_langevin({run}, traj_opts(20), true);
    EXPECT_LE(r.core, r.components.at("linearized_core") + 1e-15);
    for (const auto& s : run) EXPECT_LE(langevin_step_term(s.grad_norm_sq, 3), s.grad_norm_sq / 3.0);
  }
}

TEST(TrajAnisotropic, Examples) {
  const std::size_t b = 4;
  const Matrix pop = Vector{{1.0, 4.0}}.asDiagonal();
  const SnapshotRuns aligned{{make_snapshot(1, Vector::Zero(2), pop / b, 10, b, Vector::Zero(2), pop)}};
  EXPECT_NEAR(traj_bound_anisotropic(aligned, traj_opts(10)).core, 0.0, 1e-12);

  const SnapshotRuns diag{{make_snapshot(1, Vector::Zero(2), Matrix::Identity(2, 2) / b, 10, b,
                                         Vector::Zero(2), pop)}};
  const auto r = traj_bound_anisotropic(diag, traj_opts(10));
  EXPECT_NEAR(r.per_step_terms[0], std::log(4.0), 1e-12);
  EXPECT_NEAR(r.per_step_terms[0], 1.3863, 5e-5);
  EXPECT_NEAR(r.components.at("mean_diagonal_alignment"), std::log(4.0), 1e-12);

  const SnapshotRuns missing{{make_snapshot(1, Vector::Zero(2), pop, 10, b)}};
  EXPECT_THROW(traj_bound_anisotropic(missing, traj_opts(10)), CapabilityError);
}

TEST(TrajAnisotropic, NegativeSumIsSurfacedNotClipped) {
  const Matrix pop = Matrix::Identity(2, 2);
  const SnapshotRuns runs{{make_snapshot(1, Vector::Zero(2), 4.0 * Matrix::Identity(2, 2), 10, 1,
                                         Vector::Zero(2), pop)}};
  const auto r = traj_bound_anisotropic(runs, traj_opts(10));
  EXPECT_LT(r.per_step_terms[0], 0.0);
  EXPECT_LT(r.components.at("signed_sum"), 0.0);
  EXPECT_TRUE(r.has_flag("negative_trace_log"));
}

TEST(TrajAnisotropic, FloorSensitivityReported) {
  Matrix c = Matrix::Zero(2, 2);
  c(0, 0) = 1.0;  // rank deficient
  const SnapshotRuns runs{{make_snapshot(1, Vector::Zero(2), c, 10, 1, Vector::Zero(2),
                                         Matrix::Identity(2, 2))}};
  const auto r = traj_bound_anisotropic(runs, traj_opts(10));
  EXPECT_TRUE(r.has_flag("floor_active"));
  EXPECT_EQ(r.components.at("core_eps"), r.core);
  EXPECT_LT(r.components.at("core_10eps"), r.core);
}

TEST(BoundOrdering, AnisotropicNeverExceedsIsotropic) {
  Rng rng(21);
  for (int k = 0; k < 200; ++k) {
    const Eigen::Index d = 1 + k % 5;
    const std::size_t b = 1 + static_cast<std::size_t>(k % 3);
    const Matrix pop = testing::random_spd(rng, d, 0.1, 3.0);
    const Matrix c = testing::random_spd(rng, d, 0.1, 3.0);
    const Vector g = testing::random_vector(rng, d);
    auto opts = traj_opts(50, GTildeChoice::Kind::kPopulationGradient);
    opts.h1 = H1Source::kPopulationIdentity;
    const SnapshotRuns runs{{make_snapshot(1, g, c, 50, b, testing::random_vector(rng, d), pop),
                             make_snapshot(2, g, 0.5 * c, 50, b, testing::random_vector(rng, d), pop)}};
    const auto iso = traj_bound_isotropic(runs, opts);
    const auto an = traj_bound_anisotropic(runs, opts);
    for (std::size_t t = 0; t < 2; ++t) {
      EXPECT_LE(an.per_step_terms[t], iso.per_step_terms[t] + 1e-12);
      EXPECT_LE(an.cumulative_core[t], iso.cumulative_core[t] + 1e-12);
    }
  }
}

TEST(BoundOrdering, EqualityForEqualDiagonalPopulationGnc) {
  const Matrix pop = 2.5 * Matrix::Identity(3, 3);
  Rng rng(2);
  const Matrix c = testing::random_spd(rng, 3);
  auto opts = traj_opts(20, GTildeChoice::Kind::kPopulationGradient);
  opts.h1 = H1Source::kPopulationIdentity;
  const SnapshotRuns runs{{make_snapshot(1, Vector::Zero(3), c, 20, 2, Vector::Zero(3), pop)}};
  EXPECT_NEAR(traj_bound_isotropic(runs, opts).per_step_terms[0],
              traj_bound_anisotropic(runs, opts).per_step_terms[0], 1e-9);
  const Matrix unequal = Vector{{1.0, 2.5, 4.0}}.asDiagonal();
  const SnapshotRuns runs2{{make_snapshot(1, Vector::Zero(3), c, 20, 2, Vector::Zero(3), unequal)}};
  EXPECT_LT(traj_bound_anisotropic(runs2, opts).per_step_terms[0],
            traj_bound_isotropic(runs2, opts).per_step_terms[0] - 1e-3);
}

TEST(LogSumInequality, HoldsOnRandomVectors) {
  Rng rng(31);
  std::uniform_real_distribution<double> u(1e-3, 5.0);
  std::uniform_int_distribution<int> len(1, 10);
  for (int k = 0; k < 10000; ++k) {
    const int m = len(rng);
    double lhs = 0.0, sa = 0.0, sb = 0.0;
    for (int i = 0; i < m; ++i) {
      const double a = u(rng), b = u(rng);
      lhs += b * std::log(a / b);
      sa += a;
      sb += b;
    }
    EXPECT_LE(lhs, sb * std::log(sa / sb) + 1e-12);
  }
}

TEST(PriorOptimality, GridNeverBeatsClosedForms) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(0.05, 4.0);
  for (int k = 0; k < 100; ++k) {
    const Eigen::Index d = 1 + k % 4;
    const std::size_t b = 1 + static_cast<std::size_t>(k % 5);
    const Matrix c = testing::random_spd(rng, d, 0.05, 2.0);
    const Matrix pop = testing::random_spd(rng, d, 0.05, 2.0);
    const double h1 = c.trace() + u(rng);

    const double iso = isotropic_step_term(h1, SpdMatrix::strict(SymmetricMatrix(c)));
    const double iso_grid = testing::grid_min(
        [&](double s2) { return testing::isotropic_kl2(s2, h1, c); }, 1e-3 * h1, 1e3 * h1);
    EXPECT_GE(iso_grid - iso, -1e-9);

    const double an = anisotropic_step_term(SpdMatrix::strict(SymmetricMatrix(pop)),
                                            SpdMatrix::strict(SymmetricMatrix(static_cast<double>(b) * c)));
    const double an_grid = testing::grid_min(
        [&](double ct) { return testing::anisotropic_kl2(ct, pop, c, b); }, 1e-3, 1e2);
    EXPECT_GE(an_grid - an, -1e-9);
    EXPECT_NEAR(testing::anisotropic_kl2(1.0 / static_cast<double>(b), pop, c, b), an, 1e-10);

    const double e = u(rng), eta = 0.01 + u(rng) / 10.0;
    const std::size_t n = 25;
    const double core = isotropic_terminal_core(e, d, n, b, eta);
    const double closed = core * core * static_cast<double>(n);
    const double term_grid = testing::grid_min(
        [&](double s2) { return testing::terminal_kl2(s2, e, d, b, eta); }, 1e-4, 1e3);
    EXPECT_GE(term_grid - closed, -1e-9);
  }
}

// Direct evaluation of the data-dependent per-step term: pairwise covariance formula and
// LU determinants, independent of the kernels used by the library.
double data_dependent_oracle(const Matrix& g, std::size_t b) {
  const Eigen::Index d = g.rows();
  const Eigen::Index n = g.cols();
  auto cov = [&](const std::vector<Eigen::Index>& idx) {
    Matrix s = Matrix::Zero(d, d);
    const auto m = static_cast<double>(idx.size());
    for (auto j : idx) {
      for (auto k : idx) s += (g.col(j) - g.col(k)) * (g.col(j) - g.col(k)).transpose();
    }
    return Matrix(s / (2.0 * m * m) / static_cast<double>(b));
  };
  std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  const double ldc = std::log(cov(all).determinant());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<Eigen::Index> j;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k != i) j.push_back(k);
    }
    acc += ldc - std::log(cov(j).determinant());
  }
  const double nm1 = static_cast<double>(n - 1);
  return (static_cast<double>(b) - 1.0) * static_cast<double>(d) / (nm1 * nm1) +
         acc / static_cast<double>(n);
}

TEST(TrajDataDependent, MatchesDirectOracle) {
  Matrix a(2, 2);
  a << 1.0, 0.3, 0.3, 0.7;
  const DataSpec spec = testing::quadratic_spec(a, Vector::Zero(2), Matrix::Identity(2, 2));
  const auto p = make_problem(spec);
  const Dataset d = generate_dataset(spec, 3, 4);
  const Vector w{{0.2, -0.4}};
  const Matrix g = kernels::per_example_gradients(*p, w, d.view());
  DataDependentOptions opts;
  opts.config = cfg(4);
  const auto dropped = dropped_indices(4, opts);
  EXPECT_EQ(dropped, (std::vector<std::size_t>{0, 1, 2, 3}));
  const double term = data_dependent_step_term(g, 1, dropped, FloorPolicy{});
  EXPECT_NEAR(term, data_dependent_oracle(g, 1), 1e-10);

  GradSnapshot s;
  s.step = 1;
  s.weight = 1.0;
  s.weights = w;
  const auto r = traj_bound_data_dependent(*p, {DataDependentRun{&d, {s}}}, opts);
  EXPECT_NEAR(r.core, std::sqrt(term), 1e-12);
  EXPECT_EQ(r.components.at("enumerated"), 1.0);

  // b = 2 on n = 6: the constant term enters.
  const Dataset d6 = generate_dataset(spec, 4, 6);
  const Matrix g6 = kernels::per_example_gradients(*p, w, d6.view());
  EXPECT_NEAR(data_dependent_step_term(g6, 2, dropped_indices(6, opts), FloorPolicy{}),
              data_dependent_oracle(g6, 2), 1e-10);
}

TEST(TrajDataDependent, EqualGradients) {
  Matrix g = Matrix::Ones(3, 5);
  const std::vector<std::size_t> all{0, 1, 2, 3, 4};
  EXPECT_NEAR(data_dependent_step_term(g, 1, all, FloorPolicy{}), 0.0, 1e-15);
  bool floored = false;
  EXPECT_NEAR(data_dependent_step_term(g, 2, all, FloorPolicy{}, &floored), 3.0 / 16.0, 1e-15);
  EXPECT_TRUE(floored);
  EXPECT_THROW(data_dependent_step_term(g, 4, all, FloorPolicy{}), ConfigError);
}

TEST(TrajDataDependent, SampledSubsets) {
  DataDependentOptions opts;
  opts.enumerate_up_to = 12;
  opts.sampled_subsets = 5;
  opts.seed = 3;
  const auto idx = dropped_indices(40, opts);
  ASSERT_EQ(idx.size(), 5u);
  EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
  EXPECT_EQ(std::adjacent_find(idx.begin(), idx.end()), idx.end());
  EXPECT_EQ(idx, dropped_indices(40, opts));
  EXPECT_EQ(dropped_indices(12, opts).size(), 12u);
}

TEST(TerminalGeneral, SingleDatasetGivesZero) {
  Rng rng(1);
  const auto e = make_ensemble({gaussian_cloud(rng, Vector::Zero(3), Matrix::Identity(3, 3), 20)});
  TerminalBoundOptions opts;
  opts.config = cfg(50);
  const auto r = terminal_bound_general(e, opts);
  EXPECT_NEAR(r.core, 0.0, 1e-7);
  EXPECT_TRUE(r.has_flag("single_dataset"));
}

TEST(TerminalGeneral, DeterministicLimitHitsFloorCap) {
  std::vector<std::vector<Vector>> groups;
  for (int k = 0; k < 4; ++k) groups.push_back(std::vector<Vector>(3, Vector::Constant(2, k * 0.5)));
  TerminalBoundOptions opts;
  opts.config = cfg(50);
  const auto r = terminal_bound_general(make_ensemble(groups), opts);
  EXPECT_TRUE(r.has_flag("deterministic_limit"));
  EXPECT_TRUE(r.has_flag("floor_active"));
  EXPECT_NEAR(r.core, r.components.at("floor_cap"), 1e-12);
  EXPECT_GT(r.components.at("core_10eps"), 0.0);
  EXPECT_LT(r.components.at("core_10eps"), r.core);
}

TEST(TerminalGeneral, MatchesDeterminantOracle) {
  Rng rng(8);
  std::vector<std::vector<Vector>> groups;
  for (int k = 0; k < 3; ++k) {
    groups.push_back(gaussian_cloud(rng, testing::random_vector(rng, 2), 0.3 * Matrix::Identity(2, 2), 12));
  }
  TerminalBoundOptions opts;
  opts.config = cfg(40);
  const auto r = terminal_bound_general(make_ensemble(groups), opts);
  // Oracle: unbiased covariances from explicit sums and LU determinants.
  auto cov = [](const std::vector<Vector>& pts) {
    Vector m = Vector::Zero(2);
    for (const auto& p : pts) m += p;
    m /= static_cast<double>(pts.size());
    Matrix s = Matrix::Zero(2, 2);
    for (const auto& p : pts) s += (p - m) * (p - m).transpose();
    return Matrix(s / static_cast<double>(pts.size() - 1));
  };
  std::vector<Vector> all;
  for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
  const double ldp = std::log(cov(all).determinant());
  double mean = 0.0;
  for (const auto& g : groups) mean += ldp - std::log(cov(g).determinant());
  mean /= 3.0;
  EXPECT_NEAR(r.core, std::sqrt(mean / 80.0), 1e-12);
}

TEST(TerminalGeneral, TooFewSamplesPerGroup) {
  const auto e = make_ensemble({{Vector::Zero(2)}, {Vector::Ones(2)}});
  EXPECT_THROW(terminal_bound_general(e, TerminalBoundOptions{}), ConfigError);
}

TEST(TerminalAnisotropic, MatchedClosedFormGivesZero) {
  Rng rng(3);
  const auto e = make_ensemble({gaussian_cloud(rng, Vector::Zero(2), Matrix::Identity(2, 2), 30)});
  const auto cov = terminal_covariances(e);
  const double eta = 0.2;
  // Commuting form with H = I: Lambda = eta / (2 - eta) C.
  const TerminalCurvature cv{SymmetricMatrix::identity(2), cov.pooled.scaled((2.0 - eta) / eta)};
  TerminalBoundOptions opts;
  opts.config = cfg(30, 1, eta);
  for (ClosedForm f : {ClosedForm::kCommuting, ClosedForm::kGeneral}) {
    const auto r = terminal_bound_anisotropic(e, {cv}, opts, f);
    EXPECT_NEAR(r.components.at("mean_trace_log"), 0.0, 1e-12);
    EXPECT_FALSE(r.has_flag("non_commuting"));
  }
}

TEST(TerminalAnisotropic, EdgeOfStabilityRaises) {
  Rng rng(3);
  const auto e = make_ensemble({gaussian_cloud(rng, Vector::Zero(2), Matrix::Identity(2, 2), 10)});
  const TerminalCurvature cv{SymmetricMatrix::diagonal(Vector{{1.0, 25.0}}),
                             SymmetricMatrix::identity(2)};
  TerminalBoundOptions opts;
  opts.config = cfg(30, 1, 0.1);
  for (ClosedForm f : {ClosedForm::kCommuting, ClosedForm::kReduced, ClosedForm::kGeneral}) {
    EXPECT_THROW(terminal_bound_anisotropic(e, {cv}, opts, f), EdgeOfStabilityError);
  }
  EXPECT_THROW(terminal_bound_anisotropic(e, {cv, cv}, opts), InvalidInputError);
}

TEST(TerminalAnisotropic, DiagnosticsAndReducedForm) {
  Rng rng(5);
  const auto e = make_ensemble({gaussian_cloud(rng, Vector::Zero(2), Matrix::Identity(2, 2), 20),
                                gaussian_cloud(rng, Vector::Ones(2), Matrix::Identity(2, 2), 20)});
  Matrix c(2, 2);
  c << 1.0, 0.4, 0.4, 1.0;
  const TerminalCurvature cv{SymmetricMatrix::diagonal(Vector{{1.0, 2.0}}), SymmetricMatrix(c)};
  TerminalBoundOptions opts;
  opts.config = cfg(30, 1, 0.1);
  const auto r = terminal_bound_anisotropic(e, {cv, cv}, opts, ClosedForm::kReduced);
  EXPECT_TRUE(r.has_flag("non_commuting"));
  EXPECT_NEAR(r.components.at("gap_min"), 18.0, 1e-12);
  EXPECT_NEAR(r.components.at("lambda1_max"), 2.0, 1e-12);
  const Matrix lam = 0.05 * Vector{{1.0, 0.5}}.asDiagonal() * c;
  const auto cov = terminal_covariances(e);
  const double expected = std::log(cov.pooled.matrix().determinant()) - std::log(lam.determinant());
  EXPECT_NEAR(r.components.at("mean_trace_log"), expected, 1e-10);
}

TEST(TerminalIsotropic, Examples) {
  EXPECT_EQ(isotropic_terminal_core(0.0, 3, 10, 1, 0.1), 0.0);
  const std::size_t n = 13;
  EXPECT_NEAR(isotropic_terminal_core(0.1, 2, n, 1, 0.1), std::sqrt(2.0 / n * std::log(2.0)), 1e-15);

  // Members sit at w0, so the init reference gives zero distance.
  const auto e = make_ensemble({{Vector::Zero(2), Vector::Zero(2)}, {Vector::Zero(2), Vector::Zero(2)}});
  TerminalBoundOptions opts;
  opts.config = cfg(n, 1, 0.1);
  ReferenceChoice init;
  init.kind = ReferenceChoice::Kind::kInit;
  const auto r = terminal_bound_isotropic(e, init, opts);
  EXPECT_EQ(r.core, 0.0);
  EXPECT_EQ(r.name, "terminal_isotropic_init");

  const auto e2 = make_ensemble({{Vector{{1.0, 0.0}}, Vector{{-1.0, 0.0}}}});
  const auto g = terminal_bound_isotropic(e2, ReferenceChoice{}, opts);
  EXPECT_DOUBLE_EQ(g.components.at("mean_sq_distance"), 1.0);
  EXPECT_DOUBLE_EQ(g.core, isotropic_terminal_core(1.0, 2, n, 1, 0.1));
}

TEST(TerminalGradientAccum, Examples) {
  TerminalBoundOptions opts;
  opts.config = cfg(11, 1, 1.0, 1);
  const SnapshotRuns zero{{make_snapshot(1, Vector::Zero(1), Matrix::Zero(1, 1), 11, 1, {}, {}, 1.0)}};
  EXPECT_EQ(terminal_bound_gradient_accum(zero, opts).core, 0.0);

  const double v = (std::exp(1.0) - 1.0) / 4.0;
  const SnapshotRuns one{{make_snapshot(1, Vector{{std::sqrt(v)}}, Matrix::Zero(1, 1), 11, 1, {}, {}, 1.0)}};
  const auto r = terminal_bound_gradient_accum(one, opts);
  EXPECT_NEAR(r.components.at("inner"), std::exp(1.0), 1e-14);
  EXPECT_NEAR(r.core, std::sqrt(1.0 / 11.0), 1e-15);
}

TEST(TerminalGradientAccum, MonotoneInT) {
  Rng rng(9);
  std::vector<GradSnapshot> run;
  for (std::size_t t = 1; t <= 30; ++t) {
    run.push_back(make_snapshot(t, testing::random_vector(rng, 2), 0.1 * Matrix::Identity(2, 2), 20, 2));
  }
  TerminalBoundOptions opts;
  opts.config = cfg(20, 2, 0.1, 30);
  const auto r = terminal_bound_gradient_accum({run}, opts);
  ASSERT_EQ(r.cumulative_core.size(), 30u);
  EXPECT_GE(r.cumulative_core.front(), 0.0);
  for (std::size_t k = 1; k < 30; ++k) EXPECT_GE(r.cumulative_core[k], r.cumulative_core[k - 1]);
  EXPECT_DOUBLE_EQ(r.cumulative_core.back(), r.core);
}

TEST(TerminalLoo, Examples) {
  TerminalBoundOptions opts;
  opts.config = cfg(10, 1, 0.1);
  const std::vector<LooPair> same{{0, Vector{{1.0, 2.0}}, Vector{{1.0, 2.0}}}};
  EXPECT_EQ(terminal_bound_loo(same, opts).core, 0.0);
  const std::vector<LooPair> scalar{{0, Vector{{0.0}}, Vector{{0.1}}}};
  EXPECT_NEAR(terminal_bound_loo(scalar, opts).core, std::sqrt(0.05), 1e-15);
  EXPECT_NEAR(terminal_bound_loo(scalar, opts).core, 0.223607, 1e-6);
  const std::vector<LooPair> bad{{0, Vector{{0.0}}, Vector{{0.1, 0.2}}}};
  EXPECT_THROW(terminal_bound_loo(bad, opts), ConfigError);
  EXPECT_THROW(terminal_bound_loo({}, opts), ConfigError);
}

TEST(TerminalLoo, OuterMeanOfInnerRoots) {
  TerminalBoundOptions opts;
  opts.config = cfg(10, 2, 0.5);
  const std::vector<LooPair> pairs{{0, Vector{{0.0}}, Vector{{1.0}}},
                                   {0, Vector{{0.0}}, Vector{{3.0}}},
                                   {1, Vector{{0.0}}, Vector{{2.0}}}};
  const double coef = 2.0 / (2.0 * 0.5);
  EXPECT_NEAR(terminal_bound_loo(pairs, opts).core,
              0.5 * (std::sqrt(coef * 5.0) + std::sqrt(coef * 4.0)), 1e-14);
}

DataSpec unit_quadratic(Eigen::Index d) {
  return testing::quadratic_spec(Matrix::Identity(d, d), Vector::Zero(d), Matrix::Identity(d, d));
}

TEST(Influence, TwoPointExample) {
  const DataSpec spec = unit_quadratic(1);
  const auto p = make_problem(spec);
  const Dataset d = testing::points_dataset(spec, {Vector{{0.0}}, Vector{{2.0}}});
  const auto r = influence_estimate(*p, Vector{{1.0}}, d, 0);
  EXPECT_EQ(r.shift[0], 0.5);
  EXPECT_TRUE(r.near_minimum);
  // Exact retraining: the minimizer of S_J = {z_2} is 2, so the true shift is 1.
  const Dataset sj = subset(d, std::vector<std::size_t>{1});
  EXPECT_EQ(full_gradient(*p, Vector{{2.0}}, sj)[0], 0.0);
  EXPECT_EQ(full_gradient(*p, Vector{{1.0}}, d)[0], 0.0);
}

TEST(Influence, LargeSampleMatchesExactLoo) {
  const DataSpec spec = unit_quadratic(3);
  const auto p = make_problem(spec);
  const Dataset d = generate_dataset(spec, 5, 1000);
  Vector wstar = Vector::Zero(3);
  for (const auto& e : d.examples) wstar += e.features;
  wstar /= 1000.0;
  for (std::size_t i : {0u, 17u, 999u}) {
    Vector loo = Vector::Zero(3);
    for (std::size_t j = 0; j < 1000; ++j) {
      if (j != i) loo += d.examples[j].features;
    }
    loo /= 999.0;
    const auto r = influence_estimate(*p, wstar, d, i);
    EXPECT_LE((r.shift * 1000.0 / 999.0 - (loo - wstar)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Influence, ZeroGradientAndErrors) {
  const DataSpec spec = unit_quadratic(2);
  const auto p = make_problem(spec);
  const Dataset d = testing::points_dataset(spec, {Vector{{1.0, 1.0}}, Vector{{1.0, 1.0}}});
  const auto r = influence_estimate(*p, Vector{{1.0, 1.0}}, d, 1);
  EXPECT_TRUE(r.shift.isZero(0.0));
  EXPECT_THROW(influence_estimate(*p, Vector{{1.0, 1.0}}, d, 2), InvalidInputError);
  EXPECT_THROW(influence_estimate(*p, Vector{{1.0, 1.0}}, d, 0, 1e-10, -1.0), ConfigError);
  const auto far = influence_estimate(*p, Vector{{5.0, 5.0}}, d, 0);
  EXPECT_FALSE(far.near_minimum);
}

TEST(Influence, DampingShrinksShift) {
  const DataSpec spec = unit_quadratic(2);
  const auto p = make_problem(spec);
  const Dataset d = testing::points_dataset(spec, {Vector{{0.0, 0.0}}, Vector{{2.0, 4.0}}});
  const auto r = influence_estimate(*p, Vector{{1.0, 2.0}}, d, 0, 1e-12, 1.0);
  EXPECT_LT((r.shift - Vector{{0.25, 0.5}}).norm(), 1e-12);
}

TEST(Takeuchi, Examples) {
  const DataSpec spec = unit_quadratic(3);
  const auto p = make_problem(spec);
  const Vector w = Vector::Zero(3);
  const Dataset train = testing::points_dataset(spec, {w});
  // Oracle points w +- sqrt(3) e_k have uncentered gradient second moment I.
  std::vector<Vector> pts;
  for (Eigen::Index k = 0; k < 3; ++k) {
    pts.push_back(w + std::sqrt(3.0) * Vector::Unit(3, k));
    pts.push_back(w - std::sqrt(3.0) * Vector::Unit(3, k));
  }
  EXPECT_NEAR(takeuchi_trace(*p, w, train, testing::points_dataset(spec, pts), FloorPolicy{}), 3.0,
              1e-12);
  EXPECT_EQ(takeuchi_trace(*p, w, train, testing::points_dataset(spec, {w, w}), FloorPolicy{}), 0.0);

  // H == F: A = diag(2, 3) with oracle offsets +-sqrt(d / a_k) e_k.
  const DataSpec s2 = testing::quadratic_spec(Matrix(Vector{{2.0, 3.0}}.asDiagonal()),
                                              Vector::Zero(2), Matrix::Identity(2, 2));
  const auto p2 = make_problem(s2);
  std::vector<Vector> pts2;
  for (Eigen::Index k = 0; k < 2; ++k) {
    const double off = std::sqrt(2.0 / (k == 0 ? 2.0 : 3.0));
    pts2.push_back(off * Vector::Unit(2, k));
    pts2.push_back(-off * Vector::Unit(2, k));
  }
  EXPECT_NEAR(takeuchi_trace(*p2, Vector::Zero(2), testing::points_dataset(s2, {Vector::Zero(2)}),
                             testing::points_dataset(s2, pts2), FloorPolicy{}),
              2.0, 1e-12);
}

TEST(Takeuchi, PopulationTraceOfQuadratic) {
  Matrix sz(2, 2);
  sz << 1.0, 0.3, 0.3, 0.5;
  Matrix a(2, 2);
  a << 2.0, 0.5, 0.5, 1.0;
  DataSpec spec = testing::quadratic_spec(a, Vector::Zero(2), sz);
  spec.population_oracle_size = 400000;
  const auto p = make_problem(spec);
  const Dataset oracle = population_oracle_sample(spec, 2);
  const Dataset train = generate_dataset(spec, 2, 5);
  EXPECT_NEAR(takeuchi_trace(*p, Vector::Zero(2), train, oracle, FloorPolicy{}), (sz * a).trace(),
              0.02 * (sz * a).trace());
}

TEST(FimBound, OuterExpression) {
  const DataSpec spec = unit_quadratic(3);
  const auto p = make_problem(spec);
  const Dataset train = testing::points_dataset(spec, {Vector::Zero(3)});
  std::vector<Vector> pts;
  for (Eigen::Index k = 0; k < 3; ++k) {
    pts.push_back(std::sqrt(3.0) * Vector::Unit(3, k));
    pts.push_back(-std::sqrt(3.0) * Vector::Unit(3, k));
  }
  const Dataset oracle = testing::points_dataset(spec, pts);
  const auto e = make_ensemble({{Vector::Zero(3), Vector::Zero(3)}});
  TerminalBoundOptions opts;
  opts.config = cfg(20);
  const auto r = fim_takeuchi_bound(*p, e, {&train}, {&oracle}, opts);
  EXPECT_NEAR(r.core, std::sqrt(3.0) / 40.0, 1e-12);
  EXPECT_NEAR(r.components.at("mean_takeuchi_trace"), 3.0, 1e-12);
  EXPECT_THROW(fim_takeuchi_bound(*p, e, {}, {&oracle}, opts), InvalidInputError);
}

TEST(ScaleContract, ValueIsCoreTimesConstant) {
  Rng rng(12);
  BoundConfig c = cfg(25, 2, 0.1, 3);
  c.r = 2.5;
  c.m = 3.0;
  const Matrix pop = testing::random_spd(rng, 2);
  const SnapshotRuns runs{{make_snapshot(1, Vector{{1.0, 0.5}}, 0.3 * Matrix::Identity(2, 2), 25, 2,
                                         Vector::Zero(2), pop)}};
  TrajectoryBoundOptions to;
  to.config = c;
  to.g.kind = GTildeChoice::Kind::kPopulationGradient;
  TerminalBoundOptions tb;
  tb.config = c;
  std::vector<std::vector<Vector>> groups;
  for (int k = 0; k < 2; ++k) groups.push_back(gaussian_cloud(rng, Vector::Zero(2), Matrix::Identity(2, 2), 8));
  const auto e = make_ensemble(groups);
  for (const auto& r : {traj_bound_isotropic(runs, to), traj_bound_langevin(runs, to, true),
                        traj_bound_anisotropic(runs, to), terminal_bound_general(e, tb),
                        terminal_bound_isotropic(e, ReferenceChoice{}, tb),
                        terminal_bound_gradient_accum(runs, tb)}) {
    EXPECT_EQ(r.value, r.core * 2.5) << r.name;
  }
  const std::vector<LooPair> pairs{{0, Vector{{0.0}}, Vector{{0.3}}}};
  const auto loo = terminal_bound_loo(pairs, tb);
  EXPECT_EQ(loo.value, loo.core * 3.0);
}

TEST(Choices, ParseRoundTrip) {
  for (const char* s : {"zero", "population-gradient", "custom"}) {
    EXPECT_EQ(GTildeChoice::parse(s).name(), s);
  }
  for (const char* s : {"grand-mean", "init", "custom"}) EXPECT_EQ(ReferenceChoice::parse(s).name(), s);
  for (const char* s : {"commuting", "reduced", "general"}) {
    EXPECT_EQ(closed_form_name(parse_closed_form(s)), s);
  }
  EXPECT_THROW(GTildeChoice::parse("mean"), ConfigError);
  EXPECT_THROW(ReferenceChoice::parse("origin"), ConfigError);
  EXPECT_THROW(parse_closed_form("exact"), ConfigError);
}

}  // namespace
}  // namespace gradnoise
