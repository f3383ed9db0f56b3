#include <gtest/gtest.h>

#include <omp.h>

#include "gradnoise/errors.hpp"
#include "gradnoise/gradstats.hpp"
#include "gradnoise/kernels.hpp"
#include "test_support.hpp"

namespace gradnoise {
namespace {

DataSpec iso(Eigen::Index d) {
  return testing::quadratic_spec(Matrix::Identity(d, d), Vector::Zero(d), Matrix::Identity(d, d));
}

DataSpec aniso3() {
  Matrix a(3, 3);
  a << 1.5, 0.4, 0.0, 0.4, 1.0, -0.3, 0.0, -0.3, 0.6;
  return testing::quadratic_spec(a, Vector{{0.2, 0.0, -0.1}}, Matrix(Vector{{1.0, 0.5, 2.0}}.asDiagonal()));
}

// Covariance of the mini-batch mean gradient over every size-b batch.
Matrix enumerated_batch_covariance(const Matrix& grads, std::size_t b, Vector* mean_out = nullptr) {
  const auto n = static_cast<std::size_t>(grads.cols());
  const auto batches = testing::combinations(n, b);
  const Vector g = grads.rowwise().mean();
  Matrix cov = Matrix::Zero(grads.rows(), grads.rows());
  Vector mean = Vector::Zero(grads.rows());
  for (const auto& batch : batches) {
    Vector gb = Vector::Zero(grads.rows());
    for (auto i : batch) gb += grads.col(static_cast<Eigen::Index>(i));
    gb /= static_cast<double>(b);
    mean += gb;
    cov += (gb - g) * (gb - g).transpose();
  }
  if (mean_out != nullptr) *mean_out = mean / static_cast<double>(batches.size());
  return cov / static_cast<double>(batches.size());
}

TEST(FullGradient, Examples) {
  const DataSpec spec = iso(2);
  const auto p = make_problem(spec);
  const Dataset same = testing::points_dataset(spec, {Vector{{1.0, 2.0}}, Vector{{1.0, 2.0}}});
  const Vector w{{0.5, -0.5}};
  EXPECT_EQ(full_gradient(*p, w, same), p->grad(w, same.examples[0]));
  const Dataset d = generate_dataset(spec, 3, 37);
  Vector zbar = Vector::Zero(2);
  for (const auto& e : d.examples) zbar += e.features;
  zbar /= 37.0;
  EXPECT_LT((full_gradient(*p, w, d) - (w - zbar)).norm(), 1e-12);
  const Dataset one = generate_dataset(spec, 3, 1);
  EXPECT_EQ(full_gradient(*p, w, one), p->grad(w, one.examples[0]));
}

TEST(EmpiricalGnc, Examples) {
  const DataSpec spec = iso(2);
  const auto p = make_problem(spec);
  const Dataset same = testing::points_dataset(spec, {Vector{{1.0, 2.0}}, Vector{{1.0, 2.0}}});
  EXPECT_TRUE(empirical_gnc(*p, Vector::Zero(2), same).is_zero());
  const Dataset two = testing::points_dataset(spec, {Vector{{-1.0, 0.0}}, Vector{{1.0, 0.0}}});
  const auto s = empirical_gnc(*p, Vector::Zero(2), two);
  EXPECT_NEAR(s(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(s(1, 1), 0.0, 1e-15);
  EXPECT_NEAR(s(0, 1), 0.0, 1e-15);
}

TEST(EmpiricalGnc, LargeSampleMatchesScaledPopulation) {
  const DataSpec spec = aniso3();
  const auto p = make_problem(spec);
  const Dataset d = generate_dataset(spec, 5, 400000);
  const Vector w = Vector::Zero(3);
  const auto sigma = empirical_gnc(*p, w, d);
  const auto pop = quadratic_population_moments(spec, w).pop_gnc;
  const double n = 400000.0;
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(sigma(i, i), (n - 1) / n * pop(i, i), 0.02 * pop(i, i));
  }
}

TEST(EmpiricalGnc, UnbiasedOverResampledDatasets) {
  const DataSpec spec = aniso3();
  const auto p = make_problem(spec);
  const Vector w{{0.3, -0.2, 0.1}};
  const std::size_t n = 20, reps = 10000;
  Matrix sum = Matrix::Zero(3, 3), sumsq = Matrix::Zero(3, 3);
  for (std::size_t r = 0; r < reps; ++r) {
    const Matrix s = empirical_gnc(*p, w, generate_dataset(spec, 100 + r, n)).matrix();
    sum += s;
    sumsq += s.cwiseProduct(s);
  }
  const Matrix mean = sum / static_cast<double>(reps);
  const Matrix se = ((sumsq / static_cast<double>(reps) - mean.cwiseProduct(mean)) /
                     static_cast<double>(reps))
                        .cwiseSqrt();
  const Matrix target = (static_cast<double>(n) - 1.0) / static_cast<double>(n) *
                        quadratic_population_moments(spec, w).pop_gnc.matrix();
  for (Eigen::Index i = 0; i < 3; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) {
      EXPECT_LE(std::abs(mean(i, j) - target(i, j)), 3.0 * se(i, j) + 1e-12) << i << "," << j;
    }
  }
}

TEST(MinibatchGnc, FactorBoundaries) {
  const SymmetricMatrix sigma = SymmetricMatrix::diagonal(Vector{{1.0, 2.0}});
  EXPECT_EQ(minibatch_gnc(sigma, 10, 1), sigma);
  EXPECT_TRUE(minibatch_gnc(sigma, 10, 10).is_zero());
  EXPECT_DOUBLE_EQ(minibatch_factor(10, 2), 4.0 / 9.0);
  EXPECT_THROW(minibatch_factor(10, 11), ConfigError);
  EXPECT_THROW(minibatch_factor(10, 0), ConfigError);
  EXPECT_THROW(minibatch_factor(1, 1), ConfigError);
}

TEST(MinibatchGnc, MatchesExhaustiveEnumeration) {
  const DataSpec spec = aniso3();
  const auto p = make_problem(spec);
  for (std::size_t n : {4u, 8u, 10u}) {
    const Dataset d = generate_dataset(spec, 11, n);
    const Vector w{{0.1, 0.4, -0.3}};
    const Matrix grads = kernels::per_example_gradients(*p, w, d.view());
    const auto sigma = empirical_gnc(*p, w, d);
    for (std::size_t b = 1; b <= n; ++b) {
      Vector batch_mean;
      const Matrix enumerated = enumerated_batch_covariance(grads, b, &batch_mean);
      const Matrix c = minibatch_gnc(sigma, n, b).matrix();
      EXPECT_LE((enumerated - c).cwiseAbs().maxCoeff(), 1e-12) << "n=" << n << " b=" << b;
      EXPECT_LE((batch_mean - grads.rowwise().mean()).cwiseAbs().maxCoeff(), 1e-14);
    }
  }
}

TEST(PopulationGnc, Examples) {
  const DataSpec spec = iso(2);
  const auto p = make_problem(spec);
  const Dataset big = generate_dataset(spec, 4, 1000000);
  const auto est = population_gnc_estimate(*p, Vector::Zero(2), big);
  EXPECT_NEAR(est(0, 0), 1.0, 0.01);
  EXPECT_NEAR(est(1, 1), 1.0, 0.01);
  EXPECT_NEAR(est(0, 1), 0.0, 0.01);
  const Dataset same = testing::points_dataset(spec, {Vector{{1.0, 1.0}}, Vector{{1.0, 1.0}}});
  EXPECT_TRUE(population_gnc_estimate(*p, Vector::Zero(2), same).is_zero());
  const Dataset single = testing::points_dataset(spec, {Vector{{3.0, -1.0}}});
  EXPECT_TRUE(population_gnc_estimate(*p, Vector::Zero(2), single).is_zero());
}

TEST(LooQuantities, EqualGradientsGiveZero) {
  const DataSpec spec = iso(2);
  const auto p = make_problem(spec);
  const Dataset same = testing::points_dataset(spec, std::vector<Vector>(4, Vector{{1.0, 1.0}}));
  const std::vector<std::size_t> j{0, 1, 3};
  const auto q = loo_quantities(*p, Vector::Zero(2), same, j, 1);
  EXPECT_TRUE(q.xi.isZero(0.0));
  EXPECT_TRUE(q.loo_gnc.is_zero());
}

TEST(LooQuantities, Preconditions) {
  const DataSpec spec = iso(2);
  const auto p = make_problem(spec);
  const Dataset d = generate_dataset(spec, 1, 5);
  const std::vector<std::size_t> small{0, 1};
  EXPECT_THROW(loo_quantities(*p, Vector::Zero(2), d, small, 2), ConfigError);
  const std::vector<std::size_t> repeated{0, 1, 1};
  EXPECT_THROW(loo_quantities(*p, Vector::Zero(2), d, repeated, 1), ConfigError);
  const std::vector<std::size_t> out_of_range{0, 1, 7};
  EXPECT_THROW(loo_quantities(*p, Vector::Zero(2), d, out_of_range, 1), ConfigError);
}

TEST(LooQuantities, DisjointSetIdentitiesUnderEnumeration) {
  const DataSpec spec = aniso3();
  const auto p = make_problem(spec);
  for (std::size_t n : {4u, 6u, 8u}) {
    for (std::size_t b : {1u, 2u}) {
      const Dataset d = generate_dataset(spec, 40 + n, n);
      const Vector w{{0.3, 0.1, -0.2}};
      const double nm1 = static_cast<double>(n - 1);
      const Matrix c = empirical_gnc(*p, w, d).matrix() / static_cast<double>(b);
      Matrix xi2 = Matrix::Zero(3, 3), cj = Matrix::Zero(3, 3);
      for (const auto& j : testing::combinations(n, n - 1)) {
        const auto q = loo_quantities(*p, w, d, j, b);
        xi2 += q.xi * q.xi.transpose();
        cj += q.loo_gnc.matrix();
      }
      xi2 /= static_cast<double>(n);
      cj /= static_cast<double>(n);
      EXPECT_LE((xi2 - static_cast<double>(b) / (nm1 * nm1) * c).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LE((cj - static_cast<double>(n * (n - 2)) / (nm1 * nm1) * c).cwiseAbs().maxCoeff(),
                1e-10);
    }
  }
}

TEST(Snapshot, Invariants) {
  const DataSpec spec = aniso3();
  const auto p = make_problem(spec);
  const Dataset d = generate_dataset(spec, 2, 30);
  const Vector w{{0.5, 0.5, 0.5}};
  SnapshotOptions opts;
  opts.population = true;
  const auto s = take_snapshot(*p, w, d, 5, 0.1, 7, opts);
  EXPECT_EQ(s.step, 7u);
  EXPECT_EQ(s.weights, w);
  EXPECT_EQ(*s.minibatch_gnc, s.single_draw_gnc->scaled(minibatch_factor(30, 5)));
  EXPECT_EQ(s.grad_norm_sq, s.full_grad.squaredNorm());
  EXPECT_DOUBLE_EQ(s.trace_c, s.minibatch_gnc->trace());
  EXPECT_GE(eigen_decompose(*s.single_draw_gnc).eigenvalues().minCoeff(), -1e-10);
  ASSERT_TRUE(s.pop_gnc.has_value());
  EXPECT_EQ(s.pop_gnc->matrix(), quadratic_population_moments(spec, w).pop_gnc.matrix());
  EXPECT_EQ(*s.pop_grad, quadratic_population_moments(spec, w).pop_grad);
}

TEST(Snapshot, DiagonalAboveCap) {
  const DataSpec spec = aniso3();
  const auto p = make_problem(spec);
  const Dataset d = generate_dataset(spec, 2, 30);
  SnapshotOptions opts;
  opts.matrix_cap = 2;
  opts.population = true;
  const auto s = take_snapshot(*p, Vector::Zero(3), d, 5, 0.1, 1, opts);
  EXPECT_TRUE(s.diagonal_only);
  EXPECT_FALSE(s.minibatch_gnc.has_value());
  const auto full = minibatch_gnc(empirical_gnc(*p, Vector::Zero(3), d), 30, 5);
  EXPECT_LT((s.minibatch_diag - full.diag()).norm(), 1e-14);
  EXPECT_NEAR(s.trace_c, full.trace(), 1e-14);
  ASSERT_TRUE(s.pop_gnc_diag.has_value());
}

TEST(Snapshot, NonQuadraticNeedsOracle) {
  const DataSpec spec = testing::logistic_spec(3, 1.0);
  const auto p = make_problem(spec);
  const Dataset d = generate_dataset(spec, 2, 30);
  SnapshotOptions opts;
  opts.population = true;
  EXPECT_THROW(take_snapshot(*p, Vector::Zero(3), d, 5, 0.1, 1, opts), CapabilityError);
}

TEST(Kernels, SerialAndParallelAgree) {
  for (const auto& spec : {testing::logistic_spec(6, 1.0, 0.01), testing::mlp_spec(4, 6, 3)}) {
    const auto p = make_problem(spec);
    const Dataset d = generate_dataset(spec, 8, 1500);
    Rng rng(1);
    const Vector w = testing::random_vector(rng, p->dim(), 0.5);
    const Matrix g = kernels::per_example_gradients(*p, w, d.view());
    EXPECT_EQ(g, kernels::serial::per_example_gradients(*p, w, d.view()));
    const Vector m = kernels::column_mean(g);
    EXPECT_LT((m - kernels::serial::column_mean(g)).norm(), 1e-12 * std::max(1.0, m.norm()));
    EXPECT_LT((kernels::centered_covariance(g, m).matrix() -
               kernels::serial::centered_covariance(g, m).matrix())
                  .norm(),
              1e-12);
    EXPECT_NEAR(kernels::mean_loss(*p, w, d.view()), kernels::serial::mean_loss(*p, w, d.view()),
                1e-12);
    const Vector v = testing::random_vector(rng, p->dim());
    EXPECT_LT((p->hvp(w, d.view(), v) - kernels::serial::hvp(*p, w, d.view(), v)).norm(), 1e-12);
    EXPECT_LT((kernels::centered_variance(g, m) - kernels::centered_covariance(g, m).diag()).norm(),
              1e-12);
  }
}

TEST(Kernels, BitIdenticalAcrossThreadCounts) {
  const DataSpec spec = testing::mlp_spec(4, 6, 3);
  const auto p = make_problem(spec);
  const Dataset d = generate_dataset(spec, 8, 2000);
  Rng rng(2);
  const Vector w = testing::random_vector(rng, p->dim(), 0.5);
  const Vector v = testing::random_vector(rng, p->dim());
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const Matrix g1 = kernels::per_example_gradients(*p, w, d.view());
  const Vector m1 = kernels::column_mean(g1);
  const Matrix c1 = kernels::centered_covariance(g1, m1).matrix();
  const double l1 = kernels::mean_loss(*p, w, d.view());
  const Vector h1 = p->hvp(w, d.view(), v);
  omp_set_num_threads(4);
  const Matrix g4 = kernels::per_example_gradients(*p, w, d.view());
  EXPECT_EQ(g1, g4);
  EXPECT_EQ(m1, kernels::column_mean(g4));
  EXPECT_EQ(c1, kernels::centered_covariance(g4, m1).matrix());
  EXPECT_EQ(l1, kernels::mean_loss(*p, w, d.view()));
  EXPECT_EQ(h1, p->hvp(w, d.view(), v));
  omp_set_num_threads(saved);
}

}  // namespace
}  // namespace gradnoise
