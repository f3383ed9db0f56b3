// Serial reference kernels against the chunked OpenMP kernels.

#include <benchmark/benchmark.h>
#include <omp.h>

#include "gradnoise/kernels.hpp"
#include "gradnoise/problems.hpp"

namespace {

using namespace gradnoise;

DataSpec logistic_spec(int d) {
  LogisticSpec l;
  l.class_mean = Vector::Constant(d, 1.0 / std::sqrt(static_cast<double>(d)));
  l.class_cov = Matrix::Identity(d, d);
  DataSpec spec;
  spec.params = l;
  return spec;
}

DataSpec mlp_spec() {
  MlpSpec m;
  m.input_dim = 16;
  m.hidden = 32;
  m.classes = 4;
  DataSpec spec;
  spec.params = m;
  return spec;
}

struct Fixture {
  DataSpec spec;
  std::unique_ptr<Problem> problem;
  Dataset data;
  Vector w;

  Fixture(DataSpec s, std::size_t n) : spec(std::move(s)) {
    problem = make_problem(spec);
    data = generate_dataset(spec, 11, n);
    w = default_initial_weights(spec, 3, 1.0) + Vector::Constant(problem->dim(), 0.05);
  }
};

Fixture& logistic_fixture() {
  static Fixture f(logistic_spec(32), 1 << 14);
  return f;
}

Fixture& mlp_fixture() {
  static Fixture f(mlp_spec(), 1 << 13);
  return f;
}

void set_threads(benchmark::State& state) { omp_set_num_threads(static_cast<int>(state.range(0))); }

void BM_GradsSerial(benchmark::State& state) {
  auto& f = logistic_fixture();
  for (auto _ : state) {
    benchmark::DoNotOptimize(kernels::serial::per_example_gradients(*f.problem, f.w, f.data.view()));
  }
}

void BM_GradsParallel(benchmark::State& state) {
  set_threads(state);
  auto& f = logistic_fixture();
  for (auto _ : state) {
    benchmark::DoNotOptimize(kernels::per_example_gradients(*f.problem, f.w, f.data.view()));
  }
}

void BM_CovarianceSerial(benchmark::State& state) {
  auto& f = logistic_fixture();
  const Matrix g = kernels::per_example_gradients(*f.problem, f.w, f.data.view());
  const Vector mean = kernels::column_mean(g);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::centered_covariance(g, mean));
}

void BM_CovarianceParallel(benchmark::State& state) {
  set_threads(state);
  auto& f = logistic_fixture();
  const Matrix g = kernels::per_example_gradients(*f.problem, f.w, f.data.view());
  const Vector mean = kernels::column_mean(g);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::centered_covariance(g, mean));
}

void BM_MlpLossSerial(benchmark::State& state) {
  auto& f = mlp_fixture();
  for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::mean_loss(*f.problem, f.w, f.data.view()));
}

void BM_MlpLossParallel(benchmark::State& state) {
  set_threads(state);
  auto& f = mlp_fixture();
  for (auto _ : state) benchmark::DoNotOptimize(kernels::mean_loss(*f.problem, f.w, f.data.view()));
}

void BM_MlpHvpSerial(benchmark::State& state) {
  auto& f = mlp_fixture();
  const Vector v = Vector::Ones(f.problem->dim());
  for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::hvp(*f.problem, f.w, f.data.view(), v));
}

void BM_MlpHvpParallel(benchmark::State& state) {
  set_threads(state);
  auto& f = mlp_fixture();
  const Vector v = Vector::Ones(f.problem->dim());
  for (auto _ : state) benchmark::DoNotOptimize(f.problem->hvp(f.w, f.data.view(), v));
}

const int kMaxThreads = omp_get_num_procs();

}  // namespace

BENCHMARK(BM_GradsSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GradsParallel)->RangeMultiplier(2)->Range(1, kMaxThreads)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CovarianceSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CovarianceParallel)->RangeMultiplier(2)->Range(1, kMaxThreads)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MlpLossSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MlpLossParallel)->RangeMultiplier(2)->Range(1, kMaxThreads)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MlpHvpSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MlpHvpParallel)->RangeMultiplier(2)->Range(1, kMaxThreads)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
