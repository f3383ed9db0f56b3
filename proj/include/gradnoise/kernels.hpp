#pragma once

// Data-parallel inner loops over examples.
//
// Every reduction splits the index range into fixed chunks of kChunk items,
// reduces each chunk sequentially and then sums the chunk partials in chunk
// order. The chunk layout does not depend on the number of OpenMP threads, so
// results are bit-identical for any thread count. The `serial` namespace holds
// the plain single-loop reference versions used by tests and benchmarks.

#include <cstddef>
#include <span>
#include <vector>

#include "gradnoise/linalg.hpp"
#include "gradnoise/problems.hpp"

namespace gradnoise::kernels {

inline constexpr std::size_t kChunk = 256;

inline std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

/// (1/n) sum_i term_i, where add_term(i, acc) adds term_i into acc.
template <class AddTerm>
Vector chunked_vector_mean(std::size_t n, Eigen::Index dim, AddTerm&& add_term) {
  const std::size_t chunks = chunk_count(n);
  std::vector<Vector> partial(chunks, Vector::Zero(dim));
  const long nchunks = static_cast<long>(chunks);
#pragma omp parallel for schedule(static) if (nchunks > 1)
  for (long c = 0; c < nchunks; ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * kChunk;
    const std::size_t hi = std::min(n, lo + kChunk);
    Vector& acc = partial[static_cast<std::size_t>(c)];
    for (std::size_t i = lo; i < hi; ++i) add_term(i, acc);
  }
  Vector total = Vector::Zero(dim);
  for (const auto& p : partial) total += p;
  return total / static_cast<double>(n);
}

/// (1/n) sum_i term(i).
template <class Term>
double chunked_scalar_mean(std::size_t n, Term&& term) {
  const std::size_t chunks = chunk_count(n);
  std::vector<double> partial(chunks, 0.0);
  const long nchunks = static_cast<long>(chunks);
#pragma omp parallel for schedule(static) if (nchunks > 1)
  for (long c = 0; c < nchunks; ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * kChunk;
    const std::size_t hi = std::min(n, lo + kChunk);
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += term(i);
    partial[static_cast<std::size_t>(c)] = acc;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total / static_cast<double>(n);
}

/// d x n matrix whose column i is grad loss(w, examples[i]).
Matrix per_example_gradients(const Problem& problem, const Vector& w,
                             std::span<const Example> examples);

/// d x |indices| matrix of gradients of examples[indices[k]].
Matrix per_example_gradients(const Problem& problem, const Vector& w,
                             std::span<const Example> examples,
                             std::span<const std::size_t> indices);

/// Mean of the columns.
Vector column_mean(const Matrix& columns);

/// (1/n) sum_i (g_i - mean)(g_i - mean)^T over the columns g_i.
SymmetricMatrix centered_covariance(const Matrix& columns, const Vector& mean);

/// Diagonal of centered_covariance without forming the d x d matrix.
Vector centered_variance(const Matrix& columns, const Vector& mean);

double mean_loss(const Problem& problem, const Vector& w, std::span<const Example> examples);

namespace serial {

Matrix per_example_gradients(const Problem& problem, const Vector& w,
                             std::span<const Example> examples);
Vector column_mean(const Matrix& columns);
SymmetricMatrix centered_covariance(const Matrix& columns, const Vector& mean);
double mean_loss(const Problem& problem, const Vector& w, std::span<const Example> examples);
Vector hvp(const Problem& problem, const Vector& w, std::span<const Example> examples,
           const Vector& v);

}  // namespace serial

}  // namespace gradnoise::kernels
