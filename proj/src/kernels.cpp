#include "gradnoise/kernels.hpp"

#include <algorithm>

namespace gradnoise::kernels {

Matrix per_example_gradients(const Problem& problem, const Vector& w,
                             std::span<const Example> examples) {
  const long n = static_cast<long>(examples.size());
  Matrix out(problem.dim(), n);
#pragma omp parallel for schedule(static) if (n > static_cast<long>(kChunk))
  for (long i = 0; i < n; ++i) problem.grad_into(w, examples[static_cast<std::size_t>(i)], out.col(i));
  return out;
}

Matrix per_example_gradients(const Problem& problem, const Vector& w,
                             std::span<const Example> examples,
                             std::span<const std::size_t> indices) {
  const long n = static_cast<long>(indices.size());
  Matrix out(problem.dim(), n);
#pragma omp parallel for schedule(static) if (n > static_cast<long>(kChunk))
  for (long k = 0; k < n; ++k) {
    problem.grad_into(w, examples[indices[static_cast<std::size_t>(k)]], out.col(k));
  }
  return out;
}

Vector column_mean(const Matrix& columns) {
  const std::size_t n = static_cast<std::size_t>(columns.cols());
  return chunked_vector_mean(n, columns.rows(), [&](std::size_t i, Vector& acc) {
    acc += columns.col(static_cast<Eigen::Index>(i));
  });
}

SymmetricMatrix centered_covariance(const Matrix& columns, const Vector& mean) {
  const Eigen::Index d = columns.rows();
  const std::size_t n = static_cast<std::size_t>(columns.cols());
  const std::size_t chunks = chunk_count(n);
  std::vector<Matrix> partial(chunks, Matrix::Zero(d, d));
  const long nchunks = static_cast<long>(chunks);
#pragma omp parallel for schedule(static) if (nchunks > 1)
  for (long c = 0; c < nchunks; ++c) {
    const Eigen::Index lo = static_cast<Eigen::Index>(c) * static_cast<Eigen::Index>(kChunk);
    const Eigen::Index len =
        std::min<Eigen::Index>(static_cast<Eigen::Index>(kChunk), static_cast<Eigen::Index>(n) - lo);
    const Matrix centered = columns.middleCols(lo, len).colwise() - mean;
    partial[static_cast<std::size_t>(c)].noalias() = centered * centered.transpose();
  }
  Matrix total = Matrix::Zero(d, d);
  for (const auto& p : partial) total += p;
  return SymmetricMatrix(total / static_cast<double>(n));
}

Vector centered_variance(const Matrix& columns, const Vector& mean) {
  const std::size_t n = static_cast<std::size_t>(columns.cols());
  return chunked_vector_mean(n, columns.rows(), [&](std::size_t i, Vector& acc) {
    acc.array() += (columns.col(static_cast<Eigen::Index>(i)) - mean).array().square();
  });
}

double mean_loss(const Problem& problem, const Vector& w, std::span<const Example> examples) {
  return chunked_scalar_mean(examples.size(),
                             [&](std::size_t i) { return problem.loss(w, examples[i]); });
}

namespace serial {

Matrix per_example_gradients(const Problem& problem, const Vector& w,
                             std::span<const Example> examples) {
  Matrix out(problem.dim(), static_cast<Eigen::Index>(examples.size()));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    problem.grad_into(w, examples[i], out.col(static_cast<Eigen::Index>(i)));
  }
  return out;
}

Vector column_mean(const Matrix& columns) {
  Vector acc = Vector::Zero(columns.rows());
  for (Eigen::Index i = 0; i < columns.cols(); ++i) acc += columns.col(i);
  return acc / static_cast<double>(columns.cols());
}

SymmetricMatrix centered_covariance(const Matrix& columns, const Vector& mean) {
  const Eigen::Index d = columns.rows();
  Matrix acc = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < columns.cols(); ++i) {
    const Vector c = columns.col(i) - mean;
    acc += c * c.transpose();
  }
  return SymmetricMatrix(acc / static_cast<double>(columns.cols()));
}

double mean_loss(const Problem& problem, const Vector& w, std::span<const Example> examples) {
  double acc = 0.0;
  for (const auto& z : examples) acc += problem.loss(w, z);
  return acc / static_cast<double>(examples.size());
}

Vector hvp(const Problem& problem, const Vector& w, std::span<const Example> examples,
           const Vector& v) {
  Vector acc = Vector::Zero(problem.dim());
  for (std::size_t i = 0; i < examples.size(); ++i) acc += problem.hvp(w, examples.subspan(i, 1), v);
  return acc / static_cast<double>(examples.size());
}

}  // namespace serial

}  // namespace gradnoise::kernels
