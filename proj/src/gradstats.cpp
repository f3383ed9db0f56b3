#include "gradnoise/gradstats.hpp"

#include <algorithm>
#include <string>

#include "gradnoise/errors.hpp"
#include "gradnoise/kernels.hpp"

namespace gradnoise {

Vector full_gradient(const Problem& problem, const Vector& w, const Dataset& data) {
  if (data.size() == 0) throw InvalidInputError("full_gradient over an empty dataset");
  return kernels::column_mean(kernels::per_example_gradients(problem, w, data.view()));
}

SymmetricMatrix empirical_gnc(const Problem& problem, const Vector& w, const Dataset& data) {
  if (data.size() == 0) throw InvalidInputError("empirical_gnc over an empty dataset");
  const Matrix grads = kernels::per_example_gradients(problem, w, data.view());
  return kernels::centered_covariance(grads, kernels::column_mean(grads));
}

double minibatch_factor(std::size_t n, std::size_t b) {
  if (b < 1) throw ConfigError("batch size b must be >= 1");
  if (b > n) {
    throw ConfigError("batch size b = " + std::to_string(b) + " exceeds n = " + std::to_string(n));
  }
  if (n < 2) throw ConfigError("mini-batch GNC needs n >= 2");
  return static_cast<double>(n - b) / (static_cast<double>(b) * static_cast<double>(n - 1));
}

SymmetricMatrix minibatch_gnc(const SymmetricMatrix& sigma, std::size_t n, std::size_t b) {
  return sigma.scaled(minibatch_factor(n, b));
}

SymmetricMatrix population_gnc_estimate(const Problem& problem, const Vector& w,
                                        const Dataset& oracle) {
  return empirical_gnc(problem, w, oracle);
}

Vector population_gradient_estimate(const Problem& problem, const Vector& w, const Dataset& oracle) {
  return full_gradient(problem, w, oracle);
}

LooQuantities loo_quantities(const Matrix& grads, std::span<const std::size_t> subset,
                             std::size_t b) {
  const auto n = static_cast<std::size_t>(grads.cols());
  if (b < 1) throw ConfigError("batch size b must be >= 1");
  if (subset.size() <= b) {
    throw ConfigError("subset size m = " + std::to_string(subset.size()) +
                      " must exceed batch size b = " + std::to_string(b));
  }
  std::vector<std::size_t> sorted(subset.begin(), subset.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("subset has repeated indices");
  }
  if (sorted.back() >= n) throw ConfigError("subset index out of range");

  Matrix sub(grads.rows(), static_cast<Eigen::Index>(subset.size()));
  for (std::size_t k = 0; k < subset.size(); ++k) {
    sub.col(static_cast<Eigen::Index>(k)) = grads.col(static_cast<Eigen::Index>(subset[k]));
  }
  const Vector g_full = kernels::column_mean(grads);
  const Vector g_sub = kernels::column_mean(sub);
  LooQuantities out;
  out.subset.assign(subset.begin(), subset.end());
  out.xi = g_sub - g_full;
  out.loo_gnc = kernels::centered_covariance(sub, g_sub).scaled(1.0 / static_cast<double>(b));
  return out;
}

LooQuantities loo_quantities(const Problem& problem, const Vector& w, const Dataset& data,
                             std::span<const std::size_t> subset, std::size_t b) {
  return loo_quantities(kernels::per_example_gradients(problem, w, data.view()), subset, b);
}

GradSnapshot take_snapshot(const Problem& problem, const Vector& w, const Dataset& data,
                           std::size_t b, double eta, std::size_t step,
                           const SnapshotOptions& options) {
  const std::size_t n = data.size();
  const double factor = minibatch_factor(n, b);
  const Matrix grads = kernels::per_example_gradients(problem, w, data.view());

  GradSnapshot s;
  s.step = step;
  s.eta = eta;
  s.n = n;
  s.b = b;
  s.weights = w;
  s.full_grad = kernels::column_mean(grads);
  s.grad_norm_sq = s.full_grad.squaredNorm();
  s.diagonal_only = static_cast<std::size_t>(problem.dim()) > options.matrix_cap;

  if (s.diagonal_only) {
    s.single_draw_diag = kernels::centered_variance(grads, s.full_grad);
    s.minibatch_diag = factor * s.single_draw_diag;
    s.trace_c = s.minibatch_diag.sum();
  } else {
    s.single_draw_gnc = kernels::centered_covariance(grads, s.full_grad);
    s.minibatch_gnc = s.single_draw_gnc->scaled(factor);
    s.single_draw_diag = s.single_draw_gnc->diag();
    s.minibatch_diag = s.minibatch_gnc->diag();
    s.trace_c = s.minibatch_gnc->trace();
  }

  if (options.population) {
    if (data.spec.family() == ProblemFamily::kQuadraticGaussian) {
      auto moments = quadratic_population_moments(data.spec, w);
      s.pop_grad = std::move(moments.pop_grad);
      s.pop_gnc_diag = moments.pop_gnc.diag();
      if (!s.diagonal_only) s.pop_gnc = std::move(moments.pop_gnc);
    } else {
      if (options.oracle == nullptr) {
        throw CapabilityError("population statistics need an oracle sample for this problem family");
      }
      const Matrix og = kernels::per_example_gradients(problem, w, options.oracle->view());
      s.pop_grad = kernels::column_mean(og);
      if (s.diagonal_only) {
        s.pop_gnc_diag = kernels::centered_variance(og, *s.pop_grad);
      } else {
        s.pop_gnc = kernels::centered_covariance(og, *s.pop_grad);
        s.pop_gnc_diag = s.pop_gnc->diag();
      }
    }
  }
  return s;
}

}  // namespace gradnoise
