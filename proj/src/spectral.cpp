#include "gradnoise/spectral.hpp"

#include <cmath>
#include <vector>

#include "gradnoise/errors.hpp"
#include "gradnoise/kernels.hpp"
#include "gradnoise/rng.hpp"

namespace gradnoise {

PowerIterationResult power_iteration(const LinearOperator& op, Eigen::Index dim, double tol,
                                     int max_iter, std::uint64_t seed) {
  if (dim < 1) throw InvalidInputError("power_iteration on an empty operator");
  if (max_iter < 1) throw ConfigError("max_iter must be >= 1");
  Rng rng = make_rng(derive_seed(seed, stream::kProbe));
  Vector v = standard_normal(rng, dim);
  v.normalize();

  PowerIterationResult out;
  for (int it = 1; it <= max_iter; ++it) {
    const Vector av = op(v);
    const double lambda = v.dot(av);
    const double residual = (av - lambda * v).norm();
    out.eigenvalue = lambda;
    out.eigenvector = v;
    out.residual = residual;
    out.iterations = it;
    if (!std::isfinite(lambda)) throw NumericalError("power iteration produced a non-finite value");
    if (residual <= tol * std::abs(lambda)) {
      out.converged = true;
      return out;
    }
    const double norm = av.norm();
    if (norm == 0.0) {
      // v lies in the null space: eigenvalue 0 with zero residual.
      out.converged = true;
      return out;
    }
    v = av / norm;
  }
  return out;
}

PowerIterationResult top_eigenvalue(const Problem& problem, const Vector& w, const Dataset& data,
                                    double tol, int max_iter, std::uint64_t seed) {
  const auto examples = data.view();
  return power_iteration([&](const Vector& v) { return problem.hvp(w, examples, v); },
                         problem.dim(), tol, max_iter, seed);
}

double hutchinson_trace(const LinearOperator& op, Eigen::Index dim, int n_probes,
                        std::uint64_t seed) {
  if (n_probes < 1) throw ConfigError("n_probes must be >= 1");
  const std::uint64_t base = derive_seed(seed, stream::kProbe);
  return kernels::chunked_scalar_mean(static_cast<std::size_t>(n_probes), [&](std::size_t k) {
    Rng rng = make_rng(derive_seed(base, k));
    std::bernoulli_distribution coin(0.5);
    Vector v(dim);
    for (Eigen::Index i = 0; i < dim; ++i) v[i] = coin(rng) ? 1.0 : -1.0;
    return v.dot(op(v));
  });
}

double hessian_trace(const Problem& problem, const Vector& w, const Dataset& data, int n_probes,
                     std::uint64_t seed) {
  const auto examples = data.view();
  return hutchinson_trace([&](const Vector& v) { return problem.hvp(w, examples, v); },
                          problem.dim(), n_probes, seed);
}

double stability_gap(double lambda_1, double eta) {
  if (!(eta > 0.0)) throw ConfigError("learning rate must be positive");
  return 2.0 / eta - lambda_1;
}

double stability_gap_half(double lambda_1, double eta) {
  if (!(eta > 0.0)) throw ConfigError("learning rate must be positive");
  return eta / 2.0 - lambda_1;
}

SpectralReport spectral_report(const Problem& problem, const Vector& w, const Dataset& data,
                               double eta, int n_probes, std::uint64_t seed, double tol,
                               int max_iter) {
  const auto top = top_eigenvalue(problem, w, data, tol, max_iter, seed);
  SpectralReport r;
  r.lambda_1 = top.eigenvalue;
  r.iterations_used = top.iterations;
  r.converged = top.converged;
  r.trace_estimate = hessian_trace(problem, w, data, n_probes, seed);
  r.gap = stability_gap(r.lambda_1, eta);
  r.gap_half = stability_gap_half(r.lambda_1, eta);
  r.edge_of_stability = r.gap <= 0.0;
  return r;
}

SymmetricMatrix dense_hessian(const Problem& problem, const Vector& w,
                              std::span<const Example> examples) {
  if (problem.has_exact_hessian()) return problem.exact_hessian(w, examples);
  const Eigen::Index d = problem.dim();
  Matrix h(d, d);
  for (Eigen::Index k = 0; k < d; ++k) h.col(k) = problem.hvp(w, examples, Vector::Unit(d, k));
  return SymmetricMatrix(h);
}

}  // namespace gradnoise
