#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "gradnoise/linalg.hpp"
#include "gradnoise/problems.hpp"

namespace gradnoise {

/// Gradient statistics evaluated at w_{t-1}, the state the update of step t starts from.
///
/// Invariants: minibatch_gnc == minibatch_factor(n, b) * single_draw_gnc exactly;
/// grad_norm_sq == full_grad.squaredNorm(). When diagonal_only is set the d x d
/// matrices are absent and only their diagonals are stored.
struct GradSnapshot {
  std::size_t step = 0;
  double weight = 1.0;  // number of consecutive steps this snapshot stands for
  double eta = 0.0;
  std::size_t n = 0;
  std::size_t b = 0;
  Vector weights;
  Vector full_grad;
  double grad_norm_sq = 0.0;
  double trace_c = 0.0;
  bool diagonal_only = false;

  std::optional<SymmetricMatrix> single_draw_gnc;
  std::optional<SymmetricMatrix> minibatch_gnc;
  Vector single_draw_diag;
  Vector minibatch_diag;

  std::optional<Vector> pop_grad;
  std::optional<SymmetricMatrix> pop_gnc;
  std::optional<Vector> pop_gnc_diag;
};

struct LooQuantities {
  std::vector<std::size_t> subset;
  Vector xi;               // G_J - G
  SymmetricMatrix loo_gnc;  // C_J
};

/// Mean of per-example gradients.
Vector full_gradient(const Problem& problem, const Vector& w, const Dataset& data);

/// Sigma = (1/n) sum g_i g_i^T - G G^T, computed as a centered second moment.
SymmetricMatrix empirical_gnc(const Problem& problem, const Vector& w, const Dataset& data);

/// (n - b) / (b (n - 1)); throws ConfigError unless 1 <= b <= n and n >= 2.
double minibatch_factor(std::size_t n, std::size_t b);

SymmetricMatrix minibatch_gnc(const SymmetricMatrix& sigma, std::size_t n, std::size_t b);

/// Plug-in population GNC on an oracle sample.
SymmetricMatrix population_gnc_estimate(const Problem& problem, const Vector& w,
                                        const Dataset& oracle);

/// Plug-in population gradient on an oracle sample.
Vector population_gradient_estimate(const Problem& problem, const Vector& w, const Dataset& oracle);

/// Subsample quantities with C_J = Sigma_J / b (the n >> b covariance
/// convention). Throws ConfigError if |J| <= b, J has repeats or indexes out of range.
LooQuantities loo_quantities(const Problem& problem, const Vector& w, const Dataset& data,
                             std::span<const std::size_t> subset, std::size_t b);

/// Same as above, from a precomputed d x n per-example gradient matrix.
LooQuantities loo_quantities(const Matrix& grads, std::span<const std::size_t> subset,
                             std::size_t b);

struct SnapshotOptions {
  std::size_t matrix_cap = 512;
  bool population = false;
  /// Oracle sample for non-quadratic families; the quadratic family uses analytic moments.
  const Dataset* oracle = nullptr;
};

GradSnapshot take_snapshot(const Problem& problem, const Vector& w, const Dataset& data,
                           std::size_t b, double eta, std::size_t step,
                           const SnapshotOptions& options);

}  // namespace gradnoise
