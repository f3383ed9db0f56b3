#pragma once

#include <cstdint>
#include <functional>

#include "gradnoise/linalg.hpp"
#include "gradnoise/problems.hpp"

namespace gradnoise {

using LinearOperator = std::function<Vector(const Vector&)>;

struct PowerIterationResult {
  double eigenvalue = 0.0;  // dominant-magnitude eigenvalue, sign kept
  Vector eigenvector;
  double residual = 0.0;    // ||A v - lambda v||
  int iterations = 0;
  bool converged = false;
};

/// Power iteration from a seeded Gaussian start. Converged means
/// ||A v - lambda v|| <= tol * |lambda| for the returned unit v.
PowerIterationResult power_iteration(const LinearOperator& op, Eigen::Index dim, double tol = 1e-6,
                                     int max_iter = 500, std::uint64_t seed = 0);

/// Power iteration on the training-set Hessian via HVPs.
PowerIterationResult top_eigenvalue(const Problem& problem, const Vector& w, const Dataset& data,
                                    double tol = 1e-6, int max_iter = 500, std::uint64_t seed = 0);

/// Hutchinson estimate mean_k v_k^T A v_k with Rademacher probes. Probe k uses
/// its own derived seed, so the estimate is independent of the thread count.
double hutchinson_trace(const LinearOperator& op, Eigen::Index dim, int n_probes,
                        std::uint64_t seed);

double hessian_trace(const Problem& problem, const Vector& w, const Dataset& data,
                     int n_probes = 256, std::uint64_t seed = 0);

/// 2/eta - lambda_1. Non-positive values mark the edge-of-stability regime.
double stability_gap(double lambda_1, double eta);

/// eta/2 - lambda_1, the figure-caption convention, logged alongside.
double stability_gap_half(double lambda_1, double eta);

struct SpectralReport {
  double lambda_1 = 0.0;
  double trace_estimate = 0.0;
  int iterations_used = 0;
  bool converged = false;
  double gap = 0.0;
  double gap_half = 0.0;
  bool edge_of_stability = false;  // gap <= 0
};

SpectralReport spectral_report(const Problem& problem, const Vector& w, const Dataset& data,
                               double eta, int n_probes = 256, std::uint64_t seed = 0,
                               double tol = 1e-6, int max_iter = 500);

/// Dense Hessian over `examples`: the exact one when available, else assembled from HVPs on
/// the unit vectors and symmetrized.
SymmetricMatrix dense_hessian(const Problem& problem, const Vector& w,
                              std::span<const Example> examples);

}  // namespace gradnoise
