#pragma once

#include <cstddef>
#include <optional>

#include <Eigen/Dense>

namespace gradnoise {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using ParamVector = Eigen::VectorXd;

/// Dense symmetric matrix. Construction symmetrizes the input as (M + M^T)/2,
/// so entries(i, j) == entries(j, i) holds bit-for-bit afterwards.
class SymmetricMatrix {
 public:
  SymmetricMatrix() = default;
  explicit SymmetricMatrix(const Matrix& m);

  static SymmetricMatrix zero(Eigen::Index d);
  static SymmetricMatrix identity(Eigen::Index d);
  static SymmetricMatrix diagonal(const Vector& diag);

  Eigen::Index dim() const { return m_.rows(); }
  const Matrix& matrix() const { return m_; }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }
  double trace() const { return m_.trace(); }
  Vector diag() const { return m_.diagonal(); }
  bool is_zero() const { return (m_.array() == 0.0).all(); }
  bool all_finite() const { return m_.allFinite(); }

  SymmetricMatrix scaled(double s) const;

  friend bool operator==(const SymmetricMatrix& a, const SymmetricMatrix& b) {
    return a.m_.rows() == b.m_.rows() && a.m_.cols() == b.m_.cols() && a.m_ == b.m_;
  }

 private:
  Matrix m_;
};

/// Eigenvalue floor used when a symmetric estimate has to be treated as SPD.
/// floor = eps_rel * reference_scale, where reference_scale defaults to tr(m)/d.
struct FloorPolicy {
  double eps_rel = 1e-8;
};

/// Symmetric positive-definite matrix with its eigendecomposition cached.
class SpdMatrix {
 public:
  /// Replace eigenvalues below eps_rel * scale by that floor. `scale` defaults
  /// to tr(m)/d; a non-positive scale falls back to 1.
  static SpdMatrix regularize(const SymmetricMatrix& m, FloorPolicy policy = {},
                              std::optional<double> scale = std::nullopt);

  /// No flooring. Throws DomainError if any eigenvalue is <= 0.
  static SpdMatrix strict(const SymmetricMatrix& m);

  const SymmetricMatrix& base() const { return base_; }
  const Matrix& matrix() const { return base_.matrix(); }
  Eigen::Index dim() const { return base_.dim(); }
  double floor() const { return floor_; }
  /// Number of eigenvalues that were raised to the floor.
  int floored_count() const { return floored_count_; }
  bool floor_active() const { return floored_count_ > 0; }

  const Vector& eigenvalues() const { return eigenvalues_; }
  const Matrix& eigenvectors() const { return eigenvectors_; }

  Matrix inverse() const;
  Vector solve(const Vector& rhs) const;

 private:
  SpdMatrix() = default;

  SymmetricMatrix base_;
  Vector eigenvalues_;
  Matrix eigenvectors_;
  double floor_ = 0.0;
  int floored_count_ = 0;
};

struct GaussianDist {
  GaussianDist(Vector mean, SpdMatrix cov);

  Vector mean;
  SpdMatrix cov;
};

/// Symmetric square root R with R*R == m, via eigendecomposition.
SymmetricMatrix spd_sqrt(const SpdMatrix& m);

/// Sum of log-eigenvalues.
double log_det(const SpdMatrix& m);

/// Sum of log diagonal entries (the diagonal trace-log notation).
double trace_log_diag(const SymmetricMatrix& m);

/// KL(p || q) for multivariate Gaussians.
double gaussian_kl(const GaussianDist& p, const GaussianDist& q);

/// (x - y)^T s^{-1} (x - y).
double mahalanobis_sq(const Vector& x, const Vector& y, const SpdMatrix& s);

enum class StationaryMode {
  kGeneral,             // L H + H L - eta H L H = eta C, solved in the eigenbasis of H
  kCommuting,           // eta [H (2I - eta H)]^{-1} C
  kHessianMatchesGnc,   // (2/eta I - H)^{-1} / b
  kSmallLearningRate,   // eta / (2b) I
};

/// Stationary weight covariance of the linearized SGD chain around a minimum.
/// Throws EdgeOfStabilityError if lambda_max(h) >= 2/eta.
SymmetricMatrix solve_stationary_covariance(const SymmetricMatrix& h, const SymmetricMatrix& c,
                                            double eta, StationaryMode mode, std::size_t b = 1);

/// Frobenius norm of  L H + H L - eta H L H - eta C.
double stationary_residual(const SymmetricMatrix& lambda, const SymmetricMatrix& h,
                           const SymmetricMatrix& c, double eta);

/// Symmetric eigendecomposition; throws NumericalError on failure.
Eigen::SelfAdjointEigenSolver<Matrix> eigen_decompose(const SymmetricMatrix& m);

/// Biased (1/N) or unbiased (1/(N-1)) sample covariance of the columns of `samples`
/// around `center`.
SymmetricMatrix sample_covariance(const Matrix& samples, const Vector& center, bool unbiased);

}  // namespace gradnoise
