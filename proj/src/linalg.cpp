#include "gradnoise/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "gradnoise/errors.hpp"

namespace gradnoise {

SymmetricMatrix::SymmetricMatrix(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw InvalidInputError("symmetric matrix must be square, got " + std::to_string(m.rows()) +
                            "x" + std::to_string(m.cols()));
  }
  m_ = 0.5 * (m + m.transpose());
}

SymmetricMatrix SymmetricMatrix::zero(Eigen::Index d) {
  return SymmetricMatrix(Matrix::Zero(d, d));
}

SymmetricMatrix SymmetricMatrix::identity(Eigen::Index d) {
  return SymmetricMatrix(Matrix::Identity(d, d));
}

SymmetricMatrix SymmetricMatrix::diagonal(const Vector& diag) {
  return SymmetricMatrix(Matrix(diag.asDiagonal()));
}

SymmetricMatrix SymmetricMatrix::scaled(double s) const { return SymmetricMatrix(s * m_); }

Eigen::SelfAdjointEigenSolver<Matrix> eigen_decompose(const SymmetricMatrix& m) {
  if (!m.all_finite()) throw InvalidInputError("matrix has non-finite entries");
  Eigen::SelfAdjointEigenSolver<Matrix> es(m.matrix());
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolver did not converge");
  return es;
}

SpdMatrix SpdMatrix::regularize(const SymmetricMatrix& m, FloorPolicy policy,
                                std::optional<double> scale) {
  if (m.dim() == 0) throw InvalidInputError("empty matrix");
  if (!(policy.eps_rel > 0.0)) throw ConfigError("floor eps_rel must be positive");
  auto es = eigen_decompose(m);

  double ref = scale.value_or(m.trace() / static_cast<double>(m.dim()));
  if (!(ref > 0.0) || !std::isfinite(ref)) ref = 1.0;

  SpdMatrix out;
  out.floor_ = policy.eps_rel * ref;
  out.eigenvalues_ = es.eigenvalues();
  out.eigenvectors_ = es.eigenvectors();
  for (Eigen::Index k = 0; k < out.eigenvalues_.size(); ++k) {
    if (out.eigenvalues_[k] < out.floor_) {
      out.eigenvalues_[k] = out.floor_;
      ++out.floored_count_;
    }
  }
  if (out.floored_count_ > 0) {
    out.base_ = SymmetricMatrix(out.eigenvectors_ * out.eigenvalues_.asDiagonal() *
                                out.eigenvectors_.transpose());
  } else {
    out.base_ = m;
  }
  return out;
}

SpdMatrix SpdMatrix::strict(const SymmetricMatrix& m) {
  if (m.dim() == 0) throw InvalidInputError("empty matrix");
  auto es = eigen_decompose(m);
  if (es.eigenvalues().minCoeff() <= 0.0) {
    std::ostringstream os;
    os << "matrix is not positive definite (min eigenvalue " << es.eigenvalues().minCoeff() << ")";
    throw DomainError(os.str());
  }
  SpdMatrix out;
  out.base_ = m;
  out.eigenvalues_ = es.eigenvalues();
  out.eigenvectors_ = es.eigenvectors();
  return out;
}

Matrix SpdMatrix::inverse() const {
  return eigenvectors_ * eigenvalues_.cwiseInverse().asDiagonal() * eigenvectors_.transpose();
}

Vector SpdMatrix::solve(const Vector& rhs) const {
  return eigenvectors_ * (eigenvalues_.cwiseInverse().asDiagonal() *
                          (eigenvectors_.transpose() * rhs));
}

GaussianDist::GaussianDist(Vector m, SpdMatrix c) : mean(std::move(m)), cov(std::move(c)) {
  if (mean.size() != cov.dim()) {
    throw InvalidInputError("gaussian mean has length " + std::to_string(mean.size()) +
                            " but covariance is " + std::to_string(cov.dim()) + "-dimensional");
  }
}

SymmetricMatrix spd_sqrt(const SpdMatrix& m) {
  const Vector& ev = m.eigenvalues();
  if (!ev.allFinite()) throw InvalidInputError("matrix has non-finite entries");
  return SymmetricMatrix(m.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
                         m.eigenvectors().transpose());
}

double log_det(const SpdMatrix& m) {
  double acc = 0.0;
  for (double lam : m.eigenvalues()) {
    if (!(lam > 0.0)) throw DomainError("log_det of a matrix with a non-positive eigenvalue");
    acc += std::log(lam);
  }
  return acc;
}

double trace_log_diag(const SymmetricMatrix& m) {
  double acc = 0.0;
  for (Eigen::Index k = 0; k < m.dim(); ++k) {
    const double v = m(k, k);
    if (!(v > 0.0)) {
      throw DomainError("trace_log_diag: diagonal entry " + std::to_string(k) + " is not positive");
    }
    acc += std::log(v);
  }
  return acc;
}

double gaussian_kl(const GaussianDist& p, const GaussianDist& q) {
  const Eigen::Index d = p.mean.size();
  if (q.mean.size() != d) throw InvalidInputError("gaussian_kl: dimension mismatch");
  if (p.mean == q.mean && p.cov.matrix() == q.cov.matrix()) return 0.0;

  const Matrix q_inv = q.cov.inverse();
  const Vector delta = p.mean - q.mean;
  const double quad = delta.dot(q_inv * delta);
  const double tr = (q_inv.cwiseProduct(p.cov.matrix())).sum();
  return 0.5 * (log_det(q.cov) - log_det(p.cov) - static_cast<double>(d) + quad + tr);
}

double mahalanobis_sq(const Vector& x, const Vector& y, const SpdMatrix& s) {
  if (x.size() != y.size() || x.size() != s.dim()) {
    throw InvalidInputError("mahalanobis_sq: dimension mismatch");
  }
  const Vector delta = x - y;
  return delta.dot(s.solve(delta));
}

namespace {

void check_stability(const Vector& h_eigs, double eta) {
  const double threshold = 2.0 / eta;
  const double top = h_eigs.maxCoeff();
  // Relative slack so that lambda == 2/eta computed in floating point is caught.
  if (top >= threshold * (1.0 - 1e-12)) {
    std::ostringstream os;
    os << "edge of stability: top curvature eigenvalue " << top << " >= 2/eta = " << threshold;
    throw EdgeOfStabilityError(os.str(), top, threshold);
  }
}

}  // namespace

SymmetricMatrix solve_stationary_covariance(const SymmetricMatrix& h, const SymmetricMatrix& c,
                                            double eta, StationaryMode mode, std::size_t b) {
  if (!(eta > 0.0)) throw ConfigError("learning rate must be positive");
  if (b == 0) throw ConfigError("batch size must be positive");
  if (h.dim() != c.dim()) throw InvalidInputError("H and C dimensions differ");
  const Eigen::Index d = h.dim();
  const auto h_es = eigen_decompose(h);
  check_stability(h_es.eigenvalues(), eta);

  switch (mode) {
    case StationaryMode::kSmallLearningRate:
      return SymmetricMatrix::identity(d).scaled(eta / (2.0 * static_cast<double>(b)));

    case StationaryMode::kHessianMatchesGnc: {
      const Vector& lam = h_es.eigenvalues();
      Vector inv(d);
      for (Eigen::Index k = 0; k < d; ++k) inv[k] = 1.0 / (2.0 / eta - lam[k]);
      const Matrix& v = h_es.eigenvectors();
      return SymmetricMatrix(v * inv.asDiagonal() * v.transpose() / static_cast<double>(b));
    }

    case StationaryMode::kCommuting: {
      if (c.is_zero()) return SymmetricMatrix::zero(d);
      const Vector& lam = h_es.eigenvalues();
      const Matrix& v = h_es.eigenvectors();
      Vector inv(d);
      for (Eigen::Index k = 0; k < d; ++k) {
        const double denom = lam[k] * (2.0 - eta * lam[k]);
        if (!(denom > 0.0)) {
          throw NumericalError("commuting stationary form is singular: curvature eigenvalue " +
                               std::to_string(lam[k]));
        }
        inv[k] = eta / denom;
      }
      return SymmetricMatrix(v * inv.asDiagonal() * v.transpose() * c.matrix());
    }

    case StationaryMode::kGeneral: {
      if (c.is_zero()) return SymmetricMatrix::zero(d);
      // In the eigenbasis of H the equation decouples entrywise:
      // L~_ij (l_i + l_j - eta l_i l_j) = eta C~_ij.
      const Vector& lam = h_es.eigenvalues();
      const Matrix& v = h_es.eigenvectors();
      Matrix ct = v.transpose() * c.matrix() * v;
      const double scale = std::max(1.0, lam.cwiseAbs().maxCoeff());
      for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) {
          const double denom = lam[i] + lam[j] - eta * lam[i] * lam[j];
          if (std::abs(denom) <= 1e-14 * scale) {
            throw NumericalError("stationary covariance system is singular (curvature eigenvalues " +
                                 std::to_string(lam[i]) + ", " + std::to_string(lam[j]) + ")");
          }
          ct(i, j) *= eta / denom;
        }
      }
      return SymmetricMatrix(v * ct * v.transpose());
    }
  }
  throw ConfigError("unknown stationary mode");
}

double stationary_residual(const SymmetricMatrix& lambda, const SymmetricMatrix& h,
                           const SymmetricMatrix& c, double eta) {
  const Matrix& l = lambda.matrix();
  const Matrix& hm = h.matrix();
  return (l * hm + hm * l - eta * hm * l * hm - eta * c.matrix()).norm();
}

SymmetricMatrix sample_covariance(const Matrix& samples, const Vector& center, bool unbiased) {
  const Eigen::Index n = samples.cols();
  if (n == 0) throw InvalidInputError("sample_covariance of zero samples");
  if (unbiased && n < 2) throw InvalidInputError("unbiased covariance needs at least 2 samples");
  const Matrix centered = samples.colwise() - center;
  const double denom = unbiased ? static_cast<double>(n - 1) : static_cast<double>(n);
  return SymmetricMatrix(centered * centered.transpose() / denom);
}

}  // namespace gradnoise
