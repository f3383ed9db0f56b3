#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gradnoise/linalg.hpp"

namespace gradnoise {

/// One instance z. `label` is a real target or an integer class id stored as double.
struct Example {
  Vector features;
  double label = 0.0;
};

// loss(w, z) = 1/2 (w - z)^T A (w - z),  z ~ N(mean, cov).
struct QuadraticSpec {
  Matrix a;
  Vector mean;
  Matrix cov;
};

// Binary logistic regression (labels 0/1, no bias) on two Gaussian classes
// with means +class_mean / -class_mean and shared covariance. Optional L2 term
// (l2/2)||w||^2 is added to every per-example loss.
struct LogisticSpec {
  Vector class_mean;
  Matrix class_cov;
  double positive_fraction = 0.5;
  double l2 = 0.0;
};

// One-hidden-layer tanh network with softmax cross-entropy; labels come from a
// random teacher network of the same shape, flipped uniformly with label_noise.
struct MlpSpec {
  int input_dim = 4;
  int hidden = 8;
  int classes = 3;
  std::uint64_t teacher_seed = 7;
  double teacher_scale = 2.0;
  double label_noise = 0.1;
  double l2 = 0.0;
};

enum class ProblemFamily { kQuadraticGaussian, kLogisticTwoGaussians, kMlpTeacher };

struct DataSpec {
  std::variant<QuadraticSpec, LogisticSpec, MlpSpec> params;
  std::size_t population_oracle_size = 10000;
  double subgaussian_r = 1.0;
  double loss_bound_m = 1.0;

  ProblemFamily family() const;
  /// Parameter dimension d of the model.
  Eigen::Index param_dim() const;
  /// Throws ConfigError on inconsistent shapes or non-PSD covariances.
  void validate() const;
};

std::string family_name(ProblemFamily f);
ProblemFamily parse_family(const std::string& name);

struct Dataset {
  std::vector<Example> examples;
  std::uint64_t seed = 0;
  DataSpec spec;

  std::size_t size() const { return examples.size(); }
  std::span<const Example> view() const { return examples; }
};

/// Differentiable per-example loss. Implementations are stateless and
/// thread-safe; all methods are const.
class Problem {
 public:
  virtual ~Problem() = default;

  virtual Eigen::Index dim() const = 0;
  virtual double loss(const Vector& w, const Example& z) const = 0;
  /// Writes grad_w loss(w, z) into `out` (size dim()).
  virtual void grad_into(const Vector& w, const Example& z, Eigen::Ref<Vector> out) const = 0;
  /// (1/|examples|) sum_i  Hess_w loss(w, z_i) * v.
  virtual Vector hvp(const Vector& w, std::span<const Example> examples, const Vector& v) const = 0;

  virtual bool has_exact_hessian() const { return false; }
  virtual SymmetricMatrix exact_hessian(const Vector& w, std::span<const Example> examples) const;

  /// 1 if the model classifies z correctly, 0 if not; nullopt for regression problems.
  virtual std::optional<double> correct(const Vector& w, const Example& z) const;

  Vector grad(const Vector& w, const Example& z) const;

  double subgaussian_r() const { return r_; }
  double loss_bound_m() const { return m_; }
  void set_constants(double r, double m) {
    r_ = r;
    m_ = m;
  }

 private:
  double r_ = 1.0;
  double m_ = 1.0;
};

class QuadraticProblem final : public Problem {
 public:
  explicit QuadraticProblem(Matrix a);

  Eigen::Index dim() const override { return a_.rows(); }
  double loss(const Vector& w, const Example& z) const override;
  void grad_into(const Vector& w, const Example& z, Eigen::Ref<Vector> out) const override;
  Vector hvp(const Vector& w, std::span<const Example> examples, const Vector& v) const override;
  bool has_exact_hessian() const override { return true; }
  SymmetricMatrix exact_hessian(const Vector& w, std::span<const Example> examples) const override;

  const Matrix& a() const { return a_; }

 private:
  Matrix a_;
};

class LogisticProblem final : public Problem {
 public:
  LogisticProblem(Eigen::Index dim, double l2);

  Eigen::Index dim() const override { return dim_; }
  double loss(const Vector& w, const Example& z) const override;
  void grad_into(const Vector& w, const Example& z, Eigen::Ref<Vector> out) const override;
  Vector hvp(const Vector& w, std::span<const Example> examples, const Vector& v) const override;
  bool has_exact_hessian() const override { return true; }
  SymmetricMatrix exact_hessian(const Vector& w, std::span<const Example> examples) const override;
  std::optional<double> correct(const Vector& w, const Example& z) const override;

 private:
  Eigen::Index dim_;
  double l2_;
};

/// Parameters are packed as [W1 (hidden x input, row-major), b1, W2 (classes x hidden, row-major), b2].
class MlpProblem final : public Problem {
 public:
  MlpProblem(int input_dim, int hidden, int classes, double l2);

  Eigen::Index dim() const override;
  double loss(const Vector& w, const Example& z) const override;
  void grad_into(const Vector& w, const Example& z, Eigen::Ref<Vector> out) const override;
  Vector hvp(const Vector& w, std::span<const Example> examples, const Vector& v) const override;
  std::optional<double> correct(const Vector& w, const Example& z) const override;

  /// Class logits for input x.
  Vector logits(const Vector& w, const Vector& x) const;

  int input_dim() const { return input_; }
  int hidden() const { return hidden_; }
  int classes() const { return classes_; }

 private:
  void hvp_single(const Vector& w, const Example& z, const Vector& v, Eigen::Ref<Vector> out) const;

  int input_;
  int hidden_;
  int classes_;
  double l2_;
};

std::unique_ptr<Problem> make_problem(const DataSpec& spec);

/// Deterministic i.i.d. sample of size n from the distribution described by spec.
Dataset generate_dataset(const DataSpec& spec, std::uint64_t seed, std::size_t n);

/// Held-out sample of size spec.population_oracle_size drawn from a seed stream
/// disjoint from generate_dataset(spec, seed, .).
Dataset population_oracle_sample(const DataSpec& spec, std::uint64_t seed);

struct PopulationMoments {
  Vector pop_grad;
  SymmetricMatrix pop_gnc;
  SymmetricMatrix hessian;
};

/// Analytic population gradient, gradient covariance and Hessian of the quadratic family.
PopulationMoments quadratic_population_moments(const DataSpec& spec, const Vector& w);

/// Subset of a dataset in the order given by `indices`.
Dataset subset(const Dataset& data, std::span<const std::size_t> indices);

/// Default initial weights: zeros for convex families, N(0, scale^2/fan_in) for the MLP.
Vector default_initial_weights(const DataSpec& spec, std::uint64_t seed, double scale);

/// Mean loss over examples.
double mean_loss(const Problem& problem, const Vector& w, std::span<const Example> examples);

/// Mean of correct() over examples; nullopt for regression problems.
std::optional<double> mean_accuracy(const Problem& problem, const Vector& w,
                                    std::span<const Example> examples);

}  // namespace gradnoise
