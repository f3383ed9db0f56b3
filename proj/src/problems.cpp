#include "gradnoise/problems.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "gradnoise/errors.hpp"
#include "gradnoise/kernels.hpp"
#include "gradnoise/rng.hpp"

namespace gradnoise {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_psd(const Matrix& cov, const std::string& what) {
  if (cov.rows() != cov.cols()) throw ConfigError(what + " must be square");
  if (!cov.allFinite()) throw ConfigError(what + " has non-finite entries");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + cov.cwiseAbs().maxCoeff())) {
    throw ConfigError(what + " is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-12 * scale) {
    std::ostringstream os;
    os << what << " is not positive semi-definite (min eigenvalue " << es.eigenvalues().minCoeff()
       << ")";
    throw ConfigError(os.str());
  }
}

// Factor L with L L^T = cov; negative round-off eigenvalues are clamped to 0.
Matrix gaussian_factor(const Matrix& cov) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

double softplus(double t) { return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t))); }

double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

Vector softmax(const Vector& o) {
  const Vector e = (o.array() - o.maxCoeff()).exp();
  return e / e.sum();
}

double log_sum_exp(const Vector& o) {
  const double top = o.maxCoeff();
  return top + std::log((o.array() - top).exp().sum());
}

struct MlpView {
  Eigen::Map<const RowMajor> w1;
  Eigen::Map<const Vector> b1;
  Eigen::Map<const RowMajor> w2;
  Eigen::Map<const Vector> b2;
};

MlpView unpack(const Vector& w, int input, int hidden, int classes) {
  const double* p = w.data();
  const Eigen::Index n1 = static_cast<Eigen::Index>(hidden) * input;
  const Eigen::Index n2 = static_cast<Eigen::Index>(classes) * hidden;
  return MlpView{Eigen::Map<const RowMajor>(p, hidden, input),
                 Eigen::Map<const Vector>(p + n1, hidden),
                 Eigen::Map<const RowMajor>(p + n1 + hidden, classes, hidden),
                 Eigen::Map<const Vector>(p + n1 + hidden + n2, classes)};
}

struct MlpGradView {
  Eigen::Map<RowMajor> w1;
  Eigen::Map<Vector> b1;
  Eigen::Map<RowMajor> w2;
  Eigen::Map<Vector> b2;
};

MlpGradView unpack_mut(double* p, int input, int hidden, int classes) {
  const Eigen::Index n1 = static_cast<Eigen::Index>(hidden) * input;
  const Eigen::Index n2 = static_cast<Eigen::Index>(classes) * hidden;
  return MlpGradView{Eigen::Map<RowMajor>(p, hidden, input), Eigen::Map<Vector>(p + n1, hidden),
                     Eigen::Map<RowMajor>(p + n1 + hidden, classes, hidden),
                     Eigen::Map<Vector>(p + n1 + hidden + n2, classes)};
}

Eigen::Index mlp_dim(int input, int hidden, int classes) {
  return static_cast<Eigen::Index>(hidden) * input + hidden +
         static_cast<Eigen::Index>(classes) * hidden + classes;
}

std::uint64_t dataset_stream_seed(std::uint64_t seed) { return splitmix64(seed); }

}  // namespace

// ---------------------------------------------------------------------------
// DataSpec

ProblemFamily DataSpec::family() const {
  if (std::holds_alternative<QuadraticSpec>(params)) return ProblemFamily::kQuadraticGaussian;
  if (std::holds_alternative<LogisticSpec>(params)) return ProblemFamily::kLogisticTwoGaussians;
  return ProblemFamily::kMlpTeacher;
}

Eigen::Index DataSpec::param_dim() const {
  if (const auto* q = std::get_if<QuadraticSpec>(&params)) return q->a.rows();
  if (const auto* l = std::get_if<LogisticSpec>(&params)) return l->class_mean.size();
  const auto& m = std::get<MlpSpec>(params);
  return mlp_dim(m.input_dim, m.hidden, m.classes);
}

void DataSpec::validate() const {
  if (population_oracle_size < 1) throw ConfigError("population_oracle_size must be >= 1");
  if (!(subgaussian_r > 0.0)) throw ConfigError("subgaussian R must be positive");
  if (!(loss_bound_m > 0.0)) throw ConfigError("loss bound M must be positive");

  if (const auto* q = std::get_if<QuadraticSpec>(&params)) {
    const Eigen::Index d = q->a.rows();
    if (d < 1 || q->a.cols() != d) throw ConfigError("quadratic A must be a non-empty square matrix");
    if (q->mean.size() != d) throw ConfigError("quadratic mean length must equal dim(A)");
    if (q->cov.rows() != d || q->cov.cols() != d) throw ConfigError("quadratic cov must be d x d");
    require_psd(q->a, "quadratic A");
    require_psd(q->cov, "quadratic cov");
    if (!q->mean.allFinite()) throw ConfigError("quadratic mean has non-finite entries");
    return;
  }
  if (const auto* l = std::get_if<LogisticSpec>(&params)) {
    const Eigen::Index d = l->class_mean.size();
    if (d < 1) throw ConfigError("logistic class_mean must be non-empty");
    if (l->class_cov.rows() != d || l->class_cov.cols() != d) {
      throw ConfigError("logistic class_cov must be d x d");
    }
    require_psd(l->class_cov, "logistic class_cov");
    if (!(l->positive_fraction >= 0.0 && l->positive_fraction <= 1.0)) {
      throw ConfigError("logistic positive_fraction must lie in [0, 1]");
    }
    if (!(l->l2 >= 0.0)) throw ConfigError("logistic l2 must be >= 0");
    return;
  }
  const auto& m = std::get<MlpSpec>(params);
  if (m.input_dim < 1 || m.hidden < 1) throw ConfigError("mlp input_dim and hidden must be >= 1");
  if (m.classes < 2) throw ConfigError("mlp classes must be >= 2");
  if (!(m.label_noise >= 0.0 && m.label_noise <= 1.0)) {
    throw ConfigError("mlp label_noise must lie in [0, 1]");
  }
  if (!(m.teacher_scale >= 0.0)) throw ConfigError("mlp teacher_scale must be >= 0");
  if (!(m.l2 >= 0.0)) throw ConfigError("mlp l2 must be >= 0");
}

std::string family_name(ProblemFamily f) {
  switch (f) {
    case ProblemFamily::kQuadraticGaussian:
      return "quadratic-gaussian";
    case ProblemFamily::kLogisticTwoGaussians:
      return "logistic-two-gaussians";
    case ProblemFamily::kMlpTeacher:
      return "mlp-teacher";
  }
  return "unknown";
}

ProblemFamily parse_family(const std::string& name) {
  if (name == "quadratic-gaussian") return ProblemFamily::kQuadraticGaussian;
  if (name == "logistic-two-gaussians") return ProblemFamily::kLogisticTwoGaussians;
  if (name == "mlp-teacher") return ProblemFamily::kMlpTeacher;
  throw ConfigError("unknown problem family '" + name +
                    "' (expected quadratic-gaussian, logistic-two-gaussians or mlp-teacher)");
}

// ---------------------------------------------------------------------------
// Problem base

SymmetricMatrix Problem::exact_hessian(const Vector&, std::span<const Example>) const {
  throw CapabilityError("this problem has no exact Hessian; use hvp");
}

std::optional<double> Problem::correct(const Vector&, const Example&) const { return std::nullopt; }

Vector Problem::grad(const Vector& w, const Example& z) const {
  Vector out(dim());
  grad_into(w, z, out);
  return out;
}

// ---------------------------------------------------------------------------
// Quadratic

QuadraticProblem::QuadraticProblem(Matrix a) : a_(SymmetricMatrix(a).matrix()) {}

double QuadraticProblem::loss(const Vector& w, const Example& z) const {
  const Vector r = w - z.features;
  return 0.5 * r.dot(a_ * r);
}

void QuadraticProblem::grad_into(const Vector& w, const Example& z, Eigen::Ref<Vector> out) const {
  out.noalias() = a_ * (w - z.features);
}

Vector QuadraticProblem::hvp(const Vector&, std::span<const Example>, const Vector& v) const {
  return a_ * v;
}

SymmetricMatrix QuadraticProblem::exact_hessian(const Vector&, std::span<const Example>) const {
  return SymmetricMatrix(a_);
}

// ---------------------------------------------------------------------------
// Logistic

LogisticProblem::LogisticProblem(Eigen::Index dim, double l2) : dim_(dim), l2_(l2) {}

double LogisticProblem::loss(const Vector& w, const Example& z) const {
  const double s = z.label > 0.5 ? 1.0 : -1.0;
  return softplus(-s * w.dot(z.features)) + 0.5 * l2_ * w.squaredNorm();
}

void LogisticProblem::grad_into(const Vector& w, const Example& z, Eigen::Ref<Vector> out) const {
  const double s = z.label > 0.5 ? 1.0 : -1.0;
  const double coef = -s * sigmoid(-s * w.dot(z.features));
  out.noalias() = coef * z.features + l2_ * w;
}

Vector LogisticProblem::hvp(const Vector& w, std::span<const Example> examples,
                            const Vector& v) const {
  Vector out = kernels::chunked_vector_mean(examples.size(), dim_, [&](std::size_t i, Vector& acc) {
    const Vector& x = examples[i].features;
    const double p = sigmoid(w.dot(x));
    acc += (p * (1.0 - p) * x.dot(v)) * x;
  });
  return out + l2_ * v;
}

SymmetricMatrix LogisticProblem::exact_hessian(const Vector& w,
                                               std::span<const Example> examples) const {
  Matrix acc = Matrix::Zero(dim_, dim_);
  for (const auto& z : examples) {
    const double p = sigmoid(w.dot(z.features));
    acc.selfadjointView<Eigen::Lower>().rankUpdate(z.features, p * (1.0 - p));
  }
  acc = acc.selfadjointView<Eigen::Lower>();
  acc /= static_cast<double>(examples.size());
  acc.diagonal().array() += l2_;
  return SymmetricMatrix(acc);
}

std::optional<double> LogisticProblem::correct(const Vector& w, const Example& z) const {
  const bool predicted_positive = w.dot(z.features) > 0.0;
  return predicted_positive == (z.label > 0.5) ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// MLP

MlpProblem::MlpProblem(int input_dim, int hidden, int classes, double l2)
    : input_(input_dim), hidden_(hidden), classes_(classes), l2_(l2) {}

Eigen::Index MlpProblem::dim() const { return mlp_dim(input_, hidden_, classes_); }

Vector MlpProblem::logits(const Vector& w, const Vector& x) const {
  const auto p = unpack(w, input_, hidden_, classes_);
  const Vector h = (p.w1 * x + p.b1).array().tanh();
  return p.w2 * h + p.b2;
}

double MlpProblem::loss(const Vector& w, const Example& z) const {
  const Vector o = logits(w, z.features);
  const auto y = static_cast<Eigen::Index>(z.label);
  return log_sum_exp(o) - o[y] + 0.5 * l2_ * w.squaredNorm();
}

void MlpProblem::grad_into(const Vector& w, const Example& z, Eigen::Ref<Vector> out) const {
  const auto p = unpack(w, input_, hidden_, classes_);
  const Vector& x = z.features;
  const Vector h = (p.w1 * x + p.b1).array().tanh();
  Vector delta_o = softmax(p.w2 * h + p.b2);
  delta_o[static_cast<Eigen::Index>(z.label)] -= 1.0;
  const Vector delta_a = ((p.w2.transpose() * delta_o).array() * (1.0 - h.array().square())).matrix();

  auto g = unpack_mut(out.data(), input_, hidden_, classes_);
  g.w1.noalias() = delta_a * x.transpose();
  g.b1 = delta_a;
  g.w2.noalias() = delta_o * h.transpose();
  g.b2 = delta_o;
  if (l2_ != 0.0) out += l2_ * w;
}

// Forward-mode directional derivative (R-operator) of the backward pass.
void MlpProblem::hvp_single(const Vector& w, const Example& z, const Vector& v,
                            Eigen::Ref<Vector> out) const {
  const auto p = unpack(w, input_, hidden_, classes_);
  const auto dv = unpack(v, input_, hidden_, classes_);
  const Vector& x = z.features;

  const Vector h = (p.w1 * x + p.b1).array().tanh();
  const Vector dtanh = (1.0 - h.array().square()).matrix();
  const Vector prob = softmax(p.w2 * h + p.b2);
  Vector delta_o = prob;
  delta_o[static_cast<Eigen::Index>(z.label)] -= 1.0;
  const Vector delta_h = p.w2.transpose() * delta_o;

  const Vector r_a = dv.w1 * x + dv.b1;
  const Vector r_h = dtanh.cwiseProduct(r_a);
  const Vector r_o = dv.w2 * h + p.w2 * r_h + dv.b2;
  const Vector r_delta_o = prob.cwiseProduct(r_o) - prob * prob.dot(r_o);
  const Vector r_delta_h = dv.w2.transpose() * delta_o + p.w2.transpose() * r_delta_o;
  const Vector r_delta_a =
      r_delta_h.cwiseProduct(dtanh) - 2.0 * delta_h.cwiseProduct(h).cwiseProduct(r_h);

  auto g = unpack_mut(out.data(), input_, hidden_, classes_);
  g.w1.noalias() = r_delta_a * x.transpose();
  g.b1 = r_delta_a;
  g.w2.noalias() = r_delta_o * h.transpose() + delta_o * r_h.transpose();
  g.b2 = r_delta_o;
}

Vector MlpProblem::hvp(const Vector& w, std::span<const Example> examples, const Vector& v) const {
  const Eigen::Index d = dim();
  Vector out = kernels::chunked_vector_mean(examples.size(), d, [&](std::size_t i, Vector& acc) {
    Vector tmp(d);
    hvp_single(w, examples[i], v, tmp);
    acc += tmp;
  });
  return out + l2_ * v;
}

std::optional<double> MlpProblem::correct(const Vector& w, const Example& z) const {
  Eigen::Index arg = 0;
  logits(w, z.features).maxCoeff(&arg);
  return arg == static_cast<Eigen::Index>(z.label) ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// Construction and sampling

std::unique_ptr<Problem> make_problem(const DataSpec& spec) {
  spec.validate();
  std::unique_ptr<Problem> out;
  if (const auto* q = std::get_if<QuadraticSpec>(&spec.params)) {
    out = std::make_unique<QuadraticProblem>(q->a);
  } else if (const auto* l = std::get_if<LogisticSpec>(&spec.params)) {
    out = std::make_unique<LogisticProblem>(l->class_mean.size(), l->l2);
  } else {
    const auto& m = std::get<MlpSpec>(spec.params);
    out = std::make_unique<MlpProblem>(m.input_dim, m.hidden, m.classes, m.l2);
  }
  out->set_constants(spec.subgaussian_r, spec.loss_bound_m);
  return out;
}

namespace {

Vector teacher_weights(const MlpSpec& m) {
  Rng rng = make_rng(derive_seed(m.teacher_seed, stream::kTeacher));
  const Eigen::Index d = mlp_dim(m.input_dim, m.hidden, m.classes);
  Vector w = standard_normal(rng, d);
  const Eigen::Index n1 = static_cast<Eigen::Index>(m.hidden) * m.input_dim;
  const Eigen::Index n2 = static_cast<Eigen::Index>(m.classes) * m.hidden;
  w.head(n1) *= m.teacher_scale / std::sqrt(static_cast<double>(m.input_dim));
  w.segment(n1 + m.hidden, n2) *= m.teacher_scale / std::sqrt(static_cast<double>(m.hidden));
  w.segment(n1, m.hidden) *= 0.1 * m.teacher_scale;
  w.tail(m.classes) *= 0.1 * m.teacher_scale;
  return w;
}

std::vector<Example> sample_examples(const DataSpec& spec, std::uint64_t rng_seed, std::size_t n) {
  Rng rng = make_rng(rng_seed);
  std::vector<Example> out;
  out.reserve(n);

  if (const auto* q = std::get_if<QuadraticSpec>(&spec.params)) {
    const Matrix factor = gaussian_factor(q->cov);
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(Example{q->mean + factor * standard_normal(rng, q->mean.size()), 0.0});
    }
    return out;
  }

  if (const auto* l = std::get_if<LogisticSpec>(&spec.params)) {
    const Matrix factor = gaussian_factor(l->class_cov);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      const bool positive = unif(rng) < l->positive_fraction;
      const Vector noise = factor * standard_normal(rng, l->class_mean.size());
      out.push_back(Example{(positive ? l->class_mean : Vector(-l->class_mean)) + noise,
                            positive ? 1.0 : 0.0});
    }
    return out;
  }

  const auto& m = std::get<MlpSpec>(spec.params);
  const MlpProblem teacher(m.input_dim, m.hidden, m.classes, 0.0);
  const Vector tw = teacher_weights(m);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> any_class(0, m.classes - 1);
  for (std::size_t i = 0; i < n; ++i) {
    Vector x = standard_normal(rng, m.input_dim);
    Eigen::Index label = 0;
    teacher.logits(tw, x).maxCoeff(&label);
    // Both draws are always taken so the stream layout does not depend on label_noise.
    const double u = unif(rng);
    const int flipped = any_class(rng);
    if (u < m.label_noise) label = flipped;
    out.push_back(Example{std::move(x), static_cast<double>(label)});
  }
  return out;
}

}  // namespace

Dataset generate_dataset(const DataSpec& spec, std::uint64_t seed, std::size_t n) {
  if (n < 1) throw ConfigError("dataset size n must be >= 1");
  spec.validate();
  return Dataset{sample_examples(spec, dataset_stream_seed(seed), n), seed, spec};
}

Dataset population_oracle_sample(const DataSpec& spec, std::uint64_t seed) {
  spec.validate();
  return Dataset{
      sample_examples(spec, derive_seed(seed, stream::kOracle), spec.population_oracle_size), seed,
      spec};
}

PopulationMoments quadratic_population_moments(const DataSpec& spec, const Vector& w) {
  const auto* q = std::get_if<QuadraticSpec>(&spec.params);
  if (q == nullptr) {
    throw CapabilityError("analytic population moments are only available for quadratic-gaussian");
  }
  if (w.size() != q->a.rows()) throw InvalidInputError("weight dimension does not match A");
  const Matrix a = SymmetricMatrix(q->a).matrix();
  return PopulationMoments{a * (w - q->mean), SymmetricMatrix(a * q->cov * a.transpose()),
                           SymmetricMatrix(a)};
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out{{}, data.seed, data.spec};
  out.examples.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= data.size()) throw InvalidInputError("subset index out of range");
    out.examples.push_back(data.examples[i]);
  }
  return out;
}

Vector default_initial_weights(const DataSpec& spec, std::uint64_t seed, double scale) {
  const Eigen::Index d = spec.param_dim();
  const auto* m = std::get_if<MlpSpec>(&spec.params);
  if (m == nullptr) return Vector::Zero(d);

  Rng rng = make_rng(derive_seed(seed, stream::kInit));
  Vector w = Vector::Zero(d);
  const Eigen::Index n1 = static_cast<Eigen::Index>(m->hidden) * m->input_dim;
  const Eigen::Index n2 = static_cast<Eigen::Index>(m->classes) * m->hidden;
  w.head(n1) = standard_normal(rng, n1) * (scale / std::sqrt(static_cast<double>(m->input_dim)));
  w.segment(n1 + m->hidden, n2) =
      standard_normal(rng, n2) * (scale / std::sqrt(static_cast<double>(m->hidden)));
  return w;
}

double mean_loss(const Problem& problem, const Vector& w, std::span<const Example> examples) {
  if (examples.empty()) throw InvalidInputError("mean_loss over an empty set");
  return kernels::mean_loss(problem, w, examples);
}

std::optional<double> mean_accuracy(const Problem& problem, const Vector& w,
                                    std::span<const Example> examples) {
  if (examples.empty() || !problem.correct(w, examples.front()).has_value()) return std::nullopt;
  return kernels::chunked_scalar_mean(examples.size(),
                                      [&](std::size_t i) { return *problem.correct(w, examples[i]); });
}

}  // namespace gradnoise
