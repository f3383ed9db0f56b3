#include "gradnoise/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gradnoise/errors.hpp"

namespace gradnoise {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError(path + " must be a JSON object");
  std::vector<std::string> unknown;
  for (const auto& [key, _] : obj.items()) {
    if (allowed.count(key) == 0) unknown.push_back(key);
  }
  if (!unknown.empty()) {
    std::ostringstream os;
    os << "unknown key(s) in " << path << ":";
    for (const auto& k : unknown) os << " '" << k << "'";
    os << " (allowed:";
    for (const auto& k : allowed) os << " " << k;
    os << ")";
    throw ConfigError(os.str());
  }
}

template <class T>
T get_as(const json& obj, const std::string& key, const std::string& path) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + "." + key + ": " + e.what());
  }
}

template <class T>
void read(const json& obj, const std::string& key, const std::string& path, T& out) {
  if (obj.contains(key)) out = get_as<T>(obj, key, path);
}

std::size_t read_count(const json& obj, const std::string& key, const std::string& path,
                       std::size_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(path + "." + key + " must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

Vector read_vector(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where + " must be an array of numbers");
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError(where + " must contain only numbers");
    out[static_cast<Eigen::Index>(i)] = v[i].get<double>();
  }
  return out;
}

Matrix read_matrix(const json& v, const std::string& where) {
  if (!v.is_array() || v.empty()) throw ConfigError(where + " must be a non-empty array of rows");
  const std::size_t rows = v.size();
  const std::size_t cols = v[0].is_array() ? v[0].size() : 0;
  Matrix out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    const Vector r = read_vector(v[i], where + "[" + std::to_string(i) + "]");
    if (static_cast<std::size_t>(r.size()) != cols) throw ConfigError(where + " has ragged rows");
    out.row(static_cast<Eigen::Index>(i)) = r.transpose();
  }
  return out;
}

// Matrix from either `key` (full) or `key_diag` (diagonal); `fallback_dim` > 0 yields identity.
Matrix read_matrix_or_diag(const json& obj, const std::string& key, const std::string& path,
                           Eigen::Index fallback_dim) {
  const std::string diag_key = key + "_diag";
  if (obj.contains(key) && obj.contains(diag_key)) {
    throw ConfigError(path + ": give either " + key + " or " + diag_key + ", not both");
  }
  if (obj.contains(key)) return read_matrix(obj.at(key), path + "." + key);
  if (obj.contains(diag_key)) {
    return Matrix(read_vector(obj.at(diag_key), path + "." + diag_key).asDiagonal());
  }
  if (fallback_dim > 0) return Matrix::Identity(fallback_dim, fallback_dim);
  throw ConfigError(path + ": missing " + key + " or " + diag_key);
}

DataSpec parse_problem(const json& p) {
  const std::string path = "problem";
  if (!p.is_object() || !p.contains("family")) throw ConfigError("problem.family is required");
  const std::string family = get_as<std::string>(p, "family", path);
  const std::set<std::string> common = {"family", "population_oracle_size", "R", "M"};
  auto with = [&](std::set<std::string> extra) {
    extra.insert(common.begin(), common.end());
    return extra;
  };

  DataSpec spec;
  switch (parse_family(family)) {
    case ProblemFamily::kQuadraticGaussian: {
      check_keys(p, path, with({"a", "a_diag", "mean", "cov", "cov_diag"}));
      QuadraticSpec q;
      q.a = read_matrix_or_diag(p, "a", path, 0);
      const Eigen::Index d = q.a.rows();
      q.mean = p.contains("mean") ? read_vector(p.at("mean"), path + ".mean") : Vector::Zero(d);
      q.cov = read_matrix_or_diag(p, "cov", path, d);
      spec.params = q;
      break;
    }
    case ProblemFamily::kLogisticTwoGaussians: {
      check_keys(p, path, with({"class_mean", "dim", "separation", "class_cov", "class_cov_diag",
                                "positive_fraction", "l2"}));
      LogisticSpec l;
      if (p.contains("class_mean")) {
        if (p.contains("dim") || p.contains("separation")) {
          throw ConfigError("problem: class_mean excludes dim/separation");
        }
        l.class_mean = read_vector(p.at("class_mean"), path + ".class_mean");
      } else {
        const std::size_t d = read_count(p, "dim", path, 0);
        if (d == 0) throw ConfigError("problem: logistic needs class_mean or dim >= 1");
        double sep = 1.0;
        read(p, "separation", path, sep);
        // ||class_mean|| == separation, spread evenly over coordinates.
        l.class_mean = Vector::Constant(static_cast<Eigen::Index>(d),
                                        sep / std::sqrt(static_cast<double>(d)));
      }
      l.class_cov = read_matrix_or_diag(p, "class_cov", path, l.class_mean.size());
      read(p, "positive_fraction", path, l.positive_fraction);
      read(p, "l2", path, l.l2);
      spec.params = l;
      break;
    }
    case ProblemFamily::kMlpTeacher: {
      check_keys(p, path, with({"input_dim", "hidden", "classes", "teacher_seed", "teacher_scale",
                                "label_noise", "l2"}));
      MlpSpec m;
      read(p, "input_dim", path, m.input_dim);
      read(p, "hidden", path, m.hidden);
      read(p, "classes", path, m.classes);
      read(p, "teacher_seed", path, m.teacher_seed);
      read(p, "teacher_scale", path, m.teacher_scale);
      read(p, "label_noise", path, m.label_noise);
      read(p, "l2", path, m.l2);
      spec.params = m;
      break;
    }
  }
  spec.population_oracle_size = read_count(p, "population_oracle_size", path,
                                           spec.population_oracle_size);
  read(p, "R", path, spec.subgaussian_r);
  read(p, "M", path, spec.loss_bound_m);
  spec.validate();
  return spec;
}

void parse_train(const json& t, TrainConfig& c) {
  const std::string path = "train";
  check_keys(t, path,
             {"n", "b", "T", "lr", "lr_schedule", "mode", "dataset_seed", "log_every",
              "record_weights", "burn_in", "sde_refresh_every", "init", "init_scale", "track_test",
              "track_lambda1", "track_trace_hessian", "track_alignment", "hessian_probes",
              "snapshot_every", "snapshot_population", "tail_checkpoints", "tail_spacing",
              "floor_eps", "matrix_cap"});
  c.n = read_count(t, "n", path, c.n);
  c.b = read_count(t, "b", path, c.b);
  c.T = read_count(t, "T", path, c.T);
  if (t.contains("lr") && t.contains("lr_schedule")) {
    throw ConfigError("train: give either lr or lr_schedule, not both");
  }
  if (t.contains("lr")) c.lr_schedule = {LrSegment{0, get_as<double>(t, "lr", path)}};
  if (t.contains("lr_schedule")) {
    const json& s = t.at("lr_schedule");
    if (!s.is_array() || s.empty()) throw ConfigError("train.lr_schedule must be a non-empty array");
    c.lr_schedule.clear();
    for (const auto& seg : s) {
      if (!seg.is_array() || seg.size() != 2 || !seg[0].is_number_integer() ||
          !seg[1].is_number()) {
        throw ConfigError("train.lr_schedule entries must be [start_step, eta] pairs");
      }
      c.lr_schedule.push_back(LrSegment{seg[0].get<std::size_t>(), seg[1].get<double>()});
    }
  }
  if (t.contains("mode")) c.mode = parse_mode(get_as<std::string>(t, "mode", path));
  read(t, "dataset_seed", path, c.dataset_seed);
  c.log_every = read_count(t, "log_every", path, c.log_every);
  read(t, "record_weights", path, c.record_weights);
  c.burn_in = read_count(t, "burn_in", path, c.burn_in);
  c.sde_refresh_every = read_count(t, "sde_refresh_every", path, c.sde_refresh_every);
  if (t.contains("init")) {
    const json& v = t.at("init");
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      if (s == "default") {
        c.init.kind = InitSpec::Kind::kDefault;
      } else if (s == "zero") {
        c.init.kind = InitSpec::Kind::kZero;
      } else {
        throw ConfigError("train.init must be \"default\", \"zero\" or an array");
      }
    } else {
      c.init.kind = InitSpec::Kind::kCustom;
      c.init.custom = read_vector(v, "train.init");
    }
  }
  read(t, "init_scale", path, c.init.scale);
  read(t, "track_test", path, c.track_test);
  read(t, "track_lambda1", path, c.track_lambda1);
  read(t, "track_trace_hessian", path, c.track_trace_hessian);
  read(t, "track_alignment", path, c.track_alignment);
  read(t, "hessian_probes", path, c.hessian_probes);
  c.snapshot_every = read_count(t, "snapshot_every", path, c.snapshot_every);
  read(t, "snapshot_population", path, c.snapshot_population);
  c.tail_checkpoints = read_count(t, "tail_checkpoints", path, c.tail_checkpoints);
  c.tail_spacing = read_count(t, "tail_spacing", path, c.tail_spacing);
  read(t, "floor_eps", path, c.floor.eps_rel);
  c.matrix_cap = read_count(t, "matrix_cap", path, c.matrix_cap);
}

void check_names(const std::vector<std::string>& names) {
  for (const auto& n : names) {
    const auto& a = trajectory_bound_names();
    const auto& b = terminal_bound_names();
    if (std::find(a.begin(), a.end(), n) == a.end() && std::find(b.begin(), b.end(), n) == b.end()) {
      throw ConfigError("unknown bound '" + n + "' in bounds.list");
    }
  }
}

void parse_bounds(const json& j, BoundSelection& s) {
  const std::string path = "bounds";
  check_keys(j, path,
             {"list", "g_tilde", "h1", "reference", "reference_custom", "closed_form", "loo_subsets",
              "enumerate_up_to", "sampled_subsets", "influence_damping"});
  read(j, "list", path, s.names);
  check_names(s.names);
  read(j, "g_tilde", path, s.g_tilde);
  GTildeChoice::parse(s.g_tilde);
  read(j, "h1", path, s.h1);
  if (s.h1 != "plug-in" && s.h1 != "population-identity") {
    throw ConfigError("bounds.h1 must be plug-in or population-identity");
  }
  read(j, "reference", path, s.reference);
  ReferenceChoice::parse(s.reference);
  read(j, "reference_custom", path, s.reference_custom);
  read(j, "closed_form", path, s.closed_form);
  parse_closed_form(s.closed_form);
  s.loo_subsets = read_count(j, "loo_subsets", path, s.loo_subsets);
  s.enumerate_up_to = read_count(j, "enumerate_up_to", path, s.enumerate_up_to);
  s.sampled_subsets = read_count(j, "sampled_subsets", path, s.sampled_subsets);
  read(j, "influence_damping", path, s.influence_damping);
}

}  // namespace

const std::vector<std::string>& trajectory_bound_names() {
  static const std::vector<std::string> names = {"traj_isotropic", "traj_langevin",
                                                 "traj_anisotropic", "traj_data_dependent",
                                                 "terminal_gradient_accum"};
  return names;
}

const std::vector<std::string>& terminal_bound_names() {
  static const std::vector<std::string> names = {"terminal_general", "terminal_anisotropic",
                                                 "terminal_isotropic", "terminal_isotropic_init",
                                                 "terminal_loo", "terminal_fim_takeuchi"};
  return names;
}

void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.train.seed = seed;
  if (!cfg.dataset_seed_explicit) cfg.train.dataset_seed = ensemble_dataset_seed(seed, 0);
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  check_keys(root, "config",
             {"problem", "train", "bounds", "ensemble", "compare", "sweep", "stationary",
              "output_dir", "seed"});
  if (!root.contains("problem")) throw ConfigError("config.problem is required");

  ExperimentConfig cfg;
  cfg.train.data = parse_problem(root.at("problem"));
  if (root.contains("train")) parse_train(root.at("train"), cfg.train);
  if (root.contains("bounds")) parse_bounds(root.at("bounds"), cfg.bounds);
  if (root.contains("ensemble")) {
    const json& e = root.at("ensemble");
    check_keys(e, "ensemble", {"dataset_seeds", "run_seeds"});
    cfg.dataset_seeds = read_count(e, "dataset_seeds", "ensemble", cfg.dataset_seeds);
    cfg.run_seeds = read_count(e, "run_seeds", "ensemble", cfg.run_seeds);
  }
  if (root.contains("compare")) {
    const json& c = root.at("compare");
    check_keys(c, "compare", {"seeds"});
    cfg.compare_seeds = read_count(c, "seeds", "compare", cfg.compare_seeds);
  }
  if (root.contains("sweep")) {
    const json& s = root.at("sweep");
    check_keys(s, "sweep", {"n"});
    read(s, "n", "sweep", cfg.sweep_n);
  }
  if (root.contains("stationary")) {
    const json& s = root.at("stationary");
    check_keys(s, "stationary", {"burn_in"});
    cfg.stationary_burn_in = read_count(s, "burn_in", "stationary", cfg.stationary_burn_in);
  }
  read(root, "output_dir", "config", cfg.output_dir);
  read(root, "seed", "config", cfg.seed);
  cfg.dataset_seed_explicit = root.contains("train") && root.at("train").contains("dataset_seed");
  apply_seed(cfg, cfg.seed);
  cfg.train.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return parse_experiment_config(os.str());
}

}  // namespace gradnoise
