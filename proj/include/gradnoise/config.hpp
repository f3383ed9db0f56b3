#pragma once

// Experiment configuration loaded from JSON. Parsing is strict: every object
// is checked against its key list and unknown keys raise ConfigError naming them.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "gradnoise/bounds.hpp"
#include "gradnoise/dynamics.hpp"

namespace gradnoise {

struct BoundSelection {
  std::vector<std::string> names;
  std::string g_tilde = "population-gradient";
  std::string h1 = "plug-in";  // plug-in | population-identity
  std::string reference = "grand-mean";
  std::vector<double> reference_custom;
  std::string closed_form = "general";
  std::size_t loo_subsets = 2;  // dropped indices per dataset for the LOO pairs
  std::size_t enumerate_up_to = 12;
  std::size_t sampled_subsets = 64;
  double influence_damping = 0.0;
};

struct ExperimentConfig {
  TrainConfig train;
  BoundSelection bounds;
  std::size_t dataset_seeds = 1;
  std::size_t run_seeds = 1;
  std::size_t compare_seeds = 10;
  std::vector<std::size_t> sweep_n;
  std::size_t stationary_burn_in = 0;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  bool dataset_seed_explicit = false;  // train.dataset_seed was given in the file
};

/// Sets the global seed. The run seed follows it, and so does the dataset seed
/// (dataset stream 0 of the seed) unless it was given explicitly.
void apply_seed(ExperimentConfig& cfg, std::uint64_t seed);

/// Parses a JSON document. Throws ConfigError listing offending keys or values.
ExperimentConfig parse_experiment_config(const std::string& json_text);

ExperimentConfig load_experiment_config(const std::string& path);

/// Bound names accepted in bounds.list, grouped by subcommand.
const std::vector<std::string>& trajectory_bound_names();
const std::vector<std::string>& terminal_bound_names();

}  // namespace gradnoise
