#pragma once

// Experiment configuration and its JSON form.
//
// Every section is optional in the document; absent keys keep their defaults
// and unknown keys are rejected. Validation errors name the field as
// "section.key".

#include <cstddef>
#include <cstdint>
#include <string>

#include "spattn/data.hpp"
#include "spattn/model.hpp"

namespace spattn {

struct PruneConfig {
  PruneMode mode = PruneMode::kDifferentiable;
  double ratio = 0.45;  // target soft-mask mean R
  double temperature = 0.01;
  double lambda_sp = 1.0;
  std::size_t phase1_steps = 2000;
  std::size_t total_steps = 10000;
  /// false runs the "without hard masks" ablation: soft masks throughout
  /// training and inference.
  bool hard_phase = true;

  void validate() const;
  bool operator==(const PruneConfig&) const = default;
};

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
  std::size_t batch_size = 16;
  std::size_t eval_every = 250;

  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

struct ExperimentConfig {
  ModelConfig model;
  PruneConfig prune;
  OptimConfig optim;
  DataSpec data;
  std::uint64_t seed = 1;
  std::string output_dir = "run";

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

PruneMode parse_prune_mode(const std::string& s);
PruneScope parse_prune_scope(const std::string& s);

/// Parses and validates a JSON document; throws ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
/// Canonical JSON with every field written out.
std::string to_json(const ExperimentConfig& config);

}  // namespace spattn
