// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration: one JSON document drives train, eval and curve runs.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "evimelody/active.hpp"
#include "evimelody/dataio.hpp"
#include "evimelody/nn/model.hpp"
#include "evimelody/nn/trainer.hpp"

namespace evimelody::config {

/// A corpus given either by a manifest or by a synthetic domain plus split sizes.
/// For a target domain the train split is the unlabeled selection pool.
struct DomainSource {
  std::optional<std::filesystem::path> manifest;
  std::optional<dataio::SyntheticDomain> synthetic;
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
  std::uint64_t seed = 0;
};

struct ActiveConfig {
  std::vector<active::Criterion> criteria{active::Criterion::kEpistemic, active::Criterion::kAleatoric,
                                          active::Criterion::kRandom};
  std::vector<std::size_t> budgets{25, 50, 100, 200};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  active::FinetuneConfig finetune;
  bool voiced_only = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  nn::ModelConfig model;
  dataio::FeatureConfig features;
  nn::TrainConfig training;
  DomainSource source;
  std::optional<DomainSource> target;
  ActiveConfig active;
  std::filesystem::path out = "out";
};

/// Relative manifest and output paths resolve against `base_dir`. Unknown keys, missing
/// required fields and inconsistent settings raise ConfigError naming the field.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Fully resolved form with every default spelled out.
nlohmann::json to_json(const ExperimentConfig& config);

/// Sets the task and the seed everywhere they are used.
void set_task(ExperimentConfig& config, nn::Task task);
void set_seed(ExperimentConfig& config, std::uint64_t seed);

/// SHA-256 of the canonical JSON dump (sorted keys, no whitespace).
std::string digest(const nlohmann::json& j);
std::string config_digest(const ExperimentConfig& config);

nlohmann::json to_json(const dataio::FeatureConfig& features);
dataio::FeatureConfig feature_config_from_json(const nlohmann::json& j);

struct DomainData {
  std::vector<dataio::LabeledClip> train;
  std::vector<dataio::LabeledClip> validation;
  std::vector<dataio::LabeledClip> test;
};

/// Generates or loads and featurizes a domain. `prefix` names synthetic clip ids.
DomainData load_domain(const DomainSource& source, const PitchGrid& grid, const dataio::FeatureConfig& features,
                       const std::string& prefix);

}  // namespace evimelody::config
