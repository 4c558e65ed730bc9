// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/config.hpp"

#include <algorithm>
#include <set>

#include "evimelody/digest.hpp"
#include "evimelody/errors.hpp"
#include "evimelody/random.hpp"
#include "evimelody/textio.hpp"

namespace evimelody::config {

namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

DomainSource domain_from_json(const nlohmann::json& j, const std::string& where, const std::filesystem::path& base,
                              bool is_target) {
  check_keys(j, {"manifest", "synthetic", "train", "validation", "test", "seed"}, where);
  const bool has_manifest = j.contains("manifest");
  const bool has_synth = j.contains("synthetic");
  if (has_manifest == has_synth) throw ConfigError(where + ": give exactly one of 'manifest' or 'synthetic'");
  DomainSource d;
  if (has_manifest) {
    for (const char* k : {"train", "validation", "test", "seed"}) {
      if (j.contains(k)) throw ConfigError(where + "." + k + " applies to synthetic domains only");
    }
    std::filesystem::path p = field<std::string>(j, "manifest", where);
    d.manifest = p.is_relative() && !base.empty() ? base / p : p;
    return d;
  }
  d.synthetic = dataio::synthetic_domain_from_json(j.at("synthetic"), is_target ? "target" : "source");
  d.train = is_target ? 400 : 128;
  d.validation = is_target ? 0 : 32;
  d.test = is_target ? 64 : 32;
  d.seed = is_target ? 2 : 1;
  if (j.contains("train")) d.train = field<std::size_t>(j, "train", where);
  if (j.contains("validation")) d.validation = field<std::size_t>(j, "validation", where);
  if (j.contains("test")) d.test = field<std::size_t>(j, "test", where);
  if (j.contains("seed")) d.seed = field<std::uint64_t>(j, "seed", where);
  if (d.train == 0) throw ConfigError(where + ".train must be positive");
  return d;
}

nlohmann::json domain_to_json(const DomainSource& d) {
  if (d.manifest) return {{"manifest", d.manifest->generic_string()}};
  return {{"synthetic", dataio::to_json(*d.synthetic)},
          {"train", d.train},
          {"validation", d.validation},
          {"test", d.test},
          {"seed", d.seed}};
}

ActiveConfig active_from_json(const nlohmann::json& j) {
  check_keys(j, {"criteria", "budgets", "seeds", "finetune", "voiced_only"}, "active");
  ActiveConfig a;
  if (j.contains("criteria")) {
    a.criteria.clear();
    for (const auto& name : field<std::vector<std::string>>(j, "criteria", "active")) {
      try {
        a.criteria.push_back(active::criterion_from_string(name));
      } catch (const std::exception& e) {
        throw ConfigError(std::string("active.criteria: ") + e.what());
      }
    }
  }
  if (j.contains("budgets")) a.budgets = field<std::vector<std::size_t>>(j, "budgets", "active");
  if (j.contains("seeds")) a.seeds = field<std::vector<std::uint64_t>>(j, "seeds", "active");
  if (j.contains("finetune")) a.finetune = active::finetune_config_from_json(j.at("finetune"));
  if (j.contains("voiced_only")) a.voiced_only = field<bool>(j, "voiced_only", "active");
  if (a.criteria.empty()) throw ConfigError("active.criteria must not be empty");
  if (a.seeds.empty()) throw ConfigError("active.seeds must not be empty");
  for (std::size_t i = 0; i < a.budgets.size(); ++i) {
    if (a.budgets[i] == 0) throw ConfigError("active.budgets must be positive");
    if (i > 0 && a.budgets[i] <= a.budgets[i - 1]) throw ConfigError("active.budgets must be strictly ascending");
  }
  return a;
}

}  // namespace

nlohmann::json to_json(const dataio::FeatureConfig& f) {
  return {{"fft_size", f.stft.fft_size}, {"hop", f.stft.hop}, {"n_freq", f.n_freq}, {"mel", f.mel}, {"n_mel", f.n_mel}};
}

dataio::FeatureConfig feature_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"fft_size", "hop", "n_freq", "mel", "n_mel"}, "features");
  dataio::FeatureConfig f;
  if (j.contains("fft_size")) f.stft.fft_size = field<int>(j, "fft_size", "features");
  if (j.contains("hop")) f.stft.hop = field<int>(j, "hop", "features");
  if (j.contains("n_freq")) f.n_freq = field<int>(j, "n_freq", "features");
  if (j.contains("mel")) f.mel = field<bool>(j, "mel", "features");
  if (j.contains("n_mel")) f.n_mel = field<int>(j, "n_mel", "features");
  if (f.stft.fft_size < 16 || (f.stft.fft_size & (f.stft.fft_size - 1)) != 0) {
    throw ConfigError("features.fft_size must be a power of two >= 16");
  }
  if (f.stft.hop < 1) throw ConfigError("features.hop must be positive");
  if (f.n_freq < 0 || f.n_freq > f.stft.n_freq()) throw ConfigError("features.n_freq out of range");
  if (f.n_mel < 1) throw ConfigError("features.n_mel must be positive");
  return f;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  check_keys(j, {"seed", "task", "model", "features", "training", "source", "target", "active", "out"}, "config");
  ExperimentConfig c;
  if (j.contains("model")) {
    if (j["model"].is_object() && j["model"].contains("seed")) throw ConfigError("model.seed: use the top-level seed");
    c.model = nn::model_config_from_json(j["model"]);
  }
  if (j.contains("training")) {
    if (j["training"].is_object() && j["training"].contains("seed")) {
      throw ConfigError("training.seed: use the top-level seed");
    }
    c.training = nn::train_config_from_json(j["training"]);
  }
  if (j.contains("task")) {
    try {
      c.model.task = nn::task_from_string(field<std::string>(j, "task", "config"));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("task: ") + e.what());
    }
  }
  if (j.contains("seed")) c.seed = field<std::uint64_t>(j, "seed", "config");
  set_seed(c, c.seed);

  if (j.contains("features")) {
    c.features = feature_config_from_json(j["features"]);
  } else if (c.model.input_bins < c.features.stft.n_freq()) {
    c.features.n_freq = c.model.input_bins;
  }
  if (c.features.model_input_bins() != c.model.input_bins) {
    throw ConfigError("features produce " + std::to_string(c.features.model_input_bins()) +
                      " bins but model.input_bins is " + std::to_string(c.model.input_bins));
  }
  c.model.validate();

  if (!j.contains("source")) throw ConfigError("config: 'source' is required");
  c.source = domain_from_json(j["source"], "source", base_dir, false);
  if (j.contains("target")) c.target = domain_from_json(j["target"], "target", base_dir, true);
  const PitchGrid grid = c.model.grid();
  if (c.source.synthetic) c.source.synthetic->validate(grid);
  if (c.target && c.target->synthetic) c.target->synthetic->validate(grid);

  if (j.contains("active")) c.active = active_from_json(j["active"]);
  if (j.contains("out")) {
    std::filesystem::path p = field<std::string>(j, "out", "config");
    c.out = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  } else if (!base_dir.empty()) {
    c.out = base_dir / c.out;
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j, path.parent_path());
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json model = nn::to_json(c.model);
  model.erase("seed");
  nlohmann::json training = nn::to_json(c.training);
  training.erase("seed");
  nlohmann::json crit = nlohmann::json::array();
  for (auto k : c.active.criteria) crit.push_back(active::to_string(k));
  nlohmann::json j{{"seed", c.seed},
                   {"model", model},
                   {"features", to_json(c.features)},
                   {"training", training},
                   {"source", domain_to_json(c.source)},
                   {"active",
                    {{"criteria", crit},
                     {"budgets", c.active.budgets},
                     {"seeds", c.active.seeds},
                     {"finetune", active::to_json(c.active.finetune)},
                     {"voiced_only", c.active.voiced_only}}},
                   {"out", c.out.generic_string()}};
  if (c.target) j["target"] = domain_to_json(*c.target);
  return j;
}

void set_task(ExperimentConfig& c, nn::Task task) { c.model.task = task; }

void set_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.model.seed = seed;
  c.training.seed = seed;
}

std::string digest(const nlohmann::json& j) { return sha256_hex(j.dump()); }

std::string config_digest(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("out");
  return digest(j);
}

DomainData load_domain(const DomainSource& source, const PitchGrid& grid, const dataio::FeatureConfig& features,
                       const std::string& prefix) {
  DomainData d;
  if (source.synthetic) {
    d.train = dataio::generate_labeled_clips(*source.synthetic, source.train, mix_seed(source.seed, 0),
                                             prefix + "_train", grid, features);
    d.validation = dataio::generate_labeled_clips(*source.synthetic, source.validation, mix_seed(source.seed, 1),
                                                  prefix + "_val", grid, features);
    d.test = dataio::generate_labeled_clips(*source.synthetic, source.test, mix_seed(source.seed, 2),
                                            prefix + "_test", grid, features);
    return d;
  }
  const dataio::DatasetManifest manifest = dataio::load_manifest(*source.manifest);
  const std::vector<dataio::Split> splits = dataio::build_splits(manifest, manifest.ratios, manifest.seed);
  std::vector<dataio::ManifestEntry> parts[3];
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    parts[static_cast<int>(splits[i])].push_back(manifest.entries[i]);
  }
  d.train = dataio::load_corpus(parts[static_cast<int>(dataio::Split::kTrain)], grid, features);
  d.validation = dataio::load_corpus(parts[static_cast<int>(dataio::Split::kValidation)], grid, features);
  d.test = dataio::load_corpus(parts[static_cast<int>(dataio::Split::kTest)], grid, features);
  return d;
}

}  // namespace evimelody::config
