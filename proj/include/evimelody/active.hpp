// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

// Uncertainty-driven sample selection and the budget/criterion/seed adaptation grid.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evimelody/dataio.hpp"
#include "evimelody/metrics.hpp"
#include "evimelody/nn/checkpoint.hpp"
#include "evimelody/nn/trainer.hpp"

namespace evimelody::active {

enum class Criterion { kEpistemic, kAleatoric, kTcpConfidence, kPredictedVariance, kRandom };

std::string to_string(Criterion criterion);
/// "epistemic", "aleatoric", "tcp_confidence", "predicted_variance", "random".
Criterion criterion_from_string(const std::string& name);

/// Throws ConfigError when the model task does not produce the criterion's signal.
void check_compatible(Criterion criterion, nn::Task task);

struct SampleScore {
  std::string sample_id;
  Criterion criterion = Criterion::kRandom;
  double score = 0.0;  // larger = selected first; tcp_confidence stores 1 - mean confidence
};

/// Target-domain clips. Features are what scoring sees; labels are reachable only through
/// labeled(), which fine-tuning uses for the selected samples.
class SamplePool {
 public:
  virtual ~SamplePool() = default;
  virtual std::size_t size() const = 0;
  virtual const std::string& sample_id(std::size_t i) const = 0;
  virtual const dsp::FeatureClip& features(std::size_t i) const = 0;
  virtual const dataio::LabeledClip& labeled(std::size_t i) const = 0;
};

class ClipPool : public SamplePool {
 public:
  explicit ClipPool(const std::vector<dataio::LabeledClip>& clips) : clips_(clips) {}
  std::size_t size() const override { return clips_.size(); }
  const std::string& sample_id(std::size_t i) const override { return clips_.at(i).source_id; }
  const dsp::FeatureClip& features(std::size_t i) const override { return clips_.at(i).features; }
  const dataio::LabeledClip& labeled(std::size_t i) const override { return clips_.at(i); }

 private:
  const std::vector<dataio::LabeledClip>& clips_;
};

struct ScoreOptions {
  bool voiced_only = false;  // average over predicted-voiced frames only
  std::uint64_t seed = 0;    // random criterion
  int batch_size = 16;
};

/// One score per clip: the mean per-frame uncertainty over all frames, ordered by score
/// descending, then sample_id ascending. Throws ArgumentError on an empty pool.
std::vector<SampleScore> score_samples(nn::Model& model, const SamplePool& pool, Criterion criterion,
                                       const ScoreOptions& options = {});

/// Ids of the k best-ranked samples under the score_samples ordering. Throws ArgumentError
/// when k exceeds the number of scores.
std::vector<std::string> select_top_k(std::span<const SampleScore> scores, std::size_t k);

struct FinetuneConfig {
  int epochs = 20;
  double lr = 1e-4;
  int batch_size = 16;
  bool cosine_lr = false;
};

nlohmann::json to_json(const FinetuneConfig& config);
FinetuneConfig finetune_config_from_json(const nlohmann::json& j);

/// Continues training from `base` on the selected clips only, with a fresh optimizer.
/// Throws ConfigError if the checkpoint task differs from `task`, ArgumentError if the
/// selection is empty.
nn::Checkpoint finetune(const nn::Checkpoint& base, nn::Task task, const std::vector<dataio::LabeledClip>& selected,
                        const FinetuneConfig& config, const nn::TrainConfig& loss_config, std::uint64_t seed);

struct CurvePoint {
  Criterion criterion = Criterion::kRandom;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  metrics::Scores scores;
};

/// Persisted results of completed grid cells, keyed by "criterion/budget/seed".
class CurveJobCache {
 public:
  virtual ~CurveJobCache() = default;
  virtual std::optional<metrics::Scores> lookup(const std::string& key) = 0;
  virtual void store(const std::string& key, const metrics::Scores& scores) = 0;
};

struct CurveConfig {
  std::vector<Criterion> criteria;
  std::vector<std::size_t> budgets;  // ascending; a 0 entry is implied
  std::vector<std::uint64_t> seeds;
  FinetuneConfig finetune;
  nn::TrainConfig loss;  // loss weights shared with base training
  ScoreOptions scoring;
};

/// For every criterion: a budget-0 row (seed 0) with the base model's metrics, then for
/// each positive budget and seed: select from the pool with the base model, fine-tune from
/// the base checkpoint, evaluate on `test`. Rows come out in (criterion, budget, seed) order.
std::vector<CurvePoint> adaptation_curve(const nn::Checkpoint& base, const SamplePool& pool,
                                         const std::vector<dataio::LabeledClip>& test, const CurveConfig& config,
                                         CurveJobCache* cache = nullptr);

std::string job_key(Criterion criterion, std::size_t budget, std::uint64_t seed);

/// CSV with header criterion,budget,seed,rpa,rca,oa preceded by a "# config_digest:" line.
void write_curve_csv(const std::filesystem::path& path, std::span<const CurvePoint> points,
                     const std::string& config_digest);
std::string curve_csv(std::span<const CurvePoint> points, const std::string& config_digest);

}  // namespace evimelody::active
