// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/active.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "evimelody/errors.hpp"
#include "evimelody/random.hpp"
#include "evimelody/textio.hpp"

namespace evimelody::active {

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::kEpistemic: return "epistemic";
    case Criterion::kAleatoric: return "aleatoric";
    case Criterion::kTcpConfidence: return "tcp_confidence";
    case Criterion::kPredictedVariance: return "predicted_variance";
    case Criterion::kRandom: return "random";
  }
  return "?";
}

Criterion criterion_from_string(const std::string& name) {
  for (Criterion c : {Criterion::kEpistemic, Criterion::kAleatoric, Criterion::kTcpConfidence,
                      Criterion::kPredictedVariance, Criterion::kRandom}) {
    if (to_string(c) == name) return c;
  }
  throw ConfigError("unknown selection criterion '" + name + "'");
}

void check_compatible(Criterion criterion, nn::Task task) {
  bool ok = true;
  switch (criterion) {
    case Criterion::kEpistemic:
    case Criterion::kAleatoric:
      ok = task == nn::Task::kM1 || task == nn::Task::kM2 || task == nn::Task::kR1 || task == nn::Task::kR2;
      break;
    case Criterion::kTcpConfidence: ok = task == nn::Task::kTcp; break;
    case Criterion::kPredictedVariance: ok = task == nn::Task::kBetaNll; break;
    case Criterion::kRandom: break;
  }
  if (!ok) {
    throw ConfigError("criterion " + to_string(criterion) + " is not available for a " + nn::to_string(task) +
                      " model");
  }
}

std::vector<SampleScore> score_samples(nn::Model& model, const SamplePool& pool, Criterion criterion,
                                       const ScoreOptions& options) {
  if (pool.size() == 0) throw ArgumentError("cannot score an empty pool");
  check_compatible(criterion, model.config().task);
  std::vector<SampleScore> scores(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    scores[i].sample_id = pool.sample_id(i);
    scores[i].criterion = criterion;
  }

  if (criterion == Criterion::kRandom) {
    Rng rng(options.seed);
    for (auto& s : scores) s.score = rng.uniform();
  } else {
    std::vector<const dsp::FeatureClip*> feats(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) feats[i] = &pool.features(i);
    const auto preds = nn::predict(model, std::span<const dsp::FeatureClip* const>(feats), options.batch_size);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& f : preds[i]) {
        if (options.voiced_only && f.voicing_prob < 0.5) continue;
        switch (criterion) {
          case Criterion::kEpistemic: sum += f.uncertainty.epistemic; break;
          case Criterion::kAleatoric: sum += f.uncertainty.aleatoric; break;
          case Criterion::kTcpConfidence: sum += f.confidence; break;
          case Criterion::kPredictedVariance: sum += f.variance; break;
          case Criterion::kRandom: break;
        }
        ++n;
      }
      const double mean = n > 0 ? sum / static_cast<double>(n) : 0.0;
      scores[i].score = criterion == Criterion::kTcpConfidence ? (n > 0 ? 1.0 - mean : 0.0) : mean;
      if (!std::isfinite(scores[i].score)) {
        throw NumericError("non-finite " + to_string(criterion) + " score for sample " + scores[i].sample_id);
      }
    }
  }

  std::stable_sort(scores.begin(), scores.end(), [](const SampleScore& a, const SampleScore& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.sample_id < b.sample_id;
  });
  return scores;
}

std::vector<std::string> select_top_k(std::span<const SampleScore> scores, std::size_t k) {
  if (k > scores.size()) {
    throw ArgumentError("cannot select " + std::to_string(k) + " samples from a pool of " +
                        std::to_string(scores.size()));
  }
  std::vector<const SampleScore*> order;
  for (const auto& s : scores) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(), [](const SampleScore* a, const SampleScore* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->sample_id < b->sample_id;
  });
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < k; ++i) ids.push_back(order[i]->sample_id);
  return ids;
}

nlohmann::json to_json(const FinetuneConfig& c) {
  return {{"epochs", c.epochs}, {"lr", c.lr}, {"batch_size", c.batch_size}, {"cosine_lr", c.cosine_lr}};
}

FinetuneConfig finetune_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("finetune config must be a JSON object");
  static const std::set<std::string> known{"epochs", "lr", "batch_size", "cosine_lr"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("finetune: unknown key '" + key + "'");
  }
  FinetuneConfig c;
  try {
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("cosine_lr")) c.cosine_lr = j.at("cosine_lr").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("finetune: ") + e.what());
  }
  if (c.epochs < 0) throw ConfigError("finetune.epochs must be >= 0");
  if (!(c.lr > 0.0)) throw ConfigError("finetune.lr must be > 0");
  if (c.batch_size < 1) throw ConfigError("finetune.batch_size must be >= 1");
  return c;
}

nn::Checkpoint finetune(const nn::Checkpoint& base, nn::Task task, const std::vector<dataio::LabeledClip>& selected,
                        const FinetuneConfig& config, const nn::TrainConfig& loss_config, std::uint64_t seed) {
  if (base.config.task != task) {
    throw ConfigError("base checkpoint was trained for " + nn::to_string(base.config.task) +
                      " but the configured task is " + nn::to_string(task));
  }
  if (selected.empty()) throw ArgumentError("fine-tuning needs at least one selected sample");
  nn::Model model(base.config);
  nn::restore(model, base);
  nn::TrainConfig tc = loss_config;
  tc.epochs = config.epochs;
  tc.lr = config.lr;
  tc.batch_size = config.batch_size;
  tc.cosine_lr = config.cosine_lr;
  tc.seed = seed;
  if (config.epochs == 0) tc.tcp_confidence_epochs = 0;
  nn::TrainOptions options;
  options.config_digest = base.config_digest;
  nn::TrainResult result = nn::train(model, selected, {}, tc, options);
  result.best.epoch = config.epochs;
  return result.best;
}

std::string job_key(Criterion criterion, std::size_t budget, std::uint64_t seed) {
  return to_string(criterion) + "/" + std::to_string(budget) + "/" + std::to_string(seed);
}

std::vector<CurvePoint> adaptation_curve(const nn::Checkpoint& base, const SamplePool& pool,
                                         const std::vector<dataio::LabeledClip>& test, const CurveConfig& config,
                                         CurveJobCache* cache) {
  if (!std::is_sorted(config.budgets.begin(), config.budgets.end())) {
    throw ConfigError("curve budgets must be sorted ascending");
  }
  if (test.empty()) throw ArgumentError("target test set is empty");
  for (Criterion c : config.criteria) check_compatible(c, base.config.task);
  for (std::size_t b : config.budgets) {
    if (b > pool.size()) {
      throw ConfigError("budget " + std::to_string(b) + " exceeds the pool of " + std::to_string(pool.size()));
    }
  }

  nn::Model base_model(base.config);
  nn::restore(base_model, base);
  metrics::Scores base_scores;
  bool have_base = false;
  auto cached = [&](const std::string& key, auto&& compute) {
    if (cache) {
      if (auto hit = cache->lookup(key)) return *hit;
    }
    metrics::Scores s = compute();
    if (cache) cache->store(key, s);
    return s;
  };

  std::vector<CurvePoint> rows;
  for (Criterion criterion : config.criteria) {
    rows.push_back({criterion, 0, 0, cached(job_key(criterion, 0, 0), [&] {
                      if (!have_base) {
                        base_scores = nn::evaluate(base_model, test).mean;
                        have_base = true;
                      }
                      return base_scores;
                    })});
    for (std::size_t budget : config.budgets) {
      if (budget == 0) continue;
      for (std::uint64_t seed : config.seeds) {
        const metrics::Scores s = cached(job_key(criterion, budget, seed), [&] {
          ScoreOptions so = config.scoring;
          so.seed = seed;
          const auto scores = score_samples(base_model, pool, criterion, so);
          const auto ids = select_top_k(scores, budget);
          const std::set<std::string> chosen(ids.begin(), ids.end());
          std::vector<dataio::LabeledClip> selected;
          for (std::size_t i = 0; i < pool.size(); ++i) {
            if (chosen.count(pool.sample_id(i))) selected.push_back(pool.labeled(i));
          }
          const nn::Checkpoint tuned =
              finetune(base, base.config.task, selected, config.finetune, config.loss, seed);
          nn::Model model(tuned.config);
          nn::restore(model, tuned);
          return nn::evaluate(model, test).mean;
        });
        rows.push_back({criterion, budget, seed, s});
      }
    }
  }
  return rows;
}

std::string curve_csv(std::span<const CurvePoint> points, const std::string& config_digest) {
  std::ostringstream out;
  out << "# config_digest: " << config_digest << "\n";
  out << "criterion,budget,seed,rpa,rca,oa\n";
  for (const auto& p : points) {
    out << to_string(p.criterion) << ',' << p.budget << ',' << p.seed << ',' << format_number(p.scores.rpa) << ','
        << format_number(p.scores.rca) << ',' << format_number(p.scores.oa) << "\n";
  }
  return out.str();
}

void write_curve_csv(const std::filesystem::path& path, std::span<const CurvePoint> points,
                     const std::string& config_digest) {
  write_text_file(path, curve_csv(points, config_digest));
}

}  // namespace evimelody::active
