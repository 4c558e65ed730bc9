// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"

#include "evimelody/digest.hpp"
#include "evimelody/dsp.hpp"
#include "evimelody/errors.hpp"
#include "evimelody/nn/checkpoint.hpp"
#include "evimelody/textio.hpp"

namespace evimelody::cli {

namespace fs = std::filesystem;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

std::string log_csv(const std::vector<nn::EpochLog>& log, const std::string& digest) {
  std::ostringstream out;
  out << "# config_digest: " << digest << "\n";
  out << "epoch,train_loss,val_loss,val_oa,lambda_t\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << format_number(e.train_loss) << ',' << format_number(e.val_loss) << ','
        << format_number(e.val_oa) << ',' << format_number(e.lambda_t) << "\n";
  }
  return out.str();
}

std::vector<nn::EpochLog> read_log_csv(const fs::path& path) {
  std::vector<nn::EpochLog> log;
  for (const auto& row : read_csv_rows(path, 5)) {
    nn::EpochLog e;
    e.epoch = static_cast<int>(row.values[0]);
    e.train_loss = row.values[1];
    e.val_loss = row.values[2];
    e.val_oa = row.values[3];
    e.lambda_t = row.values[4];
    log.push_back(e);
  }
  return log;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

class FileJobCache : public active::CurveJobCache {
 public:
  FileJobCache(fs::path path, std::string digest, bool resume) : path_(std::move(path)), digest_(std::move(digest)) {
    if (!resume) {
      std::error_code ec;
      fs::remove(path_, ec);
      return;
    }
    if (!fs::exists(path_)) return;
    std::istringstream in(read_text_file(path_));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error&) {
        continue;  // torn final line of an interrupted run
      }
      if (j.value("config_digest", std::string()) != digest_) {
        throw ConfigError("job cache " + path_.string() + " was written under a different config digest");
      }
      metrics::Scores s{j.at("rpa").get<double>(), j.at("rca").get<double>(), j.at("oa").get<double>()};
      done_[j.at("key").get<std::string>()] = s;
    }
  }

  std::optional<metrics::Scores> lookup(const std::string& key) override {
    auto it = done_.find(key);
    if (it == done_.end()) return std::nullopt;
    return it->second;
  }

  void store(const std::string& key, const metrics::Scores& s) override {
    done_[key] = s;
    nlohmann::json j{{"config_digest", digest_}, {"key", key}, {"rpa", s.rpa}, {"rca", s.rca}, {"oa", s.oa}};
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    if (!out) throw IoError("cannot write " + path_.string());
    out << j.dump() << "\n";
  }

  std::size_t size() const { return done_.size(); }

 private:
  fs::path path_;
  std::string digest_;
  std::map<std::string, metrics::Scores> done_;
};

dataio::FeatureConfig features_for(const nn::ModelConfig& model) {
  dataio::FeatureConfig f;
  if (model.input_bins < f.stft.n_freq()) f.n_freq = model.input_bins;
  if (f.model_input_bins() != model.input_bins) {
    throw ConfigError("cannot derive features for model.input_bins " + std::to_string(model.input_bins) +
                      "; pass --config");
  }
  return f;
}

}  // namespace

std::string training_digest(const config::ExperimentConfig& c) {
  nlohmann::json j = config::to_json(c);
  j.erase("out");
  j.erase("active");
  j.erase("target");
  return config::digest(j);
}

fs::path cmd_synth(const dataio::SyntheticDomain& domain, const PitchGrid& grid, std::size_t count,
                   std::uint64_t seed, const fs::path& out_dir) {
  domain.validate(grid);
  ensure_dir(out_dir);
  const fs::path root = fs::absolute(out_dir);
  dataio::DatasetManifest manifest;
  manifest.seed = seed;
  manifest.config_digest = config::digest({{"domain", dataio::to_json(domain)},
                                           {"count", count},
                                           {"seed", seed},
                                           {"grid", {grid.f_min(), grid.n_bins(), grid.cents_per_bin()}}});
  for (std::size_t i = 0; i < count; ++i) {
    std::ostringstream stem;
    stem << "clip_" << std::setw(5) << std::setfill('0') << i;
    const dataio::SyntheticClip clip = dataio::generate_domain_clip(domain, seed, i, stem.str(), grid);
    dataio::ManifestEntry entry;
    entry.audio = root / (stem.str() + ".wav");
    entry.labels = root / (stem.str() + ".csv");
    entry.domain_tag = clip.domain_tag;
    dsp::write_wav(entry.audio, clip.audio);
    dataio::write_label_csv(entry.labels, clip.labels);
    manifest.entries.push_back(std::move(entry));
  }
  const fs::path path = root / "manifest.json";
  dataio::save_manifest(path, manifest);
  return path;
}

nn::TrainResult cmd_train(const config::ExperimentConfig& cfg, bool resume, std::ostream& log) {
  const std::string digest = training_digest(cfg);
  ensure_dir(cfg.out);
  const fs::path last_path = cfg.out / "last.ckpt";
  const fs::path best_path = cfg.out / "best.ckpt";
  const fs::path log_path = cfg.out / "train_log.csv";

  std::optional<nn::Checkpoint> last;
  std::optional<nn::Checkpoint> best;
  nn::TrainOptions options;
  options.config_digest = digest;
  if (resume) {
    if (!fs::exists(last_path)) throw IoError("nothing to resume: " + last_path.string() + " not found");
    last = nn::load_checkpoint(last_path);
    if (last->config_digest != digest) {
      throw ConfigError("config digest " + digest + " does not match checkpoint digest " + last->config_digest);
    }
    if (fs::exists(best_path)) best = nn::load_checkpoint(best_path);
    if (fs::exists(log_path)) options.history = read_log_csv(log_path);
    options.resume = &*last;
    options.resume_best = best ? &*best : nullptr;
  }

  const PitchGrid grid = cfg.model.grid();
  const config::DomainData data = config::load_domain(cfg.source, grid, cfg.features, "source");
  write_text_file(cfg.out / "config.json", config::to_json(cfg).dump(2) + "\n");

  std::vector<nn::EpochLog> history = options.history;
  if (last) {
    std::erase_if(history, [&](const nn::EpochLog& e) { return e.epoch > last->epoch; });
  }
  options.on_epoch = [&](const nn::EpochLog& e, const nn::Checkpoint& state, bool improved) {
    history.push_back(e);
    nn::save_checkpoint(last_path, state);
    if (improved) nn::save_checkpoint(best_path, state);
    write_text_file(log_path, log_csv(history, digest));
    log << "epoch " << e.epoch << " train_loss " << format_number(e.train_loss) << " val_loss "
        << format_number(e.val_loss) << " val_oa " << format_number(e.val_oa) << "\n";
  };

  nn::Model model(cfg.model);
  try {
    nn::TrainResult result = nn::train(model, data.train, data.validation, cfg.training, options);
    nn::save_checkpoint(best_path, result.best);
    write_text_file(log_path, log_csv(result.log, digest));
    return result;
  } catch (const nn::TrainingDiverged&) {
    write_text_file(log_path, log_csv(history, digest));
    throw;
  }
}

std::string metrics_csv(const std::vector<dataio::LabeledClip>& clips, const nn::Evaluation& ev,
                        const std::string& digest) {
  std::ostringstream out;
  out << "# config_digest: " << digest << "\n";
  out << "track,rpa,rca,oa\n";
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& s = ev.per_clip[i];
    out << clips[i].source_id << ',' << format_number(s.rpa) << ',' << format_number(s.rca) << ','
        << format_number(s.oa) << "\n";
  }
  out << "mean," << format_number(ev.mean.rpa) << ',' << format_number(ev.mean.rca) << ','
      << format_number(ev.mean.oa) << "\n";
  return out.str();
}

nn::Evaluation cmd_eval(const fs::path& checkpoint, const std::vector<dataio::LabeledClip>& test,
                        const fs::path& out_dir) {
  if (test.empty()) throw ArgumentError("test set is empty");
  const nn::Checkpoint ckpt = nn::load_checkpoint(checkpoint);
  nn::Model model(ckpt.config);
  nn::restore(model, ckpt);
  nn::Evaluation ev = nn::evaluate(model, test);
  ensure_dir(out_dir);
  write_text_file(out_dir / "metrics.csv", metrics_csv(test, ev, ckpt.config_digest));
  return ev;
}

std::string curve_plot_data(const std::vector<active::CurvePoint>& points, const std::string& digest) {
  std::ostringstream out;
  out << "# config_digest: " << digest << "\n";
  std::vector<active::Criterion> order;
  for (const auto& p : points) {
    if (std::find(order.begin(), order.end(), p.criterion) == order.end()) order.push_back(p.criterion);
  }
  for (std::size_t c = 0; c < order.size(); ++c) {
    if (c > 0) out << "\n\n";
    out << "# criterion " << active::to_string(order[c]) << "\n";
    out << "# budget median_rpa median_rca median_oa min_oa max_oa\n";
    std::map<std::size_t, std::vector<metrics::Scores>> by_budget;
    for (const auto& p : points) {
      if (p.criterion == order[c]) by_budget[p.budget].push_back(p.scores);
    }
    for (const auto& [budget, scores] : by_budget) {
      std::vector<double> rpa, rca, oa;
      for (const auto& s : scores) {
        rpa.push_back(s.rpa);
        rca.push_back(s.rca);
        oa.push_back(s.oa);
      }
      out << budget << ' ' << format_number(median(rpa)) << ' ' << format_number(median(rca)) << ' '
          << format_number(median(oa)) << ' ' << format_number(*std::min_element(oa.begin(), oa.end())) << ' '
          << format_number(*std::max_element(oa.begin(), oa.end())) << "\n";
    }
  }
  return out.str();
}

std::vector<active::CurvePoint> cmd_curve(const config::ExperimentConfig& cfg, const fs::path& checkpoint,
                                          bool resume, std::ostream& log) {
  if (!cfg.target) throw ConfigError("curve needs a 'target' domain in the config");
  for (auto c : cfg.active.criteria) active::check_compatible(c, cfg.model.task);
  const nn::Checkpoint base = nn::load_checkpoint(checkpoint);
  if (base.config_digest != training_digest(cfg)) {
    throw ConfigError("checkpoint " + checkpoint.string() + " was trained under digest " + base.config_digest +
                      ", config gives " + training_digest(cfg));
  }
  const std::string digest = config::config_digest(cfg);
  ensure_dir(cfg.out);
  const config::DomainData target = config::load_domain(*cfg.target, cfg.model.grid(), cfg.features, "target");
  if (target.test.empty()) throw ArgumentError("target test set is empty");
  write_text_file(cfg.out / "curve_config.json", config::to_json(cfg).dump(2) + "\n");

  FileJobCache cache(cfg.out / "curve_jobs.jsonl", digest, resume);
  if (cache.size() > 0) log << "resuming with " << cache.size() << " completed cells\n";
  active::CurveConfig cc;
  cc.criteria = cfg.active.criteria;
  cc.budgets = cfg.active.budgets;
  cc.seeds = cfg.active.seeds;
  cc.finetune = cfg.active.finetune;
  cc.loss = cfg.training;
  cc.scoring.voiced_only = cfg.active.voiced_only;
  cc.scoring.seed = cfg.seed;
  cc.scoring.batch_size = cfg.training.batch_size;
  active::ClipPool pool(target.train);
  std::vector<active::CurvePoint> points = active::adaptation_curve(base, pool, target.test, cc, &cache);
  active::write_curve_csv(cfg.out / "curve.csv", points, digest);
  write_text_file(cfg.out / "curve_plot.txt", curve_plot_data(points, digest));
  return points;
}

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Evidential melody estimation pipeline", "evimelody"};
  app.require_subcommand(1);

  std::string config_path, task, out_dir, checkpoint, manifest, spec_path, preset = "paper", domain = "source";
  std::string split = "test";
  std::optional<std::uint64_t> seed;
  std::size_t count = 10;
  bool resume = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic WAV + label corpus with a manifest");
  synth->add_option("--config", spec_path, "synthetic spec or mixture JSON")->required();
  synth->add_option("--count", count, "number of clips");
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--preset", preset, "pitch grid preset used for validation")
      ->check(CLI::IsMember({"paper", "desk", "tiny"}));

  auto* train = app.add_subcommand("train", "train a model on the source domain");
  train->add_option("--config", config_path, "experiment config JSON")->required();
  train->add_option("--task", task, "M1, M2, R1, R2, beta-nll or TCP");
  train->add_option("--seed", seed, "experiment seed");
  train->add_option("--out", out_dir, "output directory");
  train->add_flag("--resume", resume, "continue from last.ckpt in the output directory");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  auto* eval_manifest = eval->add_option("--manifest", manifest, "test manifest; every entry is evaluated");
  auto* eval_config = eval->add_option("--config", config_path, "experiment config JSON");
  eval_manifest->excludes(eval_config);
  eval->add_option("--domain", domain, "domain of the config to evaluate on")
      ->check(CLI::IsMember({"source", "target"}));
  eval->add_option("--split", split, "split of the config domain")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  eval->add_option("--out", out_dir, "output directory");

  auto* curve = app.add_subcommand("curve", "run the active-learning adaptation grid");
  curve->add_option("--config", config_path, "experiment config JSON")->required();
  curve->add_option("--checkpoint", checkpoint, "base checkpoint (default <out>/best.ckpt)");
  curve->add_option("--task", task, "task override, must match the checkpoint");
  curve->add_option("--seed", seed, "experiment seed");
  curve->add_option("--out", out_dir, "output directory");
  curve->add_flag("--resume", resume, "reuse completed cells from the job cache");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigFailure;
  }

  auto load_config = [&] {
    config::ExperimentConfig cfg = config::load_experiment_config(config_path);
    if (!task.empty()) {
      try {
        config::set_task(cfg, nn::task_from_string(task));
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError(std::string("--task: ") + e.what());
      }
    }
    if (seed) config::set_seed(cfg, *seed);
    if (!out_dir.empty()) cfg.out = out_dir;
    return cfg;
  };

  try {
    if (*synth) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(read_text_file(spec_path));
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(spec_path + ": " + e.what());
      }
      const dataio::SyntheticDomain dom = dataio::synthetic_domain_from_json(j, "synthetic");
      const nn::ModelConfig grid_cfg = preset == "desk"   ? nn::ModelConfig::desk_scale()
                                       : preset == "tiny" ? nn::ModelConfig::tiny()
                                                          : nn::ModelConfig::paper_scale();
      const fs::path path = cmd_synth(dom, grid_cfg.grid(), count, seed.value_or(0), out_dir);
      out << "wrote " << count << " clips and " << path.string() << "\n";
    } else if (*train) {
      const config::ExperimentConfig cfg = load_config();
      const nn::TrainResult r = cmd_train(cfg, resume, out);
      out << "best epoch " << r.best_epoch << ", checkpoint " << (cfg.out / "best.ckpt").string() << "\n";
    } else if (*eval) {
      std::vector<dataio::LabeledClip> clips;
      fs::path dest = out_dir.empty() ? fs::path(checkpoint).parent_path() : fs::path(out_dir);
      if (!config_path.empty()) {
        config::ExperimentConfig cfg = load_config();
        if (domain == "target" && !cfg.target) throw ConfigError("config has no target domain");
        config::DomainData d = config::load_domain(domain == "target" ? *cfg.target : cfg.source, cfg.model.grid(),
                                                   cfg.features, domain);
        clips = split == "train" ? std::move(d.train) : split == "validation" ? std::move(d.validation) : std::move(d.test);
        if (out_dir.empty()) dest = cfg.out;
      } else if (!manifest.empty()) {
        const nn::Checkpoint ckpt = nn::load_checkpoint(checkpoint);
        const dataio::DatasetManifest m = dataio::load_manifest(manifest);
        clips = dataio::load_corpus(m.entries, ckpt.config.grid(), features_for(ckpt.config));
      } else {
        throw ConfigError("eval needs --manifest or --config");
      }
      const nn::Evaluation ev = cmd_eval(checkpoint, clips, dest);
      out << "RPA " << format_number(ev.mean.rpa) << " RCA " << format_number(ev.mean.rca) << " OA "
          << format_number(ev.mean.oa) << " over " << clips.size() << " tracks\n";
    } else if (*curve) {
      const config::ExperimentConfig cfg = load_config();
      const fs::path ckpt = checkpoint.empty() ? cfg.out / "best.ckpt" : fs::path(checkpoint);
      const auto points = cmd_curve(cfg, ckpt, resume, out);
      out << "wrote " << points.size() << " rows to " << (cfg.out / "curve.csv").string() << "\n";
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

}  // namespace evimelody::cli
