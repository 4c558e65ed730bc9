// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "evimelody/errors.hpp"
#include "evimelody/random.hpp"
#include "evimelody/textio.hpp"

namespace evimelody::dataio {

namespace {

constexpr double kTimeEps = 1e-9;

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9)); }

}  // namespace

LabelFormat label_format_from_string(const std::string& name) {
  if (name == "time_hz_csv") return LabelFormat::kTimeHzCsv;
  if (name == "fixed_hop_hz") return LabelFormat::kFixedHopHz;
  throw ConfigError("unknown label_format '" + name + "'");
}

std::string to_string(LabelFormat format) {
  return format == LabelFormat::kTimeHzCsv ? "time_hz_csv" : "fixed_hop_hz";
}

LabelSeries parse_label_file(const std::filesystem::path& path, LabelFormat format, double hop_seconds) {
  if (format == LabelFormat::kFixedHopHz && !(hop_seconds > 0.0)) throw ConfigError("label hop must be > 0");
  const auto rows = read_csv_rows(path, format == LabelFormat::kTimeHzCsv ? 2 : 1);
  LabelSeries series;
  series.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const CsvRow& row = rows[i];
    LabelSample s;
    if (format == LabelFormat::kTimeHzCsv) {
      s.time = row.values[0];
      s.f0 = row.values[1];
    } else {
      s.time = static_cast<double>(i) * hop_seconds;
      s.f0 = row.values[0];
    }
    if (!std::isfinite(s.f0) || s.f0 < 0.0) throw ParseError(row.line, "f0 must be finite and >= 0");
    if (!std::isfinite(s.time)) throw ParseError(row.line, "time must be finite");
    if (!series.empty() && !(s.time > series.back().time)) {
      throw FormatError(path.string() + ": line " + std::to_string(row.line) + ": timestamps must increase");
    }
    series.push_back(s);
  }
  return series;
}

void write_label_csv(const std::filesystem::path& path, const LabelSeries& series) {
  std::string text;
  for (const auto& s : series) text += format_number(s.time) + "," + format_number(s.f0) + "\n";
  write_text_file(path, text);
}

std::vector<FrameTarget> align_labels(const LabelSeries& series, const PitchGrid& grid, TargetMode mode,
                                      int n_frames, double hop_seconds, double start_time) {
  std::vector<FrameTarget> targets(static_cast<std::size_t>(std::max(0, n_frames)));
  if (series.empty()) return targets;

  double spacing = hop_seconds;
  if (series.size() >= 2) {
    std::vector<double> gaps(series.size() - 1);
    for (std::size_t i = 1; i < series.size(); ++i) gaps[i - 1] = series[i].time - series[i - 1].time;
    std::nth_element(gaps.begin(), gaps.begin() + gaps.size() / 2, gaps.end());
    spacing = gaps[gaps.size() / 2];
  }
  const double reach = spacing / 2.0 + kTimeEps;

  for (int t = 0; t < n_frames; ++t) {
    const double time = start_time + t * hop_seconds;
    auto it = std::lower_bound(series.begin(), series.end(), time,
                               [](const LabelSample& s, double value) { return s.time < value; });
    const LabelSample* best = nullptr;
    double best_dist = 0.0;
    if (it != series.begin()) {
      best = &*(it - 1);
      best_dist = time - best->time;
    }
    if (it != series.end()) {
      const double d = it->time - time;
      if (best == nullptr || d < best_dist - kTimeEps) {
        best = &*it;
        best_dist = d;
      }
    }
    if (best == nullptr || best_dist > reach) continue;
    targets[t] = make_frame_target(grid, best->f0, mode);
  }
  return targets;
}

// ---------------------------------------------------------------------------

int FeatureConfig::model_input_bins() const {
  if (mel) return n_mel;
  return n_freq > 0 ? n_freq : stft.n_freq();
}

dsp::FeatureClip extract_features(const dsp::AudioBuffer& clip, const FeatureConfig& config) {
  dsp::FeatureClip features = dsp::log_magnitude_stft(clip, config.stft);
  if (config.mel) return dsp::mel_project(features, config.n_mel, config.stft);
  if (config.n_freq > 0) return dsp::truncate_frequency(features, config.n_freq);
  return features;
}

std::vector<double> LabeledClip::reference_f0() const {
  std::vector<double> f0(targets.size(), 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) f0[i] = targets[i].voiced ? targets[i].hz_value : 0.0;
  return f0;
}

LabeledClip make_labeled_clip(const dsp::AudioBuffer& clip, const LabelSeries& labels, const PitchGrid& grid,
                              const FeatureConfig& features, std::string source_id, std::string domain_tag) {
  LabeledClip out;
  out.features = extract_features(clip, features);
  out.targets = align_labels(labels, grid, TargetMode::kQuantizedCents, out.features.n_frames,
                             out.features.hop_seconds, 0.0);
  out.source_id = std::move(source_id);
  out.domain_tag = std::move(domain_tag);
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kValidation:
      return "validation";
    case Split::kTest:
      return "test";
  }
  return "train";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "validation") return Split::kValidation;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + name + "'");
}

namespace {

void check_ratios(const SplitRatios& r) {
  if (r.train < 0.0 || r.validation < 0.0 || r.test < 0.0) throw ConfigError("split ratios must be >= 0");
  if (std::abs(r.train + r.validation + r.test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

SplitRatios ratios_from_json(const nlohmann::json& j) {
  if (!j.is_array() || (j.size() != 2 && j.size() != 3)) {
    throw ConfigError("ratios: expected [train, test] or [train, validation, test]");
  }
  for (const auto& v : j) {
    if (!v.is_number()) throw ConfigError("ratios: expected numbers");
  }
  SplitRatios r;
  r.train = j[0].get<double>();
  if (j.size() == 2) {
    r.validation = 0.0;
    r.test = j[1].get<double>();
  } else {
    r.validation = j[1].get<double>();
    r.test = j[2].get<double>();
  }
  check_ratios(r);
  return r;
}

}  // namespace

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios) {
  check_ratios(ratios);
  const std::size_t test = std::min(n, round_half_up(n * ratios.test));
  const std::size_t tail = std::min(n, round_half_up(n * (ratios.test + ratios.validation)));
  const std::size_t validation = tail > test ? tail - test : 0;
  return {n - validation - test, validation, test};
}

std::vector<Split> build_splits(const DatasetManifest& manifest, const SplitRatios& ratios, std::uint64_t seed) {
  if (manifest.entries.empty()) throw ConfigError("manifest has no entries");
  check_ratios(ratios);

  std::vector<Split> assignment(manifest.entries.size(), Split::kTrain);
  std::vector<std::size_t> open;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    if (manifest.entries[i].split) {
      assignment[i] = *manifest.entries[i].split;
    } else {
      open.push_back(i);
    }
  }
  if (open.empty()) return assignment;

  if (manifest.group_by_domain) {
    std::vector<std::string> tags;
    for (std::size_t i : open) {
      const auto& tag = manifest.entries[i].domain_tag;
      if (std::find(tags.begin(), tags.end(), tag) == tags.end()) tags.push_back(tag);
    }
    auto sizes = split_sizes(tags.size(), ratios);
    const double shares[3] = {ratios.train, ratios.validation, ratios.test};
    const std::size_t positive = (shares[0] > 0) + (shares[1] > 0) + (shares[2] > 0);
    if (tags.size() >= positive) {
      for (int s = 1; s < 3; ++s) {
        if (shares[s] > 0.0 && sizes[s] == 0 && sizes[0] > 1) {
          --sizes[0];
          ++sizes[s];
        }
      }
    }
    std::vector<Split> tag_split(tags.size(), Split::kTrain);
    std::size_t g = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t c = 0; c < sizes[s]; ++c) tag_split[g++] = static_cast<Split>(s);
    }
    for (std::size_t i : open) {
      const auto pos = std::find(tags.begin(), tags.end(), manifest.entries[i].domain_tag) - tags.begin();
      assignment[i] = tag_split[pos];
    }
    return assignment;
  }

  Rng rng(seed);
  for (std::size_t i = open.size(); i > 1; --i) {
    std::swap(open[i - 1], open[rng.below(i)]);
  }
  const auto sizes = split_sizes(open.size(), ratios);
  std::size_t k = 0;
  for (int s = 0; s < 3; ++s) {
    for (std::size_t c = 0; c < sizes[s]; ++c) assignment[open[k++]] = static_cast<Split>(s);
  }
  return assignment;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("entries") || !j["entries"].is_array()) {
    throw ConfigError(path.string() + ": manifest needs an 'entries' array");
  }
  const auto base = path.parent_path();
  DatasetManifest m;
  for (const auto& e : j["entries"]) {
    if (!e.is_object() || !e.contains("audio") || !e.contains("labels")) {
      throw ConfigError(path.string() + ": each entry needs 'audio' and 'labels'");
    }
    ManifestEntry entry;
    entry.audio = e["audio"].get<std::string>();
    entry.labels = e["labels"].get<std::string>();
    if (entry.audio.is_relative()) entry.audio = base / entry.audio;
    if (entry.labels.is_relative()) entry.labels = base / entry.labels;
    entry.domain_tag = e.value("domain_tag", std::string("default"));
    entry.label_format = label_format_from_string(e.value("label_format", std::string("time_hz_csv")));
    if (e.contains("split")) entry.split = split_from_string(e["split"].get<std::string>());
    m.entries.push_back(std::move(entry));
  }
  if (j.contains("ratios")) m.ratios = ratios_from_json(j["ratios"]);
  m.seed = j.value("seed", std::uint64_t{0});
  m.group_by_domain = j.value("group_by_domain", false);
  m.config_digest = j.value("config_digest", std::string());
  return m;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  nlohmann::json entries = nlohmann::json::array();
  const auto base = path.parent_path();
  for (const auto& e : manifest.entries) {
    nlohmann::json item;
    item["audio"] = e.audio.lexically_relative(base).generic_string();
    item["labels"] = e.labels.lexically_relative(base).generic_string();
    item["domain_tag"] = e.domain_tag;
    item["label_format"] = to_string(e.label_format);
    if (e.split) item["split"] = to_string(*e.split);
    entries.push_back(std::move(item));
  }
  nlohmann::json j;
  j["entries"] = std::move(entries);
  j["ratios"] = {manifest.ratios.train, manifest.ratios.validation, manifest.ratios.test};
  j["seed"] = manifest.seed;
  j["group_by_domain"] = manifest.group_by_domain;
  if (!manifest.config_digest.empty()) j["config_digest"] = manifest.config_digest;
  write_text_file(path, j.dump(2) + "\n");
}

std::vector<LabeledClip> load_corpus(const std::vector<ManifestEntry>& entries, const PitchGrid& grid,
                                     const FeatureConfig& features) {
  std::vector<LabeledClip> clips;
  for (const auto& entry : entries) {
    const LabelSeries labels = parse_label_file(entry.labels, entry.label_format);
    const dsp::AudioBuffer audio = dsp::standardize(dsp::read_wav(entry.audio));
    const auto segments = dsp::segment(audio, features.stft.clip_seconds);
    for (std::size_t i = 0; i < segments.size(); ++i) {
      LabeledClip clip;
      clip.features = extract_features(segments[i], features);
      clip.targets = align_labels(labels, grid, TargetMode::kQuantizedCents, clip.features.n_frames,
                                  clip.features.hop_seconds, static_cast<double>(i) * features.stft.clip_seconds);
      clip.source_id = entry.audio.stem().string() + "#" + std::to_string(i);
      clip.domain_tag = entry.domain_tag;
      clips.push_back(std::move(clip));
    }
  }
  return clips;
}

}  // namespace evimelody::dataio
