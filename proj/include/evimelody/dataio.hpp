// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "evimelody/dsp.hpp"
#include "evimelody/pitchgrid.hpp"

namespace evimelody::dataio {

// ---------------------------------------------------------------------------
// Labels

enum class LabelFormat { kTimeHzCsv, kFixedHopHz };

LabelFormat label_format_from_string(const std::string& name);
std::string to_string(LabelFormat format);

struct LabelSample {
  double time = 0.0;
  double f0 = 0.0;  // 0 = unvoiced
};
using LabelSeries = std::vector<LabelSample>;

/// time_hz_csv rows are "time,f0"; fixed_hop_hz rows hold one f0 per line at `hop_seconds`.
/// Negative f0 or malformed rows raise ParseError; non-increasing time raises FormatError.
LabelSeries parse_label_file(const std::filesystem::path& path, LabelFormat format, double hop_seconds = 0.010);

void write_label_csv(const std::filesystem::path& path, const LabelSeries& series);

/// Frame t (time start_time + t * hop) takes the nearest label sample, the earlier one on
/// ties. Frames farther than half the median label spacing from any sample are unvoiced.
std::vector<FrameTarget> align_labels(const LabelSeries& series, const PitchGrid& grid, TargetMode mode,
                                      int n_frames, double hop_seconds = 0.010, double start_time = 0.0);

// ---------------------------------------------------------------------------
// Clips and features

struct FeatureConfig {
  dsp::StftConfig stft;
  int n_freq = 0;  // keep the lowest n_freq STFT bins; 0 keeps all
  bool mel = false;
  int n_mel = 128;

  int model_input_bins() const;
};

dsp::FeatureClip extract_features(const dsp::AudioBuffer& clip, const FeatureConfig& config);

struct LabeledClip {
  dsp::FeatureClip features;
  std::vector<FrameTarget> targets;
  std::string source_id;
  std::string domain_tag;

  /// Ground-truth f0 per frame in Hz (0 for unvoiced).
  std::vector<double> reference_f0() const;
};

// ---------------------------------------------------------------------------
// Manifests and splits

enum class Split { kTrain, kValidation, kTest };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct ManifestEntry {
  std::filesystem::path audio;
  std::filesystem::path labels;
  std::string domain_tag;
  LabelFormat label_format = LabelFormat::kTimeHzCsv;
  std::optional<Split> split;
};

struct SplitRatios {
  double train = 0.7;
  double validation = 0.15;
  double test = 0.15;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  SplitRatios ratios;
  std::uint64_t seed = 0;
  bool group_by_domain = false;
  std::string config_digest;  // written when non-empty
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Seeded shuffle, then contiguous partition. Validation and test sizes are rounded
/// (half up) from cumulative counts taken from the end; train receives the remainder.
/// With group_by_domain the partition runs over domain tags in first-seen order and each
/// split with a positive ratio gets at least one group when there are enough groups.
/// Entries that carry an explicit split keep it.
std::vector<Split> build_splits(const DatasetManifest& manifest, const SplitRatios& ratios, std::uint64_t seed);

/// Sizes (train, validation, test) for n items under the rounding rule above.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios);

/// Loads, standardizes, segments and featurizes every entry; labels are aligned per clip.
std::vector<LabeledClip> load_corpus(const std::vector<ManifestEntry>& entries, const PitchGrid& grid,
                                     const FeatureConfig& features);

// ---------------------------------------------------------------------------
// Synthetic audio

struct SyntheticSpec {
  int n_harmonics = 6;
  double harmonic_decay = 0.6;
  double vibrato_depth = 0.0;  // cents
  double vibrato_rate = 5.0;   // Hz
  double noise_snr = 40.0;     // dB
  double accompaniment_level = 0.0;
  double pitch_min = 110.0;
  double pitch_max = 660.0;
  double voiced_fraction = 0.8;
  double note_rate = 2.0;  // notes per second

  /// Throws ConfigError naming the offending field.
  void validate(const PitchGrid& grid) const;
};

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticSpec& spec);

/// One second of 16 kHz mono audio and its exact f0 at a 10 ms hop.
std::pair<dsp::AudioBuffer, LabelSeries> generate_synthetic_clip(const SyntheticSpec& spec, std::uint64_t seed,
                                                                 const PitchGrid& grid = {});

/// A weighted mixture of synthetic specs; each clip draws one component.
struct SyntheticDomain {
  struct Component {
    std::string name;
    double weight = 1.0;
    SyntheticSpec spec;
  };
  std::vector<Component> components;

  void validate(const PitchGrid& grid) const;
};

/// Accepts a single spec object or {"mixture": [{"name", "weight", "spec"}, ...]}.
SyntheticDomain synthetic_domain_from_json(const nlohmann::json& j, const std::string& default_name);
nlohmann::json to_json(const SyntheticDomain& domain);

struct SyntheticClip {
  dsp::AudioBuffer audio;
  LabelSeries labels;
  std::string source_id;
  std::string domain_tag;
};

SyntheticClip generate_domain_clip(const SyntheticDomain& domain, std::uint64_t seed, std::size_t index,
                                   const std::string& id_prefix, const PitchGrid& grid);

/// Generates `count` clips in memory and featurizes them.
std::vector<LabeledClip> generate_labeled_clips(const SyntheticDomain& domain, std::size_t count, std::uint64_t seed,
                                                const std::string& id_prefix, const PitchGrid& grid,
                                                const FeatureConfig& features);

LabeledClip make_labeled_clip(const dsp::AudioBuffer& clip, const LabelSeries& labels, const PitchGrid& grid,
                              const FeatureConfig& features, std::string source_id, std::string domain_tag);

}  // namespace evimelody::dataio
