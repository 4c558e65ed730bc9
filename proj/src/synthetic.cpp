// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <string>

#include "evimelody/dataio.hpp"
#include "evimelody/errors.hpp"
#include "evimelody/random.hpp"

namespace evimelody::dataio {

namespace {

constexpr double kMelodyAmplitude = 0.5;
constexpr double kRampSeconds = 0.010;
constexpr double kLabelHop = 0.010;
constexpr int kLabelCount = 100;
constexpr int kHumHarmonics = 3;
constexpr double kHumMinHz = 55.0;
constexpr double kHumMaxHz = 110.0;

void require(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw ConfigError("synthetic spec: " + field + " " + rule);
}

}  // namespace

void SyntheticSpec::validate(const PitchGrid& grid) const {
  require(n_harmonics >= 1, "n_harmonics", "must be >= 1");
  require(harmonic_decay > 0.0 && harmonic_decay <= 1.0, "harmonic_decay", "must be in (0, 1]");
  require(vibrato_depth >= 0.0 && std::isfinite(vibrato_depth), "vibrato_depth", "must be >= 0");
  require(vibrato_rate >= 0.0 && std::isfinite(vibrato_rate), "vibrato_rate", "must be >= 0");
  require(std::isfinite(noise_snr), "noise_snr", "must be finite");
  require(accompaniment_level >= 0.0 && std::isfinite(accompaniment_level), "accompaniment_level", "must be >= 0");
  require(voiced_fraction >= 0.0 && voiced_fraction <= 1.0, "voiced_fraction", "must be in [0, 1]");
  require(note_rate > 0.0 && std::isfinite(note_rate), "note_rate", "must be > 0");
  require(pitch_min > 0.0 && pitch_min <= pitch_max, "pitch_range", "must satisfy 0 < min <= max");
  const double lo = pitch_min * std::exp2(-vibrato_depth / 1200.0);
  const double hi = pitch_max * std::exp2(vibrato_depth / 1200.0);
  require(lo >= grid.f_min() - 1e-9 && hi <= grid.upper_edge_hz() + 1e-9, "pitch_range",
          "(including vibrato) must lie within the pitch grid [" + std::to_string(grid.f_min()) + ", " +
              std::to_string(grid.upper_edge_hz()) + "] Hz");
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
  static const std::set<std::string> known = {"n_harmonics",         "harmonic_decay", "vibrato_depth",
                                              "vibrato_rate",        "noise_snr",      "accompaniment_level",
                                              "pitch_range",         "voiced_fraction", "note_rate"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("synthetic spec: unknown field '" + key + "'");
  }
  SyntheticSpec s;
  auto number = [&](const char* key, double& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) throw ConfigError(std::string("synthetic spec: ") + key + " must be a number");
    out = j[key].get<double>();
  };
  if (j.contains("n_harmonics")) {
    if (!j["n_harmonics"].is_number_integer()) throw ConfigError("synthetic spec: n_harmonics must be an integer");
    s.n_harmonics = j["n_harmonics"].get<int>();
  }
  number("harmonic_decay", s.harmonic_decay);
  number("vibrato_depth", s.vibrato_depth);
  number("vibrato_rate", s.vibrato_rate);
  number("noise_snr", s.noise_snr);
  number("accompaniment_level", s.accompaniment_level);
  number("voiced_fraction", s.voiced_fraction);
  number("note_rate", s.note_rate);
  if (j.contains("pitch_range")) {
    const auto& r = j["pitch_range"];
    if (!r.is_array() || r.size() != 2 || !r[0].is_number() || !r[1].is_number()) {
      throw ConfigError("synthetic spec: pitch_range must be [min_hz, max_hz]");
    }
    s.pitch_min = r[0].get<double>();
    s.pitch_max = r[1].get<double>();
  }
  return s;
}

nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"n_harmonics", s.n_harmonics},
          {"harmonic_decay", s.harmonic_decay},
          {"vibrato_depth", s.vibrato_depth},
          {"vibrato_rate", s.vibrato_rate},
          {"noise_snr", s.noise_snr},
          {"accompaniment_level", s.accompaniment_level},
          {"pitch_range", {s.pitch_min, s.pitch_max}},
          {"voiced_fraction", s.voiced_fraction},
          {"note_rate", s.note_rate}};
}

std::pair<dsp::AudioBuffer, LabelSeries> generate_synthetic_clip(const SyntheticSpec& spec, std::uint64_t seed,
                                                                 const PitchGrid& grid) {
  spec.validate(grid);
  constexpr int sr = dsp::kTargetSampleRate;
  constexpr int n = sr;
  Rng rng(seed);

  const double note_len = 1.0 / spec.note_rate;
  const int n_notes = static_cast<int>(std::ceil(spec.note_rate - 1e-12));
  struct Note {
    bool voiced;
    double base_hz;
  };
  std::vector<Note> notes(n_notes);
  const double log_lo = std::log(spec.pitch_min);
  const double log_hi = std::log(spec.pitch_max);
  for (auto& note : notes) {
    note.voiced = rng.uniform() < spec.voiced_fraction;
    note.base_hz = std::exp(rng.uniform(log_lo, log_hi));
  }
  const double vibrato_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double hum_hz = std::exp(rng.uniform(std::log(kHumMinHz), std::log(kHumMaxHz)));
  double hum_phase[kHumHarmonics];
  for (double& p : hum_phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);

  auto note_index = [&](double t) { return std::min(n_notes - 1, static_cast<int>(std::floor(t / note_len))); };
  auto f0_at = [&](double t) {
    const Note& note = notes[note_index(t)];
    if (!note.voiced) return 0.0;
    const double vib = spec.vibrato_depth * std::sin(2.0 * std::numbers::pi * spec.vibrato_rate * t + vibrato_phase);
    return note.base_hz * std::exp2(vib / 1200.0);
  };

  double harmonic_norm = 0.0;
  for (int h = 0; h < spec.n_harmonics; ++h) harmonic_norm += std::pow(spec.harmonic_decay, h);

  std::vector<double> melody(n, 0.0);
  std::vector<double> phases(spec.n_harmonics, 0.0);
  double voiced_power = 0.0;
  std::size_t voiced_samples = 0;
  for (int i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    const double f0 = f0_at(t);
    if (f0 <= 0.0) continue;
    const int k = note_index(t);
    const double start = k * note_len;
    const double end = std::min(1.0, (k + 1) * note_len);
    const double envelope = std::clamp(std::min(t - start, end - t) / kRampSeconds, 0.0, 1.0);
    double v = 0.0;
    double amp = 1.0;
    for (int h = 0; h < spec.n_harmonics; ++h, amp *= spec.harmonic_decay) {
      const double fh = (h + 1) * f0;
      phases[h] += 2.0 * std::numbers::pi * fh / sr;
      if (fh < 0.45 * sr) v += amp * std::sin(phases[h]);
    }
    melody[i] = kMelodyAmplitude * envelope * v / harmonic_norm;
    voiced_power += melody[i] * melody[i];
    ++voiced_samples;
  }

  const double ref_rms =
      voiced_samples > 0 ? std::sqrt(voiced_power / voiced_samples) : kMelodyAmplitude / std::sqrt(2.0);
  const double noise_std = ref_rms * std::pow(10.0, -spec.noise_snr / 20.0);

  dsp::AudioBuffer audio;
  audio.sample_rate = sr;
  audio.channels = 1;
  audio.samples.resize(n);
  for (int i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    double hum = 0.0;
    if (spec.accompaniment_level > 0.0) {
      double amp = 1.0;
      for (int h = 0; h < kHumHarmonics; ++h, amp *= 0.5) {
        hum += amp * std::sin(2.0 * std::numbers::pi * (h + 1) * hum_hz * t + hum_phase[h]);
      }
      hum *= spec.accompaniment_level * kMelodyAmplitude / 1.75;
    }
    audio.samples[i] = melody[i] + hum + noise_std * rng.normal();
  }
  double peak = 0.0;
  for (double s : audio.samples) peak = std::max(peak, std::abs(s));
  if (peak > 0.99) {
    for (double& s : audio.samples) s *= 0.99 / peak;
  }

  LabelSeries labels(kLabelCount);
  for (int i = 0; i < kLabelCount; ++i) {
    labels[i].time = i * kLabelHop;
    labels[i].f0 = f0_at(labels[i].time);
  }
  return {std::move(audio), std::move(labels)};
}

void SyntheticDomain::validate(const PitchGrid& grid) const {
  if (components.empty()) throw ConfigError("synthetic domain has no components");
  double total = 0.0;
  for (const auto& c : components) {
    if (!(c.weight > 0.0)) throw ConfigError("synthetic domain: component '" + c.name + "' weight must be > 0");
    c.spec.validate(grid);
    total += c.weight;
  }
  if (!std::isfinite(total)) throw ConfigError("synthetic domain: weights must be finite");
}

SyntheticDomain synthetic_domain_from_json(const nlohmann::json& j, const std::string& default_name) {
  SyntheticDomain domain;
  if (j.is_object() && j.contains("mixture")) {
    if (j.size() != 1) throw ConfigError("synthetic domain: 'mixture' must be the only key");
    const auto& m = j["mixture"];
    if (!m.is_array() || m.empty()) throw ConfigError("synthetic domain: mixture must be a non-empty array");
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto& c = m[i];
      if (!c.is_object() || !c.contains("spec")) throw ConfigError("synthetic domain: mixture items need 'spec'");
      for (const auto& [key, value] : c.items()) {
        if (key != "name" && key != "weight" && key != "spec") {
          throw ConfigError("synthetic domain: unknown mixture field '" + key + "'");
        }
      }
      SyntheticDomain::Component comp;
      comp.name = c.value("name", default_name + "_" + std::to_string(i));
      comp.weight = c.value("weight", 1.0);
      comp.spec = synthetic_spec_from_json(c["spec"]);
      domain.components.push_back(std::move(comp));
    }
  } else {
    domain.components.push_back({default_name, 1.0, synthetic_spec_from_json(j)});
  }
  return domain;
}

nlohmann::json to_json(const SyntheticDomain& domain) {
  if (domain.components.size() == 1) return to_json(domain.components.front().spec);
  nlohmann::json mixture = nlohmann::json::array();
  for (const auto& c : domain.components) {
    mixture.push_back({{"name", c.name}, {"weight", c.weight}, {"spec", to_json(c.spec)}});
  }
  return {{"mixture", mixture}};
}

SyntheticClip generate_domain_clip(const SyntheticDomain& domain, std::uint64_t seed, std::size_t index,
                                   const std::string& id_prefix, const PitchGrid& grid) {
  if (domain.components.empty()) throw ConfigError("synthetic domain has no components");
  const std::uint64_t clip_seed = mix_seed(seed, index);
  Rng pick(mix_seed(clip_seed, 0xC0FFEE));
  double total = 0.0;
  for (const auto& c : domain.components) total += c.weight;
  double u = pick.uniform() * total;
  std::size_t chosen = domain.components.size() - 1;
  for (std::size_t i = 0; i < domain.components.size(); ++i) {
    if (u < domain.components[i].weight) {
      chosen = i;
      break;
    }
    u -= domain.components[i].weight;
  }
  const auto& comp = domain.components[chosen];
  auto [audio, labels] = generate_synthetic_clip(comp.spec, clip_seed, grid);
  char id[32];
  std::snprintf(id, sizeof(id), "%05zu", index);
  return {std::move(audio), std::move(labels), id_prefix + "_" + id, comp.name};
}

std::vector<LabeledClip> generate_labeled_clips(const SyntheticDomain& domain, std::size_t count, std::uint64_t seed,
                                                const std::string& id_prefix, const PitchGrid& grid,
                                                const FeatureConfig& features) {
  domain.validate(grid);
  std::vector<LabeledClip> clips;
  clips.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticClip c = generate_domain_clip(domain, seed, i, id_prefix, grid);
    clips.push_back(make_labeled_clip(c.audio, c.labels, grid, features, c.source_id, c.domain_tag));
  }
  return clips;
}

}  // namespace evimelody::dataio
