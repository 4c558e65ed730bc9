// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "doctest.h"

#include "evimelody/dataio.hpp"
#include "evimelody/dsp.hpp"
#include "evimelody/errors.hpp"
#include "evimelody/textio.hpp"

using namespace evimelody;
using namespace evimelody::dataio;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Interpolated spectral peak in Hz: parabola through the log-magnitude maximum.
double peak_hz(const dsp::FeatureClip& f, int t, double bin_hz) {
  int k = 1;
  for (int j = 1; j < f.n_freq - 1; ++j) {
    if (f.at(t, j) > f.at(t, k)) k = j;
  }
  const double a = std::log(std::expm1(f.at(t, k - 1)) + 1e-300);
  const double b = std::log(std::expm1(f.at(t, k)) + 1e-300);
  const double c = std::log(std::expm1(f.at(t, k + 1)) + 1e-300);
  const double denom = a - 2.0 * b + c;
  const double delta = denom != 0.0 ? 0.5 * (a - c) / denom : 0.0;
  return (k + delta) * bin_hz;
}

}  // namespace

TEST_CASE("label files") {
  TempDir dir("evimelody_labels");
  write_text_file(dir.path / "a.csv", "0.00,0\n0.01,440.0\n");
  const LabelSeries a = parse_label_file(dir.path / "a.csv", LabelFormat::kTimeHzCsv);
  REQUIRE(a.size() == 2);
  CHECK(a[0].time == 0.0);
  CHECK(a[0].f0 == 0.0);
  CHECK(a[1].f0 == 440.0);

  write_text_file(dir.path / "neg.csv", "0.00,0\n0.01,440.0\n0.02,-5\n");
  try {
    parse_label_file(dir.path / "neg.csv", LabelFormat::kTimeHzCsv);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  write_text_file(dir.path / "order.csv", "0.02,100\n0.01,100\n");
  CHECK_THROWS_AS(parse_label_file(dir.path / "order.csv", LabelFormat::kTimeHzCsv), FormatError);
  write_text_file(dir.path / "junk.csv", "0.00,abc\n");
  CHECK_THROWS_AS(parse_label_file(dir.path / "junk.csv", LabelFormat::kTimeHzCsv), ParseError);

  write_text_file(dir.path / "hop.txt", "0\n440\n");
  const LabelSeries h = parse_label_file(dir.path / "hop.txt", LabelFormat::kFixedHopHz, 0.010);
  REQUIRE(h.size() == 2);
  CHECK(h[1].time == doctest::Approx(0.010));
  CHECK(h[1].f0 == 440.0);

  write_label_csv(dir.path / "out.csv", a);
  const LabelSeries back = parse_label_file(dir.path / "out.csv", LabelFormat::kTimeHzCsv);
  CHECK(back.size() == 2);
  CHECK(back[1].f0 == 440.0);
  CHECK_THROWS_AS(parse_label_file(dir.path / "missing.csv", LabelFormat::kTimeHzCsv), IoError);
}

TEST_CASE("label alignment") {
  const PitchGrid g;
  LabelSeries ten, twenty;
  for (int i = 0; i < 100; ++i) ten.push_back({i * 0.01, 200.0 + i});
  for (int i = 0; i < 50; ++i) twenty.push_back({i * 0.02, 200.0 + i});
  const auto a = align_labels(ten, g, TargetMode::kRawHz, 100);
  REQUIRE(a.size() == 100);
  for (int t = 0; t < 100; ++t) REQUIRE(a[t].hz_value == 200.0 + t);

  const auto b = align_labels(twenty, g, TargetMode::kRawHz, 100);
  for (int t = 0; t < 98; ++t) REQUIRE(b[t].hz_value == 200.0 + t / 2);

  const auto empty = align_labels({}, g, TargetMode::kClassBin, 100);
  REQUIRE(empty.size() == 100);
  for (const auto& f : empty) REQUIRE_FALSE(f.voiced);

  // Frame at 0.01 s sits exactly between samples at 0.00 and 0.02; the earlier wins.
  const LabelSeries tie{{0.0, 100.0}, {0.02, 300.0}};
  CHECK(align_labels(tie, g, TargetMode::kRawHz, 2)[1].hz_value == 100.0);
}

TEST_CASE("synthetic clips") {
  const PitchGrid g;
  SyntheticSpec s;
  s.note_rate = 1.0;
  s.voiced_fraction = 1.0;
  s.noise_snr = 60.0;
  s.pitch_min = s.pitch_max = 440.0;
  const auto [audio, labels] = generate_synthetic_clip(s, 3, g);
  CHECK(audio.samples.size() == 16000);
  REQUIRE(labels.size() == 100);
  for (const auto& l : labels) REQUIRE(l.f0 == doctest::Approx(440.0).epsilon(1e-12));
  const dsp::FeatureClip f = dsp::log_magnitude_stft(audio);
  for (int t = 5; t < 95; ++t) {
    int k = 0;
    for (int j = 1; j < f.n_freq; ++j) {
      if (f.at(t, j) > f.at(t, k)) k = j;
    }
    REQUIRE(std::abs(k - 56) <= 1);
  }

  const auto again = generate_synthetic_clip(s, 3, g);
  CHECK(again.first.samples == audio.samples);

  SyntheticSpec silent = s;
  silent.voiced_fraction = 0.0;
  for (const auto& l : generate_synthetic_clip(silent, 4, g).second) REQUIRE(l.f0 == 0.0);

  SyntheticSpec bad;
  bad.pitch_max = 2000.0;
  try {
    generate_synthetic_clip(bad, 1, g);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("pitch_range") != std::string::npos);
  }
  bad = SyntheticSpec{};
  bad.voiced_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(g), ConfigError);
}

TEST_CASE("synthetic labels follow the spectral peak") {
  const PitchGrid g;
  SyntheticSpec s;
  s.note_rate = 1.0;
  s.noise_snr = 120.0;
  s.pitch_min = 110.0;
  s.pitch_max = 700.0;
  int voiced = 0, hits = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto [audio, labels] = generate_synthetic_clip(s, seed, g);
    const dsp::FeatureClip f = dsp::log_magnitude_stft(audio);
    // Frames whose analysis window lies inside the clip; edge frames see reflect padding.
    for (int t = 7; t <= 93; ++t) {
      if (labels[t].f0 <= 0.0) continue;
      ++voiced;
      const double est = peak_hz(f, t, 16000.0 / 2048.0);
      if (std::abs(1200.0 * std::log2(est / labels[t].f0)) <= 50.0) ++hits;
    }
  }
  REQUIRE(voiced > 0);
  CHECK(static_cast<double>(hits) / voiced >= 0.99);
}

TEST_CASE("domain json") {
  const nlohmann::json j = {{"mixture",
                             {{{"name", "a"}, {"weight", 2.0}, {"spec", {{"noise_snr", 10.0}}}},
                              {{"name", "b"}, {"spec", {{"harmonic_decay", 0.3}}}}}}};
  const SyntheticDomain d = synthetic_domain_from_json(j, "x");
  REQUIRE(d.components.size() == 2);
  CHECK(d.components[0].weight == 2.0);
  CHECK(d.components[1].spec.harmonic_decay == 0.3);
  CHECK(synthetic_domain_from_json(to_json(d), "x").components[0].spec.noise_snr == 10.0);
  CHECK_THROWS_AS(synthetic_domain_from_json({{"noise_snr", 1.0}, {"bogus", 2}}, "x"), ConfigError);
}

TEST_CASE("splits") {
  CHECK(split_sizes(10, {0.7, 0.15, 0.15}) == std::array<std::size_t, 3>{7, 1, 2});
  CHECK(split_sizes(10, {0.8, 0.0, 0.2}) == std::array<std::size_t, 3>{8, 0, 2});

  DatasetManifest m;
  for (int i = 0; i < 10; ++i) m.entries.push_back({"a" + std::to_string(i) + ".wav", "a.csv", "x", {}, {}});
  const auto s1 = build_splits(m, {0.7, 0.15, 0.15}, 7);
  const auto s2 = build_splits(m, {0.7, 0.15, 0.15}, 7);
  CHECK(s1 == s2);
  int counts[3] = {0, 0, 0};
  for (Split s : s1) ++counts[static_cast<int>(s)];
  CHECK(counts[0] == 7);
  CHECK(counts[1] == 1);
  CHECK(counts[2] == 2);

  DatasetManifest grouped;
  grouped.group_by_domain = true;
  for (int i = 0; i < 6; ++i) grouped.entries.push_back({"g.wav", "g.csv", i < 4 ? "A" : "B", {}, {}});
  const auto gs = build_splits(grouped, {0.5, 0.0, 0.5}, 1);
  std::set<Split> a_splits, b_splits;
  for (int i = 0; i < 6; ++i) (i < 4 ? a_splits : b_splits).insert(gs[i]);
  CHECK(a_splits.size() == 1);
  CHECK(b_splits.size() == 1);
  CHECK(*a_splits.begin() != *b_splits.begin());

  DatasetManifest pinned = m;
  pinned.entries[0].split = Split::kTest;
  CHECK(build_splits(pinned, {1.0, 0.0, 0.0}, 3)[0] == Split::kTest);

  CHECK_THROWS_AS(build_splits(DatasetManifest{}, {0.7, 0.15, 0.15}, 1), ConfigError);
  CHECK_THROWS_AS(build_splits(m, {0.7, 0.2, 0.2}, 1), ConfigError);
}

TEST_CASE("manifest round trip and corpus loading") {
  TempDir dir("evimelody_corpus");
  const PitchGrid g;
  SyntheticSpec s;
  s.pitch_max = 600.0;
  DatasetManifest m;
  m.seed = 5;
  m.config_digest = "abc";
  for (int i = 0; i < 3; ++i) {
    auto [audio, labels] = generate_synthetic_clip(s, i, g);
    // 1.5 s of audio: two clips after segmentation.
    audio.samples.resize(24000, 0.0);
    const auto wav = dir.path / ("c" + std::to_string(i) + ".wav");
    const auto csv = dir.path / ("c" + std::to_string(i) + ".csv");
    dsp::write_wav(wav, audio);
    write_label_csv(csv, labels);
    m.entries.push_back({wav, csv, "tag", LabelFormat::kTimeHzCsv, {}});
  }
  save_manifest(dir.path / "manifest.json", m);
  const DatasetManifest back = load_manifest(dir.path / "manifest.json");
  REQUIRE(back.entries.size() == 3);
  CHECK(back.entries[1].audio == m.entries[1].audio);
  CHECK(back.seed == 5);
  CHECK(back.config_digest == "abc");

  FeatureConfig fc;
  fc.n_freq = 257;
  const auto clips = load_corpus(back.entries, g, fc);
  REQUIRE(clips.size() == 6);
  for (const auto& c : clips) {
    CHECK(c.features.n_freq == 257);
    CHECK(c.targets.size() == static_cast<std::size_t>(c.features.n_frames));
    CHECK(c.domain_tag == "tag");
  }
  // The second segment lies past the labels; its frames are unvoiced.
  for (const auto& t : clips[1].targets) CHECK_FALSE(t.voiced);
}
