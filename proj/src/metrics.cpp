// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "evimelody/errors.hpp"
#include "evimelody/textio.hpp"

namespace evimelody::metrics {

namespace {

void check_lengths(std::span<const double> ref, std::span<const double> est) {
  if (ref.size() != est.size()) throw ArgumentError("reference and estimate lengths differ");
}

double cents_between(double est, double ref) { return 1200.0 * std::log2(est / ref); }

double chroma_distance(double cents) {
  // Distance to the nearest whole number of octaves.
  const double wrapped = std::fmod(std::abs(cents), 1200.0);
  return std::min(wrapped, 1200.0 - wrapped);
}

template <typename Distance>
double voiced_hit_rate(std::span<const double> ref, std::span<const double> est, double tolerance,
                       Distance distance) {
  check_lengths(ref, est);
  std::size_t voiced = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (ref[i] <= 0.0) continue;
    ++voiced;
    if (est[i] > 0.0 && distance(cents_between(est[i], ref[i])) <= tolerance) ++hits;
  }
  if (voiced == 0) return 1.0;
  return static_cast<double>(hits) / static_cast<double>(voiced);
}

}  // namespace

double rpa(std::span<const double> ref, std::span<const double> est, double tolerance_cents) {
  return voiced_hit_rate(ref, est, tolerance_cents, [](double c) { return std::abs(c); });
}

double rca(std::span<const double> ref, std::span<const double> est, double tolerance_cents) {
  return voiced_hit_rate(ref, est, tolerance_cents, chroma_distance);
}

double oa(std::span<const double> ref, std::span<const double> est, double tolerance_cents) {
  check_lengths(ref, est);
  if (ref.empty()) return 1.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const bool ref_voiced = ref[i] > 0.0;
    const bool est_voiced = est[i] > 0.0;
    if (!ref_voiced && !est_voiced) {
      ++correct;
    } else if (ref_voiced && est_voiced && std::abs(cents_between(est[i], ref[i])) <= tolerance_cents) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ref.size());
}

Scores evaluate(std::span<const double> ref, std::span<const double> est, double tolerance_cents) {
  return {rpa(ref, est, tolerance_cents), rca(ref, est, tolerance_cents), oa(ref, est, tolerance_cents)};
}

Scores mean(std::span<const Scores> tracks) {
  Scores m;
  if (tracks.empty()) return m;
  for (const auto& s : tracks) {
    m.rpa += s.rpa;
    m.rca += s.rca;
    m.oa += s.oa;
  }
  const double n = static_cast<double>(tracks.size());
  m.rpa /= n;
  m.rca /= n;
  m.oa /= n;
  return m;
}

void write_frames_csv(const std::filesystem::path& path, std::span<const TimedFrame> frames) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "time,f0\n" << std::setprecision(17);
  for (const auto& f : frames) out << format_number(f.time) << ',' << format_number(f.f0) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<TimedFrame> read_frames_csv(const std::filesystem::path& path) {
  std::vector<TimedFrame> frames;
  for (const auto& row : read_csv_rows(path, 2)) frames.push_back({row.values[0], row.values[1]});
  return frames;
}

}  // namespace evimelody::metrics
