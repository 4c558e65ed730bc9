// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace evimelody::metrics {

inline constexpr double kDefaultToleranceCents = 50.0;

/// Fraction of reference-voiced frames whose estimate is voiced and within
/// `tolerance_cents`. 1.0 when the reference has no voiced frame.
double rpa(std::span<const double> ref, std::span<const double> est,
           double tolerance_cents = kDefaultToleranceCents);

/// As rpa, but octave errors are forgiven.
double rca(std::span<const double> ref, std::span<const double> est,
           double tolerance_cents = kDefaultToleranceCents);

/// Fraction of all frames with correct voicing and, when voiced, pitch within tolerance.
double oa(std::span<const double> ref, std::span<const double> est,
          double tolerance_cents = kDefaultToleranceCents);

struct Scores {
  double rpa = 0.0;
  double rca = 0.0;
  double oa = 0.0;
};

Scores evaluate(std::span<const double> ref, std::span<const double> est,
                double tolerance_cents = kDefaultToleranceCents);

/// Arithmetic mean of per-track scores.
Scores mean(std::span<const Scores> tracks);

struct TimedFrame {
  double time = 0.0;
  double f0 = 0.0;
};

/// Frame sequences as "time,f0" CSV with a header line.
void write_frames_csv(const std::filesystem::path& path, std::span<const TimedFrame> frames);
std::vector<TimedFrame> read_frames_csv(const std::filesystem::path& path);

}  // namespace evimelody::metrics
