// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string_view>

namespace evimelody {

/// How a voiced frame is turned into a training target.
enum class TargetMode {
  kClassBin,         // M1 / TCP: categorical bin index
  kQuantizedCents,   // M2 / R2 / beta-NLL: bin center in cents above f_min
  kRawHz,            // R1: unquantized frequency in Hz
};

std::string_view to_string(TargetMode mode);

/// Logarithmic pitch lattice. Bin k is centered at f_min * 2^(k * cents_per_bin / 1200),
/// so f_min is the first center and the last bin ends one bin-width above its center.
class PitchGrid {
 public:
  PitchGrid() : PitchGrid(51.91, 384, 12.5) {}
  PitchGrid(double f_min, int n_bins, double cents_per_bin);

  double f_min() const { return f_min_; }
  int n_bins() const { return n_bins_; }
  double cents_per_bin() const { return cents_per_bin_; }

  double span_cents() const { return n_bins_ * cents_per_bin_; }
  double upper_edge_hz() const;

  /// Throws RangeError for k outside [0, n_bins).
  double bin_to_hz(int k) const;
  double bin_to_cents(int k) const;

  /// Cents above f_min. Throws DomainError for f <= 0.
  double hz_to_cents(double f) const;
  double cents_to_hz(double cents) const;

  /// Nearest bin, clamped to the grid. Exact half-way values go to the higher bin.
  int hz_to_bin(double f) const;

  bool operator==(const PitchGrid&) const = default;

 private:
  double f_min_;
  int n_bins_;
  double cents_per_bin_;
};

struct FrameTarget {
  bool voiced = false;
  std::optional<int> bin_index;
  std::optional<double> cents_value;
  double hz_value = 0.0;
};

/// f0 == 0 encodes an unvoiced frame. Voiced frames carry the bin index, the quantized
/// bin-center cents and the raw frequency; `mode` only selects which of them a task trains on.
/// Throws DomainError for negative or non-finite f0.
FrameTarget make_frame_target(const PitchGrid& grid, double f0, TargetMode mode);

}  // namespace evimelody
