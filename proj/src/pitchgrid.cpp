// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/pitchgrid.hpp"

#include <cmath>
#include <string>

#include "evimelody/errors.hpp"

namespace evimelody {

std::string_view to_string(TargetMode mode) {
  switch (mode) {
    case TargetMode::kClassBin:
      return "class_bin";
    case TargetMode::kQuantizedCents:
      return "quantized_cents";
    case TargetMode::kRawHz:
      return "raw_hz";
  }
  return "unknown";
}

PitchGrid::PitchGrid(double f_min, int n_bins, double cents_per_bin)
    : f_min_(f_min), n_bins_(n_bins), cents_per_bin_(cents_per_bin) {
  if (!(f_min > 0.0) || !std::isfinite(f_min)) throw ConfigError("pitch grid: f_min must be > 0");
  if (n_bins < 2) throw ConfigError("pitch grid: n_bins must be >= 2");
  if (!(cents_per_bin > 0.0) || !std::isfinite(cents_per_bin)) {
    throw ConfigError("pitch grid: cents_per_bin must be > 0");
  }
}

double PitchGrid::upper_edge_hz() const { return cents_to_hz(span_cents()); }

double PitchGrid::bin_to_hz(int k) const { return cents_to_hz(bin_to_cents(k)); }

double PitchGrid::bin_to_cents(int k) const {
  if (k < 0 || k >= n_bins_) {
    throw RangeError("bin index " + std::to_string(k) + " outside [0, " + std::to_string(n_bins_) + ")");
  }
  return k * cents_per_bin_;
}

double PitchGrid::hz_to_cents(double f) const {
  if (!(f > 0.0) || !std::isfinite(f)) throw DomainError("frequency must be finite and > 0");
  return 1200.0 * std::log2(f / f_min_);
}

double PitchGrid::cents_to_hz(double cents) const { return f_min_ * std::exp2(cents / 1200.0); }

int PitchGrid::hz_to_bin(double f) const {
  const double position = hz_to_cents(f) / cents_per_bin_;
  const double k = std::floor(position + 0.5);
  if (k <= 0.0) return 0;
  if (k >= n_bins_ - 1) return n_bins_ - 1;
  return static_cast<int>(k);
}

FrameTarget make_frame_target(const PitchGrid& grid, double f0, TargetMode /*mode*/) {
  if (!std::isfinite(f0) || f0 < 0.0) throw DomainError("f0 must be finite and >= 0");
  FrameTarget target;
  if (f0 == 0.0) return target;
  const int bin = grid.hz_to_bin(f0);
  target.voiced = true;
  target.bin_index = bin;
  target.cents_value = bin * grid.cents_per_bin();
  target.hz_value = f0;
  return target;
}

}  // namespace evimelody
