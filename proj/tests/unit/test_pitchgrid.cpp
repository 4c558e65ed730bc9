// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>

#include "doctest.h"

#include "evimelody/errors.hpp"
#include "evimelody/pitchgrid.hpp"
#include "evimelody/random.hpp"

using namespace evimelody;

namespace {

// Nearest center by exhaustive search in long double.
int brute_nearest_bin(const PitchGrid& g, double f) {
  int best = 0;
  long double best_d = std::numeric_limits<long double>::infinity();
  for (int k = 0; k < g.n_bins(); ++k) {
    const long double c = 1200.0L * std::log2(static_cast<long double>(f) / g.f_min());
    const long double d = std::fabs(c - k * static_cast<long double>(g.cents_per_bin()));
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("bin centers") {
  const PitchGrid g;
  CHECK(g.bin_to_hz(0) == doctest::Approx(51.91).epsilon(1e-12));
  CHECK(g.bin_to_hz(296) == doctest::Approx(439.93).epsilon(1e-4));
  CHECK(g.bin_to_hz(383) == doctest::Approx(824.63).epsilon(1e-4));
  CHECK(brute_nearest_bin(g, g.bin_to_hz(296)) == 296);
  CHECK_THROWS_AS(g.bin_to_hz(-1), RangeError);
  CHECK_THROWS_AS(g.bin_to_hz(384), RangeError);
}

TEST_CASE("upper edge") {
  const PitchGrid g;
  CHECK(std::fabs(g.bin_to_hz(383) * std::exp2(12.5 / 1200.0) - 830.61) < 0.1);
  CHECK(std::fabs(g.upper_edge_hz() - 830.61) < 0.1);
  CHECK(g.span_cents() == 4800.0);
}

TEST_CASE("cents") {
  const PitchGrid g;
  CHECK(g.hz_to_cents(51.91) == 0.0);
  CHECK(g.hz_to_cents(103.82) == doctest::Approx(1200.0).epsilon(1e-12));
  const long double expect = 1200.0L * std::log2(440.0L / 51.91L);
  CHECK(g.hz_to_cents(440.0) == doctest::Approx(static_cast<double>(expect)).epsilon(1e-12));
  CHECK(g.hz_to_cents(440.0) == doctest::Approx(3700.3).epsilon(1e-4));
  CHECK_THROWS_AS(g.hz_to_cents(0.0), DomainError);
  CHECK_THROWS_AS(g.hz_to_cents(-3.0), DomainError);
  CHECK(g.cents_to_hz(g.hz_to_cents(317.0)) == doctest::Approx(317.0).epsilon(1e-12));
}

TEST_CASE("hz to bin") {
  const PitchGrid g;
  CHECK(g.hz_to_bin(51.91) == 0);
  CHECK(g.hz_to_bin(440.0) == 296);
  CHECK(g.hz_to_bin(440.0) == brute_nearest_bin(g, 440.0));
  CHECK(g.hz_to_bin(2000.0) == 383);
  CHECK(g.hz_to_bin(20.0) == 0);
  CHECK_THROWS_AS(g.hz_to_bin(0.0), DomainError);

  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const double f = g.f_min() * std::exp2(rng.uniform(0.0, 4790.0 / 1200.0));
    REQUIRE(g.hz_to_bin(f) == brute_nearest_bin(g, f));
  }
}

TEST_CASE("half-way rounds up") {
  const PitchGrid g(100.0, 10, 100.0);
  // 250 cents is exactly between bins 2 and 3; 2^(250/1200) is not exact in binary, so
  // build the frequency from cents and check the grid's own cents value first.
  const double f = g.cents_to_hz(250.0);
  if (g.hz_to_cents(f) == 250.0) CHECK(g.hz_to_bin(f) == 3);
  CHECK(g.hz_to_bin(g.cents_to_hz(249.999)) == 2);
  CHECK(g.hz_to_bin(g.cents_to_hz(250.001)) == 3);
  const PitchGrid octave(100.0, 4, 1200.0);
  CHECK(octave.hz_to_bin(100.0 * std::sqrt(2.0)) == 1);
}

TEST_CASE("round trip over every bin") {
  const PitchGrid g;
  for (int k = 0; k < g.n_bins(); ++k) REQUIRE(g.hz_to_bin(g.bin_to_hz(k)) == k);
}

TEST_CASE("monotone and bounded quantization error") {
  const PitchGrid g;
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const double a = rng.uniform(52.0, 820.0);
    const double b = rng.uniform(52.0, 820.0);
    if (a < b) REQUIRE(g.hz_to_cents(a) < g.hz_to_cents(b));
    const int k = g.hz_to_bin(a);
    REQUIRE(std::fabs(g.hz_to_cents(a) - k * 12.5) <= 6.25 + 1e-9);
  }
  for (int k = 1; k < g.n_bins(); ++k) REQUIRE(g.bin_to_hz(k) > g.bin_to_hz(k - 1));
}

TEST_CASE("grid construction rejects bad parameters") {
  CHECK_THROWS_AS(PitchGrid(0.0, 384, 12.5), ConfigError);
  CHECK_THROWS_AS(PitchGrid(50.0, 1, 12.5), ConfigError);
  CHECK_THROWS_AS(PitchGrid(50.0, 384, 0.0), ConfigError);
}

TEST_CASE("frame targets") {
  const PitchGrid g;
  const FrameTarget u = make_frame_target(g, 0.0, TargetMode::kQuantizedCents);
  CHECK_FALSE(u.voiced);
  CHECK_FALSE(u.bin_index.has_value());
  CHECK_FALSE(u.cents_value.has_value());
  CHECK(u.hz_value == 0.0);

  const FrameTarget c = make_frame_target(g, 440.0, TargetMode::kClassBin);
  CHECK(c.voiced);
  CHECK(*c.bin_index == 296);

  const FrameTarget q = make_frame_target(g, 440.0, TargetMode::kQuantizedCents);
  CHECK(*q.cents_value == 296 * 12.5);

  const FrameTarget r = make_frame_target(g, 440.0, TargetMode::kRawHz);
  CHECK(r.hz_value == 440.0);

  CHECK_THROWS_AS(make_frame_target(g, -1.0, TargetMode::kRawHz), DomainError);
  CHECK_THROWS_AS(make_frame_target(g, std::nan(""), TargetMode::kRawHz), DomainError);
}
