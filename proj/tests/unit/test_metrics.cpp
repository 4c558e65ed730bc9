// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <random>
#include <vector>

#include "doctest.h"

#include "evimelody/errors.hpp"
#include "evimelody/metrics.hpp"
#include "oracles.hpp"

using namespace evimelody;
using namespace evimelody::metrics;

TEST_CASE("worked example") {
  const std::vector<double> ref{440.0, 220.0, 0.0};
  const std::vector<double> est{450.3, 440.0, 0.0};
  CHECK(rpa(ref, est) == 0.5);
  CHECK(rca(ref, est) == 1.0);
  CHECK(oa(ref, est) == doctest::Approx(2.0 / 3.0));
  const auto b = testing::brute_force_scores(ref, est);
  CHECK(b.rpa == 0.5);
  CHECK(b.rca == 1.0);
}

TEST_CASE("trivial cases") {
  const std::vector<double> ref{300.0, 0.0, 150.0, 151.0};
  CHECK(rpa(ref, ref) == 1.0);
  CHECK(oa(ref, ref) == 1.0);
  const std::vector<double> silent(4, 0.0);
  CHECK(rpa(ref, silent) == 0.0);
  CHECK(rpa(silent, silent) == 1.0);
  CHECK(oa(silent, silent) == 1.0);
  std::vector<double> up;
  for (double f : ref) up.push_back(2.0 * f);
  CHECK(rca(ref, up) == 1.0);
  CHECK(rpa(ref, up) == 0.0);
  const std::vector<double> shorter{1.0};
  CHECK_THROWS_AS(rpa(ref, shorter), ArgumentError);
  CHECK_THROWS_AS(oa(ref, shorter), ArgumentError);
}

TEST_CASE("agreement with the brute-force scorer and invariants") {
  std::mt19937_64 eng(2024);
  std::vector<double> ref, est;
  for (int i = 0; i < 1000; ++i) {
    testing::random_track(eng, ref, est);
    const Scores s = evaluate(ref, est);
    const auto b = testing::brute_force_scores(ref, est);
    REQUIRE(s.rpa == b.rpa);
    REQUIRE(s.rca == b.rca);
    REQUIRE(s.oa == b.oa);
    REQUIRE(s.rca >= s.rpa);
    for (double v : {s.rpa, s.rca, s.oa}) REQUIRE((v >= 0.0 && v <= 1.0));
    std::vector<double> doubled = est;
    for (double& f : doubled) f *= 2.0;
    REQUIRE(rca(ref, doubled) == s.rca);
    const Scores wide = evaluate(ref, est, 80.0);
    REQUIRE(wide.rpa >= s.rpa);
    REQUIRE(wide.rca >= s.rca);
    REQUIRE(wide.oa >= s.oa);
  }
}

TEST_CASE("track mean") {
  const std::vector<Scores> tracks{{1.0, 1.0, 0.5}, {0.0, 0.5, 0.25}};
  const Scores m = mean(tracks);
  CHECK(m.rpa == 0.5);
  CHECK(m.rca == 0.75);
  CHECK(m.oa == 0.375);
}

TEST_CASE("frame csv round trip") {
  const auto path = std::filesystem::temp_directory_path() / "evimelody_frames_test.csv";
  const std::vector<TimedFrame> frames{{0.0, 0.0}, {0.01, 440.125}, {0.02, 1.0 / 3.0}};
  write_frames_csv(path, frames);
  const auto back = read_frames_csv(path);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].time == frames[i].time);
    CHECK(back[i].f0 == frames[i].f0);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_frames_csv(path), IoError);
}
