// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line pipeline: synth, train, eval, curve.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "evimelody/active.hpp"
#include "evimelody/config.hpp"
#include "evimelody/dataio.hpp"
#include "evimelody/nn/trainer.hpp"

namespace evimelody::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigFailure = 2, kIoFailure = 3, kNumericFailure = 4 };

/// Parses argv (argv[0] is the program name), runs one command, maps exceptions to exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Digest of the settings that determine a trained model (the config minus output dir and
/// active-learning block).
std::string training_digest(const config::ExperimentConfig& config);

/// clip_NNNNN.wav + clip_NNNNN.csv per clip, plus manifest.json. Returns the manifest path.
std::filesystem::path cmd_synth(const dataio::SyntheticDomain& domain, const PitchGrid& grid, std::size_t count,
                                std::uint64_t seed, const std::filesystem::path& out_dir);

/// Trains on the source domain. Writes config.json, train_log.csv, best.ckpt and last.ckpt
/// under config.out. With `resume`, continues from last.ckpt when the digests agree.
nn::TrainResult cmd_train(const config::ExperimentConfig& config, bool resume, std::ostream& log);

/// Per-track rows plus a final "mean" row.
std::string metrics_csv(const std::vector<dataio::LabeledClip>& clips, const nn::Evaluation& evaluation,
                        const std::string& config_digest);

/// Evaluates a checkpoint and writes metrics.csv into `out_dir`. Throws ArgumentError on an
/// empty test set.
nn::Evaluation cmd_eval(const std::filesystem::path& checkpoint, const std::vector<dataio::LabeledClip>& test,
                        const std::filesystem::path& out_dir);

/// Runs the adaptation grid from `checkpoint`. Writes curve.csv, curve_plot.txt and the job
/// cache curve_jobs.jsonl under config.out. With `resume`, completed cells are reused.
std::vector<active::CurvePoint> cmd_curve(const config::ExperimentConfig& config,
                                          const std::filesystem::path& checkpoint, bool resume, std::ostream& log);

/// One block per criterion: budget, then median rpa, rca, oa over seeds, then min/max oa.
std::string curve_plot_data(const std::vector<active::CurvePoint>& points, const std::string& config_digest);

}  // namespace evimelody::cli
