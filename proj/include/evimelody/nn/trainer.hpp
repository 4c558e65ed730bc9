// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evimelody/dataio.hpp"
#include "evimelody/errors.hpp"
#include "evimelody/evidential.hpp"
#include "evimelody/metrics.hpp"
#include "evimelody/nn/checkpoint.hpp"
#include "evimelody/nn/model.hpp"
#include "evimelody/nn/optim.hpp"
#include "json.hpp"

namespace evimelody::nn {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  double lr = 1e-3;
  bool cosine_lr = false;  // decay lr to lr_floor * lr over the epochs of each phase
  double lr_floor = 0.01;
  double evidential_weight = 1.0;  // w in bce + w * evidential loss
  double nig_coupling = 0.01;      // weight of the NIG evidence regularizer
  int kl_warmup_epochs = 10;       // KL weight ramps as min(1, epoch / warmup)
  double beta_nll = 0.5;
  int tcp_confidence_epochs = 10;  // second phase of the TCP baseline
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN without a validation set
  double val_oa = 0.0;    // NaN without a validation set
  double lambda_t = 0.0;
};

using Batch = std::span<const dataio::LabeledClip* const>;

/// Task objective on one forward pass, as a scalar graph node over the head outputs.
/// `lambda_t` scales the Dirichlet KL term (M1 only).
Var task_loss(const Model::Output& out, Batch clips, const ModelConfig& model, const TrainConfig& config,
              double lambda_t);

/// Confidence-head objective of the TCP baseline: mean squared error between the
/// sigmoid confidence and the normalized true-class probability on voiced frames.
Var tcp_confidence_loss(const Var& confidence_logits, const Tensor& class_logits, Batch clips);

/// Raised when a loss or gradient turns non-finite. Carries the state at the end of the
/// last completed epoch and the log so far.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, Checkpoint last_good, std::vector<EpochLog> log)
      : NumericError(what), last_good_(std::move(last_good)), log_(std::move(log)) {}
  const Checkpoint& last_good() const { return last_good_; }
  const std::vector<EpochLog>& log() const { return log_; }

 private:
  Checkpoint last_good_;
  std::vector<EpochLog> log_;
};

struct TrainResult {
  Checkpoint best;
  int best_epoch = -1;
  std::vector<EpochLog> log;
};

struct TrainOptions {
  std::string config_digest;
  /// Continue from this checkpoint's epoch and optimizer state.
  const Checkpoint* resume = nullptr;
  /// Best checkpoint and log of the interrupted run; used to keep ranking epochs on resume.
  const Checkpoint* resume_best = nullptr;
  std::vector<EpochLog> history;
  /// Called after every epoch with the end-of-epoch state.
  std::function<void(const EpochLog&, const Checkpoint& last, bool improved)> on_epoch;
};

/// Seeded mini-batch training. With a validation set the returned checkpoint is the epoch
/// with the highest validation OA (lower validation loss breaks ties); without one it is
/// the final epoch. The model holds the returned state afterwards.
TrainResult train(Model& model, const std::vector<dataio::LabeledClip>& train_set,
                  const std::vector<dataio::LabeledClip>& val_set, const TrainConfig& config,
                  const TrainOptions& options = {});

struct FramePrediction {
  double voicing_prob = 0.0;
  double f0_hz = 0.0;                     // 0 when predicted unvoiced
  evidential::UncertaintyPair uncertainty;  // M1, M2, R1, R2
  double confidence = 0.0;                // TCP
  double variance = 0.0;                  // beta-NLL, in squared target units
};

using ClipPrediction = std::vector<FramePrediction>;

/// Evaluation-mode inference. Voicing threshold 0.5; R1/R2 models, which have no voicing
/// head, call a frame voiced when the predicted pitch is at least f_min / sqrt(2).
std::vector<ClipPrediction> predict(Model& model, std::span<const dsp::FeatureClip* const> clips,
                                    int batch_size = 16);
std::vector<ClipPrediction> predict(Model& model, const std::vector<dataio::LabeledClip>& clips,
                                    int batch_size = 16);

std::vector<double> predicted_f0(const ClipPrediction& prediction);

struct Evaluation {
  std::vector<metrics::Scores> per_clip;
  metrics::Scores mean;
};

Evaluation evaluate(Model& model, const std::vector<dataio::LabeledClip>& clips, int batch_size = 16);

}  // namespace evimelody::nn
