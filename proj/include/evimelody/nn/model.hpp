// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

// Frame-wise residual CNN: bottleneck blocks with frequency-only pooling, then per-frame
// linear heads for voicing and the task-specific output.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evimelody/dsp.hpp"
#include "evimelody/nn/autograd.hpp"
#include "evimelody/nn/ops.hpp"
#include "evimelody/pitchgrid.hpp"
#include "evimelody/random.hpp"
#include "json.hpp"

namespace evimelody::nn {

enum class Task { kM1, kM2, kR1, kR2, kBetaNll, kTcp };

std::string to_string(Task task);
/// Accepts "M1", "M2", "R1", "R2", "beta-nll", "TCP" (case-insensitive).
Task task_from_string(const std::string& name);

/// Whether the task carries a voicing head trained with BCE.
bool has_voicing_head(Task task);
TargetMode target_mode(Task task);

enum class FrequencyReduction { kFlatten, kAverage };

struct ModelConfig {
  std::vector<int> block_filters{32, 64, 128, 256};
  int bottleneck_ratio = 4;  // bottleneck width = max(1, filters / ratio)
  double dropout_rate = 0.3;
  double weight_decay = 1e-5;
  Task task = Task::kM2;
  int n_bins = 384;
  double f_min = 51.91;
  double cents_per_bin = 12.5;
  double leaky_slope = 0.01;
  int pooling = 2;
  int input_bins = 1025;
  int head_hidden = 0;  // optional shared hidden layer before the heads; 0 disables it
  double target_scale_cents = 300.0;  // regression heads predict pitch in units of this many cents
  FrequencyReduction reduction = FrequencyReduction::kFlatten;
  std::uint64_t seed = 0;

  static ModelConfig paper_scale();
  /// 2 blocks (8, 16), K = 64 bins of 50 cents from 103.83 Hz, 257 input bins.
  static ModelConfig desk_scale();
  /// 2 blocks (4, 8), K = 16 bins of 200 cents from 103.83 Hz, 65 input bins; small
  /// enough for finite-difference checks.
  static ModelConfig tiny();

  PitchGrid grid() const;
  int head_width() const;
  /// Feature width per frame after the trunk.
  int feature_width() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
/// Missing keys take defaults; unknown keys throw ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Affine map between the regression target unit (cents above f_min, or Hz for R1)
/// and the normalized scale the heads are trained on. The grid center maps to 0 and the
/// full grid spans span_cents / target_scale_cents units in both cases.
struct TargetScaler {
  double offset = 0.0;
  double scale = 1.0;
  double normalize(double v) const { return (v - offset) / scale; }
  double denormalize(double v) const { return v * scale + offset; }
};
TargetScaler regression_scaler(const ModelConfig& config);

struct Parameter {
  std::string name;
  Var var;
  bool decay = false;  // conv and linear weights receive the L2 term
};

struct Buffer {
  std::string name;
  Tensor* tensor;
};

/// Snapshot of parameter and buffer values, in declaration order.
struct ModelState {
  std::vector<Tensor> parameters;
  std::vector<Tensor> buffers;
};

class Model {
 public:
  explicit Model(ModelConfig config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  struct Output {
    Var features;    // [M, D] trunk features per frame (after dropout)
    Var voicing;     // [M, 1] logits, null when the task has no voicing head
    Var head;        // [M, head_width]
    Var confidence;  // [M, 1] logits, TCP only
    int clips = 0;
    int frames = 0;  // frames per clip
  };

  const ModelConfig& config() const { return config_; }

  /// Input is [N, 1, T, F]. Throws ConfigError when F does not match the config.
  Output forward(const Tensor& input, bool training);
  Output forward(std::span<const dsp::FeatureClip* const> clips, bool training);

  /// Confidence head applied to already computed trunk features.
  Var confidence_head(const Var& features);

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Buffer> buffers();
  std::size_t parameter_count() const;

  ModelState state() const;
  void load_state(const ModelState& state);
  /// Sets requires_grad on every parameter whose name starts with one of `prefixes`
  /// and clears it on all others. An empty list makes everything trainable.
  void set_trainable(const std::vector<std::string>& prefixes);

  Rng& dropout_rng() { return dropout_rng_; }

 private:
  struct Norm {
    Var gamma;
    Var beta;
    ops::BatchNormState state;
  };
  struct Block {
    Var reduce, conv, expand, project;
    Norm bn_reduce, bn_conv, bn_expand, bn_project;
  };

  Var add_param(const std::string& name, Shape shape, bool decay, double bound, Rng& rng);
  Norm add_norm(const std::string& name, int channels);
  Var norm(const Var& x, Norm& n, bool training);

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<std::pair<std::string, Norm*>> norms_;
  std::vector<Block> blocks_;
  Var hidden_w_, hidden_b_;
  Var voicing_w_, voicing_b_;
  Var head_w_, head_b_;
  Var conf_w_, conf_b_;
  Rng dropout_rng_;
};

/// Stacks equally shaped clips into an [N, 1, T, F] tensor.
Tensor stack_clips(std::span<const dsp::FeatureClip* const> clips);

}  // namespace evimelody::nn
