// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "evimelody/nn/model.hpp"

namespace evimelody::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 coefficient; adds 2 * weight_decay * theta to decayed gradients
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

/// Adam with bias correction over a model's parameter list. Parameters that do not
/// require grad are skipped (their moments stay untouched).
class Adam {
 public:
  /// Throws ConfigError when lr <= 0.
  Adam(std::vector<Parameter>& params, AdamConfig config);

  void zero_grad();
  void step();

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr);
  const AdamState& state() const { return state_; }
  void load_state(AdamState state);

 private:
  std::vector<Parameter>& params_;
  AdamConfig config_;
  AdamState state_;
};

}  // namespace evimelody::nn
