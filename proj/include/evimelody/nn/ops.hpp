// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable ops over NCHW-style activations laid out as [batch, channels, time, freq].

#pragma once

#include <span>
#include <vector>

#include "evimelody/nn/autograd.hpp"
#include "evimelody/random.hpp"

namespace evimelody::nn::ops {

/// Stride-1 "same" convolution; weight is [out, in, k, k] with k odd. No bias.
Var conv2d(const Var& x, const Var& weight);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization over (batch, time, freq). Training mode normalizes with
/// batch statistics and updates `state`; evaluation mode uses the running statistics.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training);

Var leaky_relu(const Var& x, double slope);
Var add(const Var& a, const Var& b);

/// Max over non-overlapping windows of `factor` bins along the last (frequency) axis.
Var max_pool_freq(const Var& x, int factor);

/// [N, C, T, F] -> [N * T, C * F]: one feature row per frame.
Var flatten_frames(const Var& x);

/// [N, C, T, F] -> [N * T, C]: mean over the frequency axis.
Var mean_over_freq(const Var& x);

/// Inverted dropout; identity when `training` is false or rate is 0.
Var dropout(const Var& x, double rate, bool training, Rng& rng);

/// x [M, D] * weight[O, D]^T + bias[O].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Scalar node whose gradient with respect to inputs[i] is grads[i] (scaled by the upstream
/// gradient). Used to attach losses whose derivatives are computed in closed form.
Var external_loss(std::vector<Var> inputs, double value, std::vector<Tensor> grads);

/// Copy of the value with no history.
Var detach(const Var& x);

}  // namespace evimelody::nn::ops
