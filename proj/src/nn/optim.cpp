// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/nn/optim.hpp"

#include <cmath>

#include "evimelody/errors.hpp"

namespace evimelody::nn {

Adam::Adam(std::vector<Parameter>& params, AdamConfig config) : params_(params), config_(config) {
  if (!(config_.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(config_.weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  for (const auto& p : params_) {
    state_.m.emplace_back(p.var->value.shape(), 0.0);
    state_.v.emplace_back(p.var->value.shape(), 0.0);
  }
}

void Adam::set_lr(double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  config_.lr = lr;
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var->zero_grad();
}

void Adam::step() {
  ++state_.step;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = params_[i];
    if (!p.var->requires_grad) continue;
    Tensor& theta = p.var->value;
    const Tensor& g = p.var->ensure_grad();
    const double decay = p.decay ? 2.0 * config_.weight_decay : 0.0;
    Tensor& m = state_.m[i];
    Tensor& v = state_.v[i];
    for (std::size_t k = 0; k < theta.numel(); ++k) {
      const double grad = g[k] + decay * theta[k];
      m[k] = b1 * m[k] + (1.0 - b1) * grad;
      v[k] = b2 * v[k] + (1.0 - b2) * grad * grad;
      theta[k] -= config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
    ++p.var->version;
  }
}

void Adam::load_state(AdamState state) {
  if (state.m.size() != params_.size() || state.v.size() != params_.size()) {
    throw ArgumentError("optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (state.m[i].numel() != params_[i].var->value.numel() || state.v[i].numel() != params_[i].var->value.numel()) {
      throw ArgumentError("optimizer state shape mismatch for " + params_[i].name);
    }
  }
  state_ = std::move(state);
}

}  // namespace evimelody::nn
