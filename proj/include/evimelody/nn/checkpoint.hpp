// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint file: one line of compact JSON (config, digest, epoch, tensor names and
// shapes) followed by the tensors as little-endian float64, in header order.

#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "evimelody/nn/model.hpp"
#include "evimelody/nn/optim.hpp"

namespace evimelody::nn {

struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> parameter_names;
  std::vector<std::string> buffer_names;
  ModelState state;
  std::optional<AdamState> optimizer;
  std::string config_digest;
  int epoch = 0;
};

Checkpoint make_checkpoint(const Model& model, const Adam* optimizer, std::string config_digest, int epoch);

/// Loads weights and buffers into `model`. Throws ConfigError when the model's task or
/// architecture differs from the checkpoint's.
void restore(Model& model, const Checkpoint& checkpoint);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws IoError when unreadable and FormatError on a malformed or truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evimelody::nn
