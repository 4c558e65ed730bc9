// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

// Tape-free reverse-mode differentiation: every op result keeps shared pointers to
// its inputs and a closure that pushes its gradient into them.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "evimelody/nn/tensor.hpp"

namespace evimelody::nn {

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Tensor value;
  Tensor grad;  // allocated on first use
  bool requires_grad = false;

  /// Bumped whenever a leaf's value is modified in place (optimizer steps). Graphs that
  /// captured an older version refuse to run backward.
  std::uint64_t version = 0;

  Tensor& ensure_grad();
  void zero_grad();

 private:
  friend Var make_op(Tensor, std::vector<Var>, std::function<void(Node&)>);
  friend void backward(const Var&);

  std::vector<Var> inputs_;
  std::vector<std::uint64_t> input_versions_;
  std::function<void(Node&)> backward_fn_;
  bool consumed_ = false;

 public:
  const std::vector<Var>& inputs() const { return inputs_; }
};

Var make_leaf(Tensor value, bool requires_grad);

/// `backward_fn` receives the result node; its `grad` is the upstream gradient and it
/// must accumulate into `inputs()[i]->ensure_grad()` for inputs that require grad.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

/// Seeds d(root)/d(root) = 1 and propagates. The graph is consumed afterwards; a second
/// call, or a call after an input leaf was modified, throws StateError.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace evimelody::nn
