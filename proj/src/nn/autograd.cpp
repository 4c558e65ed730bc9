// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/nn/autograd.hpp"

#include <unordered_set>

#include "evimelody/errors.hpp"

namespace evimelody::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::ensure_grad() {
  if (grad.numel() != value.numel()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

void Node::zero_grad() {
  if (!grad.empty()) grad.fill(0.0);
}

Var make_leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!g_grad_enabled) return node;
  bool any = false;
  for (const auto& in : inputs) any = any || in->requires_grad;
  if (!any) return node;
  node->requires_grad = true;
  node->input_versions_.reserve(inputs.size());
  for (const auto& in : inputs) node->input_versions_.push_back(in->version);
  node->inputs_ = std::move(inputs);
  node->backward_fn_ = std::move(backward_fn);
  return node;
}

void backward(const Var& root) {
  if (!root) throw ArgumentError("backward on null node");
  if (root->value.numel() != 1) throw ArgumentError("backward expects a scalar root");
  if (root->consumed_) throw StateError("graph already consumed by a previous backward()");
  if (!root->requires_grad) throw StateError("root does not depend on any trainable input");

  // Iterative post-order DFS. `order` owns the nodes so releasing a node's inputs
  // mid-pass cannot free ones still waiting for their gradient.
  std::vector<Var> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Var, std::size_t>> stack{{root, 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs_.size()) {
      const Var& child = node->inputs_[next++];
      if (child->requires_grad && !child->inputs_.empty() && seen.insert(child.get()).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(std::move(node));
    stack.pop_back();
  }

  for (const Var& node : order) {
    if (node->consumed_) throw StateError("graph already consumed by a previous backward()");
    for (std::size_t i = 0; i < node->inputs_.size(); ++i) {
      if (node->inputs_[i]->version != node->input_versions_[i]) {
        throw StateError("an input was modified after the forward pass; rerun forward before backward()");
      }
    }
  }

  root->ensure_grad().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& node = **it;
    if (node.backward_fn_ && !node.grad.empty()) node.backward_fn_(node);
    node.backward_fn_ = nullptr;
    node.inputs_.clear();
    node.input_versions_.clear();
    node.consumed_ = true;
    if (&node != root.get()) node.grad = Tensor();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace evimelody::nn
