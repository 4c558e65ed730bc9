// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <vector>

#include "doctest.h"

#include "evimelody/errors.hpp"
#include "evimelody/nn/checkpoint.hpp"
#include "evimelody/nn/ops.hpp"
#include "evimelody/nn/optim.hpp"
#include "evimelody/nn/trainer.hpp"
#include "evimelody/random.hpp"
#include "oracles.hpp"

using namespace evimelody;
using namespace evimelody::nn;
using evimelody::testing::rel_err;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

using OpFn = std::function<Var(const std::vector<Var>&)>;

// Largest relative error between analytic and central-difference gradients of
// <op(leaves), w> over every leaf entry.
double op_gradient_error(std::vector<Var> leaves, const OpFn& op, Rng& rng, double h = 1e-6) {
  for (Var& leaf : leaves) leaf->zero_grad();
  Var out = op(leaves);
  const Tensor w = random_tensor(out->value.shape(), rng);
  backward(ops::external_loss({out}, dot(out->value, w), {w}));
  double worst = 0.0;
  for (Var& leaf : leaves) {
    if (!leaf->requires_grad) continue;
    for (std::size_t i = 0; i < leaf->value.numel(); ++i) {
      const double x0 = leaf->value[i];
      NoGradGuard guard;
      leaf->value[i] = x0 + h;
      const double up = dot(op(leaves)->value, w);
      leaf->value[i] = x0 - h;
      const double down = dot(op(leaves)->value, w);
      leaf->value[i] = x0;
      const double fd = (up - down) / (2.0 * h);
      const double an = leaf->grad.empty() ? 0.0 : leaf->grad[i];
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)));
    }
  }
  return worst;
}

std::vector<dataio::LabeledClip> random_clips(const ModelConfig& mc, int count, int frames, std::uint64_t seed,
                                              double voiced = 0.7) {
  Rng rng(seed);
  const PitchGrid grid = mc.grid();
  const TargetMode mode = target_mode(mc.task);
  std::vector<dataio::LabeledClip> clips(count);
  for (auto& c : clips) {
    c.features.n_frames = frames;
    c.features.n_freq = mc.input_bins;
    for (int i = 0; i < frames * mc.input_bins; ++i) c.features.values.push_back(rng.uniform());
    for (int t = 0; t < frames; ++t) {
      const double f0 = rng.uniform() < voiced ? rng.uniform(grid.f_min() * 1.05, grid.upper_edge_hz() * 0.95) : 0.0;
      c.targets.push_back(make_frame_target(grid, f0, mode));
    }
  }
  return clips;
}

// Features correlated with the label so a tiny model can learn something in a few epochs.
std::vector<dataio::LabeledClip> learnable_clips(const ModelConfig& mc, int count, int frames, std::uint64_t seed) {
  Rng rng(seed);
  const PitchGrid grid = mc.grid();
  std::vector<dataio::LabeledClip> clips(count);
  for (auto& c : clips) {
    c.features.n_frames = frames;
    c.features.n_freq = mc.input_bins;
    c.features.values.assign(static_cast<std::size_t>(frames) * mc.input_bins, 0.0);
    for (int t = 0; t < frames; ++t) {
      double f0 = 0.0;
      if (rng.uniform() < 0.7) {
        const int bin = static_cast<int>(rng.below(static_cast<std::uint64_t>(mc.n_bins)));
        f0 = grid.bin_to_hz(bin);
        const int col = bin * (mc.input_bins - 1) / mc.n_bins;
        c.features.values[static_cast<std::size_t>(t) * mc.input_bins + col] = 1.0;
      }
      for (int f = 0; f < mc.input_bins; ++f) {
        c.features.values[static_cast<std::size_t>(t) * mc.input_bins + f] += 0.05 * rng.uniform();
      }
      c.targets.push_back(make_frame_target(grid, f0, target_mode(mc.task)));
    }
  }
  return clips;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("evimelody_test_nn_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("backward consumes the graph") {
  Var x = make_leaf(Tensor({3}, std::vector<double>{1.0, -2.0, 3.0}), true);
  Var y = ops::leaky_relu(x, 0.1);
  Var loss = ops::external_loss({y}, 0.0, {Tensor({3}, 1.0)});
  backward(loss);
  CHECK(x->grad[0] == doctest::Approx(1.0));
  CHECK(x->grad[1] == doctest::Approx(0.1));
  CHECK_THROWS_AS(backward(loss), StateError);
}

TEST_CASE("backward refuses graphs over modified leaves") {
  Var x = make_leaf(Tensor({2}, 1.0), true);
  Var y = ops::add(x, x);
  Var loss = ops::external_loss({y}, 0.0, {Tensor({2}, 1.0)});
  x->version++;
  CHECK_THROWS_AS(backward(loss), StateError);
}

TEST_CASE("gradients accumulate through shared inputs") {
  Var x = make_leaf(Tensor({2}, 1.0), true);
  backward(ops::external_loss({ops::add(x, x)}, 0.0, {Tensor({2}, 1.0)}));
  CHECK(x->grad[0] == doctest::Approx(2.0));
  backward(ops::external_loss({x}, 0.0, {Tensor({2}, 1.0)}));
  CHECK(x->grad[1] == doctest::Approx(3.0));
  x->zero_grad();
  CHECK((x->grad.empty() || x->grad[0] == 0.0));
}

TEST_CASE("NoGradGuard records nothing") {
  Var x = make_leaf(Tensor({2}, 1.0), true);
  CHECK(grad_enabled());
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    Var y = ops::add(x, x);
    CHECK_FALSE(y->requires_grad);
    CHECK(y->inputs().empty());
  }
  CHECK(grad_enabled());
  Var d = ops::detach(ops::add(x, x));
  CHECK_FALSE(d->requires_grad);
  CHECK(d->value[0] == 2.0);
}

TEST_CASE("conv2d matches a direct zero-padded convolution") {
  Rng rng(1);
  for (int k : {1, 3, 5}) {
    const int N = 2, Ci = 3, Co = 4, T = 5, F = 7;
    const Tensor x = random_tensor({N, Ci, T, F}, rng);
    const Tensor w = random_tensor({Co, Ci, k, k}, rng);
    NoGradGuard guard;
    const Tensor y = ops::conv2d(make_leaf(x, false), make_leaf(w, false))->value;
    REQUIRE(y.shape() == Shape{N, Co, T, F});
    const int r = k / 2;
    double worst = 0.0;
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < Co; ++o)
        for (int t = 0; t < T; ++t)
          for (int f = 0; f < F; ++f) {
            double s = 0.0;
            for (int c = 0; c < Ci; ++c)
              for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b) {
                  const int tt = t + a - r, ff = f + b - r;
                  if (tt < 0 || tt >= T || ff < 0 || ff >= F) continue;
                  s += w[((o * Ci + c) * k + a) * k + b] * x[((n * Ci + c) * T + tt) * F + ff];
                }
            worst = std::max(worst, std::abs(s - y[((n * Co + o) * T + t) * F + f]));
          }
    CHECK(worst < 1e-12);
  }
  CHECK_THROWS_AS(ops::conv2d(make_leaf(Tensor({1, 2, 3, 3}), false), make_leaf(Tensor({1, 3, 3, 3}), false)),
                  ArgumentError);
  CHECK_THROWS_AS(ops::conv2d(make_leaf(Tensor({1, 1, 3, 3}), false), make_leaf(Tensor({1, 1, 2, 2}), false)),
                  ArgumentError);
}

TEST_CASE("op gradients match finite differences") {
  Rng rng(2);
  SUBCASE("conv2d") {
    for (int k : {1, 3}) {
      std::vector<Var> leaves{make_leaf(random_tensor({2, 2, 4, 5}, rng), true),
                              make_leaf(random_tensor({3, 2, k, k}, rng), true)};
      CHECK(op_gradient_error(leaves, [](const auto& v) { return ops::conv2d(v[0], v[1]); }, rng) < 1e-6);
    }
  }
  SUBCASE("batch_norm training") {
    ops::BatchNormState state;
    std::vector<Var> leaves{make_leaf(random_tensor({3, 2, 3, 4}, rng, 2.0), true),
                            make_leaf(random_tensor({2}, rng), true), make_leaf(random_tensor({2}, rng), true)};
    auto op = [&state](const auto& v) { return ops::batch_norm(v[0], v[1], v[2], state, true); };
    CHECK(op_gradient_error(leaves, op, rng) < 1e-5);
  }
  SUBCASE("batch_norm evaluation") {
    ops::BatchNormState state;
    state.running_mean = random_tensor({2}, rng);
    state.running_var = Tensor({2}, std::vector<double>{0.5, 2.0});
    std::vector<Var> leaves{make_leaf(random_tensor({2, 2, 3, 3}, rng), true),
                            make_leaf(random_tensor({2}, rng), true), make_leaf(random_tensor({2}, rng), true)};
    auto op = [&state](const auto& v) { return ops::batch_norm(v[0], v[1], v[2], state, false); };
    CHECK(op_gradient_error(leaves, op, rng) < 1e-6);
  }
  SUBCASE("leaky_relu, add, pooling, reshapes") {
    std::vector<Var> leaves{make_leaf(random_tensor({2, 3, 4, 6}, rng), true),
                            make_leaf(random_tensor({2, 3, 4, 6}, rng), true)};
    CHECK(op_gradient_error(leaves, [](const auto& v) { return ops::leaky_relu(v[0], 0.2); }, rng) < 1e-6);
    CHECK(op_gradient_error(leaves, [](const auto& v) { return ops::add(v[0], v[1]); }, rng) < 1e-6);
    CHECK(op_gradient_error(leaves, [](const auto& v) { return ops::max_pool_freq(v[0], 2); }, rng) < 1e-6);
    CHECK(op_gradient_error(leaves, [](const auto& v) { return ops::max_pool_freq(v[0], 3); }, rng) < 1e-6);
    CHECK(op_gradient_error(leaves, [](const auto& v) { return ops::flatten_frames(v[0]); }, rng) < 1e-6);
    CHECK(op_gradient_error(leaves, [](const auto& v) { return ops::mean_over_freq(v[0]); }, rng) < 1e-6);
  }
  SUBCASE("linear") {
    std::vector<Var> leaves{make_leaf(random_tensor({5, 4}, rng), true), make_leaf(random_tensor({3, 4}, rng), true),
                            make_leaf(random_tensor({3}, rng), true)};
    CHECK(op_gradient_error(leaves, [](const auto& v) { return ops::linear(v[0], v[1], v[2]); }, rng) < 1e-6);
  }
  SUBCASE("dropout with a fixed mask") {
    std::vector<Var> leaves{make_leaf(random_tensor({4, 6}, rng), true)};
    const Rng start(9);
    auto op = [&start](const auto& v) {
      Rng r = start;
      return ops::dropout(v[0], 0.5, true, r);
    };
    CHECK(op_gradient_error(leaves, op, rng) < 1e-6);
  }
}

TEST_CASE("op forward values") {
  Rng rng(3);
  NoGradGuard guard;
  const Tensor x = random_tensor({2, 3, 2, 4}, rng);
  const Var vx = make_leaf(x, false);

  const Tensor pooled = ops::max_pool_freq(vx, 2)->value;
  REQUIRE(pooled.shape() == Shape{2, 3, 2, 2});
  for (std::size_t i = 0; i < pooled.numel(); ++i) CHECK(pooled[i] == std::max(x[2 * i], x[2 * i + 1]));

  const Tensor flat = ops::flatten_frames(vx)->value;
  REQUIRE(flat.shape() == Shape{4, 12});
  // row n*T+t, column c*F+f
  CHECK(flat[(1 * 2 + 1) * 12 + 2 * 4 + 3] == x[((1 * 3 + 2) * 2 + 1) * 4 + 3]);

  const Tensor mean = ops::mean_over_freq(vx)->value;
  REQUIRE(mean.shape() == Shape{4, 3});
  const double m = (x[((0 * 3 + 1) * 2 + 1) * 4 + 0] + x[((0 * 3 + 1) * 2 + 1) * 4 + 1] +
                    x[((0 * 3 + 1) * 2 + 1) * 4 + 2] + x[((0 * 3 + 1) * 2 + 1) * 4 + 3]) /
                   4.0;
  CHECK(mean[1 * 3 + 1] == doctest::Approx(m));

  Rng drop(4);
  const Tensor big({20000}, 1.0);
  const Tensor dropped = ops::dropout(make_leaf(big, false), 0.25, true, drop)->value;
  double kept = 0.0, total = 0.0;
  for (double v : dropped.values()) {
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12));
    kept += v != 0.0;
    total += v;
  }
  CHECK(kept / 20000.0 == doctest::Approx(0.75).epsilon(0.03));
  CHECK(total / 20000.0 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(ops::dropout(make_leaf(big, false), 0.25, false, drop)->value[7] == 1.0);
}

TEST_CASE("batch_norm statistics") {
  Rng rng(5);
  const Tensor x = random_tensor({3, 2, 2, 5}, rng, 3.0);
  ops::BatchNormState state;
  NoGradGuard guard;
  const Var gamma = make_leaf(Tensor({2}, 1.0), false);
  const Var beta = make_leaf(Tensor({2}, 0.0), false);
  const Tensor y = ops::batch_norm(make_leaf(x, false), gamma, beta, state, true)->value;
  for (int c = 0; c < 2; ++c) {
    double s = 0.0, sq = 0.0, xs = 0.0, xsq = 0.0;
    int n = 0;
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 10; ++i) {
        const std::size_t idx = (b * 2 + c) * 10 + i;
        s += y[idx];
        sq += y[idx] * y[idx];
        xs += x[idx];
        xsq += x[idx] * x[idx];
        ++n;
      }
    CHECK(std::abs(s / n) < 1e-12);
    CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-4));
    const double mean = xs / n;
    const double unbiased = (xsq - n * mean * mean) / (n - 1);
    CHECK(state.running_mean[c] == doctest::Approx(0.1 * mean));
    CHECK(state.running_var[c] == doctest::Approx(0.9 + 0.1 * unbiased));
  }
  const Tensor e = ops::batch_norm(make_leaf(x, false), gamma, beta, state, false)->value;
  CHECK(e[3] == doctest::Approx((x[3] - state.running_mean[0]) / std::sqrt(state.running_var[0] + state.eps)));
}

TEST_CASE("model shapes and configuration") {
  for (Task task : {Task::kM1, Task::kM2, Task::kR1, Task::kR2, Task::kBetaNll, Task::kTcp}) {
    ModelConfig mc = ModelConfig::tiny();
    mc.task = task;
    Model model(mc);
    const auto clips = random_clips(mc, 3, 6, 1);
    std::vector<const dsp::FeatureClip*> f{&clips[0].features, &clips[1].features, &clips[2].features};
    const auto out = model.forward(f, false);
    CHECK(out.clips == 3);
    CHECK(out.frames == 6);
    CHECK(out.head->value.shape() == Shape{18, mc.head_width()});
    CHECK(out.features->value.shape() == Shape{18, mc.feature_width()});
    CHECK(static_cast<bool>(out.voicing) == has_voicing_head(task));
    CHECK(static_cast<bool>(out.confidence) == (task == Task::kTcp));
  }
  ModelConfig mc = ModelConfig::tiny();
  CHECK(mc.feature_width() == 8 * 16);
  mc.reduction = FrequencyReduction::kAverage;
  CHECK(mc.feature_width() == 8);
  mc.head_hidden = 12;
  CHECK(mc.feature_width() == 12);

  Model model(ModelConfig::tiny());
  CHECK_THROWS_AS(model.forward(Tensor({1, 1, 4, 64}), false), ConfigError);

  CHECK(task_from_string("beta-NLL") == Task::kBetaNll);
  CHECK(task_from_string("tcp") == Task::kTcp);
  CHECK_THROWS(task_from_string("M3"));
  for (Task t : {Task::kM1, Task::kM2, Task::kR1, Task::kR2, Task::kBetaNll, Task::kTcp}) {
    CHECK(task_from_string(to_string(t)) == t);
  }
}

TEST_CASE("model config JSON and validation") {
  ModelConfig mc = ModelConfig::desk_scale();
  mc.task = Task::kR2;
  mc.head_hidden = 32;
  mc.reduction = FrequencyReduction::kAverage;
  const ModelConfig back = model_config_from_json(to_json(mc));
  CHECK(to_json(back) == to_json(mc));
  CHECK(mc.grid().n_bins() == 64);

  auto bad = to_json(ModelConfig::tiny());
  bad["bogus"] = 1;
  CHECK_THROWS_AS(model_config_from_json(bad), ConfigError);
  for (const char* key : {"dropout_rate", "pooling", "bottleneck_ratio", "input_bins"}) {
    auto j = to_json(ModelConfig::tiny());
    j[key] = -1;
    CHECK_THROWS_AS(model_config_from_json(j), ConfigError);
  }
  auto j = to_json(ModelConfig::tiny());
  j["block_filters"] = nlohmann::json::array();
  CHECK_THROWS_AS(model_config_from_json(j), ConfigError);
}

TEST_CASE("model initialization and state") {
  ModelConfig mc = ModelConfig::tiny();
  mc.seed = 11;
  Model a(mc), b(mc);
  mc.seed = 12;
  Model c(mc);
  const ModelState sa = a.state(), sb = b.state(), sc = c.state();
  REQUIRE(sa.parameters.size() == a.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < sa.parameters.size(); ++i) {
    CHECK(sa.parameters[i].values().size() == sb.parameters[i].values().size());
    for (std::size_t k = 0; k < sa.parameters[i].numel(); ++k) {
      CHECK(sa.parameters[i][k] == sb.parameters[i][k]);
      differs = differs || sa.parameters[i][k] != sc.parameters[i][k];
    }
  }
  CHECK(differs);

  std::set<std::string> names;
  std::size_t count = 0;
  for (const auto& p : a.parameters()) {
    names.insert(p.name);
    count += p.var->value.numel();
  }
  CHECK(names.size() == a.parameters().size());
  CHECK(count == a.parameter_count());

  c.load_state(sa);
  const ModelState loaded = c.state();
  for (std::size_t i = 0; i < sa.parameters.size(); ++i) {
    for (std::size_t k = 0; k < sa.parameters[i].numel(); ++k) CHECK(loaded.parameters[i][k] == sa.parameters[i][k]);
  }
  ModelState broken = sa;
  broken.parameters.pop_back();
  CHECK_THROWS(c.load_state(broken));

  a.set_trainable({"head"});
  bool any_head = false;
  for (const auto& p : a.parameters()) {
    const bool head = p.name.rfind("head", 0) == 0;
    CHECK(p.var->requires_grad == head);
    any_head = any_head || head;
  }
  CHECK(any_head);
  a.set_trainable({});
  for (const auto& p : a.parameters()) CHECK(p.var->requires_grad);
}

TEST_CASE("full model gradients match finite differences") {
  struct Case {
    Task task;
    int hidden;
    FrequencyReduction reduction;
  };
  const std::vector<Case> cases{{Task::kM1, 0, FrequencyReduction::kFlatten},
                                {Task::kM2, 0, FrequencyReduction::kFlatten},
                                {Task::kM2, 8, FrequencyReduction::kAverage},
                                {Task::kR1, 0, FrequencyReduction::kFlatten},
                                {Task::kR2, 8, FrequencyReduction::kFlatten},
                                {Task::kTcp, 0, FrequencyReduction::kFlatten}};
  for (const Case& tc_case : cases) {
    CAPTURE(to_string(tc_case.task));
    ModelConfig mc = ModelConfig::tiny();
    mc.task = tc_case.task;
    mc.dropout_rate = 0.0;
    mc.head_hidden = tc_case.hidden;
    mc.reduction = tc_case.reduction;
    const auto clips = random_clips(mc, 2, 10, 5);
    Model model(mc);
    TrainConfig tc;
    std::vector<const dataio::LabeledClip*> batch{&clips[0], &clips[1]};
    std::vector<const dsp::FeatureClip*> feats{&clips[0].features, &clips[1].features};
    auto loss_at = [&](bool grad) {
      const auto out = model.forward(feats, true);
      Var l = task_loss(out, batch, mc, tc, 0.5);
      if (grad) backward(l);
      return l->value[0];
    };
    for (auto& p : model.parameters()) p.var->zero_grad();
    loss_at(true);
    Rng rng(7);
    double worst = 0.0;
    for (auto& p : model.parameters()) {
      for (int r = 0; r < 3; ++r) {
        const std::size_t i = rng.below(p.var->value.numel());
        const double an = p.var->grad.empty() ? 0.0 : p.var->grad[i];
        const double h = 1e-5, x0 = p.var->value[i];
        NoGradGuard guard;
        p.var->value[i] = x0 + h;
        const double up = loss_at(false);
        p.var->value[i] = x0 - h;
        const double down = loss_at(false);
        p.var->value[i] = x0;
        const double fd = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)));
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("TCP confidence loss gradient") {
  ModelConfig mc = ModelConfig::tiny();
  mc.task = Task::kTcp;
  const auto clips = random_clips(mc, 2, 5, 8);
  std::vector<const dataio::LabeledClip*> batch{&clips[0], &clips[1]};
  Rng rng(8);
  const Tensor class_logits = random_tensor({10, mc.n_bins}, rng);
  std::vector<Var> leaves{make_leaf(random_tensor({10, 1}, rng), true)};
  Var probe = tcp_confidence_loss(leaves[0], class_logits, batch);
  CHECK(probe->value[0] >= 0.0);
  leaves[0]->zero_grad();
  auto op = [&](const std::vector<Var>& v) { return tcp_confidence_loss(v[0], class_logits, batch); };
  CHECK(op_gradient_error(leaves, op, rng) < 1e-6);
}

TEST_CASE("Adam follows the bias-corrected update") {
  AdamConfig config;
  config.lr = 0.1;
  config.weight_decay = 0.05;
  std::vector<Parameter> params{{"w", make_leaf(Tensor({2}, std::vector<double>{1.0, -2.0}), true), true},
                                {"b", make_leaf(Tensor({1}, std::vector<double>{0.5}), true), false},
                                {"frozen", make_leaf(Tensor({1}, std::vector<double>{3.0}), false), false}};
  Adam adam(params, config);
  const std::vector<std::vector<double>> grads{{0.3, -0.7, 0.2}, {-0.1, 0.4, 0.6}};
  std::vector<double> theta{1.0, -2.0, 0.5}, m(3, 0.0), v(3, 0.0);
  const std::vector<bool> decay{true, true, false};
  for (int step = 1; step <= 2; ++step) {
    adam.zero_grad();
    params[0].var->ensure_grad()[0] = grads[step - 1][0];
    params[0].var->ensure_grad()[1] = grads[step - 1][1];
    params[1].var->ensure_grad()[0] = grads[step - 1][2];
    adam.step();
    for (int i = 0; i < 3; ++i) {
      const double g = grads[step - 1][i] + (decay[i] ? 2.0 * 0.05 * theta[i] : 0.0);
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, step));
      const double vh = v[i] / (1.0 - std::pow(0.999, step));
      theta[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(params[0].var->value[0] == doctest::Approx(theta[0]).epsilon(1e-12));
    CHECK(params[0].var->value[1] == doctest::Approx(theta[1]).epsilon(1e-12));
    CHECK(params[1].var->value[0] == doctest::Approx(theta[2]).epsilon(1e-12));
    CHECK(params[2].var->value[0] == 3.0);
  }
  CHECK(adam.state().step == 2);
  CHECK(params[0].var->version > 0);

  AdamConfig zero;
  zero.lr = 0.0;
  CHECK_THROWS_AS(Adam(params, zero), ConfigError);
}

TEST_CASE("Adam step invalidates older graphs") {
  std::vector<Parameter> params{{"w", make_leaf(Tensor({2}, 1.0), true), false}};
  Adam adam(params, {});
  Var y = ops::add(params[0].var, params[0].var);
  Var loss = ops::external_loss({y}, 0.0, {Tensor({2}, 1.0)});
  params[0].var->ensure_grad().fill(1.0);
  adam.step();
  CHECK_THROWS_AS(backward(loss), StateError);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = scratch_dir("ckpt");
  ModelConfig mc = ModelConfig::tiny();
  mc.task = Task::kM1;
  Model model(mc);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 2;
  const auto clips = random_clips(mc, 4, 6, 3);
  train(model, clips, {}, tc);
  Adam adam(model.parameters(), {});
  for (auto& p : model.parameters()) p.var->ensure_grad().fill(0.01);
  adam.step();

  const Checkpoint ck = make_checkpoint(model, &adam, "abc123", 7);
  save_checkpoint(dir / "m.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.config_digest == "abc123");
  CHECK(back.epoch == 7);
  CHECK(to_json(back.config) == to_json(mc));
  CHECK(back.parameter_names == ck.parameter_names);
  CHECK(back.buffer_names == ck.buffer_names);
  REQUIRE(back.optimizer.has_value());
  CHECK(back.optimizer->step == 1);
  for (std::size_t i = 0; i < ck.state.parameters.size(); ++i) {
    for (std::size_t k = 0; k < ck.state.parameters[i].numel(); ++k) {
      CHECK(back.state.parameters[i][k] == ck.state.parameters[i][k]);
      CHECK(back.optimizer->m[i][k] == ck.optimizer->m[i][k]);
      CHECK(back.optimizer->v[i][k] == ck.optimizer->v[i][k]);
    }
  }
  for (std::size_t i = 0; i < ck.state.buffers.size(); ++i) {
    for (std::size_t k = 0; k < ck.state.buffers[i].numel(); ++k) {
      CHECK(back.state.buffers[i][k] == ck.state.buffers[i][k]);
    }
  }

  Model fresh(mc);
  restore(fresh, back);
  const auto pa = predict(model, clips), pb = predict(fresh, clips);
  for (std::size_t c = 0; c < pa.size(); ++c) {
    for (std::size_t t = 0; t < pa[c].size(); ++t) CHECK(pa[c][t].f0_hz == pb[c][t].f0_hz);
  }

  ModelConfig other = mc;
  other.task = Task::kM2;
  Model wrong(other);
  CHECK_THROWS_AS(restore(wrong, back), ConfigError);

  const auto size = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::copy_file(dir / "m.ckpt", dir / "cut.ckpt");
  std::filesystem::resize_file(dir / "cut.ckpt", size - 9);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), FormatError);
  {
    std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
    junk << "not a checkpoint\n";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train config JSON") {
  TrainConfig tc;
  tc.epochs = 3;
  tc.cosine_lr = true;
  tc.beta_nll = 0.25;
  CHECK(to_json(train_config_from_json(to_json(tc))) == to_json(tc));
  auto j = to_json(tc);
  j["nope"] = 0;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  j = to_json(tc);
  j["epochs"] = -1;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  j = to_json(tc);
  j["batch_size"] = 0;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
}

TEST_CASE("training learns, is deterministic and resumes exactly") {
  ModelConfig mc = ModelConfig::tiny();
  mc.dropout_rate = 0.1;
  mc.seed = 4;
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  tc.cosine_lr = true;
  tc.seed = 4;
  const auto train_set = learnable_clips(mc, 12, 8, 21);
  const auto val_set = learnable_clips(mc, 4, 8, 22);

  Model a(mc);
  const TrainResult ra = train(a, train_set, val_set, tc);
  REQUIRE(ra.log.size() == 5);
  CHECK(ra.log.back().train_loss < ra.log.front().train_loss);
  for (std::size_t e = 0; e < ra.log.size(); ++e) {
    CHECK(ra.log[e].epoch == static_cast<int>(e));
    CHECK(std::isfinite(ra.log[e].val_oa));
  }
  double best_oa = -1.0;
  for (const auto& e : ra.log) best_oa = std::max(best_oa, e.val_oa);
  CHECK(ra.log[static_cast<std::size_t>(ra.best_epoch)].val_oa == best_oa);
  CHECK(ra.best.epoch == ra.best_epoch);

  Model b(mc);
  const TrainResult rb = train(b, train_set, val_set, tc);
  for (std::size_t e = 0; e < ra.log.size(); ++e) {
    CHECK(rb.log[e].train_loss == ra.log[e].train_loss);
    CHECK(rb.log[e].val_oa == ra.log[e].val_oa);
  }

  // interrupt after epoch 2, then resume
  Model c(mc);
  TrainOptions first;
  Checkpoint last, best;
  std::vector<EpochLog> history;
  first.on_epoch = [&](const EpochLog& e, const Checkpoint& ck, bool improved) {
    history.push_back(e);
    last = ck;
    if (improved) best = ck;
    if (e.epoch == 2) throw std::runtime_error("stop");
  };
  CHECK_THROWS_AS(train(c, train_set, val_set, tc, first), std::runtime_error);
  CHECK(last.epoch == 2);

  Model d(mc);
  TrainOptions second;
  second.resume = &last;
  second.resume_best = &best;
  second.history = history;
  const TrainResult rd = train(d, train_set, val_set, tc, second);
  REQUIRE(rd.log.size() == ra.log.size());
  for (std::size_t e = 0; e < ra.log.size(); ++e) {
    CHECK(rd.log[e].train_loss == ra.log[e].train_loss);
    CHECK(rd.log[e].val_loss == ra.log[e].val_loss);
    CHECK(rd.log[e].lambda_t == ra.log[e].lambda_t);
  }
  CHECK(rd.best_epoch == ra.best_epoch);
  for (std::size_t i = 0; i < ra.best.state.parameters.size(); ++i) {
    for (std::size_t k = 0; k < ra.best.state.parameters[i].numel(); ++k) {
      CHECK(rd.best.state.parameters[i][k] == ra.best.state.parameters[i][k]);
    }
  }
  const ModelState fa = a.state(), fd = d.state();
  for (std::size_t i = 0; i < fa.parameters.size(); ++i) {
    for (std::size_t k = 0; k < fa.parameters[i].numel(); ++k) CHECK(fd.parameters[i][k] == fa.parameters[i][k]);
  }
}

TEST_CASE("KL anneal ramps over the warmup epochs") {
  ModelConfig mc = ModelConfig::tiny();
  mc.task = Task::kM1;
  TrainConfig tc;
  tc.epochs = 6;
  tc.kl_warmup_epochs = 4;
  tc.batch_size = 4;
  Model model(mc);
  const TrainResult r = train(model, random_clips(mc, 4, 4, 2), {}, tc);
  REQUIRE(r.log.size() == 6);
  for (const auto& e : r.log) CHECK(e.lambda_t == doctest::Approx(std::min(1.0, e.epoch / 4.0)));
  CHECK(std::isnan(r.log[0].val_oa));
  CHECK(r.best_epoch == 5);
}

TEST_CASE("TCP trains the confidence head in a second phase") {
  ModelConfig mc = ModelConfig::tiny();
  mc.task = Task::kTcp;
  TrainConfig tc;
  tc.epochs = 2;
  tc.tcp_confidence_epochs = 2;
  tc.batch_size = 4;
  Model model(mc);
  const TrainResult r = train(model, random_clips(mc, 4, 4, 6), random_clips(mc, 2, 4, 7), tc);
  CHECK(r.log.size() == 4);
  const auto pred = predict(model, random_clips(mc, 1, 4, 8));
  for (const auto& f : pred[0]) {
    CHECK(f.confidence >= 0.0);
    CHECK(f.confidence <= 1.0);
  }
}

TEST_CASE("non-finite inputs raise TrainingDiverged") {
  ModelConfig mc = ModelConfig::tiny();
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 2;
  auto clips = random_clips(mc, 2, 4, 9);
  clips[1].features.values[5] = std::nan("");
  Model model(mc);
  try {
    train(model, clips, {}, tc);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.log().empty());
    CHECK(e.last_good().epoch == -1);
  }
}

TEST_CASE("predictions and evaluation") {
  for (Task task : {Task::kM1, Task::kM2, Task::kR1, Task::kR2, Task::kBetaNll}) {
    ModelConfig mc = ModelConfig::tiny();
    mc.task = task;
    Model model(mc);
    const auto clips = random_clips(mc, 3, 5, 10);
    const auto pred = predict(model, clips, 2);
    REQUIRE(pred.size() == 3);
    const PitchGrid grid = mc.grid();
    for (const auto& clip : pred) {
      REQUIRE(clip.size() == 5);
      for (const auto& f : clip) {
        CHECK(f.voicing_prob >= 0.0);
        CHECK(f.voicing_prob <= 1.0);
        CHECK(f.f0_hz >= 0.0);
        if (task == Task::kM1 || task == Task::kM2) {
          CHECK(f.uncertainty.aleatoric >= 0.0);
          CHECK(f.uncertainty.epistemic >= 0.0);
        }
        if (task == Task::kBetaNll) CHECK(f.variance > 0.0);
      }
      const auto f0 = predicted_f0(clip);
      CHECK(f0.size() == 5);
    }
    const Evaluation ev = evaluate(model, clips, 2);
    CHECK(ev.per_clip.size() == 3);
    double sum = 0.0;
    for (const auto& s : ev.per_clip) sum += s.oa;
    CHECK(ev.mean.oa == doctest::Approx(sum / 3.0));
  }
}
