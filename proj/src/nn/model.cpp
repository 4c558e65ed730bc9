// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/nn/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>
#include <set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "evimelody/errors.hpp"

namespace evimelody::nn {

std::string to_string(Task task) {
  switch (task) {
    case Task::kM1: return "M1";
    case Task::kM2: return "M2";
    case Task::kR1: return "R1";
    case Task::kR2: return "R2";
    case Task::kBetaNll: return "beta-nll";
    case Task::kTcp: return "TCP";
  }
  return "?";
}

Task task_from_string(const std::string& name) {
  std::string s;
  for (char c : name) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "m1") return Task::kM1;
  if (s == "m2") return Task::kM2;
  if (s == "r1") return Task::kR1;
  if (s == "r2") return Task::kR2;
  if (s == "beta-nll" || s == "beta_nll" || s == "betanll") return Task::kBetaNll;
  if (s == "tcp") return Task::kTcp;
  throw ConfigError("unknown task '" + name + "' (expected M1, M2, R1, R2, beta-nll or TCP)");
}

bool has_voicing_head(Task task) { return task != Task::kR1 && task != Task::kR2; }

TargetMode target_mode(Task task) {
  switch (task) {
    case Task::kM1:
    case Task::kTcp: return TargetMode::kClassBin;
    case Task::kR1: return TargetMode::kRawHz;
    default: return TargetMode::kQuantizedCents;
  }
}

ModelConfig ModelConfig::paper_scale() { return ModelConfig{}; }

ModelConfig ModelConfig::desk_scale() {
  ModelConfig c;
  c.block_filters = {8, 16};
  c.bottleneck_ratio = 2;
  c.n_bins = 64;
  c.f_min = 103.83;
  c.cents_per_bin = 50.0;
  c.input_bins = 257;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.block_filters = {4, 8};
  c.bottleneck_ratio = 2;
  c.n_bins = 16;
  c.f_min = 103.83;
  c.cents_per_bin = 200.0;
  c.input_bins = 65;
  return c;
}

PitchGrid ModelConfig::grid() const { return PitchGrid(f_min, n_bins, cents_per_bin); }

int ModelConfig::head_width() const {
  switch (task) {
    case Task::kM1:
    case Task::kTcp: return n_bins;
    case Task::kBetaNll: return 2;
    default: return 4;
  }
}

int ModelConfig::feature_width() const {
  int f = input_bins;
  for (std::size_t i = 0; i < block_filters.size(); ++i) f /= pooling;
  const int channels = block_filters.empty() ? 1 : block_filters.back();
  const int trunk = reduction == FrequencyReduction::kFlatten ? channels * f : channels;
  return head_hidden > 0 ? head_hidden : trunk;
}

void ModelConfig::validate() const {
  if (block_filters.empty()) throw ConfigError("model.block_filters must not be empty");
  for (int f : block_filters) {
    if (f < 1) throw ConfigError("model.block_filters entries must be positive");
  }
  if (bottleneck_ratio < 1) throw ConfigError("model.bottleneck_ratio must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("model.dropout_rate must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("model.weight_decay must be >= 0");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("model.leaky_slope must be in [0, 1)");
  if (pooling < 1) throw ConfigError("model.pooling must be >= 1");
  if (input_bins < 1) throw ConfigError("model.input_bins must be positive");
  if (head_hidden < 0) throw ConfigError("model.head_hidden must be >= 0");
  if (!(target_scale_cents > 0.0)) throw ConfigError("model.target_scale_cents must be > 0");
  int f = input_bins;
  for (std::size_t i = 0; i < block_filters.size(); ++i) f /= pooling;
  if (f < 1) throw ConfigError("model.input_bins too small for the pooling schedule");
  (void)grid();
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"block_filters", c.block_filters},
      {"bottleneck_ratio", c.bottleneck_ratio},
      {"dropout_rate", c.dropout_rate},
      {"weight_decay", c.weight_decay},
      {"task", to_string(c.task)},
      {"n_bins", c.n_bins},
      {"f_min", c.f_min},
      {"cents_per_bin", c.cents_per_bin},
      {"leaky_slope", c.leaky_slope},
      {"pooling", c.pooling},
      {"input_bins", c.input_bins},
      {"head_hidden", c.head_hidden},
      {"target_scale_cents", c.target_scale_cents},
      {"frequency_reduction", c.reduction == FrequencyReduction::kFlatten ? "flatten" : "average"},
      {"seed", c.seed},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known{"preset",      "block_filters", "bottleneck_ratio", "dropout_rate",
                                           "weight_decay", "task",          "n_bins",           "f_min",
                                           "cents_per_bin", "leaky_slope",  "pooling",          "input_bins",
                                           "head_hidden",  "target_scale_cents", "frequency_reduction", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("model: unknown key '" + key + "'");
  }
  ModelConfig c;
  try {
    if (j.contains("preset")) {
      const std::string preset = j.at("preset").get<std::string>();
      if (preset == "paper") c = ModelConfig::paper_scale();
      else if (preset == "desk") c = ModelConfig::desk_scale();
      else if (preset == "tiny") c = ModelConfig::tiny();
      else throw ConfigError("model.preset: unknown preset '" + preset + "'");
    }
    if (j.contains("block_filters")) c.block_filters = j.at("block_filters").get<std::vector<int>>();
    if (j.contains("bottleneck_ratio")) c.bottleneck_ratio = j.at("bottleneck_ratio").get<int>();
    if (j.contains("dropout_rate")) c.dropout_rate = j.at("dropout_rate").get<double>();
    if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("task")) c.task = task_from_string(j.at("task").get<std::string>());
    if (j.contains("n_bins")) c.n_bins = j.at("n_bins").get<int>();
    if (j.contains("f_min")) c.f_min = j.at("f_min").get<double>();
    if (j.contains("cents_per_bin")) c.cents_per_bin = j.at("cents_per_bin").get<double>();
    if (j.contains("leaky_slope")) c.leaky_slope = j.at("leaky_slope").get<double>();
    if (j.contains("pooling")) c.pooling = j.at("pooling").get<int>();
    if (j.contains("input_bins")) c.input_bins = j.at("input_bins").get<int>();
    if (j.contains("head_hidden")) c.head_hidden = j.at("head_hidden").get<int>();
    if (j.contains("target_scale_cents")) c.target_scale_cents = j.at("target_scale_cents").get<double>();
    if (j.contains("frequency_reduction")) {
      const std::string r = j.at("frequency_reduction").get<std::string>();
      if (r == "flatten") c.reduction = FrequencyReduction::kFlatten;
      else if (r == "average") c.reduction = FrequencyReduction::kAverage;
      else throw ConfigError("model.frequency_reduction must be 'flatten' or 'average'");
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  c.validate();
  return c;
}

TargetScaler regression_scaler(const ModelConfig& config) {
  const PitchGrid grid = config.grid();
  if (config.task == Task::kR1) {
    const double lo = grid.f_min();
    const double hi = grid.upper_edge_hz();
    return {(lo + hi) / 2.0, (hi - lo) * config.target_scale_cents / grid.span_cents()};
  }
  return {grid.span_cents() / 2.0, config.target_scale_cents};
}

// ---------------------------------------------------------------------------

namespace {

// Serve the per-step activation buffers from the heap rather than fresh mmap regions.
void tune_allocator() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
  });
#endif
}

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)), dropout_rng_(mix_seed(config_.seed, 1)) {
  tune_allocator();
  config_.validate();
  Rng rng(config_.seed);
  const double gain = std::sqrt(2.0 / (1.0 + config_.leaky_slope * config_.leaky_slope));
  auto he = [&](int fan_in) { return gain * std::sqrt(3.0 / fan_in); };

  blocks_.reserve(config_.block_filters.size());
  int in_ch = 1;
  for (std::size_t b = 0; b < config_.block_filters.size(); ++b) {
    const int out = config_.block_filters[b];
    const int mid = std::max(1, out / config_.bottleneck_ratio);
    const std::string p = "block" + std::to_string(b) + ".";
    Block& blk = blocks_.emplace_back();
    blk.reduce = add_param(p + "reduce.weight", {mid, in_ch, 1, 1}, true, he(in_ch), rng);
    blk.bn_reduce = add_norm(p + "reduce.bn", mid);
    blk.conv = add_param(p + "conv.weight", {mid, mid, 3, 3}, true, he(mid * 9), rng);
    blk.bn_conv = add_norm(p + "conv.bn", mid);
    blk.expand = add_param(p + "expand.weight", {out, mid, 1, 1}, true, he(mid), rng);
    blk.bn_expand = add_norm(p + "expand.bn", out);
    if (in_ch != out) {
      blk.project = add_param(p + "project.weight", {out, in_ch, 1, 1}, true, he(in_ch), rng);
      blk.bn_project = add_norm(p + "project.bn", out);
    }
    in_ch = out;
  }
  for (Block& blk : blocks_) {
    const std::string p = "block" + std::to_string(&blk - blocks_.data()) + ".";
    norms_.emplace_back(p + "reduce.bn", &blk.bn_reduce);
    norms_.emplace_back(p + "conv.bn", &blk.bn_conv);
    norms_.emplace_back(p + "expand.bn", &blk.bn_expand);
    if (blk.project) norms_.emplace_back(p + "project.bn", &blk.bn_project);
  }

  int width = config_.feature_width();
  if (config_.head_hidden > 0) {
    ModelConfig trunk_only = config_;
    trunk_only.head_hidden = 0;
    const int d = trunk_only.feature_width();
    hidden_w_ = add_param("hidden.weight", {config_.head_hidden, d}, true, he(d), rng);
    hidden_b_ = add_param("hidden.bias", {config_.head_hidden}, false, 0.0, rng);
  }
  const double lin = std::sqrt(1.0 / width);
  if (has_voicing_head(config_.task)) {
    voicing_w_ = add_param("voicing.weight", {1, width}, true, lin, rng);
    voicing_b_ = add_param("voicing.bias", {1}, false, 0.0, rng);
  }
  head_w_ = add_param("head.weight", {config_.head_width(), width}, true, lin, rng);
  head_b_ = add_param("head.bias", {config_.head_width()}, false, 0.0, rng);
  if (config_.task == Task::kTcp) {
    conf_w_ = add_param("confidence.weight", {1, width}, true, lin, rng);
    conf_b_ = add_param("confidence.bias", {1}, false, 0.0, rng);
  }
}

Var Model::add_param(const std::string& name, Shape shape, bool decay, double bound, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  if (bound > 0.0) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  }
  Var v = make_leaf(std::move(t), true);
  params_.push_back({name, v, decay});
  return v;
}

Model::Norm Model::add_norm(const std::string& name, int channels) {
  Norm n;
  n.gamma = make_leaf(Tensor({channels}, 1.0), true);
  n.beta = make_leaf(Tensor({channels}, 0.0), true);
  n.state.running_mean = Tensor({channels}, 0.0);
  n.state.running_var = Tensor({channels}, 1.0);
  params_.push_back({name + ".gamma", n.gamma, false});
  params_.push_back({name + ".beta", n.beta, false});
  return n;
}

Var Model::norm(const Var& x, Norm& n, bool training) {
  return ops::batch_norm(x, n.gamma, n.beta, n.state, training);
}

Model::Output Model::forward(const Tensor& input, bool training) {
  if (input.rank() != 4 || input.dim(1) != 1) {
    throw ConfigError("model input must be [clips, 1, frames, bins], got " + shape_string(input.shape()));
  }
  if (input.dim(3) != config_.input_bins) {
    throw ConfigError("model expects " + std::to_string(config_.input_bins) + " frequency bins, got " +
                      std::to_string(input.dim(3)));
  }
  const double slope = config_.leaky_slope;
  Var x = make_leaf(input, false);
  for (Block& blk : blocks_) {
    Var h = ops::leaky_relu(norm(ops::conv2d(x, blk.reduce), blk.bn_reduce, training), slope);
    h = ops::leaky_relu(norm(ops::conv2d(h, blk.conv), blk.bn_conv, training), slope);
    h = norm(ops::conv2d(h, blk.expand), blk.bn_expand, training);
    Var skip = blk.project ? norm(ops::conv2d(x, blk.project), blk.bn_project, training) : x;
    x = ops::max_pool_freq(ops::leaky_relu(ops::add(h, skip), slope), config_.pooling);
  }

  Output out;
  out.clips = static_cast<int>(input.dim(0));
  out.frames = static_cast<int>(input.dim(2));
  Var feat = config_.reduction == FrequencyReduction::kFlatten ? ops::flatten_frames(x) : ops::mean_over_freq(x);
  feat = ops::dropout(feat, config_.dropout_rate, training, dropout_rng_);
  if (hidden_w_) {
    feat = ops::leaky_relu(ops::linear(feat, hidden_w_, hidden_b_), slope);
    feat = ops::dropout(feat, config_.dropout_rate, training, dropout_rng_);
  }
  out.features = feat;
  if (voicing_w_) out.voicing = ops::linear(feat, voicing_w_, voicing_b_);
  out.head = ops::linear(feat, head_w_, head_b_);
  if (conf_w_) out.confidence = ops::linear(feat, conf_w_, conf_b_);
  return out;
}

Model::Output Model::forward(std::span<const dsp::FeatureClip* const> clips, bool training) {
  return forward(stack_clips(clips), training);
}

Var Model::confidence_head(const Var& features) {
  if (!conf_w_) throw ConfigError("confidence head exists only for the TCP task");
  return ops::linear(features, conf_w_, conf_b_);
}

std::vector<Buffer> Model::buffers() {
  std::vector<Buffer> out;
  for (auto& [name, n] : norms_) {
    out.push_back({name + ".running_mean", &n->state.running_mean});
    out.push_back({name + ".running_var", &n->state.running_var});
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var->value.numel();
  return n;
}

ModelState Model::state() const {
  ModelState s;
  for (const auto& p : params_) s.parameters.push_back(p.var->value);
  for (const auto& [name, n] : norms_) {
    s.buffers.push_back(n->state.running_mean);
    s.buffers.push_back(n->state.running_var);
  }
  return s;
}

void Model::load_state(const ModelState& s) {
  if (s.parameters.size() != params_.size() || s.buffers.size() != 2 * norms_.size()) {
    throw ArgumentError("model state does not match the architecture");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (s.parameters[i].shape() != params_[i].var->value.shape()) {
      throw ArgumentError("model state shape mismatch for " + params_[i].name);
    }
    params_[i].var->value = s.parameters[i];
    ++params_[i].var->version;
  }
  for (std::size_t i = 0; i < norms_.size(); ++i) {
    norms_[i].second->state.running_mean = s.buffers[2 * i];
    norms_[i].second->state.running_var = s.buffers[2 * i + 1];
  }
}

void Model::set_trainable(const std::vector<std::string>& prefixes) {
  for (auto& p : params_) {
    bool on = prefixes.empty();
    for (const auto& pre : prefixes) on = on || p.name.rfind(pre, 0) == 0;
    p.var->requires_grad = on;
  }
}

Tensor stack_clips(std::span<const dsp::FeatureClip* const> clips) {
  if (clips.empty()) throw ArgumentError("stack_clips: no clips");
  const int T = clips[0]->n_frames;
  const int F = clips[0]->n_freq;
  Tensor out({static_cast<std::int64_t>(clips.size()), 1, T, F});
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (clips[i]->n_frames != T || clips[i]->n_freq != F) {
      throw ConfigError("clips in a batch must share the same shape");
    }
    std::copy(clips[i]->values.begin(), clips[i]->values.end(),
              out.data() + i * static_cast<std::size_t>(T) * F);
  }
  return out;
}

}  // namespace evimelody::nn
