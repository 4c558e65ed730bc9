// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/nn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace evimelody::nn {

namespace ev = evidential;

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"cosine_lr", c.cosine_lr},
          {"lr_floor", c.lr_floor},
          {"evidential_weight", c.evidential_weight},
          {"nig_coupling", c.nig_coupling},
          {"kl_warmup_epochs", c.kl_warmup_epochs},
          {"beta_nll", c.beta_nll},
          {"tcp_confidence_epochs", c.tcp_confidence_epochs},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  static const std::set<std::string> known{"epochs",           "batch_size", "lr", "cosine_lr", "lr_floor",
                                           "evidential_weight", "nig_coupling", "kl_warmup_epochs",
                                           "beta_nll",         "tcp_confidence_epochs", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("training: unknown key '" + key + "'");
  }
  TrainConfig c;
  try {
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("cosine_lr")) c.cosine_lr = j.at("cosine_lr").get<bool>();
    if (j.contains("lr_floor")) c.lr_floor = j.at("lr_floor").get<double>();
    if (j.contains("evidential_weight")) c.evidential_weight = j.at("evidential_weight").get<double>();
    if (j.contains("nig_coupling")) c.nig_coupling = j.at("nig_coupling").get<double>();
    if (j.contains("kl_warmup_epochs")) c.kl_warmup_epochs = j.at("kl_warmup_epochs").get<int>();
    if (j.contains("beta_nll")) c.beta_nll = j.at("beta_nll").get<double>();
    if (j.contains("tcp_confidence_epochs")) c.tcp_confidence_epochs = j.at("tcp_confidence_epochs").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training: ") + e.what());
  }
  if (c.epochs < 0) throw ConfigError("training.epochs must be >= 0");
  if (c.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("training.lr must be > 0");
  if (!(c.lr_floor > 0.0 && c.lr_floor <= 1.0)) throw ConfigError("training.lr_floor must be in (0, 1]");
  if (!(c.evidential_weight >= 0.0)) throw ConfigError("training.evidential_weight must be >= 0");
  if (!(c.nig_coupling >= 0.0)) throw ConfigError("training.nig_coupling must be >= 0");
  if (c.kl_warmup_epochs < 0) throw ConfigError("training.kl_warmup_epochs must be >= 0");
  if (!(c.beta_nll >= 0.0 && c.beta_nll <= 1.0)) throw ConfigError("training.beta_nll must be in [0, 1]");
  if (c.tcp_confidence_epochs < 0) throw ConfigError("training.tcp_confidence_epochs must be >= 0");
  return c;
}

namespace {

const FrameTarget& frame_target(Batch clips, int frames, std::size_t row) {
  const auto& targets = clips[row / frames]->targets;
  const std::size_t t = row % frames;
  if (t >= targets.size()) throw ArgumentError("clip has fewer targets than feature frames");
  return targets[t];
}

void softmax_row(const double* logits, int k, double* out) {
  const double mx = *std::max_element(logits, logits + k);
  double z = 0.0;
  for (int i = 0; i < k; ++i) z += (out[i] = std::exp(logits[i] - mx));
  for (int i = 0; i < k; ++i) out[i] /= z;
}

// Target of a frame on the regression scale. R1/R2 also regress unvoiced frames,
// toward 0 Hz or one octave below f_min respectively.
double regression_target(const FrameTarget& t, Task task) {
  if (task == Task::kR1) return t.voiced ? t.hz_value : 0.0;
  if (!t.voiced) return -1200.0;
  return *t.cents_value;
}

bool regression_voiced(double value, Task task, const PitchGrid& grid) {
  if (task == Task::kR1) return value >= grid.f_min() / std::sqrt(2.0);
  return value >= -600.0;
}

}  // namespace

Var task_loss(const Model::Output& out, Batch clips, const ModelConfig& model, const TrainConfig& config,
              double lambda_t) {
  const std::size_t M = static_cast<std::size_t>(out.clips) * out.frames;
  if (clips.size() != static_cast<std::size_t>(out.clips)) throw ArgumentError("task_loss: batch size mismatch");
  const int W = model.head_width();
  const Tensor& head = out.head->value;
  const double w = config.evidential_weight;

  std::vector<Var> inputs;
  std::vector<Tensor> grads;
  double total = 0.0;

  if (out.voicing) {
    std::vector<double> v(M);
    for (std::size_t m = 0; m < M; ++m) v[m] = frame_target(clips, out.frames, m).voiced ? 1.0 : 0.0;
    ev::BinaryLoss bce = ev::bce_with_logits(out.voicing->value.values(), v);
    total += bce.value;
    inputs.push_back(out.voicing);
    grads.emplace_back(out.voicing->value.shape(), std::move(bce.grad_logits));
  }

  Tensor dhead(head.shape(), 0.0);
  switch (model.task) {
    case Task::kM1: {
      std::vector<double> alpha(M * W);
      std::vector<ev::ClassFrame> frames(M);
      for (std::size_t m = 0; m < M; ++m) {
        const auto raw = std::span<const double>(head.data() + m * W, W);
        const ev::DirichletParams d = ev::dirichlet_from_logits(raw);
        std::copy(d.alpha.begin(), d.alpha.end(), alpha.begin() + m * W);
        const FrameTarget& t = frame_target(clips, out.frames, m);
        frames[m] = {std::span<const double>(alpha.data() + m * W, W), t.voiced ? *t.bin_index : -1, t.voiced};
      }
      ev::ClassBatchLoss l = ev::loss_m1(frames, lambda_t);
      total += w * l.value;
      for (std::size_t i = 0; i < M * W; ++i) dhead[i] = w * l.grad_alpha[i] * ev::sigmoid(head[i]);
      break;
    }
    case Task::kM2:
    case Task::kR1:
    case Task::kR2: {
      const TargetScaler scaler = regression_scaler(model);
      const bool all_frames = model.task != Task::kM2;
      std::vector<ev::RegressionFrame> frames(M);
      for (std::size_t m = 0; m < M; ++m) {
        const FrameTarget& t = frame_target(clips, out.frames, m);
        frames[m].params = ev::nig_from_raw(std::span<const double, 4>(head.data() + m * 4, 4));
        frames[m].voiced = all_frames || t.voiced;
        frames[m].target = frames[m].voiced ? scaler.normalize(regression_target(t, model.task)) : 0.0;
      }
      ev::RegressionBatchLoss l = ev::loss_m2(frames, config.nig_coupling);
      const double scale = all_frames ? 1.0 : w;
      total += scale * l.value;
      for (std::size_t m = 0; m < M; ++m) {
        const auto jac = ev::nig_from_raw_jacobian(std::span<const double, 4>(head.data() + m * 4, 4));
        const ev::NigGrad& g = l.grads[m];
        dhead[m * 4 + 0] = scale * g.d_gamma * jac[0];
        dhead[m * 4 + 1] = scale * g.d_nu * jac[1];
        dhead[m * 4 + 2] = scale * g.d_alpha * jac[2];
        dhead[m * 4 + 3] = scale * g.d_beta * jac[3];
      }
      break;
    }
    case Task::kBetaNll: {
      const TargetScaler scaler = regression_scaler(model);
      std::size_t voiced = 0;
      for (std::size_t m = 0; m < M; ++m) voiced += frame_target(clips, out.frames, m).voiced;
      if (voiced == 0) break;
      double sum = 0.0;
      for (std::size_t m = 0; m < M; ++m) {
        const FrameTarget& t = frame_target(clips, out.frames, m);
        if (!t.voiced) continue;
        ev::BetaNllGrad g;
        sum += ev::beta_nll_loss(head[m * 2], head[m * 2 + 1], scaler.normalize(*t.cents_value), config.beta_nll, g);
        dhead[m * 2] = w * g.d_mu / static_cast<double>(voiced);
        dhead[m * 2 + 1] = w * g.d_log_var / static_cast<double>(voiced);
      }
      total += w * sum / static_cast<double>(voiced);
      break;
    }
    case Task::kTcp: {
      std::size_t voiced = 0;
      for (std::size_t m = 0; m < M; ++m) voiced += frame_target(clips, out.frames, m).voiced;
      if (voiced == 0) break;
      std::vector<double> p(W);
      double sum = 0.0;
      for (std::size_t m = 0; m < M; ++m) {
        const FrameTarget& t = frame_target(clips, out.frames, m);
        if (!t.voiced) continue;
        softmax_row(head.data() + m * W, W, p.data());
        const int y = *t.bin_index;
        sum += -std::log(std::max(p[y], std::numeric_limits<double>::min()));
        for (int k = 0; k < W; ++k) dhead[m * W + k] = w * (p[k] - (k == y ? 1.0 : 0.0)) / static_cast<double>(voiced);
      }
      total += w * sum / static_cast<double>(voiced);
      break;
    }
  }
  inputs.push_back(out.head);
  grads.push_back(std::move(dhead));
  return ops::external_loss(std::move(inputs), total, std::move(grads));
}

Var tcp_confidence_loss(const Var& confidence_logits, const Tensor& class_logits, Batch clips) {
  const std::size_t M = confidence_logits->value.numel();
  const int W = static_cast<int>(class_logits.dim(1));
  const int frames = static_cast<int>(M / clips.size());
  std::size_t voiced = 0;
  for (std::size_t m = 0; m < M; ++m) voiced += frame_target(clips, frames, m).voiced;
  Tensor grad(confidence_logits->value.shape(), 0.0);
  double sum = 0.0;
  if (voiced > 0) {
    std::vector<double> p(W);
    for (std::size_t m = 0; m < M; ++m) {
      const FrameTarget& t = frame_target(clips, frames, m);
      if (!t.voiced) continue;
      softmax_row(class_logits.data() + m * W, W, p.data());
      const double target = ev::tcp_target(p, *t.bin_index);
      const double s = ev::sigmoid(confidence_logits->value[m]);
      sum += (s - target) * (s - target);
      grad[m] = 2.0 * (s - target) * s * (1.0 - s) / static_cast<double>(voiced);
    }
    sum /= static_cast<double>(voiced);
  }
  return ops::external_loss({confidence_logits}, sum, {std::move(grad)});
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<const dataio::LabeledClip*>> make_batches(const std::vector<dataio::LabeledClip>& set,
                                                                 int batch_size, Rng* shuffle) {
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle->below(i)]);
  }
  std::vector<std::vector<const dataio::LabeledClip*>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    auto& b = batches.emplace_back();
    for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) b.push_back(&set[order[j]]);
  }
  return batches;
}

std::vector<const dsp::FeatureClip*> features_of(std::span<const dataio::LabeledClip* const> batch) {
  std::vector<const dsp::FeatureClip*> f;
  for (const auto* c : batch) f.push_back(&c->features);
  return f;
}

bool grads_finite(const Model& model) {
  for (const auto& p : model.parameters()) {
    if (p.var->requires_grad && !p.var->grad.empty() && !p.var->grad.all_finite()) return false;
  }
  return true;
}

struct Phase {
  bool confidence_only = false;
};

double run_loss(Model& model, Batch batch, const TrainConfig& config, double lambda_t, bool training, Phase phase) {
  const auto feats = features_of(batch);
  if (!phase.confidence_only) {
    Model::Output out = model.forward(feats, training);
    Var loss = task_loss(out, batch, model.config(), config, lambda_t);
    const double value = loss->value[0];
    if (training && std::isfinite(value)) backward(loss);
    return value;
  }
  Model::Output out;
  {
    NoGradGuard guard;
    out = model.forward(feats, false);
  }
  Var conf = model.confidence_head(ops::detach(out.features));
  Var loss = tcp_confidence_loss(conf, out.head->value, batch);
  const double value = loss->value[0];
  if (training && std::isfinite(value)) backward(loss);
  return value;
}

}  // namespace

TrainResult train(Model& model, const std::vector<dataio::LabeledClip>& train_set,
                  const std::vector<dataio::LabeledClip>& val_set, const TrainConfig& config,
                  const TrainOptions& options) {
  if (train_set.empty()) throw ArgumentError("training set is empty");
  const Task task = model.config().task;
  const int main_epochs = config.epochs;
  const int total_epochs = main_epochs + (task == Task::kTcp ? config.tcp_confidence_epochs : 0);
  const ev::AnnealSchedule schedule(config.kl_warmup_epochs);

  AdamConfig adam_config{.lr = config.lr, .weight_decay = model.config().weight_decay};
  auto make_adam = [&](bool confidence_only) {
    for (auto& p : model.parameters()) {
      const bool conf = p.name.rfind("confidence.", 0) == 0;
      p.var->requires_grad = confidence_only ? conf : !conf;
    }
    return std::make_unique<Adam>(model.parameters(), adam_config);
  };

  int start_epoch = 0;
  bool in_confidence_phase = false;
  std::unique_ptr<Adam> adam = make_adam(false);
  TrainResult result;
  if (options.resume) {
    restore(model, *options.resume);
    start_epoch = options.resume->epoch + 1;
    in_confidence_phase = task == Task::kTcp && start_epoch >= main_epochs;
    if (in_confidence_phase) adam = make_adam(true);
    if (options.resume->optimizer) adam->load_state(*options.resume->optimizer);
  }

  Checkpoint last_good = make_checkpoint(model, adam.get(), options.config_digest, start_epoch - 1);
  result.best = last_good;
  double best_oa = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  if (options.resume) {
    for (const EpochLog& e : options.history) {
      if (e.epoch >= start_epoch) break;
      if (task == Task::kTcp && e.epoch == main_epochs) {
        best_oa = -1.0;
        best_loss = std::numeric_limits<double>::infinity();
      }
      result.log.push_back(e);
      bool improved = val_set.empty();
      if (!val_set.empty()) {
        const double oa = task == Task::kTcp && e.epoch >= main_epochs ? 0.0 : e.val_oa;
        improved = oa > best_oa || (oa == best_oa && e.val_loss < best_loss);
        if (improved) {
          best_oa = oa;
          best_loss = e.val_loss;
        }
      }
      if (improved) result.best_epoch = e.epoch;
    }
    if (options.resume_best && options.resume_best->epoch == result.best_epoch) result.best = *options.resume_best;
  }

  for (int epoch = start_epoch; epoch < total_epochs; ++epoch) {
    if (task == Task::kTcp && epoch == main_epochs && !in_confidence_phase) {
      // The confidence head is fitted on the best classifier with the trunk frozen.
      if (result.best_epoch >= 0) restore(model, result.best);
      in_confidence_phase = true;
      adam = make_adam(true);
      best_oa = -1.0;
      best_loss = std::numeric_limits<double>::infinity();
    }
    const Phase phase{in_confidence_phase};
    if (config.cosine_lr) {
      const int phase_start = in_confidence_phase ? main_epochs : 0;
      const int phase_len = in_confidence_phase ? total_epochs - main_epochs : main_epochs;
      const double progress = phase_len > 1 ? double(epoch - phase_start) / (phase_len - 1) : 1.0;
      const double f = config.lr_floor + (1.0 - config.lr_floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
      adam->set_lr(config.lr * f);
    }
    const double lambda_t = schedule.at(epoch);
    Rng shuffle(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    model.dropout_rng() = Rng(mix_seed(config.seed ^ 0xD5A0C1E7ULL, static_cast<std::uint64_t>(epoch)));

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : make_batches(train_set, config.batch_size, &shuffle)) {
      adam->zero_grad();
      double value;
      try {
        value = run_loss(model, batch, config, lambda_t, true, phase);
      } catch (const NumericError& e) {
        throw TrainingDiverged(std::string(e.what()) + " at epoch " + std::to_string(epoch), last_good, result.log);
      }
      if (!std::isfinite(value) || !grads_finite(model)) {
        throw TrainingDiverged("non-finite loss or gradient at epoch " + std::to_string(epoch), last_good,
                               result.log);
      }
      adam->step();
      loss_sum += value * static_cast<double>(batch.size());
      seen += batch.size();
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(seen);
    entry.lambda_t = lambda_t;
    entry.val_loss = std::numeric_limits<double>::quiet_NaN();
    entry.val_oa = std::numeric_limits<double>::quiet_NaN();
    bool improved = val_set.empty();
    if (!val_set.empty()) {
      NoGradGuard guard;
      double vsum = 0.0;
      try {
        for (const auto& batch : make_batches(val_set, config.batch_size, nullptr)) {
          vsum += run_loss(model, batch, config, lambda_t, false, phase) * static_cast<double>(batch.size());
        }
        entry.val_loss = vsum / static_cast<double>(val_set.size());
        entry.val_oa = evaluate(model, val_set, config.batch_size).mean.oa;
      } catch (const NumericError& e) {
        throw TrainingDiverged(std::string(e.what()) + " in validation at epoch " + std::to_string(epoch), last_good,
                               result.log);
      }
      if (!std::isfinite(entry.val_loss)) {
        throw TrainingDiverged("non-finite validation loss at epoch " + std::to_string(epoch), last_good, result.log);
      }
      // The confidence phase does not change predictions, so it is ranked by loss alone.
      const double oa = in_confidence_phase ? 0.0 : entry.val_oa;
      improved = oa > best_oa || (oa == best_oa && entry.val_loss < best_loss);
      if (improved) {
        best_oa = oa;
        best_loss = entry.val_loss;
      }
    }
    result.log.push_back(entry);
    last_good = make_checkpoint(model, adam.get(), options.config_digest, epoch);
    if (improved) {
      result.best = last_good;
      result.best_epoch = epoch;
    }
    if (options.on_epoch) options.on_epoch(entry, last_good, improved);
  }

  restore(model, result.best);
  for (auto& p : model.parameters()) p.var->requires_grad = true;
  return result;
}

// ---------------------------------------------------------------------------

std::vector<ClipPrediction> predict(Model& model, std::span<const dsp::FeatureClip* const> clips, int batch_size) {
  const ModelConfig& cfg = model.config();
  const PitchGrid grid = cfg.grid();
  const TargetScaler scaler = regression_scaler(cfg);
  const int W = cfg.head_width();
  std::vector<ClipPrediction> result;
  result.reserve(clips.size());
  NoGradGuard guard;
  std::vector<double> buf(W);
  for (std::size_t start = 0; start < clips.size(); start += batch_size) {
    const std::size_t end = std::min(clips.size(), start + static_cast<std::size_t>(batch_size));
    Model::Output out = model.forward(clips.subspan(start, end - start), false);
    const Tensor& head = out.head->value;
    for (int n = 0; n < out.clips; ++n) {
      ClipPrediction& clip = result.emplace_back(out.frames);
      for (int t = 0; t < out.frames; ++t) {
        const std::size_t m = static_cast<std::size_t>(n) * out.frames + t;
        FramePrediction& fp = clip[t];
        const double* row = head.data() + m * W;
        double hz = 0.0;
        switch (cfg.task) {
          case Task::kM1: {
            const ev::DirichletParams d = ev::dirichlet_from_logits(std::span<const double>(row, W));
            fp.uncertainty = ev::dirichlet_uncertainties(d);
            const int k = static_cast<int>(std::max_element(d.alpha.begin(), d.alpha.end()) - d.alpha.begin());
            hz = grid.bin_to_hz(k);
            break;
          }
          case Task::kTcp: {
            softmax_row(row, W, buf.data());
            const int k = static_cast<int>(std::max_element(buf.begin(), buf.end()) - buf.begin());
            hz = grid.bin_to_hz(k);
            fp.confidence = ev::sigmoid(out.confidence->value[m]);
            break;
          }
          case Task::kM2:
          case Task::kR1:
          case Task::kR2: {
            const ev::NigParams p = ev::nig_from_raw(std::span<const double, 4>(row, 4));
            const ev::UncertaintyPair u = ev::nig_uncertainties(p);
            const double s2 = scaler.scale * scaler.scale;
            fp.uncertainty = {u.aleatoric * s2, u.epistemic * s2};
            const double value = scaler.denormalize(p.gamma);
            if (cfg.task == Task::kR1) {
              hz = value;
            } else {
              hz = grid.cents_to_hz(value);
            }
            if (cfg.task != Task::kM2) {
              fp.voicing_prob = regression_voiced(value, cfg.task, grid) ? 1.0 : 0.0;
              if (hz <= 0.0) fp.voicing_prob = 0.0;
            }
            break;
          }
          case Task::kBetaNll: {
            hz = grid.cents_to_hz(scaler.denormalize(row[0]));
            fp.variance = std::exp(row[1]) * scaler.scale * scaler.scale;
            break;
          }
        }
        if (out.voicing) fp.voicing_prob = ev::sigmoid(out.voicing->value[m]);
        fp.f0_hz = fp.voicing_prob >= 0.5 ? hz : 0.0;
      }
    }
  }
  return result;
}

std::vector<ClipPrediction> predict(Model& model, const std::vector<dataio::LabeledClip>& clips, int batch_size) {
  std::vector<const dsp::FeatureClip*> feats;
  feats.reserve(clips.size());
  for (const auto& c : clips) feats.push_back(&c.features);
  return predict(model, std::span<const dsp::FeatureClip* const>(feats), batch_size);
}

std::vector<double> predicted_f0(const ClipPrediction& prediction) {
  std::vector<double> f0(prediction.size());
  for (std::size_t i = 0; i < prediction.size(); ++i) f0[i] = prediction[i].f0_hz;
  return f0;
}

Evaluation evaluate(Model& model, const std::vector<dataio::LabeledClip>& clips, int batch_size) {
  if (clips.empty()) throw ArgumentError("evaluation set is empty");
  const auto preds = predict(model, clips, batch_size);
  Evaluation e;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto ref = clips[i].reference_f0();
    const auto est = predicted_f0(preds[i]);
    e.per_clip.push_back(metrics::evaluate(ref, est));
  }
  e.mean = metrics::mean(e.per_clip);
  return e;
}

}  // namespace evimelody::nn
