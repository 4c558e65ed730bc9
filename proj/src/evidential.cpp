// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/evidential.hpp"

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <cmath>
#include <numbers>
#include <string>

#include "evimelody/errors.hpp"

namespace evimelody::evidential {

namespace {

using boost::math::digamma;
using boost::math::lgamma;
using boost::math::trigamma;

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite input");
  }
}

int one_hot_index(std::span<const double> y, std::size_t k) {
  if (y.size() != k) throw ArgumentError("one-hot target has wrong length");
  int index = -1;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 1.0) {
      if (index >= 0) throw ArgumentError("target is not one-hot");
      index = static_cast<int>(i);
    } else if (y[i] != 0.0) {
      throw ArgumentError("target is not one-hot");
    }
  }
  if (index < 0) throw ArgumentError("target is not one-hot");
  return index;
}

void check_class(int true_class, std::size_t k) {
  if (true_class < 0 || static_cast<std::size_t>(true_class) >= k) {
    throw ArgumentError("true class outside [0, K)");
  }
}

}  // namespace

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

AnnealSchedule::AnnealSchedule(int warmup_epochs) : warmup_epochs_(warmup_epochs) {
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
}

double AnnealSchedule::at(int epoch) const {
  if (warmup_epochs_ == 0) return 1.0;
  return std::min(1.0, std::max(0, epoch) / static_cast<double>(warmup_epochs_));
}

// ---------------------------------------------------------------------------

double DirichletParams::strength() const {
  double s = 0.0;
  for (double a : alpha) s += a;
  return s;
}

std::vector<double> DirichletParams::mean() const {
  const double s = strength();
  std::vector<double> p(alpha.size());
  for (std::size_t k = 0; k < alpha.size(); ++k) p[k] = alpha[k] / s;
  return p;
}

DirichletParams dirichlet_from_logits(std::span<const double> raw) {
  require_finite(raw, "dirichlet_from_logits");
  DirichletParams d;
  d.alpha.resize(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) d.alpha[k] = softplus(raw[k]) + 1.0;
  return d;
}

std::vector<double> dirichlet_from_logits_jacobian(std::span<const double> raw) {
  std::vector<double> j(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) j[k] = sigmoid(raw[k]);
  return j;
}

UncertaintyPair dirichlet_uncertainties(const DirichletParams& d) {
  const double s = d.strength();
  const double psi_s1 = digamma(s + 1.0);
  double aleatoric = 0.0;
  double entropy = 0.0;
  for (double a : d.alpha) {
    const double p = a / s;
    aleatoric += p * (psi_s1 - digamma(a + 1.0));
    if (p > 0.0) entropy -= p * std::log(p);
  }
  double epistemic = entropy - aleatoric;
  if (epistemic < 0.0 && epistemic > -1e-12) epistemic = 0.0;
  return {aleatoric, epistemic};
}

double dirichlet_nll(const DirichletParams& d, std::span<const double> one_hot) {
  const int j = one_hot_index(one_hot, d.size());
  return digamma(d.strength()) - digamma(d.alpha[j]);
}

double dirichlet_nll(const DirichletParams& d, int true_class, std::span<double> grad) {
  check_class(true_class, d.size());
  const double s = d.strength();
  const double tri_s = trigamma(s);
  for (std::size_t k = 0; k < d.size(); ++k) grad[k] = tri_s;
  grad[true_class] -= trigamma(d.alpha[true_class]);
  return digamma(s) - digamma(d.alpha[true_class]);
}

namespace {

// KL(Dir(a) || Dir(1)) and, optionally, its gradient with respect to a.
double kl_to_uniform(std::span<const double> a, std::span<double> grad) {
  const double k = static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a) s += v;
  const double psi_s = digamma(s);
  double kl = lgamma(s) - lgamma(k);
  for (double v : a) kl += -lgamma(v) + (v - 1.0) * (digamma(v) - psi_s);
  if (!grad.empty()) {
    const double tri_s = trigamma(s);
    for (std::size_t i = 0; i < a.size(); ++i) {
      grad[i] = (a[i] - 1.0) * trigamma(a[i]) - (s - k) * tri_s;
    }
  }
  return kl;
}

}  // namespace

double dirichlet_kl_uniform(const DirichletParams& d, std::span<const double> one_hot) {
  const int j = one_hot_index(one_hot, d.size());
  std::vector<double> tilde = d.alpha;
  tilde[j] = 1.0;
  return kl_to_uniform(tilde, {});
}

double dirichlet_kl_uniform(const DirichletParams& d, int true_class, std::span<double> grad) {
  check_class(true_class, d.size());
  std::vector<double> tilde = d.alpha;
  tilde[true_class] = 1.0;
  const double kl = kl_to_uniform(tilde, grad);
  grad[true_class] = 0.0;
  return kl;
}

ClassBatchLoss loss_m1(std::span<const ClassFrame> frames, double lambda_t) {
  ClassBatchLoss out;
  if (frames.empty()) return out;
  const std::size_t k = frames.front().alpha.size();
  out.grad_alpha.assign(frames.size() * k, 0.0);

  std::size_t voiced = 0;
  for (const auto& f : frames) voiced += f.voiced ? 1 : 0;
  if (voiced == 0) return out;

  const double scale = 1.0 / static_cast<double>(voiced);
  std::vector<double> kl_grad(k);
  DirichletParams d;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const ClassFrame& f = frames[i];
    if (!f.voiced) continue;
    if (f.alpha.size() != k) throw ArgumentError("loss_m1: inconsistent class count");
    d.alpha.assign(f.alpha.begin(), f.alpha.end());
    std::span<double> g(out.grad_alpha.data() + i * k, k);
    double value = dirichlet_nll(d, f.true_class, g);
    if (lambda_t != 0.0) {
      value += lambda_t * dirichlet_kl_uniform(d, f.true_class, kl_grad);
      for (std::size_t c = 0; c < k; ++c) g[c] += lambda_t * kl_grad[c];
    }
    for (std::size_t c = 0; c < k; ++c) g[c] *= scale;
    out.value += value;
  }
  out.value *= scale;
  return out;
}

// ---------------------------------------------------------------------------

NigParams nig_from_raw(std::span<const double, 4> raw) {
  require_finite(raw, "nig_from_raw");
  return {raw[0], softplus(raw[1]) + 1e-6, softplus(raw[2]) + 1.0 + 1e-6, softplus(raw[3]) + 1e-6};
}

std::array<double, 4> nig_from_raw_jacobian(std::span<const double, 4> raw) {
  return {1.0, sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])};
}

UncertaintyPair nig_uncertainties(const NigParams& p) {
  const double aleatoric = p.beta / (p.alpha - 1.0);
  return {aleatoric, aleatoric / p.nu};
}

double nig_nll(const NigParams& p, double y) {
  NigGrad unused;
  return nig_nll(p, y, unused);
}

double nig_nll(const NigParams& p, double y, NigGrad& grad) {
  const double err = y - p.gamma;
  const double omega = 2.0 * p.beta * (1.0 + p.nu);
  const double denom = err * err * p.nu + omega;
  const double a_half = p.alpha + 0.5;

  grad.d_gamma = -a_half * 2.0 * err * p.nu / denom;
  grad.d_nu = -0.5 / p.nu - p.alpha * 2.0 * p.beta / omega + a_half * (err * err + 2.0 * p.beta) / denom;
  grad.d_alpha = -std::log(omega) + std::log(denom) + digamma(p.alpha) - digamma(a_half);
  grad.d_beta = -p.alpha / p.beta + a_half * 2.0 * (1.0 + p.nu) / denom;

  return 0.5 * std::log(std::numbers::pi / p.nu) - p.alpha * std::log(omega) + a_half * std::log(denom) +
         lgamma(p.alpha) - lgamma(a_half);
}

double nig_regularizer(const NigParams& p, double y) {
  NigGrad unused;
  return nig_regularizer(p, y, unused);
}

double nig_regularizer(const NigParams& p, double y, NigGrad& grad) {
  const double err = y - p.gamma;
  const double abs_err = std::abs(err);
  const double weight = 2.0 * p.nu + p.alpha;
  const double sign = err > 0.0 ? 1.0 : (err < 0.0 ? -1.0 : 0.0);
  grad.d_gamma = -sign * weight;
  grad.d_nu = 2.0 * abs_err;
  grad.d_alpha = abs_err;
  grad.d_beta = 0.0;
  return abs_err * weight;
}

RegressionBatchLoss loss_m2(std::span<const RegressionFrame> frames, double lambda) {
  RegressionBatchLoss out;
  out.grads.assign(frames.size(), NigGrad{});
  std::size_t voiced = 0;
  for (const auto& f : frames) voiced += f.voiced ? 1 : 0;
  if (voiced == 0) return out;

  const double scale = 1.0 / static_cast<double>(voiced);
  NigGrad reg;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const RegressionFrame& f = frames[i];
    if (!f.voiced) continue;
    NigGrad& g = out.grads[i];
    double value = nig_nll(f.params, f.target, g);
    if (lambda != 0.0) {
      value += lambda * nig_regularizer(f.params, f.target, reg);
      g.d_gamma += lambda * reg.d_gamma;
      g.d_nu += lambda * reg.d_nu;
      g.d_alpha += lambda * reg.d_alpha;
    }
    g.d_gamma *= scale;
    g.d_nu *= scale;
    g.d_alpha *= scale;
    g.d_beta *= scale;
    out.value += value;
  }
  out.value *= scale;
  return out;
}

// ---------------------------------------------------------------------------

double total_loss(double bce, double evidential_loss, double w) {
  if (w < 0.0) throw ConfigError("loss weight w must be >= 0");
  return bce + w * evidential_loss;
}

BinaryLoss bce_with_logits(std::span<const double> logits, std::span<const double> targets) {
  if (logits.size() != targets.size()) throw ArgumentError("bce: size mismatch");
  BinaryLoss out;
  out.grad_logits.assign(logits.size(), 0.0);
  if (logits.empty()) return out;
  const double scale = 1.0 / static_cast<double>(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double t = targets[i];
    // max(z, 0) - z t + log(1 + exp(-|z|))
    out.value += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    out.grad_logits[i] = (sigmoid(z) - t) * scale;
  }
  out.value *= scale;
  return out;
}

double beta_nll_loss(double mu, double log_var, double y, double beta_coef) {
  BetaNllGrad unused;
  return beta_nll_loss(mu, log_var, y, beta_coef, unused);
}

double beta_nll_loss(double mu, double log_var, double y, double beta_coef, BetaNllGrad& grad) {
  const double var = std::exp(log_var);
  const double weight = std::exp(beta_coef * log_var);
  const double err = y - mu;
  grad.d_mu = -weight * err / var;
  grad.d_log_var = weight * (0.5 - 0.5 * err * err / var);
  return weight * (0.5 * err * err / var + 0.5 * log_var);
}

double tcp_target(std::span<const double> probs, int true_class) {
  check_class(true_class, probs.size());
  double best = 0.0;
  for (double p : probs) best = std::max(best, p);
  if (!(best > 0.0)) throw NumericError("tcp_target: degenerate probability vector");
  return probs[true_class] / best;
}

}  // namespace evimelody::evidential
