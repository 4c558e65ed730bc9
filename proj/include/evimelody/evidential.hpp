// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

// Closed-form evidential math: Dirichlet and Normal-Inverse-Gamma heads, their
// uncertainty decompositions, the training objectives and analytic gradients.
//
// Gradients are always returned with respect to the distribution parameters
// (alpha for Dirichlet, (gamma, nu, alpha, beta) for NIG). Callers chain them
// through the *_jacobian helpers to reach raw network outputs.

#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace evimelody::evidential {

double softplus(double x);
double sigmoid(double x);

struct UncertaintyPair {
  double aleatoric = 0.0;
  double epistemic = 0.0;
};

/// lambda_t = min(1, epoch / warmup_epochs), epochs counted from 0.
class AnnealSchedule {
 public:
  explicit AnnealSchedule(int warmup_epochs = 10);
  double at(int epoch) const;
  int warmup_epochs() const { return warmup_epochs_; }

 private:
  int warmup_epochs_;
};

// ---------------------------------------------------------------------------
// Dirichlet (classification)

struct DirichletParams {
  std::vector<double> alpha;

  double strength() const;
  std::vector<double> mean() const;
  std::size_t size() const { return alpha.size(); }
};

/// alpha_k = softplus(raw_k) + 1. Throws NumericError on non-finite input.
DirichletParams dirichlet_from_logits(std::span<const double> raw);
/// d alpha_k / d raw_k = sigmoid(raw_k).
std::vector<double> dirichlet_from_logits_jacobian(std::span<const double> raw);

/// Entropy decomposition of the Dirichlet: aleatoric is the expected categorical
/// entropy, epistemic the remainder of the entropy of the mean.
UncertaintyPair dirichlet_uncertainties(const DirichletParams& d);

/// psi(S) - psi(alpha_true). `one_hot` must be a one-hot vector of the same size.
double dirichlet_nll(const DirichletParams& d, std::span<const double> one_hot);
/// Gradient with respect to alpha written into `grad` (same size as alpha).
double dirichlet_nll(const DirichletParams& d, int true_class, std::span<double> grad);

/// KL(Dir(alpha~) || Dir(1,...,1)) where alpha~ has the true-class evidence removed.
double dirichlet_kl_uniform(const DirichletParams& d, std::span<const double> one_hot);
double dirichlet_kl_uniform(const DirichletParams& d, int true_class, std::span<double> grad);

struct ClassFrame {
  std::span<const double> alpha;
  int true_class = -1;  // ignored when unvoiced
  bool voiced = false;
};

struct ClassBatchLoss {
  double value = 0.0;
  std::vector<double> grad_alpha;  // frames x K, row-major; zero rows for unvoiced
};

/// Voiced-masked mean of NLL + lambda_t * KL. Returns 0 when no frame is voiced.
ClassBatchLoss loss_m1(std::span<const ClassFrame> frames, double lambda_t);

// ---------------------------------------------------------------------------
// Normal-Inverse-Gamma (regression)

struct NigParams {
  double gamma = 0.0;
  double nu = 1.0;
  double alpha = 2.0;
  double beta = 1.0;
};

struct NigGrad {
  double d_gamma = 0.0;
  double d_nu = 0.0;
  double d_alpha = 0.0;
  double d_beta = 0.0;
};

/// gamma = raw0; nu = softplus(raw1) + 1e-6; alpha = softplus(raw2) + 1 + 1e-6; beta = softplus(raw3) + 1e-6.
NigParams nig_from_raw(std::span<const double, 4> raw);
/// Diagonal of d(gamma, nu, alpha, beta) / d raw.
std::array<double, 4> nig_from_raw_jacobian(std::span<const double, 4> raw);

/// sigma_a^2 = beta / (alpha - 1), sigma_e^2 = beta / (nu (alpha - 1)).
UncertaintyPair nig_uncertainties(const NigParams& p);

/// Negative log of the Student-t marginal of the NIG evidential model.
double nig_nll(const NigParams& p, double y);
double nig_nll(const NigParams& p, double y, NigGrad& grad);

/// |y - gamma| (2 nu + alpha). Subgradient 0 at y == gamma.
double nig_regularizer(const NigParams& p, double y);
double nig_regularizer(const NigParams& p, double y, NigGrad& grad);

struct RegressionFrame {
  NigParams params;
  double target = 0.0;
  bool voiced = false;
};

struct RegressionBatchLoss {
  double value = 0.0;
  std::vector<NigGrad> grads;  // one per frame
};

/// Voiced-masked mean of nig_nll + lambda * nig_regularizer. Returns 0 when no frame is voiced.
RegressionBatchLoss loss_m2(std::span<const RegressionFrame> frames, double lambda);

// ---------------------------------------------------------------------------
// Shared pieces and baselines

/// L_BCE + w * L_evidential.
double total_loss(double bce, double evidential_loss, double w);

struct BinaryLoss {
  double value = 0.0;
  std::vector<double> grad_logits;
};

/// Mean binary cross-entropy over all frames, computed from logits.
BinaryLoss bce_with_logits(std::span<const double> logits, std::span<const double> targets);

struct BetaNllGrad {
  double d_mu = 0.0;
  double d_log_var = 0.0;
};

/// (sigma^2)^beta * ((y - mu)^2 / (2 sigma^2) + log(sigma^2) / 2) with sigma^2 = exp(log_var).
/// The (sigma^2)^beta weight is a constant for differentiation.
double beta_nll_loss(double mu, double log_var, double y, double beta_coef);
double beta_nll_loss(double mu, double log_var, double y, double beta_coef, BetaNllGrad& grad);

/// Normalized true-class probability p_true / max_k p_k.
double tcp_target(std::span<const double> probs, int true_class);

}  // namespace evimelody::evidential
