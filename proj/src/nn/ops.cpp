// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "evimelody/errors.hpp"

namespace evimelody::nn::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ArgumentError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_string(t.shape()));
  }
}

// Rows [t0, t1) of the patch matrix: col[(c * k + i) * k + j, (t - t0) * F + f] =
// x[c, t + i - k/2, f + j - k/2], zero outside the plane.
void im2col(const double* x, int channels, int T, int F, int k, int t0, int t1, double* col) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(T) * F;
  const std::size_t width = static_cast<std::size_t>(t1 - t0) * F;
  for (int c = 0; c < channels; ++c) {
    const double* xc = x + c * plane;
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        double* row = col + ((static_cast<std::size_t>(c) * k + i) * k + j) * width;
        const int dt = i - pad;
        const int df = j - pad;
        const int f_lo = std::max(0, -df);
        const int f_hi = std::min(F, F - df);
        for (int t = t0; t < t1; ++t) {
          double* dst = row + static_cast<std::size_t>(t - t0) * F;
          const int ts = t + dt;
          if (ts < 0 || ts >= T) {
            std::fill(dst, dst + F, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(ts) * F + df;
          std::fill(dst, dst + f_lo, 0.0);
          std::copy(src + f_lo, src + f_hi, dst + f_lo);
          std::fill(dst + f_hi, dst + F, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* col, int channels, int T, int F, int k, int t0, int t1, double* dx) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(T) * F;
  const std::size_t width = static_cast<std::size_t>(t1 - t0) * F;
  for (int c = 0; c < channels; ++c) {
    double* dxc = dx + c * plane;
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        const double* row = col + ((static_cast<std::size_t>(c) * k + i) * k + j) * width;
        const int dt = i - pad;
        const int df = j - pad;
        const int f_lo = std::max(0, -df);
        const int f_hi = std::min(F, F - df);
        for (int t = t0; t < t1; ++t) {
          const int ts = t + dt;
          if (ts < 0 || ts >= T) continue;
          const double* src = row + static_cast<std::size_t>(t - t0) * F;
          double* dst = dxc + static_cast<std::size_t>(ts) * F + df;
          for (int f = f_lo; f < f_hi; ++f) dst[f] += src[f];
        }
      }
    }
  }
}

using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Time rows per patch-matrix chunk, sized to keep the chunk cache resident.
int chunk_rows(int K, int T, int F) {
  const std::size_t budget = std::size_t{1} << 16;  // doubles
  const std::size_t per_row = static_cast<std::size_t>(K) * F;
  return std::clamp(static_cast<int>(budget / std::max<std::size_t>(per_row, 1)), 1, T);
}

}  // namespace

Var conv2d(const Var& x, const Var& weight) {
  require_rank(x->value, 4, "conv2d");
  require_rank(weight->value, 4, "conv2d weight");
  const int N = static_cast<int>(x->value.dim(0));
  const int Ci = static_cast<int>(x->value.dim(1));
  const int T = static_cast<int>(x->value.dim(2));
  const int F = static_cast<int>(x->value.dim(3));
  const int Co = static_cast<int>(weight->value.dim(0));
  const int k = static_cast<int>(weight->value.dim(2));
  if (weight->value.dim(1) != Ci || weight->value.dim(3) != k || k % 2 == 0) {
    throw ArgumentError("conv2d: weight " + shape_string(weight->value.shape()) + " incompatible with input " +
                        shape_string(x->value.shape()));
  }
  const std::size_t P = static_cast<std::size_t>(T) * F;
  const int K = Ci * k * k;
  const int rows = chunk_rows(K, T, F);

  Tensor out = Tensor::uninitialized({N, Co, T, F});
  ConstMatMap W(weight->value.data(), Co, K);
  std::vector<double> col(k == 1 ? 0 : static_cast<std::size_t>(K) * rows * F);
  for (int n = 0; n < N; ++n) {
    const double* xn = x->value.data() + static_cast<std::size_t>(n) * Ci * P;
    double* yn = out.data() + static_cast<std::size_t>(n) * Co * P;
    if (k == 1) {
      MatMap(yn, Co, P).noalias() = W * ConstMatMap(xn, Ci, P);
      continue;
    }
    for (int t0 = 0; t0 < T; t0 += rows) {
      const int t1 = std::min(T, t0 + rows);
      const Eigen::Index w = static_cast<Eigen::Index>(t1 - t0) * F;
      im2col(xn, Ci, T, F, k, t0, t1, col.data());
      Strided(yn + static_cast<std::size_t>(t0) * F, Co, w, Eigen::OuterStride<>(P)).noalias() =
          W * ConstMatMap(col.data(), K, w);
    }
  }

  return make_op(std::move(out), {x, weight}, [=](Node& self) {
    const Var& in = self.inputs()[0];
    const Var& wv = self.inputs()[1];
    ConstMatMap Wm(wv->value.data(), Co, K);
    std::vector<double> buf(k == 1 ? 0 : static_cast<std::size_t>(K) * rows * F);
    std::vector<double> dcol(k == 1 || !in->requires_grad ? 0 : static_cast<std::size_t>(K) * rows * F);
    double* dW = wv->requires_grad ? wv->ensure_grad().data() : nullptr;
    double* dX = in->requires_grad ? in->ensure_grad().data() : nullptr;
    for (int n = 0; n < N; ++n) {
      const double* xn = in->value.data() + static_cast<std::size_t>(n) * Ci * P;
      const double* dyn = self.grad.data() + static_cast<std::size_t>(n) * Co * P;
      if (k == 1) {
        ConstMatMap dY(dyn, Co, P);
        if (dW) MatMap(dW, Co, K).noalias() += dY * ConstMatMap(xn, Ci, P).transpose();
        if (dX) MatMap(dX + static_cast<std::size_t>(n) * Ci * P, Ci, P).noalias() += Wm.transpose() * dY;
        continue;
      }
      for (int t0 = 0; t0 < T; t0 += rows) {
        const int t1 = std::min(T, t0 + rows);
        const Eigen::Index w = static_cast<Eigen::Index>(t1 - t0) * F;
        ConstStrided dY(dyn + static_cast<std::size_t>(t0) * F, Co, w, Eigen::OuterStride<>(P));
        if (dW) {
          im2col(xn, Ci, T, F, k, t0, t1, buf.data());
          MatMap(dW, Co, K).noalias() += dY * ConstMatMap(buf.data(), K, w).transpose();
        }
        if (dX) {
          MatMap(dcol.data(), K, w).noalias() = Wm.transpose() * dY;
          col2im_add(dcol.data(), Ci, T, F, k, t0, t1, dX + static_cast<std::size_t>(n) * Ci * P);
        }
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training) {
  require_rank(x->value, 4, "batch_norm");
  const int N = static_cast<int>(x->value.dim(0));
  const int C = static_cast<int>(x->value.dim(1));
  const std::size_t P = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
  if (gamma->value.numel() != static_cast<std::size_t>(C) || beta->value.numel() != static_cast<std::size_t>(C)) {
    throw ArgumentError("batch_norm: parameter size mismatch");
  }
  if (state.running_mean.numel() != static_cast<std::size_t>(C)) {
    state.running_mean = Tensor({C}, 0.0);
    state.running_var = Tensor({C}, 1.0);
  }
  const double count = static_cast<double>(N) * P;

  Tensor out = Tensor::uninitialized(x->value.shape());
  Tensor xhat = Tensor::uninitialized(x->value.shape());
  std::vector<double> inv_std(C);
  for (int c = 0; c < C; ++c) {
    double mean;
    double var;
    if (training) {
      double sum = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x->value.data() + (static_cast<std::size_t>(n) * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) sum += p[i];
      }
      mean = sum / count;
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x->value.data() + (static_cast<std::size_t>(n) * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / count;
      const double unbiased = count > 1 ? sq / (count - 1) : var;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + state.eps);
    const double g = gamma->value[c];
    const double b = beta->value[c];
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * P;
      const double* p = x->value.data() + off;
      double* h = xhat.data() + off;
      double* o = out.data() + off;
      for (std::size_t i = 0; i < P; ++i) {
        h[i] = (p[i] - mean) * inv_std[c];
        o[i] = g * h[i] + b;
      }
    }
  }

  return make_op(std::move(out), {x, gamma, beta},
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const Var& in = self.inputs()[0];
                   const Var& g = self.inputs()[1];
                   const Var& b = self.inputs()[2];
                   for (int c = 0; c < C; ++c) {
                     double sum_dy = 0.0;
                     double sum_dy_xhat = 0.0;
                     for (int n = 0; n < N; ++n) {
                       const std::size_t off = (static_cast<std::size_t>(n) * C + c) * P;
                       const double* dy = self.grad.data() + off;
                       const double* h = xhat.data() + off;
                       for (std::size_t i = 0; i < P; ++i) {
                         sum_dy += dy[i];
                         sum_dy_xhat += dy[i] * h[i];
                       }
                     }
                     if (g->requires_grad) g->ensure_grad()[c] += sum_dy_xhat;
                     if (b->requires_grad) b->ensure_grad()[c] += sum_dy;
                     if (!in->requires_grad) continue;
                     const double gc = g->value[c];
                     double* dx = in->ensure_grad().data();
                     for (int n = 0; n < N; ++n) {
                       const std::size_t off = (static_cast<std::size_t>(n) * C + c) * P;
                       const double* dy = self.grad.data() + off;
                       const double* h = xhat.data() + off;
                       double* d = dx + off;
                       if (training) {
                         const double k = gc * inv_std[c] / count;
                         for (std::size_t i = 0; i < P; ++i) {
                           d[i] += k * (count * dy[i] - sum_dy - h[i] * sum_dy_xhat);
                         }
                       } else {
                         const double k = gc * inv_std[c];
                         for (std::size_t i = 0; i < P; ++i) d[i] += k * dy[i];
                       }
                     }
                   }
                 });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor out = Tensor::uninitialized(x->value.shape());
  const std::size_t n = out.numel();
  const double* in = x->value.data();
  double* o = out.data();
  for (std::size_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? in[i] : slope * in[i];
  return make_op(std::move(out), {x}, [slope](Node& self) {
    const Var& src = self.inputs()[0];
    const double* v = src->value.data();
    const double* dy = self.grad.data();
    double* dx = src->ensure_grad().data();
    const std::size_t count = src->value.numel();
    for (std::size_t i = 0; i < count; ++i) dx[i] += v[i] > 0.0 ? dy[i] : slope * dy[i];
  });
}

Var add(const Var& a, const Var& b) {
  if (a->value.shape() != b->value.shape()) {
    throw ArgumentError("add: shape mismatch " + shape_string(a->value.shape()) + " vs " +
                        shape_string(b->value.shape()));
  }
  Tensor out = Tensor::uninitialized(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (const Var& in : self.inputs()) {
      if (!in->requires_grad) continue;
      double* d = in->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) d[i] += self.grad[i];
    }
  });
}

Var max_pool_freq(const Var& x, int factor) {
  require_rank(x->value, 4, "max_pool_freq");
  if (factor < 1) throw ArgumentError("max_pool_freq: factor must be >= 1");
  if (factor == 1) return x;
  const std::int64_t N = x->value.dim(0), C = x->value.dim(1), T = x->value.dim(2), F = x->value.dim(3);
  const std::int64_t Fo = F / factor;
  if (Fo < 1) throw ConfigError("max_pool_freq: frequency axis too short to pool");
  Tensor out = Tensor::uninitialized({N, C, T, Fo});
  std::vector<std::uint32_t> argmax(out.numel());
  const std::size_t rows = static_cast<std::size_t>(N * C * T);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x->value.data() + r * F;
    double* o = out.data() + r * Fo;
    std::uint32_t* am = argmax.data() + r * Fo;
    for (std::int64_t f = 0; f < Fo; ++f) {
      std::int64_t best = f * factor;
      for (std::int64_t j = 1; j < factor; ++j) {
        if (in[f * factor + j] > in[best]) best = f * factor + j;
      }
      o[f] = in[best];
      am[f] = static_cast<std::uint32_t>(best);
    }
  }
  return make_op(std::move(out), {x}, [=, argmax = std::move(argmax)](Node& self) {
    double* dx = self.inputs()[0]->ensure_grad().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dy = self.grad.data() + r * Fo;
      const std::uint32_t* am = argmax.data() + r * Fo;
      double* d = dx + r * F;
      for (std::int64_t f = 0; f < Fo; ++f) d[am[f]] += dy[f];
    }
  });
}

Var flatten_frames(const Var& x) {
  require_rank(x->value, 4, "flatten_frames");
  const std::int64_t N = x->value.dim(0), C = x->value.dim(1), T = x->value.dim(2), F = x->value.dim(3);
  Tensor out = Tensor::uninitialized({N * T, C * F});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t t = 0; t < T; ++t) {
        const double* src = x->value.data() + ((n * C + c) * T + t) * F;
        std::copy(src, src + F, out.data() + (n * T + t) * C * F + c * F);
      }
    }
  }
  return make_op(std::move(out), {x}, [=](Node& self) {
    double* dx = self.inputs()[0]->ensure_grad().data();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t t = 0; t < T; ++t) {
          const double* src = self.grad.data() + (n * T + t) * C * F + c * F;
          double* dst = dx + ((n * C + c) * T + t) * F;
          for (std::int64_t f = 0; f < F; ++f) dst[f] += src[f];
        }
      }
    }
  });
}

Var mean_over_freq(const Var& x) {
  require_rank(x->value, 4, "mean_over_freq");
  const std::int64_t N = x->value.dim(0), C = x->value.dim(1), T = x->value.dim(2), F = x->value.dim(3);
  Tensor out = Tensor::uninitialized({N * T, C});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t t = 0; t < T; ++t) {
        const double* src = x->value.data() + ((n * C + c) * T + t) * F;
        double sum = 0.0;
        for (std::int64_t f = 0; f < F; ++f) sum += src[f];
        out[(n * T + t) * C + c] = sum / static_cast<double>(F);
      }
    }
  }
  return make_op(std::move(out), {x}, [=](Node& self) {
    double* dx = self.inputs()[0]->ensure_grad().data();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t t = 0; t < T; ++t) {
          const double g = self.grad[(n * T + t) * C + c] / static_cast<double>(F);
          double* dst = dx + ((n * C + c) * T + t) * F;
          for (std::int64_t f = 0; f < F; ++f) dst[f] += g;
        }
      }
    }
  });
}

Var dropout(const Var& x, double rate, bool training, Rng& rng) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const double keep = 1.0 - rate;
  std::vector<double> mask(x->value.numel());
  for (double& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  Tensor out = Tensor::uninitialized(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] * mask[i];
  return make_op(std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    double* dx = self.inputs()[0]->ensure_grad().data();
    for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += self.grad[i] * mask[i];
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x->value, 2, "linear");
  require_rank(weight->value, 2, "linear weight");
  const std::int64_t M = x->value.dim(0), D = x->value.dim(1), O = weight->value.dim(0);
  if (weight->value.dim(1) != D || bias->value.numel() != static_cast<std::size_t>(O)) {
    throw ArgumentError("linear: weight " + shape_string(weight->value.shape()) + " incompatible with input " +
                        shape_string(x->value.shape()));
  }
  Tensor out = Tensor::uninitialized({M, O});
  MatMap Y(out.data(), M, O);
  Y.noalias() = ConstMatMap(x->value.data(), M, D) * ConstMatMap(weight->value.data(), O, D).transpose();
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->value.data(), O);
  return make_op(std::move(out), {x, weight, bias}, [=](Node& self) {
    const Var& in = self.inputs()[0];
    const Var& w = self.inputs()[1];
    const Var& b = self.inputs()[2];
    ConstMatMap dY(self.grad.data(), M, O);
    if (w->requires_grad) {
      MatMap(w->ensure_grad().data(), O, D).noalias() += dY.transpose() * ConstMatMap(in->value.data(), M, D);
    }
    if (b->requires_grad) {
      Eigen::Map<Eigen::RowVectorXd>(b->ensure_grad().data(), O) += dY.colwise().sum();
    }
    if (in->requires_grad) {
      MatMap(in->ensure_grad().data(), M, D).noalias() += dY * ConstMatMap(w->value.data(), O, D);
    }
  });
}

Var external_loss(std::vector<Var> inputs, double value, std::vector<Tensor> grads) {
  if (inputs.size() != grads.size()) throw ArgumentError("external_loss: inputs and grads differ in count");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i]->value.numel() != grads[i].numel()) throw ArgumentError("external_loss: gradient shape mismatch");
  }
  return make_op(Tensor({1}, value), std::move(inputs), [grads = std::move(grads)](Node& self) {
    const double upstream = self.grad[0];
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const Var& in = self.inputs()[i];
      if (!in->requires_grad) continue;
      double* d = in->ensure_grad().data();
      for (std::size_t j = 0; j < grads[i].numel(); ++j) d[j] += upstream * grads[i][j];
    }
  });
}

Var detach(const Var& x) { return make_leaf(x->value, false); }

}  // namespace evimelody::nn::ops
