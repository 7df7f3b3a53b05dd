#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "latentmem/tensor.hpp"

namespace latentmem {

template <class Real>
double global_grad_norm(const std::vector<std::vector<Real>>& grads) {
  double sq = 0;
  for (const auto& g : grads)
    for (Real v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sq);
}

// Scales gradients in place when their global norm exceeds max_norm.
// Returns the pre-clip norm.
template <class Real>
double clip_grad_norm(std::vector<std::vector<Real>>& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (max_norm > 0 && norm > max_norm) {
    const Real s = static_cast<Real>(max_norm / norm);
    for (auto& g : grads)
      for (Real& v : g) v *= s;
  }
  return norm;
}

// Decoupled weight decay Adam. Decay applies to matrix-shaped parameters only
// (ndim >= 2); vectors (biases, norm gains) are left undecayed.
template <class Real>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor<Real>*>& params, const std::vector<std::vector<Real>>& grads,
            double lr, double weight_decay) {
    if (params.size() != grads.size()) throw std::logic_error("AdamW: params/grads size mismatch");
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        slots_[i].m.assign(params[i]->data->size(), Real(0));
        slots_[i].v.assign(params[i]->data->size(), Real(0));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<Real>& p = *params[i];
      if (grads[i].size() != p.data->size()) throw std::logic_error("AdamW: grad size mismatch");
      const double wd = p.ndim() >= 2 ? weight_decay : 0.0;
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      Real* w = p.data->data();
      const Real* g = grads[i].data();
      for (size_t j = 0; j < p.data->size(); ++j) {
        m[j] = static_cast<Real>(beta1_ * m[j] + (1.0 - beta1_) * g[j]);
        v[j] = static_cast<Real>(beta2_ * v[j] + (1.0 - beta2_) * static_cast<double>(g[j]) * g[j]);
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] = static_cast<Real>(w[j] - lr * (mhat / (std::sqrt(vhat) + eps_) + wd * w[j]));
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<Real> m, v;
  };
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

// Linear warmup over the first warmup_ratio fraction of total_steps, then flat.
inline double warmup_lr(double base_lr, int64_t step_index, int64_t total_steps, double warmup_ratio) {
  const int64_t warm = std::max<int64_t>(1, static_cast<int64_t>(warmup_ratio * static_cast<double>(total_steps)));
  if (step_index + 1 >= warm) return base_lr;
  return base_lr * static_cast<double>(step_index + 1) / static_cast<double>(warm);
}

}  // namespace latentmem
