#pragma once

#include <cmath>
#include <vector>

#include "bitemp/params.hpp"

namespace bitemp {

struct AdamWConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
};

// Decoupled weight decay Adam over the trainable parameters of a store.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& ps, AdamWConfig cfg = {}) : ps_(ps), cfg_(cfg) {
    for (const auto& p : ps_.all()) {
      m_.emplace_back(p.var->value.size(), 0.0);
      v_.emplace_back(p.var->value.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    auto& params = ps_.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.trainable || !p.var->has_grad()) continue;
      auto& w = p.var->value.data;
      const auto& g = p.var->grad.data;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
        const double upd = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) * (1 - lr * cfg_.weight_decay) - lr * upd);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParamStore<T>& ps_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Scales all trainable gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& ps, double max_norm) {
  double sq = 0;
  for (const auto& p : ps.all())
    if (p.trainable && p.var->has_grad())
      for (T g : p.var->grad.data) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : ps.all())
      if (p.trainable && p.var->has_grad())
        for (T& g : p.var->grad.data) g *= s;
  }
  return norm;
}

// Linear warmup from 0 to target over warmup_steps, then constant.
inline double lr_schedule(std::size_t step, std::size_t warmup_steps, double target_lr) {
  if (warmup_steps == 0 || step >= warmup_steps) return target_lr;
  return target_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

}  // namespace bitemp
