#pragma once

#include <cmath>
#include <vector>

#include "dscloak/tensor.hpp"

namespace dscloak {

/// Adaptive-moment optimizer with decoupled weight decay.
/// Used both for victim-model training and for the perturbation variables.
class AdamW {
 public:
  explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8, double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void add_param(const Tensor& p) {
    slots_.push_back({p, std::vector<double>(p.numel(), 0.0),
                      std::vector<double>(p.numel(), 0.0)});
  }

  int step_count() const { return t_; }
  void set_step_count(int t) { t_ = t; }

  std::vector<double>& moment1(std::size_t i) { return slots_[i].m; }
  std::vector<double>& moment2(std::size_t i) { return slots_[i].v; }
  std::size_t size() const { return slots_.size(); }

  /// One update over all registered parameters; parameters absent from the
  /// gradient map are left untouched.
  void step(const GradMap& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& s : slots_) {
      if (!grads.contains(s.param)) continue;
      const auto& g = grads.at(s.param).data();
      auto& p = s.param.leaf_data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[i]);
      }
    }
  }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_, wd_;
  int t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace dscloak
