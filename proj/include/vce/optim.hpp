#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "vce/autograd.hpp"

namespace vce::optim {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient
};

inline void validate(const AdamConfig& c) {
  if (!(c.lr > 0)) throw std::invalid_argument("adam: lr must be > 0");
  if (!(c.beta1 >= 0 && c.beta1 < 1)) throw std::invalid_argument("adam: beta1 must be in [0,1)");
  if (!(c.beta2 >= 0 && c.beta2 < 1)) throw std::invalid_argument("adam: beta2 must be in [0,1)");
  if (!(c.eps > 0)) throw std::invalid_argument("adam: eps must be > 0");
  if (c.weight_decay < 0) throw std::invalid_argument("adam: weight_decay must be >= 0");
}

template <class T>
class Adam {
 public:
  Adam(std::vector<ag::Var<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    validate(cfg_);
    for (auto& p : params_) {
      m_.emplace_back(p.shape(), T{0});
      v_.emplace_back(p.shape(), T{0});
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double step_size = cfg_.lr / bc1;
    const double sq_bc2 = std::sqrt(bc2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      T* w = p.mutable_value().data();
      const T* g = p.grad().data();
      T* m = m_[k].data();
      T* v = v_[k].data();
      const std::size_t n = p.value().numel();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]) + cfg_.weight_decay * w[i];
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi);
        const double denom = std::sqrt(static_cast<double>(v[i])) / sq_bc2 + cfg_.eps;
        w[i] = static_cast<T>(w[i] - step_size * m[i] / denom);
      }
    }
  }

  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  std::vector<ag::Var<T>> params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

}  // namespace vce::optim
