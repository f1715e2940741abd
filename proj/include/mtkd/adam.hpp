#pragma once

#include <cmath>
#include <vector>

#include "mtkd/errors.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over one parameter group. Moment buffers are allocated
// on first step and keyed by position in the tensor list, so the group's
// composition must not change between steps.
template <typename S>
class AdamOpt {
 public:
  AdamOpt(std::vector<TensorT<S>*> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {}

  void add_group(std::vector<TensorT<S>*> more) {
    for (auto* p : more) params_.push_back(p);
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    if (m_.empty()) {
      m_.resize(params_.size());
      v_.resize(params_.size());
      for (std::size_t k = 0; k < params_.size(); ++k) {
        m_[k].assign(params_[k]->numel(), 0.0);
        v_[k].assign(params_[k]->numel(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      if (!p.requires_grad || p.grad.size() != p.values.size())
        throw ContractError("adam_step: parameter has no gradient");
      for (std::size_t i = 0; i < p.values.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        p.values[i] = static_cast<S>(static_cast<double>(p.values[i]) -
                                     cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon));
      }
    }
  }

  long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<TensorT<S>*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace mtkd
