#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gaussproto/autodiff.hpp"
#include "gaussproto/errors.hpp"

namespace gaussproto {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double momentum = 0.0;  // SGD only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First-order optimizer over a fixed list of parameters. The optimizer owns
// its per-parameter state; the parameters themselves are owned elsewhere.
template <class T>
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Parameter<T>*> params)
      : cfg_(cfg), params_(std::move(params)) {
    if (!(cfg_.learning_rate > 0)) {
      throw InvalidArgument("learning rate must be positive");
    }
    for (auto* p : params_) {
      first_.push_back(Tensor<T>::like(p->value));
      second_.push_back(Tensor<T>::like(p->value));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  // Applies one update using each Parameter's accumulated grad.
  void step() {
    ++steps_;
    const T lr = static_cast<T>(cfg_.learning_rate);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      require_same_shape(p.value, p.grad, ("optimizer step for " + p.name).c_str());
      auto& m = first_[i];
      if (cfg_.kind == OptimizerKind::kSgd) {
        const T mu = static_cast<T>(cfg_.momentum);
        for (std::size_t k = 0; k < p.value.size(); ++k) {
          m[k] = mu * m[k] + p.grad[k];
          p.value[k] -= lr * m[k];
        }
        continue;
      }
      auto& v = second_[i];
      const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
      const T c1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, steps_));
      const T c2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, steps_));
      const T eps = static_cast<T>(cfg_.eps);
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const T gk = p.grad[k];
        m[k] = b1 * m[k] + (T(1) - b1) * gk;
        v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
        const T mhat = m[k] / c1;
        const T vhat = v[k] / c2;
        p.value[k] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  long steps() const noexcept { return steps_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> first_, second_;
  long steps_ = 0;
};

}  // namespace gaussproto
