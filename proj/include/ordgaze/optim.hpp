#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ordgaze/tensor.hpp"

namespace ordgaze {

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double decay_factor = 0.1;  // applied during the last epoch of each mini-generation
  std::size_t batch_size = 128;

  void validate() const {
    if (!(lr > 0) || momentum < 0 || momentum >= 1 || weight_decay < 0 || !(decay_factor > 0))
      throw std::invalid_argument("optimizer: invalid lr/momentum/decay settings");
    if (batch_size == 0) throw std::invalid_argument("optimizer: batch_size must be positive");
  }
};

/// Heavy-ball SGD: v = mu v + g (+ wd p); p -= lr v.
template <class T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, double momentum, double weight_decay = 0.0)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_);
    const T rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto& v = velocity_[i];
      auto& w = p.storage();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu * v[j] + g[j] + wd * w[j];
        w[j] -= rate * v[j];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void reset_momentum() {
    for (auto& v : velocity_) std::fill(v.begin(), v.end(), T(0));
  }

  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

}  // namespace ordgaze
