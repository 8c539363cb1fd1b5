#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cellmamba/core/tensor.hpp"

namespace cm {

// SGD with classic momentum and decoupled-from-nothing L2 weight decay folded
// into the gradient:
//   v <- momentum * v + (g + weight_decay * w)
//   w <- w - lr * v
// Velocity is keyed by parameter name so it survives across steps and can be
// rebuilt after a checkpoint reload.
template <typename S>
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<std::pair<std::string, Tensor<S>>>& params, double lr) {
    for (const auto& [name, p] : params) {
      Tensor<S> t = p;  // handles share storage
      t.ensure_grad();
      const std::vector<S>& g = t.grad_vec();
      std::vector<S>& v = velocity_[name];
      if (v.empty()) v.assign(t.numel(), S(0));
      S* w = t.data();
      const S mu = static_cast<S>(momentum_);
      const S wd = static_cast<S>(weight_decay_);
      const S step_lr = static_cast<S>(lr);
      for (i64 i = 0; i < t.numel(); ++i) {
        v[i] = mu * v[i] + (g[i] + wd * w[i]);
        w[i] -= step_lr * v[i];
      }
    }
  }

  void reset() { velocity_.clear(); }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<S>> velocity_;
};

}  // namespace cm
