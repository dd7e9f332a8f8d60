#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "splos/networks.hpp"
#include "splos/tensor.hpp"

namespace splos {

struct SgdConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_gamma = 0.001;
  double lr_beta = 0.75;
  bool nesterov = true;
  double feature_lr_scale = 0.1;  // multiplier on lr for F during DMC steps
};

/// eta0 * (1 + gamma * i)^(-beta).
inline double lr_at(std::uint64_t iteration, const SgdConfig& cfg) {
  return cfg.base_lr * std::pow(1.0 + cfg.lr_gamma * static_cast<double>(iteration), -cfg.lr_beta);
}

/// Nesterov momentum step with L2 weight decay folded into the gradient:
///   g' = g + wd p;  v = mu v + g';  p -= lr (g' + mu v)
/// Zeroes the parameter grads afterwards.
inline void sgd_update(std::vector<Tensor>& params, SgdState& state, double lr,
                       const SgdConfig& cfg) {
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.emplace_back(p.size(), 0.0);
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto data = params[t].mutable_data();
    auto grad = params[t].grad();
    auto& vel = state.velocity[t];
    for (std::size_t i = 0; i < data.size(); ++i) {
      double g = grad[i] + cfg.weight_decay * data[i];
      vel[i] = cfg.momentum * vel[i] + g;
      double step = cfg.nesterov ? g + cfg.momentum * vel[i] : vel[i];
      data[i] -= lr * step;
    }
    params[t].zero_grad();
  }
}

}  // namespace splos
