#pragma once

// Momentum SGD with weight decay folded into the velocity, parameter groups
// keyed by role, and the cosine learning-rate schedule.

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "resrep/graph.hpp"

namespace resrep {

template <typename Scalar>
struct ParamGroup {
  std::vector<ParamView<Scalar>> params;
  Scalar momentum = Scalar(0.9);
  Scalar weight_decay = Scalar(0);
};

/// Velocity buffers keyed by parameter name, so state survives regrouping
/// and round-trips through checkpoints.
template <typename Scalar>
struct SgdState {
  std::map<std::string, VectorX<Scalar>> velocity;

  VectorX<Scalar>& velocity_of(const ParamView<Scalar>& p) {
    auto it = velocity.find(p.name);
    if (it == velocity.end()) {
      it = velocity.emplace(p.name, VectorX<Scalar>::Zero(p.size)).first;
    }
    require(it->second.size() == p.size,
            "velocity size mismatch for " + p.name + ": " +
                std::to_string(it->second.size()) + " vs " + std::to_string(p.size));
    return it->second;
  }
};

/// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.
/// Gradient buffers are cleared once consumed.
template <typename Scalar>
void sgd_step(std::vector<ParamGroup<Scalar>>& groups, SgdState<Scalar>& state, Scalar lr) {
  for (auto& group : groups) {
    for (auto& p : group.params) {
      Eigen::Map<VectorX<Scalar>> value(p.value, p.size);
      Eigen::Map<VectorX<Scalar>> grad(p.grad, p.size);
      VectorX<Scalar>& v = state.velocity_of(p);
      if (group.weight_decay != Scalar(0)) {
        v = group.momentum * v + grad + group.weight_decay * value;
      } else {
        v = group.momentum * v + grad;
      }
      value -= lr * v;
      grad.setZero();
    }
  }
}

/// Half-cosine decay from base_lr at epoch 0; defined on [0, total_epochs).
template <typename Scalar>
Scalar cosine_lr(Scalar base_lr, Index epoch, Index total_epochs) {
  require(total_epochs > 0, "cosine schedule needs a positive epoch count");
  require(epoch >= 0 && epoch < total_epochs,
          "cosine schedule epoch " + std::to_string(epoch) + " outside [0, " +
              std::to_string(total_epochs) + ")");
  const double phase = std::numbers::pi * double(epoch) / double(total_epochs);
  return base_lr * Scalar(0.5) * (Scalar(1) + Scalar(std::cos(phase)));
}

/// Standard grouping: conv kernels and biases decay at 1e-4, BN affine
/// parameters and compactors do not, and compactors carry their own
/// (typically higher) momentum.
template <typename Scalar>
std::vector<ParamGroup<Scalar>> default_param_groups(
    ModelGraph<Scalar>& model, Scalar compactor_momentum = Scalar(0.99)) {
  ParamGroup<Scalar> conv, bn, compactor;
  conv.momentum = Scalar(0.9);
  conv.weight_decay = Scalar(1e-4);
  bn.momentum = Scalar(0.9);
  bn.weight_decay = Scalar(0);
  compactor.momentum = compactor_momentum;
  compactor.weight_decay = Scalar(0);
  for (auto& p : parameters(model)) {
    switch (p.role) {
      case ParamRole::ConvWeight:
      case ParamRole::ConvBias: conv.params.push_back(p); break;
      case ParamRole::BnAffine: bn.params.push_back(p); break;
      case ParamRole::CompactorKernel: compactor.params.push_back(p); break;
    }
  }
  return {std::move(conv), std::move(bn), std::move(compactor)};
}

}  // namespace resrep
