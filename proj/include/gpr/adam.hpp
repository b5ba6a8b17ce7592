#pragma once

#include <span>
#include <vector>

#include "gpr/tensor.hpp"

namespace gpr {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moments for one group of parameters. Moment tensors are created on the
/// first step to match the parameter shapes.
struct AdamState {
  AdamConfig config;
  long step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : config(cfg) {}
  void reset() {
    step = 0;
    first_moment.clear();
    second_moment.clear();
  }
};

/// One bias-corrected Adam update of params in place.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state);

inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state) {
  adam_step(std::span<Tensor>(&param, 1), std::span<const Tensor>(&grad, 1), state);
}

}  // namespace gpr
