#pragma once

#include <cstdint>
#include <vector>

#include "thinseg/network.hpp"

namespace thinseg {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// Step decay: lr until half of the epochs, 0.1 lr until three quarters, 0.01 lr after.
/// epoch is zero-based.
double scheduled_lr(double base_lr, int epoch, int total_epochs);

/// One bias-corrected Adam update. The state is sized lazily on first use.
template <class T>
void optimizer_step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state, double lr,
                    const AdamConfig& cfg = {});

}  // namespace thinseg
