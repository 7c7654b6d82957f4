#include "thinseg/optimizer.hpp"

#include <cmath>

namespace thinseg {

double scheduled_lr(double base_lr, int epoch, int total_epochs) {
  if (total_epochs <= 0) throw Error("scheduled_lr: total epochs must be positive");
  if (4 * epoch >= 3 * total_epochs) return base_lr * 0.01;
  if (2 * epoch >= total_epochs) return base_lr * 0.1;
  return base_lr;
}

template <class T>
void optimizer_step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state, double lr,
                    const AdamConfig& cfg) {
  if (grads.size() != params.tensors.size()) throw Error("optimizer_step: gradient/parameter count mismatch");
  if (state.m.empty()) {
    for (const auto& t : params.tensors) {
      state.m.emplace_back(t.shape);
      state.v.emplace_back(t.shape);
    }
  }
  if (state.m.size() != params.tensors.size()) throw Error("optimizer_step: optimizer state does not match model");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& p = params.tensors[t].values;
    const auto& g = grads[t].values;
    auto& m = state.m[t].values;
    auto& v = state.v[t].values;
    if (g.size() != p.size()) throw Error("optimizer_step: gradient shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
}

template void optimizer_step<float>(ModelParams<float>&, const std::vector<Tensor<float>>&, AdamState<float>&,
                                    double, const AdamConfig&);
template void optimizer_step<double>(ModelParams<double>&, const std::vector<Tensor<double>>&, AdamState<double>&,
                                     double, const AdamConfig&);

}  // namespace thinseg
