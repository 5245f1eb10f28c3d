#include "iclb/optim.hpp"

#include <cmath>
#include <string>

namespace iclb {

template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape, T(0));
      state.v.emplace_back(p->value.shape, T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: state holds " + std::to_string(state.m.size()) +
                         " moments for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(cfg.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    if (m.size() != p.value.data.size() || p.grad.data.size() != p.value.data.size()) {
      throw DimensionError("adam_step: state/gradient shape mismatch for parameter " + p.name);
    }
    for (std::size_t k = 0; k < m.size(); ++k) {
      const T g = p.grad.data[k];
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      p.value.data[k] -= step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
    }
  }
}

template <typename T>
void zero_grads(std::span<Parameter<T>* const> params) {
  for (auto* p : params) p->zero_grad();
}

template void adam_step(std::span<Parameter<float>* const>, AdamState<float>&, const AdamConfig&);
template void adam_step(std::span<Parameter<double>* const>, AdamState<double>&, const AdamConfig&);
template void zero_grads(std::span<Parameter<float>* const>);
template void zero_grads(std::span<Parameter<double>* const>);

}  // namespace iclb
