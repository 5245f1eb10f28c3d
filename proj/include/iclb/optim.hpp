#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "iclb/tensor.hpp"

namespace iclb {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates, one pair per parameter, plus the step count.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its grad. Moment
/// buffers are created on the first call.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, const AdamConfig& cfg);

template <typename T>
void zero_grads(std::span<Parameter<T>* const> params);

}  // namespace iclb
