#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxar/autograd.hpp"

namespace ctxar {

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// First/second moments per parameter, in parameter order.
template <typename T>
struct OptimizerState {
    std::vector<Tensor<T>> first_moment;
    std::vector<Tensor<T>> second_moment;
    std::uint64_t step = 0;
};

// One AdamW update with decoupled weight decay:
//   p <- p * (1 - lr * wd)            (only parameters with `decay` set)
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
// Frozen parameters (trainable == false) keep their value and moments.
// Throws ErrorCode::numeric naming the parameter on a non-finite gradient.
template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, OptimizerState<T>& state, const AdamWConfig& config);

extern template void adamw_step<float>(std::span<Parameter<float>* const>, OptimizerState<float>&, const AdamWConfig&);
extern template void adamw_step<double>(std::span<Parameter<double>* const>, OptimizerState<double>&, const AdamWConfig&);

}  // namespace ctxar
