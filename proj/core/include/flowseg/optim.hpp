#pragma once

#include <cstdint>
#include <vector>

#include "flowseg/autograd.hpp"

namespace flowseg::nn {

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 5e-4;
    double eps = 1e-8;
};

template <typename T>
struct OptimState {
    AdamWConfig config;
    std::vector<Tensor<T>> first_moment;
    std::vector<Tensor<T>> second_moment;
    int64_t step = 0;

    OptimState() = default;
    OptimState(const std::vector<Var<T>>& params, AdamWConfig cfg);
};

/// One AdamW update with bias correction and decoupled weight decay
/// (theta <- theta * (1 - lr * wd) before the Adam step). Consumes the
/// parameters' gradients. Throws ContractError if any parameter has none.
template <typename T>
void adamw_step(std::vector<Var<T>>& params, OptimState<T>& state);

template <typename T>
void zero_grads(std::vector<Var<T>>& params) {
    for (auto& p : params) p.zero_grad();
}

extern template struct OptimState<float>;
extern template struct OptimState<double>;

}  // namespace flowseg::nn
