#include "flowseg/optim.hpp"

#include <cmath>

namespace flowseg::nn {

template <typename T>
OptimState<T>::OptimState(const std::vector<Var<T>>& params, AdamWConfig cfg) : config(cfg) {
    first_moment.reserve(params.size());
    second_moment.reserve(params.size());
    for (const auto& p : params) {
        first_moment.emplace_back(p.dims());
        second_moment.emplace_back(p.dims());
    }
}

template <typename T>
void adamw_step(std::vector<Var<T>>& params, OptimState<T>& state) {
    if (params.size() != state.first_moment.size()) {
        throw ContractError("adamw_step: " + std::to_string(params.size()) + " parameters but state for " +
                            std::to_string(state.first_moment.size()));
    }
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_grad()) {
            throw ContractError("adamw_step: missing gradient for parameter " + std::to_string(i) + " with dims " +
                                dims_str(params[i].dims()));
        }
        if (state.first_moment[i].dims() != params[i].dims()) {
            throw ContractError("adamw_step: moment dims do not match parameter " + std::to_string(i));
        }
    }
    const auto& c = state.config;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(c.beta1, t);
    const double bias2 = 1.0 - std::pow(c.beta2, t);
    const double decay = 1.0 - c.lr * c.weight_decay;
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& theta = params[i].mutable_value();
        const Tensor<T>& g = params[i].grad();
        Tensor<T>& m = state.first_moment[i];
        Tensor<T>& v = state.second_moment[i];
        for (int64_t k = 0; k < theta.numel(); ++k) {
            const double gk = g[k];
            const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            const double update = c.lr * (mk / bias1) / (std::sqrt(vk / bias2) + c.eps);
            theta[k] = static_cast<T>(theta[k] * decay - update);
        }
        params[i].zero_grad();
    }
}

template struct OptimState<float>;
template struct OptimState<double>;
template void adamw_step(std::vector<Var<float>>&, OptimState<float>&);
template void adamw_step(std::vector<Var<double>>&, OptimState<double>&);

}  // namespace flowseg::nn
