#pragma once

#include <cstdint>
#include <functional>

#include "flowseg/autograd.hpp"
#include "flowseg/rng.hpp"

namespace flowseg::testing {

template <typename T>
nn::Tensor<T> random_tensor(const nn::Dims& dims, Rng& rng, double scale = 1.0) {
    nn::Tensor<T> t(dims);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(scale * rng.normal());
    return t;
}

template <typename T>
nn::Tensor<T> uniform_tensor(const nn::Dims& dims, Rng& rng, double lo, double hi) {
    nn::Tensor<T> t(dims);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

/// sum(w * f(...)) with a fixed random weighting, so upstream gradients are
/// not all ones.
template <typename T>
nn::Var<T> weighted_sum(const nn::Var<T>& y, uint64_t seed) {
    Rng rng(seed);
    return nn::sum(nn::mul(y, nn::constant(random_tensor<T>(y.dims(), rng))));
}

}  // namespace flowseg::testing
