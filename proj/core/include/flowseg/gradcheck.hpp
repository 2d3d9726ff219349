#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "flowseg/autograd.hpp"

namespace flowseg::nn {

struct GradCheckReport {
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    int directions = 0;
    int64_t parameter_count = 0;
    bool passed = false;
    std::vector<double> errors;  // one per direction
};

/// Largest parameter count grad_check accepts.
inline constexpr int64_t kGradCheckMaxParams = 100'000;

/// Compares the analytic directional derivative of `loss_fn` along random
/// unit directions in parameter space with a central finite difference of
/// step `step` evaluated on `reference_fn`, a 64-bit mirror of the same
/// computation over `reference_params` (same order and dims as `params`).
/// `loss_fn` and `reference_fn` must rebuild their graphs on every call.
/// Reference parameters are restored bit-exactly afterwards.
///
/// The error per direction is |a - n| / max(|a|, |n|, |g| / sqrt(P)) for
/// analytic value a, numeric value n, gradient g and parameter count P.
template <typename T>
GradCheckReport grad_check(const std::function<Var<T>()>& loss_fn, std::vector<Var<T>> params,
                           const std::function<Var<double>()>& reference_fn, std::vector<Var<double>> reference_params,
                           double tolerance, int directions = 20, uint64_t seed = 0, double step = 1e-3);

/// Finite differences taken in T itself. At 32-bit the cancellation error of
/// the difference quotient is of order 1e-4 relative, so prefer the mirrored
/// overload when checking float computations at tight tolerances.
template <typename T>
GradCheckReport grad_check(const std::function<Var<T>()>& loss_fn, std::vector<Var<T>> params, double tolerance,
                           int directions = 20, uint64_t seed = 0, double step = 1e-3);

/// Runs `build` twice: once on T parameters for the analytic gradient and
/// once on 64-bit copies for the finite-difference reference. `build` is a
/// generic callable taking `std::vector<Var<U>>&` and returning a scalar Var<U>.
template <typename T, class Build>
GradCheckReport grad_check_mirrored(Build&& build, const std::vector<Tensor<T>>& values, double tolerance,
                                    int directions = 20, uint64_t seed = 0, double step = 1e-3) {
    std::vector<Var<T>> params;
    std::vector<Var<double>> reference;
    for (const auto& v : values) {
        params.push_back(parameter(v));
        reference.push_back(parameter(v.template cast<double>()));
    }
    return grad_check<T>([&] { return build(params); }, params, [&] { return build(reference); }, reference,
                         tolerance, directions, seed, step);
}

}  // namespace flowseg::nn
