#include "flowseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "flowseg/rng.hpp"

namespace flowseg::nn {

template <typename T>
GradCheckReport grad_check(const std::function<Var<T>()>& loss_fn, std::vector<Var<T>> params,
                           const std::function<Var<double>()>& reference_fn, std::vector<Var<double>> reference_params,
                           double tolerance, int directions, uint64_t seed, double step) {
    GradCheckReport report;
    report.tolerance = tolerance;
    report.directions = directions;
    for (const auto& p : params) report.parameter_count += p.numel();
    if (report.parameter_count > kGradCheckMaxParams) {
        throw ContractError("grad_check: " + std::to_string(report.parameter_count) +
                            " parameters exceed the limit of " + std::to_string(kGradCheckMaxParams));
    }
    if (reference_params.size() != params.size()) {
        throw ContractError("grad_check: reference parameter list does not mirror the checked one");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        if (reference_params[i].dims() != params[i].dims()) {
            throw ContractError("grad_check: reference parameter " + std::to_string(i) + " has dims " +
                                dims_str(reference_params[i].dims()) + ", expected " + dims_str(params[i].dims()));
        }
    }

    for (auto& p : params) p.zero_grad();
    {
        Tape<T> tape;
        Var<T> loss = loss_fn();
        tape.backward(loss);
    }
    std::vector<Tensor<T>> grads;
    for (auto& p : params) {
        grads.push_back(p.has_grad() ? p.grad() : Tensor<T>(p.dims()));
        p.zero_grad();
    }
    // A random unit direction sees a directional derivative of RMS size
    // |g| / sqrt(P); errors are measured relative to at least that scale so
    // directions nearly orthogonal to the gradient do not amplify truncation
    // error without bound.
    double grad_norm2 = 0.0;
    for (const auto& g : grads) {
        for (int64_t k = 0; k < g.numel(); ++k) grad_norm2 += double(g[k]) * g[k];
    }
    const double typical = std::sqrt(grad_norm2 / static_cast<double>(std::max<int64_t>(report.parameter_count, 1)));
    std::vector<Tensor<double>> saved;
    for (auto& p : reference_params) saved.push_back(p.value());

    auto evaluate_at = [&](const std::vector<Tensor<double>>& dir, double h) {
        for (size_t i = 0; i < reference_params.size(); ++i) {
            Tensor<double>& v = reference_params[i].mutable_value();
            for (int64_t k = 0; k < v.numel(); ++k) v[k] = saved[i][k] + h * dir[i][k];
        }
        const double value = reference_fn().value().item();
        for (size_t i = 0; i < reference_params.size(); ++i) reference_params[i].mutable_value() = saved[i];
        return value;
    };

    Rng rng(seed);
    for (int d = 0; d < directions; ++d) {
        std::vector<Tensor<double>> dir;
        double norm2 = 0.0;
        for (const auto& p : params) {
            Tensor<double> t(p.dims());
            for (int64_t k = 0; k < t.numel(); ++k) {
                t[k] = rng.normal();
                norm2 += t[k] * t[k];
            }
            dir.push_back(std::move(t));
        }
        const double inv = 1.0 / std::sqrt(norm2);
        double analytic = 0.0;
        for (size_t i = 0; i < dir.size(); ++i) {
            for (int64_t k = 0; k < dir[i].numel(); ++k) {
                dir[i][k] *= inv;
                analytic += double(grads[i][k]) * dir[i][k];
            }
        }
        const double numeric = (evaluate_at(dir, step) - evaluate_at(dir, -step)) / (2.0 * step);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), typical, 1e-12});
        const double err = std::abs(analytic - numeric) / denom;
        report.errors.push_back(err);
        report.max_rel_error = std::max(report.max_rel_error, err);
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

template <typename T>
GradCheckReport grad_check(const std::function<Var<T>()>& loss_fn, std::vector<Var<T>> params, double tolerance,
                           int directions, uint64_t seed, double step) {
    if constexpr (std::is_same_v<T, double>) {
        return grad_check<double>(loss_fn, params, loss_fn, params, tolerance, directions, seed, step);
    } else {
        // Mirror each parameter into a 64-bit leaf but evaluate the
        // reference in T by copying values back before each call.
        std::vector<Var<double>> reference;
        for (const auto& p : params) reference.push_back(parameter(p.value().template cast<double>()));
        std::function<Var<double>()> reference_fn = [&]() {
            for (size_t i = 0; i < params.size(); ++i) {
                params[i].mutable_value() = reference[i].value().template cast<T>();
            }
            const double v = loss_fn().value().item();
            return constant(Tensor<double>::scalar(v));
        };
        std::vector<Tensor<T>> originals;
        for (const auto& p : params) originals.push_back(p.value());
        auto report = grad_check<T>(loss_fn, params, reference_fn, reference, tolerance, directions, seed, step);
        for (size_t i = 0; i < params.size(); ++i) params[i].mutable_value() = originals[i];
        return report;
    }
}

template GradCheckReport grad_check(const std::function<Var<float>()>&, std::vector<Var<float>>,
                                    const std::function<Var<double>()>&, std::vector<Var<double>>, double, int,
                                    uint64_t, double);
template GradCheckReport grad_check(const std::function<Var<double>()>&, std::vector<Var<double>>,
                                    const std::function<Var<double>()>&, std::vector<Var<double>>, double, int,
                                    uint64_t, double);
template GradCheckReport grad_check(const std::function<Var<float>()>&, std::vector<Var<float>>, double, int,
                                    uint64_t, double);
template GradCheckReport grad_check(const std::function<Var<double>()>&, std::vector<Var<double>>, double, int,
                                    uint64_t, double);

}  // namespace flowseg::nn
