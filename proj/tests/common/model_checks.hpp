#pragma once

// Gradient-check harnesses for whole models, shared by the unit and
// acceptance suites.

#include <algorithm>
#include <string>
#include <vector>

#include "flowseg/codec.hpp"
#include "flowseg/gradcheck.hpp"
#include "flowseg/velocity_net.hpp"
#include "test_util.hpp"

namespace flowseg::testing {

/// Rebuilds a store over caller-owned leaves in the order of `names`.
template <typename U>
nn::ParamStore<U> store_over(const std::vector<std::string>& names, std::vector<nn::Var<U>>& vars) {
    nn::ParamStore<U> s;
    for (size_t i = 0; i < names.size(); ++i) s.adopt(names[i], vars[i]);
    return s;
}

/// Checks every codec parameter (encoder, image decoder, conv head and
/// finetuned decoder) through a loss touching all four outputs.
template <typename T>
nn::GradCheckReport check_codec_gradients(double tolerance, int directions, uint64_t seed) {
    codec::CodecConfig cfg;
    auto base = codec::Codec<T>::init(cfg, seed);
    codec::ensure_strategy(base, codec::DecoderStrategy::conv_head, seed);
    codec::ensure_strategy(base, codec::DecoderStrategy::finetuned, seed);
    // Perturb the copied decoder so it differs from the pretrained trunk.
    Rng rng(derive_seed(seed, 17));
    for (const auto& name : base.params.names()) {
        if (name.rfind("finetuned.", 0) == 0 || name.back() == 'b') {
            auto v = base.params.get(name).value();
            for (auto& x : v.values()) x += static_cast<T>(0.05 * rng.normal());
            base.params.set_value(name, v);
        }
    }
    const auto names = base.params.names();
    std::vector<nn::Tensor<T>> values;
    for (const auto& n : names) values.push_back(base.params.get(n).value());
    const auto input = uniform_tensor<double>({1, 8, 8, 3}, rng, 0.0, 1.0);

    auto build = [&](auto& vars) {
        using U = typename std::decay_t<decltype(vars)>::value_type::value_type;
        codec::Codec<U> c;
        c.config = cfg;
        c.params = store_over(names, vars);
        auto post = codec::encode(c, nn::constant(input.template cast<U>()));
        auto loss = weighted_sum(post.logvar, 1);
        loss = nn::add(loss, weighted_sum(codec::image_logits(c, post.mean), 2));
        loss = nn::add(loss, weighted_sum(codec::mask_logits(c, post.mean, codec::DecoderStrategy::conv_head), 3));
        loss = nn::add(loss, weighted_sum(codec::mask_logits(c, post.mean, codec::DecoderStrategy::finetuned), 4));
        return loss;
    };
    return nn::grad_check_mirrored<T>(build, values, tolerance, directions, seed);
}

/// Adds N(0, std) noise to every parameter whose name contains `marker`, so
/// zero-initialized projections stop hiding the paths behind them.
template <typename T>
void perturb_params(nn::ParamStore<T>& params, const std::string& marker, double std, Rng& rng) {
    for (const auto& name : params.names()) {
        if (name.find(marker) == std::string::npos) continue;
        auto v = params.get(name).value();
        for (auto& x : v.values()) x += static_cast<T>(std * rng.normal());
        params.set_value(name, v);
    }
}

/// A velocity net with every parameter nonzero (modulation and biases
/// perturbed away from their zero init).
template <typename T>
velocity::VelocityNet<T> perturbed_net(const velocity::NetConfig& cfg, uint64_t seed) {
    auto net = velocity::VelocityNet<T>::init(cfg, seed);
    Rng rng(derive_seed(seed, 29));
    perturb_params(net.params, "mod", 0.05, rng);
    perturb_params(net.params, ".b", 0.02, rng);
    return net;
}

/// Reduced-width configuration exercising every layer of the velocity net
/// with fewer than 1e5 parameters.
inline velocity::NetConfig sliced_net_config() {
    velocity::NetConfig cfg;
    cfg.width = 32;
    cfg.blocks = 2;
    cfg.heads = 4;
    cfg.time_features = 16;
    return cfg;
}

/// Parameters of the default-size net differentiated in its slice check:
/// embedding, time MLP, one attention projection and the output layer.
inline std::vector<std::string> full_net_slice() {
    return {"patch.w", "patch.b", "time.fc1.w", "time.fc1.b", "time.fc2.w",     "time.fc2.b", "cond.table",
            "blocks.3.attn.qkv.w", "blocks.3.attn.qkv.b", "blocks.0.mod.b", "final.mod.b", "out.w", "out.b"};
}

/// Grad check of the net at `cfg`, differentiating only parameters named in
/// `checked` (all when empty); the rest enter as constants.
template <typename T>
nn::GradCheckReport check_net_gradients(const velocity::NetConfig& cfg, const std::vector<std::string>& checked,
                                        double tolerance, int directions, uint64_t seed) {
    const auto net = perturbed_net<T>(cfg, seed);
    std::vector<std::string> names;
    std::vector<nn::Tensor<T>> values;
    for (const auto& n : net.params.names()) {
        if (checked.empty() || std::find(checked.begin(), checked.end(), n) != checked.end()) {
            names.push_back(n);
            values.push_back(net.params.get(n).value());
        }
    }
    Rng rng(derive_seed(seed, 31));
    const auto z = random_tensor<double>({2, 2, 4, 4, cfg.in_channels()}, rng);
    std::vector<int> tokens;
    for (int i = 0; i < 2 * cfg.slots; ++i) tokens.push_back(i % 5 == 4 ? 0 : rng.uniform_int(1, cfg.vocab - 1));
    const std::vector<double> t = {0.0, 0.63};

    auto build = [&](auto& vars) {
        using U = typename std::decay_t<decltype(vars)>::value_type::value_type;
        velocity::VelocityNet<U> n;
        n.config = cfg;
        size_t k = 0;
        for (const auto& name : net.params.names()) {
            if (k < names.size() && names[k] == name) {
                n.params.adopt(name, vars[k++]);
            } else {
                n.params.adopt(name, nn::constant(net.params.get(name).value().template cast<U>()));
            }
        }
        return weighted_sum(velocity::forward(n, nn::constant(z.template cast<U>()), tokens, t), 5);
    };
    return nn::grad_check_mirrored<T>(build, values, tolerance, directions, seed);
}

}  // namespace flowseg::testing
