#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flowseg/movingshapes.hpp"
#include "flowseg/optim.hpp"
#include "flowseg/velocity_net.hpp"
#include "model_checks.hpp"
#include "test_util.hpp"

using namespace flowseg;
using namespace flowseg::velocity;
using flowseg::testing::perturbed_net;
using flowseg::testing::random_tensor;

namespace {

std::vector<int> tokens_for(const std::string& query, int copies = 1) {
    const auto q = shapes::parse_query(query);
    const auto ids = shapes::padded_tokens(shapes::make_query(q));
    std::vector<int> out;
    for (int i = 0; i < copies; ++i) out.insert(out.end(), ids.begin(), ids.end());
    return out;
}

double max_abs_diff(const nn::Tensor<float>& a, const nn::Tensor<float>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])));
    return m;
}

// Parameter count from the layer list, independent of init().
int64_t expected_count(const NetConfig& c) {
    const int64_t D = c.width, P = c.patch;
    auto lin = [](int64_t i, int64_t o) { return i * o + o; };
    int64_t n = lin(P * P * c.in_channels(), D) + lin(c.time_features, D) + lin(D, D) + int64_t(c.vocab) * D;
    const int64_t block = lin(D, 9 * D) + lin(D, 3 * D) + lin(D, D) + 4 * lin(D, D) + lin(D, c.mlp_ratio * D) +
                          lin(c.mlp_ratio * D, D);
    return n + c.blocks * block + lin(D, 2 * D) + lin(D, P * P * c.latent_channels);
}

}  // namespace

TEST_CASE("output keeps latent dims and C channels with and without DVI") {
    Rng rng(1);
    const std::vector<double> t = {0.25};
    const auto tok = tokens_for("the red circle");
    const auto on = VelocityNet<float>::init({}, 3);
    const auto out = evaluate(on, random_tensor<float>({1, 8, 8, 8, 16}, rng), tok, t);
    CHECK(out.dims() == nn::Dims{1, 8, 8, 8, 8});
    CHECK_THROWS_AS(evaluate(on, random_tensor<float>({1, 8, 8, 8, 8}, rng), tok, t), ShapeError);

    NetConfig off_cfg;
    off_cfg.dvi = false;
    const auto off = VelocityNet<float>::init(off_cfg, 3);
    CHECK(evaluate(off, random_tensor<float>({1, 8, 8, 8, 8}, rng), tok, t).dims() == nn::Dims{1, 8, 8, 8, 8});
    CHECK_THROWS_AS(evaluate(off, random_tensor<float>({1, 8, 8, 8, 16}, rng), tok, t), ShapeError);

    CHECK_THROWS_AS(evaluate(on, random_tensor<float>({1, 8, 7, 8, 16}, rng), tok, t), ShapeError);
    CHECK_THROWS_AS(evaluate(on, random_tensor<float>({1, 8, 8, 8, 16}, rng), tok, {1.5}), ContractError);
    CHECK_THROWS_AS(evaluate(on, random_tensor<float>({1, 8, 8, 8, 16}, rng), tok, {0.1, 0.2}), ShapeError);
}

TEST_CASE("configuration rules") {
    NetConfig c;
    c.heads = 3;
    CHECK_THROWS_AS(VelocityNet<float>::init(c, 0), ContractError);
    c = NetConfig{};
    c.width = 100;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = NetConfig{};
    c.dvi = false;
    c.blocks = 2;
    CHECK(NetConfig::from_text(c.to_text()) == c);
    CHECK_THROWS_AS(NetConfig::from_text("depth=3\n"), ContractError);
}

TEST_CASE("init is seeded, zeroes modulation and stays under 3M parameters") {
    const auto a = VelocityNet<float>::init({}, 7);
    const auto b = VelocityNet<float>::init({}, 7);
    const auto c = VelocityNet<float>::init({}, 8);
    CHECK(a.params.digest() == b.params.digest());
    CHECK(a.params.digest() != c.params.digest());
    for (const auto& name : a.params.names()) {
        if (name.find("mod.") == std::string::npos) continue;
        for (float v : a.params.get(name).value().values()) REQUIRE(v == 0.0f);
    }
    const auto w = a.params.get("blocks.0.attn.qkv.w").value();
    double sq = 0, mx = 0;
    for (float v : w.values()) {
        sq += double(v) * v;
        mx = std::max(mx, double(std::abs(v)));
    }
    CHECK(std::sqrt(sq / double(w.numel())) == doctest::Approx(0.02 * 0.88).epsilon(0.05));
    CHECK(mx <= 0.04 + 1e-7);

    CHECK(a.params.count() == expected_count(a.config));
    CHECK(a.params.count() < 3'000'000);
    NetConfig off;
    off.dvi = false;
    CHECK(VelocityNet<float>::init(off, 0).params.count() == expected_count(off));
    CHECK(VelocityNet<float>::init(testing::sliced_net_config(), 0).params.count() < nn::kGradCheckMaxParams);

    // Output depends on the input at init.
    Rng rng(5);
    const auto tok = tokens_for("the circle");
    const auto o1 = evaluate(a, random_tensor<float>({1, 2, 4, 4, 16}, rng), tok, {0.5});
    const auto o2 = evaluate(a, random_tensor<float>({1, 2, 4, 4, 16}, rng), tok, {0.5});
    CHECK(max_abs_diff(o1, o2) > 1e-4);
}

TEST_CASE("forward is deterministic") {
    const auto net = perturbed_net<float>({}, 2);
    Rng rng(9);
    const auto z = random_tensor<float>({2, 8, 8, 8, 16}, rng);
    const auto tok = tokens_for("the smaller blue square", 2);
    CHECK(evaluate(net, z, tok, {0.0, 0.7}) == evaluate(net, z, tok, {0.0, 0.7}));
}

TEST_CASE("time embedding separates 0, 0.5 and 1") {
    const auto f = timestep_features<double>({0.0, 0.5, 1.0}, 64);
    for (int a = 0; a < 3; ++a) {
        for (int b = a + 1; b < 3; ++b) {
            double d = 0;
            for (int j = 0; j < 64; ++j) d += std::abs(f[a * 64 + j] - f[b * 64 + j]);
            CHECK(d > 1e-3);
        }
    }
    const auto net = perturbed_net<float>({}, 4);
    Rng rng(3);
    const auto z = random_tensor<float>({1, 2, 4, 4, 16}, rng);
    const auto tok = tokens_for("the circle");
    const auto o0 = evaluate(net, z, tok, {0.0});
    const auto oh = evaluate(net, z, tok, {0.5});
    const auto o1 = evaluate(net, z, tok, {1.0});
    CHECK(max_abs_diff(o0, oh) > 1e-5);
    CHECK(max_abs_diff(oh, o1) > 1e-5);
    CHECK(max_abs_diff(o0, o1) > 1e-5);
}

TEST_CASE("queries with different referents steer the output") {
    // Zero-initialized gates hide the condition at the literal init, so this
    // runs on a fully random parameter draw.
    const auto net = perturbed_net<float>({}, 6);
    Rng rng(8);
    const auto z = random_tensor<float>({1, 8, 8, 8, 16}, rng);
    const auto a = evaluate(net, z, tokens_for("the smaller red circle"), {0.3});
    const auto b = evaluate(net, z, tokens_for("the bigger red circle"), {0.3});
    CHECK(max_abs_diff(a, b) > 1e-6);
}

TEST_CASE("swapping two padded slots leaves the output unchanged") {
    const auto net = perturbed_net<float>({}, 10);
    Rng rng(11);
    const auto z = random_tensor<float>({1, 2, 4, 4, 16}, rng);
    auto tok = tokens_for("the red circle");
    REQUIRE(tok[5] == 0);
    REQUIRE(tok[7] == 0);
    const auto a = evaluate(net, z, tok, {0.4});
    std::swap(tok[5], tok[7]);
    CHECK(evaluate(net, z, tok, {0.4}) == a);
}

TEST_CASE("training steps reach the embedding rows of used tokens") {
    auto net = VelocityNet<float>::init({}, 12);
    Rng rng(13);
    const auto z = random_tensor<float>({2, 2, 4, 4, 16}, rng);
    const auto target = random_tensor<float>({2, 2, 4, 4, 8}, rng);
    const auto tok = tokens_for("the bigger green triangle", 2);
    const auto before = net.params.get("cond.table").value();
    auto params = net.params.vars();
    nn::OptimState<float> opt(params, {});
    const int steps = 3;
    for (int s = 0; s < steps; ++s) {
        nn::Tape<float> tape;
        auto loss = nn::mse_loss(forward(net, nn::constant(z), tok, {0.0, 0.5}), target);
        tape.backward(loss);
        nn::adamw_step(params, opt);
    }
    const auto after = net.params.get("cond.table").value();
    const double decay = std::pow(1.0 - 3e-4 * 5e-4, steps);
    const int64_t D = net.config.width;
    std::vector<bool> used(32, false);
    for (int id : tok) used[id] = true;
    for (int id = 0; id < 32; ++id) {
        double moved = 0;
        for (int64_t j = 0; j < D; ++j) moved = std::max(moved, std::abs(after[id * D + j] - before[id * D + j] * decay));
        if (used[id]) CHECK(moved > 1e-5);
        else CHECK(moved < 1e-7);
    }
}

TEST_CASE("checkpoints round-trip") {
    const auto net = perturbed_net<float>({}, 14);
    io::FrvsFile f;
    save_net(net, f);
    const auto back = load_net(io::FrvsFile::parse(f.serialize()));
    CHECK(back.config == net.config);
    CHECK(back.params.digest() == net.params.digest());
    CHECK_THROWS_AS(load_net(io::FrvsFile{}), ContractError);
}

TEST_CASE("sliced network gradients match finite differences") {
    const auto cfg = testing::sliced_net_config();
    const auto r32 = testing::check_net_gradients<float>(cfg, {}, 1e-3, 20, 1);
    CAPTURE(r32.max_rel_error);
    CHECK(r32.passed);
    CHECK(r32.parameter_count <= nn::kGradCheckMaxParams);
    const auto r64 = testing::check_net_gradients<double>(cfg, {}, 1e-6, 20, 1);
    CAPTURE(r64.max_rel_error);
    CHECK(r64.passed);
}

TEST_CASE("default-size network gradients match on a parameter slice") {
    const auto r32 = testing::check_net_gradients<float>({}, testing::full_net_slice(), 1e-3, 20, 2);
    CAPTURE(r32.max_rel_error);
    CHECK(r32.passed);
    CHECK(r32.parameter_count <= nn::kGradCheckMaxParams);
    const auto r64 = testing::check_net_gradients<double>({}, testing::full_net_slice(), 1e-6, 20, 2);
    CAPTURE(r64.max_rel_error);
    CHECK(r64.passed);
}
