#include <benchmark/benchmark.h>

#include "flowseg/codec.hpp"
#include "flowseg/flow.hpp"
#include "flowseg/metrics.hpp"
#include "flowseg/movingshapes.hpp"
#include "flowseg/velocity_net.hpp"

using namespace flowseg;

namespace {

nn::Tensor<float> noise(const nn::Dims& dims, uint64_t seed) {
    Rng rng(seed);
    nn::Tensor<float> t(dims);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal());
    return t;
}

MaskTensor random_mask(uint64_t seed) {
    Rng rng(seed);
    MaskTensor m(8, 32, 32);
    for (int64_t t = 0; t < 8; ++t)
        for (int64_t y = 0; y < 32; ++y)
            for (int64_t x = 0; x < 32; ++x) m.set(t, y, x, rng.uniform() < 0.3);
    return m;
}

void BM_render_scene(benchmark::State& state) {
    uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(shapes::render(shapes::generate_scene(seed++)));
}
BENCHMARK(BM_render_scene);

void BM_jaccard(benchmark::State& state) {
    const auto a = random_mask(1), b = random_mask(2);
    for (auto _ : state) benchmark::DoNotOptimize(metrics::jaccard(a, b));
}
BENCHMARK(BM_jaccard);

void BM_boundary_f(benchmark::State& state) {
    const auto a = random_mask(1), b = random_mask(2);
    for (auto _ : state) benchmark::DoNotOptimize(metrics::boundary_f(a, b));
}
BENCHMARK(BM_boundary_f);

void BM_encode_clip(benchmark::State& state) {
    const auto c = codec::Codec<float>::init({}, 1);
    const auto clip = shapes::render(shapes::generate_scene(3)).video;
    for (auto _ : state) benchmark::DoNotOptimize(codec::encode_clip(c, clip));
}
BENCHMARK(BM_encode_clip)->Unit(benchmark::kMillisecond);

// Forward pass of the default network on a batch of `range(0)` latents.
void BM_velocity_forward(benchmark::State& state) {
    const auto net = velocity::VelocityNet<float>::init({}, 1);
    const int64_t n = state.range(0);
    const auto z = noise({n, 8, 8, 8, net.config.in_channels()}, 2);
    const std::vector<int> tokens(static_cast<size_t>(n * net.config.slots), 1);
    const std::vector<double> t(static_cast<size_t>(n), 0.3);
    for (auto _ : state) benchmark::DoNotOptimize(velocity::evaluate(net, z, tokens, t));
}
BENCHMARK(BM_velocity_forward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

// One optimizer step of flow training on a batch of 8.
void BM_train_step(benchmark::State& state) {
    flow::FlowConfig cfg;
    auto fs = flow::FlowState::fresh(cfg, flow::net_config_for(cfg, 8));
    flow::FlowBatch batch;
    batch.start = noise({8, 8, 8, 8, 8}, 3);
    batch.z0 = batch.start;
    batch.z1 = noise({8, 8, 8, 8, 8}, 4);
    batch.tokens.assign(64, 1);
    batch.t.assign(8, 0.5);
    for (auto _ : state) benchmark::DoNotOptimize(flow::train_step(batch, fs, cfg));
}
BENCHMARK(BM_train_step)->Unit(benchmark::kMillisecond);

// Ten Euler steps of the default network for one clip.
void BM_euler_solve(benchmark::State& state) {
    const auto net = velocity::VelocityNet<float>::init({}, 1);
    const auto z = noise({1, 8, 8, 8, 8}, 5);
    const auto field = flow::net_tensor_field(net, std::vector<int>(8, 1));
    for (auto _ : state) benchmark::DoNotOptimize(flow::euler_integrate<float>(z, z, field, 10, true));
}
BENCHMARK(BM_euler_solve)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
