#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "flowseg/flow.hpp"

using namespace flowseg;
using namespace flowseg::flow;

// Default flow configuration on a 64-sample corpus: the loss, averaged over
// 50-step windows, falls from each window to the next during the first 200
// steps, for three seeds.
TEST_CASE("smoothed training loss decreases over the first 200 steps") {
    auto c = codec::Codec<float>::init({}, 3);
    codec::ensure_strategy(c, codec::DecoderStrategy::finetuned, 3);
    const auto samples = shapes::generate_samples(64, 21, "train");
    std::vector<nn::Tensor<float>> means;
    for (const auto& s : samples) means.push_back(codec::encode_clip(c, s.video).first);
    c.stats = codec::compute_latent_stats(means);
    const auto data = encode_samples(samples, c);

    for (uint64_t seed : {0, 1, 2}) {
        FlowConfig cfg;
        cfg.seed = seed;
        cfg.epochs = 25;  // 8 batches per epoch
        auto state = FlowState::fresh(cfg, net_config_for(cfg, c.config.latent_channels));
        train_flow(state, data, c.stats, cfg);
        REQUIRE(state.losses.size() == 200);
        std::vector<double> windows;
        for (size_t w = 0; w < 4; ++w) {
            const auto from = state.losses.begin() + static_cast<std::ptrdiff_t>(50 * w);
            windows.push_back(std::accumulate(from, from + 50, 0.0) / 50.0);
        }
        INFO("seed " << seed << " windows " << windows[0] << " " << windows[1] << " " << windows[2] << " "
                     << windows[3]);
        for (size_t w = 1; w < windows.size(); ++w) CHECK(windows[w] < windows[w - 1]);
    }
}
