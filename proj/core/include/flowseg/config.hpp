#pragma once

#include <string>

#include "flowseg/codec.hpp"
#include "flowseg/flow.hpp"
#include "flowseg/metrics.hpp"
#include "flowseg/velocity_net.hpp"

namespace flowseg::cli {

/// Every tunable of the pipeline as one flat record. Text form: one
/// `key = value` per line, `#` starts a comment, blank lines ignored.
struct RunConfig {
    // data
    std::string data_dir = "data";
    std::string train_split = "train";
    std::string val_split = "val";
    int64_t train_samples = 0;  // 0 = every sample in the split
    int64_t val_samples = 0;
    uint64_t seed = 0;

    // codec
    int latent_channels = 8;
    int codec_width = 32;
    double kl_weight = 1e-4;
    int codec_epochs = 3;
    double codec_lr = 1e-3;
    int codec_batch = 8;
    std::string decoder_strategy = "finetuned";
    int finetune_epochs = 1;
    double finetune_lr = 1e-3;
    std::string codec_checkpoint = "runs/codec/codec.frvs";

    // flow
    std::string paradigm = "video2mask-flow";
    double p_bbs = 0.5;
    bool spa = true;
    bool dvi = true;
    int ode_steps = 10;
    int batch = 8;
    int epochs = 10;
    double lr = 3e-4;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;

    // network
    int net_width = 128;
    int net_blocks = 4;
    int net_heads = 4;
    int time_features = 64;
    int mlp_ratio = 4;

    // evaluation
    std::string j_aggregation = "per-clip";

    bool operator==(const RunConfig&) const = default;

    /// Throws ContractError naming the offending line for unknown keys,
    /// malformed lines and unparsable or out-of-range values.
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);
    /// Every key with its value, grouped with comments; parse(to_text()) == *this.
    std::string to_text() const;
    void validate() const;

    flow::FlowConfig flow_config() const;
    velocity::NetConfig net_config() const;
    codec::CodecConfig codec_config() const;
    metrics::EvalOptions eval_options() const;
};

}  // namespace flowseg::cli
