#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "flowseg/mask.hpp"
#include "flowseg/params.hpp"

namespace flowseg::codec {

enum class DecoderStrategy { frozen, conv_head, finetuned };

std::string_view to_string(DecoderStrategy s);
/// Accepts "frozen", "conv-head" and "finetuned".
DecoderStrategy parse_strategy(std::string_view name);

struct CodecConfig {
    int latent_channels = 8;  // C; the encoder emits 2C (mean, log-variance)
    int width = 32;           // widest feature map; the stem uses width / 2
    double kl_weight = 1e-4;
};

inline constexpr double kLogvarFloor = -30.0;
inline constexpr double kLogvarCeiling = 20.0;
inline constexpr int kDownsample = 4;

/// Per-channel latent normalization constants.
struct LatentStats {
    std::vector<double> mean;
    std::vector<double> std;

    bool empty() const { return mean.empty(); }
    void validate(int channels) const;
};

/// Parameter groups by name prefix: "encoder." and "decoder." (trunk with a
/// 3-channel image head) are pretrained together; "head." is the conv head
/// appended to the frozen decoder; "finetuned." is a mask decoder initialized
/// from the pretrained trunk.
template <typename T>
struct Codec {
    CodecConfig config;
    nn::ParamStore<T> params;
    LatentStats stats;

    static Codec init(const CodecConfig& cfg, uint64_t seed);
    bool has_strategy(DecoderStrategy s) const;
    Codec clone() const;
};

template <typename T>
struct Posterior {
    nn::Var<T> mean;    // [N, h, w, C]
    nn::Var<T> logvar;  // [N, h, w, C]
};

/// Masks enter the encoder as binary 3-channel clips.
nn::Tensor<float> lift_mask(const MaskTensor& m);

/// Frames of `x` ([N, H, W, 3], values in [0, 1]) encoded independently.
template <typename T>
Posterior<T> encode(const Codec<T>& codec, const nn::Var<T>& x);

/// Posterior mean and log-variance of a clip [T, H, W, 3], as plain tensors.
template <typename T>
std::pair<nn::Tensor<T>, nn::Tensor<T>> encode_clip(const Codec<T>& codec, const nn::Tensor<float>& clip);

/// mean + exp(logvar / 2) * eps with logvar clamped to [kLogvarFloor, kLogvarCeiling].
template <typename T>
nn::Tensor<T> sample_posterior(const nn::Tensor<T>& mean, const nn::Tensor<T>& logvar, Rng& rng);

template <typename T>
nn::Tensor<T> normalize_latent(const nn::Tensor<T>& z, const LatentStats& stats);
template <typename T>
nn::Tensor<T> denormalize_latent(const nn::Tensor<T>& z, const LatentStats& stats);

/// Per-channel mean and standard deviation over a corpus of latents.
template <typename T>
LatentStats compute_latent_stats(const std::vector<nn::Tensor<T>>& latents);

/// Three-channel image logits of the pretrained decoder, [N, H, W, 3].
template <typename T>
nn::Var<T> image_logits(const Codec<T>& codec, const nn::Var<T>& z);

/// One-channel mask logits, [N, H, W, 1], for the trainable strategies.
template <typename T>
nn::Var<T> mask_logits(const Codec<T>& codec, const nn::Var<T>& z, DecoderStrategy s);

/// Mask probabilities [T, H, W] for a latent [T, h, w, C]. The frozen
/// strategy reads the mean of the image head's channel probabilities.
template <typename T>
nn::Tensor<T> decode(const Codec<T>& codec, const nn::Tensor<T>& z, DecoderStrategy s);

MaskTensor binarize(const nn::Tensor<float>& probs, double threshold = 0.5);
MaskTensor binarize(const nn::Tensor<double>& probs, double threshold = 0.5);

/// decode(encode-mean(mask)) binarized at 0.5.
template <typename T>
MaskTensor reconstruct_mask(const Codec<T>& codec, const MaskTensor& m, DecoderStrategy s);

struct TrainOptions {
    int epochs = 1;
    int batch = 8;
    double lr = 3e-4;
    double weight_decay = 5e-4;
    uint64_t seed = 0;
    /// Called after each optimizer step with (step, loss).
    std::function<void(int64_t, double)> on_step;
};

struct TrainReport {
    std::vector<double> epoch_loss;        // mean total loss per epoch
    std::vector<double> epoch_recon_loss;  // mean reconstruction term per epoch
    int64_t steps = 0;
};

/// Trains encoder and decoder on video reconstruction (MSE + kl_weight * KL),
/// then computes latent normalization constants from the posterior means of
/// `videos`.
TrainReport pretrain_codec(Codec<float>& codec, const std::vector<nn::Tensor<float>>& videos,
                           const TrainOptions& opts);

/// Optimizes focal (alpha 0.25, gamma 2) plus dice loss of the strategy's
/// mask logits on encode-mean(mask), touching only that strategy's
/// parameters. Creates the strategy's parameters on first use.
TrainReport finetune_decoder(Codec<float>& codec, const std::vector<MaskTensor>& masks, DecoderStrategy s,
                             const TrainOptions& opts);

/// Adds freshly initialized parameters for `s` if missing.
template <typename T>
void ensure_strategy(Codec<T>& codec, DecoderStrategy s, uint64_t seed);

void save_codec(const Codec<float>& codec, io::FrvsFile& file, const std::string& prefix = "codec.");
Codec<float> load_codec(const io::FrvsFile& file, const std::string& prefix = "codec.");

}  // namespace flowseg::codec
