#include "flowseg/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "flowseg/optim.hpp"

namespace flowseg::codec {

using nn::Dims;
using nn::Tensor;
using nn::Var;

namespace {

constexpr double kFocalAlpha = 0.25;
constexpr double kFocalGamma = 2.0;
constexpr double kDiceSmooth = 1.0;
constexpr int kHeadWidth = 8;

template <typename T>
Var<T> trunk(const Codec<T>& c, const Var<T>& z, const std::string& prefix) {
    const auto& p = c.params;
    Var<T> h = nn::gelu(nn::conv_layer(z, p, prefix + "conv_in", 1, 1));
    h = nn::gelu(nn::conv_transpose_layer(h, p, prefix + "up1", 2, 1));
    return nn::gelu(nn::conv_transpose_layer(h, p, prefix + "up2", 2, 1));
}

template <typename T>
Var<T> head_logits(const Codec<T>& c, const Var<T>& rgb_probs) {
    Var<T> h = nn::gelu(nn::conv_layer(rgb_probs, c.params, "head.conv1", 1, 1));
    return nn::conv_layer(h, c.params, "head.conv2", 1, 1);
}

template <typename T>
void check_latent(const Codec<T>& c, const Dims& d, const char* op) {
    if (d.size() != 4 || d[3] != c.config.latent_channels) {
        throw ShapeError(std::string(op) + ": latent dims " + nn::dims_str(d) + ", expected [N,h,w," +
                         std::to_string(c.config.latent_channels) + "]");
    }
}

/// Stacks clips [T, H, W, ch] into one [sum T, H, W, ch] batch.
template <typename T, typename Src>
Tensor<T> stack_clips(const std::vector<const Tensor<Src>*>& clips) {
    Dims d = clips.front()->dims();
    int64_t frames = 0;
    for (const auto* c : clips) {
        if (Dims(c->dims().begin() + 1, c->dims().end()) != Dims(d.begin() + 1, d.end())) {
            throw ShapeError("stack_clips: " + nn::dims_str(c->dims()) + " vs " + nn::dims_str(d));
        }
        frames += c->dim(0);
    }
    d[0] = frames;
    Tensor<T> out(d);
    int64_t off = 0;
    for (const auto* c : clips) {
        for (int64_t i = 0; i < c->numel(); ++i) out[off + i] = static_cast<T>((*c)[i]);
        off += c->numel();
    }
    return out;
}

std::vector<size_t> shuffled(size_t n, uint64_t seed) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(seed);
    for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, int64_t(i) - 1))]);
    return order;
}

}  // namespace

std::string_view to_string(DecoderStrategy s) {
    switch (s) {
        case DecoderStrategy::frozen: return "frozen";
        case DecoderStrategy::conv_head: return "conv-head";
        case DecoderStrategy::finetuned: return "finetuned";
    }
    throw ContractError("unknown decoder strategy");
}

DecoderStrategy parse_strategy(std::string_view name) {
    if (name == "frozen") return DecoderStrategy::frozen;
    if (name == "conv-head") return DecoderStrategy::conv_head;
    if (name == "finetuned") return DecoderStrategy::finetuned;
    throw ContractError("unknown decoder strategy '" + std::string(name) + "' (frozen, conv-head, finetuned)");
}

void LatentStats::validate(int channels) const {
    if (mean.empty()) throw ContractError("latent normalization constants have not been computed");
    if (static_cast<int>(mean.size()) != channels || static_cast<int>(std.size()) != channels) {
        throw ContractError("latent normalization constants cover " + std::to_string(mean.size()) + " channels, need " +
                            std::to_string(channels));
    }
    for (double s : std) {
        if (!(s > 0.0)) throw ContractError("latent normalization std must be positive");
    }
}

template <typename T>
Codec<T> Codec<T>::init(const CodecConfig& cfg, uint64_t seed) {
    if (cfg.latent_channels < 1 || cfg.width < 2 || cfg.width % 2 != 0) {
        throw ContractError("codec config: latent_channels >= 1 and an even width >= 2 required");
    }
    Codec c;
    c.config = cfg;
    Rng rng(seed);
    const int64_t C = cfg.latent_channels, W = cfg.width, S = cfg.width / 2;
    auto& p = c.params;
    auto conv = [&](const std::string& name, int64_t k, int64_t cin, int64_t cout) {
        p.add(name + ".w", nn::conv_init<T>(k, k, cin, cout, rng));
        p.add(name + ".b", Tensor<T>({cout}));
    };
    auto up = [&](const std::string& name, int64_t cin, int64_t cout) {
        // Each output pixel of a stride-2 4x4 transposed conv sees 4 taps per input channel.
        p.add(name + ".w", nn::truncated_normal_tensor<T>({4, 4, cout, cin}, std::sqrt(2.0 / double(4 * cin)), rng));
        p.add(name + ".b", Tensor<T>({cout}));
    };
    conv("encoder.conv1", 3, 3, S);
    conv("encoder.conv2", 4, S, W);
    conv("encoder.conv3", 4, W, W);
    conv("encoder.out", 3, W, 2 * C);
    conv("decoder.conv_in", 3, C, W);
    up("decoder.up1", W, W);
    up("decoder.up2", W, S);
    conv("decoder.rgb", 3, S, 3);
    return c;
}

template <typename T>
bool Codec<T>::has_strategy(DecoderStrategy s) const {
    switch (s) {
        case DecoderStrategy::frozen: return params.contains("decoder.rgb.w");
        case DecoderStrategy::conv_head: return params.contains("head.conv2.w");
        case DecoderStrategy::finetuned: return params.contains("finetuned.mask.w");
    }
    return false;
}

template <typename T>
Codec<T> Codec<T>::clone() const {
    Codec c;
    c.config = config;
    c.params = params.clone();
    c.stats = stats;
    return c;
}

template <typename T>
void ensure_strategy(Codec<T>& c, DecoderStrategy s, uint64_t seed) {
    if (c.has_strategy(s)) return;
    Rng rng(derive_seed(seed, 0x5ead));
    auto& p = c.params;
    if (s == DecoderStrategy::conv_head) {
        p.add("head.conv1.w", nn::conv_init<T>(3, 3, 3, kHeadWidth, rng));
        p.add("head.conv1.b", Tensor<T>({kHeadWidth}));
        p.add("head.conv2.w", nn::conv_init<T>(3, 3, kHeadWidth, 1, rng));
        p.add("head.conv2.b", Tensor<T>({1}));
    } else if (s == DecoderStrategy::finetuned) {
        for (const char* layer : {"conv_in", "up1", "up2"}) {
            for (const char* part : {".w", ".b"}) {
                p.add(std::string("finetuned.") + layer + part,
                      p.get(std::string("decoder.") + layer + part).value());
            }
        }
        // The mask head starts as the channel average of the image head.
        const auto& rgb_w = p.get("decoder.rgb.w").value();
        const auto& rgb_b = p.get("decoder.rgb.b").value();
        const int64_t taps = rgb_w.numel() / 3;
        Tensor<T> w({rgb_w.dim(0), rgb_w.dim(1), rgb_w.dim(2), 1});
        for (int64_t i = 0; i < taps; ++i) w[i] = (rgb_w[3 * i] + rgb_w[3 * i + 1] + rgb_w[3 * i + 2]) / T(3);
        p.add("finetuned.mask.w", w);
        p.add("finetuned.mask.b", Tensor<T>({1}, {(rgb_b[0] + rgb_b[1] + rgb_b[2]) / T(3)}));
    }
}

Tensor<float> lift_mask(const MaskTensor& m) {
    Tensor<float> out({m.frames(), m.height(), m.width(), 3});
    const auto& bits = m.bits();
    for (size_t i = 0; i < bits.size(); ++i) {
        for (int c = 0; c < 3; ++c) out[static_cast<int64_t>(3 * i + c)] = bits[i] ? 1.0f : 0.0f;
    }
    return out;
}

template <typename T>
Posterior<T> encode(const Codec<T>& c, const Var<T>& x) {
    const Dims& d = x.dims();
    if (d.size() != 4 || d[3] != 3) throw ShapeError("encode: input dims " + nn::dims_str(d) + ", expected [N,H,W,3]");
    if (d[1] % kDownsample != 0 || d[2] % kDownsample != 0) {
        throw ShapeError("encode: spatial dims " + nn::dims_str(d) + " are not divisible by 4");
    }
    const auto& p = c.params;
    Var<T> h = nn::gelu(nn::conv_layer(x, p, "encoder.conv1", 1, 1));
    h = nn::gelu(nn::conv_layer(h, p, "encoder.conv2", 2, 1));
    h = nn::gelu(nn::conv_layer(h, p, "encoder.conv3", 2, 1));
    Var<T> out = nn::conv_layer(h, p, "encoder.out", 1, 1);
    const int C = c.config.latent_channels;
    return {nn::slice(out, 3, 0, C), nn::slice(out, 3, C, C)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> encode_clip(const Codec<T>& c, const Tensor<float>& clip) {
    auto post = encode(c, nn::constant(clip.cast<T>()));
    return {post.mean.value(), post.logvar.value()};
}

template <typename T>
Tensor<T> sample_posterior(const Tensor<T>& mean, const Tensor<T>& logvar, Rng& rng) {
    if (mean.dims() != logvar.dims()) {
        throw ShapeError("sample_posterior: " + nn::dims_str(mean.dims()) + " vs " + nn::dims_str(logvar.dims()));
    }
    Tensor<T> out(mean.dims());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double lv = std::clamp(static_cast<double>(logvar[i]), kLogvarFloor, kLogvarCeiling);
        out[i] = static_cast<T>(mean[i] + std::exp(lv / 2.0) * rng.normal());
    }
    return out;
}

template <typename T>
Tensor<T> normalize_latent(const Tensor<T>& z, const LatentStats& stats) {
    stats.validate(static_cast<int>(z.dim(-1)));
    const int64_t C = z.dim(-1);
    Tensor<T> out(z.dims());
    for (int64_t i = 0; i < z.numel(); ++i) {
        const auto c = static_cast<size_t>(i % C);
        out[i] = static_cast<T>((z[i] - stats.mean[c]) / stats.std[c]);
    }
    return out;
}

template <typename T>
Tensor<T> denormalize_latent(const Tensor<T>& z, const LatentStats& stats) {
    stats.validate(static_cast<int>(z.dim(-1)));
    const int64_t C = z.dim(-1);
    Tensor<T> out(z.dims());
    for (int64_t i = 0; i < z.numel(); ++i) {
        const auto c = static_cast<size_t>(i % C);
        out[i] = static_cast<T>(z[i] * stats.std[c] + stats.mean[c]);
    }
    return out;
}

template <typename T>
LatentStats compute_latent_stats(const std::vector<Tensor<T>>& latents) {
    if (latents.empty()) throw ContractError("compute_latent_stats: no latents");
    const int64_t C = latents.front().dim(-1);
    std::vector<double> sum(static_cast<size_t>(C)), sq(static_cast<size_t>(C));
    int64_t count = 0;
    for (const auto& z : latents) {
        if (z.dim(-1) != C) throw ShapeError("compute_latent_stats: channel count differs across latents");
        for (int64_t i = 0; i < z.numel(); ++i) sum[static_cast<size_t>(i % C)] += z[i];
        count += z.numel() / C;
    }
    LatentStats s;
    for (int64_t c = 0; c < C; ++c) s.mean.push_back(sum[static_cast<size_t>(c)] / double(count));
    for (const auto& z : latents) {
        for (int64_t i = 0; i < z.numel(); ++i) {
            const double d = z[i] - s.mean[static_cast<size_t>(i % C)];
            sq[static_cast<size_t>(i % C)] += d * d;
        }
    }
    for (int64_t c = 0; c < C; ++c) {
        s.std.push_back(std::max(std::sqrt(sq[static_cast<size_t>(c)] / double(count)), 1e-8));
    }
    return s;
}

template <typename T>
Var<T> image_logits(const Codec<T>& c, const Var<T>& z) {
    check_latent(c, z.dims(), "image_logits");
    return nn::conv_layer(trunk(c, z, "decoder."), c.params, "decoder.rgb", 1, 1);
}

template <typename T>
Var<T> mask_logits(const Codec<T>& c, const Var<T>& z, DecoderStrategy s) {
    check_latent(c, z.dims(), "mask_logits");
    if (!c.has_strategy(s)) {
        throw ContractError("decoder strategy " + std::string(to_string(s)) + " has no parameters");
    }
    switch (s) {
        case DecoderStrategy::frozen: break;
        case DecoderStrategy::conv_head: return head_logits(c, nn::sigmoid(image_logits(c, z)));
        case DecoderStrategy::finetuned:
            return nn::conv_layer(trunk(c, z, "finetuned."), c.params, "finetuned.mask", 1, 1);
    }
    throw ContractError("mask_logits: the frozen decoder has no mask logits");
}

template <typename T>
Tensor<T> decode(const Codec<T>& c, const Tensor<T>& z, DecoderStrategy s) {
    check_latent(c, z.dims(), "decode");
    const Dims out_dims = {z.dim(0), z.dim(1) * kDownsample, z.dim(2) * kDownsample};
    Tensor<T> probs(out_dims);
    if (s == DecoderStrategy::frozen) {
        const auto rgb = nn::sigmoid(image_logits(c, nn::constant(z))).value();
        for (int64_t i = 0; i < probs.numel(); ++i) probs[i] = (rgb[3 * i] + rgb[3 * i + 1] + rgb[3 * i + 2]) / T(3);
        return probs;
    }
    return nn::sigmoid(mask_logits(c, nn::constant(z), s)).value().reshaped(out_dims);
}

namespace {
template <typename T>
MaskTensor binarize_impl(const Tensor<T>& probs, double threshold) {
    if (probs.ndim() != 3) throw ShapeError("binarize: expected [T,H,W], got " + nn::dims_str(probs.dims()));
    std::vector<uint8_t> bits(static_cast<size_t>(probs.numel()));
    for (int64_t i = 0; i < probs.numel(); ++i) bits[static_cast<size_t>(i)] = probs[i] >= threshold;
    return MaskTensor(probs.dim(0), probs.dim(1), probs.dim(2), std::move(bits));
}
}  // namespace

MaskTensor binarize(const Tensor<float>& probs, double threshold) { return binarize_impl(probs, threshold); }
MaskTensor binarize(const Tensor<double>& probs, double threshold) { return binarize_impl(probs, threshold); }

template <typename T>
MaskTensor reconstruct_mask(const Codec<T>& c, const MaskTensor& m, DecoderStrategy s) {
    return binarize(decode(c, encode_clip(c, lift_mask(m)).first, s));
}

TrainReport pretrain_codec(Codec<float>& codec, const std::vector<Tensor<float>>& videos, const TrainOptions& opts) {
    if (videos.empty()) throw ContractError("pretrain_codec: empty dataset");
    if (opts.epochs < 1 || opts.batch < 1) throw ContractError("pretrain_codec: epochs and batch must be positive");
    auto params = codec.params.vars("encoder.");
    for (const auto& v : codec.params.vars("decoder.")) params.push_back(v);
    nn::AdamWConfig acfg;
    acfg.lr = opts.lr;
    acfg.weight_decay = opts.weight_decay;
    nn::OptimState<float> state(params, acfg);

    TrainReport report;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        const auto order = shuffled(videos.size(), derive_seed(opts.seed, 0xc0dec, epoch));
        double total = 0.0, recon_total = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opts.batch)) {
            std::vector<const Tensor<float>*> clips;
            for (size_t k = start; k < std::min(order.size(), start + opts.batch); ++k) clips.push_back(&videos[order[k]]);
            const Tensor<float> x = stack_clips<float>(clips);
            Rng rng(derive_seed(opts.seed, 0xc0dec, epoch, report.steps + 1));
            double loss_value = 0.0, recon_value = 0.0;
            {
                nn::Tape<float> tape;
                auto post = encode(codec, nn::constant(x));
                Tensor<float> eps(post.mean.dims());
                for (auto& e : eps.values()) e = static_cast<float>(rng.normal());
                auto z = nn::add(post.mean, nn::mul(nn::exp(nn::scale(post.logvar, 0.5)), nn::constant(eps)));
                auto recon = nn::mse_loss(nn::sigmoid(image_logits(codec, z)), x);
                // KL(q || N(0, I)) averaged over latent elements.
                auto kl = nn::scale(
                    nn::mean(nn::sub(nn::add(nn::mul(post.mean, post.mean), nn::exp(post.logvar)),
                                     nn::add_scalar(post.logvar, 1.0))),
                    0.5);
                auto loss = nn::add(recon, nn::scale(kl, codec.config.kl_weight));
                loss_value = loss.value().item();
                recon_value = recon.value().item();
                if (!std::isfinite(loss_value)) {
                    throw NumericError("pretrain_codec: non-finite loss at step " + std::to_string(report.steps + 1));
                }
                tape.backward(loss);
            }
            nn::adamw_step(params, state);
            ++report.steps;
            total += loss_value;
            recon_total += recon_value;
            ++batches;
            if (opts.on_step) opts.on_step(report.steps, loss_value);
        }
        report.epoch_loss.push_back(total / double(batches));
        report.epoch_recon_loss.push_back(recon_total / double(batches));
    }

    std::vector<Tensor<float>> means;
    means.reserve(videos.size());
    for (const auto& v : videos) means.push_back(encode_clip(codec, v).first);
    codec.stats = compute_latent_stats(means);
    return report;
}

TrainReport finetune_decoder(Codec<float>& codec, const std::vector<MaskTensor>& masks, DecoderStrategy s,
                             const TrainOptions& opts) {
    if (s == DecoderStrategy::frozen) throw ContractError("finetune_decoder: the frozen strategy has nothing to train");
    if (masks.empty()) throw ContractError("finetune_decoder: empty dataset");
    if (opts.epochs < 1 || opts.batch < 1) throw ContractError("finetune_decoder: epochs and batch must be positive");
    ensure_strategy(codec, s, opts.seed);
    auto params = codec.params.vars(s == DecoderStrategy::conv_head ? "head." : "finetuned.");
    nn::AdamWConfig acfg;
    acfg.lr = opts.lr;
    acfg.weight_decay = opts.weight_decay;
    nn::OptimState<float> state(params, acfg);

    // The encoder is frozen, so mask latents are computed once.
    std::vector<Tensor<float>> latents(masks.size());
    std::vector<Tensor<float>> targets(masks.size());
    for (size_t i = 0; i < masks.size(); ++i) {
        latents[i] = encode_clip(codec, lift_mask(masks[i])).first;
        const auto& m = masks[i];
        targets[i] = Tensor<float>({m.frames(), m.height(), m.width(), 1},
                                   std::vector<float>(m.bits().begin(), m.bits().end()));
    }

    TrainReport report;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        const auto order = shuffled(masks.size(), derive_seed(opts.seed, 0xf1e7, epoch));
        double total = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opts.batch)) {
            std::vector<const Tensor<float>*> zs, ts;
            for (size_t k = start; k < std::min(order.size(), start + opts.batch); ++k) {
                zs.push_back(&latents[order[k]]);
                ts.push_back(&targets[order[k]]);
            }
            const Tensor<float> z = stack_clips<float>(zs);
            const Tensor<float> target = stack_clips<float>(ts);
            // Frozen decoder features are computed before the tape opens.
            Tensor<float> frozen_rgb;
            if (s == DecoderStrategy::conv_head) frozen_rgb = nn::sigmoid(image_logits(codec, nn::constant(z))).value();
            double loss_value = 0.0;
            {
                nn::Tape<float> tape;
                auto logits = s == DecoderStrategy::conv_head ? head_logits(codec, nn::constant(frozen_rgb))
                                                              : mask_logits(codec, nn::constant(z), s);
                auto loss = nn::add(nn::focal_loss_with_logits(logits, target, kFocalAlpha, kFocalGamma),
                                    nn::dice_loss(nn::sigmoid(logits), target, kDiceSmooth));
                loss_value = loss.value().item();
                if (!std::isfinite(loss_value)) {
                    throw NumericError("finetune_decoder: non-finite loss at step " + std::to_string(report.steps + 1));
                }
                tape.backward(loss);
            }
            nn::adamw_step(params, state);
            ++report.steps;
            total += loss_value;
            ++batches;
            if (opts.on_step) opts.on_step(report.steps, loss_value);
        }
        report.epoch_loss.push_back(total / double(batches));
        report.epoch_recon_loss.push_back(total / double(batches));
    }
    return report;
}

void save_codec(const Codec<float>& codec, io::FrvsFile& file, const std::string& prefix) {
    std::ostringstream cfg;
    cfg.precision(17);
    cfg << "latent_channels=" << codec.config.latent_channels << "\nwidth=" << codec.config.width
        << "\nkl_weight=" << codec.config.kl_weight << "\n";
    file.add(io::text_tensor(prefix + "config", cfg.str()));
    codec.params.save(file, prefix + "p.");
    if (!codec.stats.empty()) {
        const auto C = static_cast<int64_t>(codec.stats.mean.size());
        file.add(io::FrvsTensor::from_f64(prefix + "stats.mean", Tensor<double>({C}, codec.stats.mean)));
        file.add(io::FrvsTensor::from_f64(prefix + "stats.std", Tensor<double>({C}, codec.stats.std)));
    }
}

Codec<float> load_codec(const io::FrvsFile& file, const std::string& prefix) {
    if (!file.contains(prefix + "config")) throw ContractError("checkpoint holds no codec");
    Codec<float> c;
    std::istringstream in(io::tensor_text(file.get(prefix + "config")));
    for (std::string line; std::getline(in, line);) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "latent_channels") c.config.latent_channels = std::stoi(value);
        else if (key == "width") c.config.width = std::stoi(value);
        else if (key == "kl_weight") c.config.kl_weight = std::stod(value);
    }
    c.params = nn::ParamStore<float>::from_frvs(file, prefix + "p.");
    if (file.contains(prefix + "stats.mean")) {
        const auto m = file.get(prefix + "stats.mean").to_tensor<double>();
        const auto s = file.get(prefix + "stats.std").to_tensor<double>();
        c.stats.mean.assign(m.values().begin(), m.values().end());
        c.stats.std.assign(s.values().begin(), s.values().end());
        c.stats.validate(c.config.latent_channels);
    }
    return c;
}

#define FLOWSEG_CODEC_INSTANTIATE(T)                                                                  \
    template struct Codec<T>;                                                                         \
    template void ensure_strategy(Codec<T>&, DecoderStrategy, uint64_t);                              \
    template Posterior<T> encode(const Codec<T>&, const Var<T>&);                                     \
    template std::pair<Tensor<T>, Tensor<T>> encode_clip(const Codec<T>&, const Tensor<float>&);      \
    template Tensor<T> sample_posterior(const Tensor<T>&, const Tensor<T>&, Rng&);                    \
    template Tensor<T> normalize_latent(const Tensor<T>&, const LatentStats&);                        \
    template Tensor<T> denormalize_latent(const Tensor<T>&, const LatentStats&);                      \
    template LatentStats compute_latent_stats(const std::vector<Tensor<T>>&);                         \
    template Var<T> image_logits(const Codec<T>&, const Var<T>&);                                     \
    template Var<T> mask_logits(const Codec<T>&, const Var<T>&, DecoderStrategy);                     \
    template Tensor<T> decode(const Codec<T>&, const Tensor<T>&, DecoderStrategy);                    \
    template MaskTensor reconstruct_mask(const Codec<T>&, const MaskTensor&, DecoderStrategy);

FLOWSEG_CODEC_INSTANTIATE(float)
FLOWSEG_CODEC_INSTANTIATE(double)

#undef FLOWSEG_CODEC_INSTANTIATE

}  // namespace flowseg::codec
