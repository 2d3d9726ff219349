#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "flowseg/codec.hpp"
#include "flowseg/metrics.hpp"
#include "flowseg/movingshapes.hpp"
#include "flowseg/optim.hpp"
#include "flowseg/velocity_net.hpp"

namespace flowseg::flow {

enum class Paradigm { video2mask_flow, noise2mask_flow, onestep_mask, onestep_velocity };

/// "video2mask-flow", "noise2mask-flow", "onestep-mask", "onestep-velocity".
std::string_view to_string(Paradigm p);
Paradigm parse_paradigm(std::string_view name);

struct FlowConfig {
    Paradigm paradigm = Paradigm::video2mask_flow;
    double p_bbs = 0.5;
    bool spa = true;
    bool dvi = true;
    int ode_steps = 10;
    int batch = 8;
    int epochs = 10;
    uint64_t seed = 0;
    nn::AdamWConfig optim;

    bool onestep() const { return paradigm == Paradigm::onestep_mask || paradigm == Paradigm::onestep_velocity; }
    void validate() const;
};

/// 0 with probability p_bbs, otherwise uniform on [0, 1].
double sample_timestep(double p_bbs, Rng& rng);

/// (1 - t) z0 + t z1.
template <typename T>
nn::Tensor<T> interpolate_state(const nn::Tensor<T>& z0, const nn::Tensor<T>& z1, double t);
/// z1 - z0.
template <typename T>
nn::Tensor<T> target_velocity(const nn::Tensor<T>& z0, const nn::Tensor<T>& z1);

/// Codec outputs cached per sample; the video posterior stays raw so SPA can
/// resample it, the mask target is normalized.
struct EncodedSample {
    int index = 0;
    nn::Tensor<float> video_mean;    // [T, h, w, C]
    nn::Tensor<float> video_logvar;  // [T, h, w, C]
    nn::Tensor<float> z1;            // normalized mask posterior mean
    std::vector<int> tokens;         // padded query tokens
};

/// Encodes videos and masks of `samples` with `codec` (parallel over samples).
std::vector<EncodedSample> encode_samples(const std::vector<shapes::Sample>& samples, const codec::Codec<float>& codec);

struct FlowBatch {
    nn::Tensor<float> start;  // [N, T, h, w, C] flow start (z0, or noise for noise2mask)
    nn::Tensor<float> z0;     // [N, T, h, w, C] video latent, post-SPA when enabled
    nn::Tensor<float> z1;     // [N, T, h, w, C]
    std::vector<int> tokens;  // N * slots
    std::vector<double> t;    // per item

    int64_t size() const { return start.empty() ? 0 : start.dim(0); }
};

/// Assembles items `indices` of `data`. Every random draw for an item comes
/// from derive_seed(config.seed, stream, sample index), so batches do not
/// depend on assembly order or thread count.
FlowBatch make_batch(const std::vector<EncodedSample>& data, const std::vector<size_t>& indices,
                     const codec::LatentStats& stats, const FlowConfig& config, uint64_t stream);

/// Network input: state with the video latent appended along channels when DVI is on.
template <typename T>
nn::Tensor<T> network_input(const nn::Tensor<T>& state, const nn::Tensor<T>& video, bool dvi);

/// v(z_in, t) for a batch; tokens are bound by the caller.
template <typename T>
using VarField = std::function<nn::Var<T>(const nn::Var<T>& z_in, const std::vector<double>& t)>;
template <typename T>
using TensorField = std::function<nn::Tensor<T>(const nn::Tensor<T>& z_in, const std::vector<double>& t)>;

/// Paradigm loss for `batch` under `field` (mean squared error).
nn::Var<float> flow_loss(const FlowBatch& batch, const FlowConfig& config, const VarField<float>& field);

/// Forward Euler: z <- z + v(in(z), k/N) / N for k = 0..N-1. `video` is the
/// DVI channel (ignored when dvi is false). Throws NumericError naming the
/// step when the state stops being finite.
template <typename T>
nn::Tensor<T> euler_integrate(const nn::Tensor<T>& start, const nn::Tensor<T>& video, const TensorField<T>& field,
                              int steps, bool dvi);

/// Paradigm-aware solve: Euler for the flows, one call at t = 0 for the
/// one-step paradigms (added to the start, or read as the state).
template <typename T>
nn::Tensor<T> solve(const nn::Tensor<T>& start, const nn::Tensor<T>& video, const TensorField<T>& field,
                    const FlowConfig& config);

/// Binds `net` and `tokens` into fields.
VarField<float> net_field(const velocity::VelocityNet<float>& net, const std::vector<int>& tokens);
TensorField<float> net_tensor_field(const velocity::VelocityNet<float>& net, const std::vector<int>& tokens);

velocity::NetConfig net_config_for(const FlowConfig& config, int latent_channels);

/// Everything needed to resume training.
struct FlowState {
    velocity::VelocityNet<float> net;
    nn::OptimState<float> optim;
    int64_t step = 0;
    int epoch = 0;                // completed epochs
    std::vector<double> losses;   // one per step

    static FlowState fresh(const FlowConfig& config, const velocity::NetConfig& net_config);
};

void save_state(const FlowState& state, io::FrvsFile& file);
FlowState load_state(const io::FrvsFile& file, const FlowConfig& config);

/// One AdamW step on `batch`; returns the loss. Non-finite losses raise
/// NumericError with the step, learning rate and recent loss history.
double train_step(const FlowBatch& batch, FlowState& state, const FlowConfig& config);

struct TrainHooks {
    std::function<void(int64_t step, double loss)> on_step;
    std::function<void(const FlowState&)> on_epoch;
    int64_t snapshot_step = 10;
    std::function<void(const FlowState&)> on_snapshot;  // after step snapshot_step
};

/// Trains from state.epoch to config.epochs. Batches are drawn from a
/// per-epoch permutation seeded by (config.seed, epoch).
void train_flow(FlowState& state, const std::vector<EncodedSample>& data, const codec::LatentStats& stats,
                const FlowConfig& config, const TrainHooks& hooks = {});

struct Prediction {
    MaskTensor mask;
    nn::Tensor<float> probability;  // [T, H, W]
};

/// Encode (posterior mean, no SPA) -> solve -> denormalize -> decode with the
/// finetuned decoder -> threshold at 0.5. Items are solved in batches of
/// config.batch; noise2mask noise is seeded by (config.seed, sample index).
std::vector<Prediction> infer(const std::vector<EncodedSample>& data, const velocity::VelocityNet<float>& net,
                              const codec::Codec<float>& codec, const FlowConfig& config);

/// Same pipeline with an arbitrary field (used for the wired oracle).
std::vector<Prediction> infer_with(const std::vector<EncodedSample>& data,
                                   const std::function<TensorField<float>(const std::vector<size_t>& items)>& field_for,
                                   const codec::Codec<float>& codec, const FlowConfig& config);

/// Scores predictions against ground-truth masks, including the paired-query
/// disambiguation rate.
metrics::EvalResult evaluate_predictions(const std::vector<Prediction>& preds,
                                         const std::vector<shapes::Sample>& samples,
                                         const metrics::EvalOptions& options = {});

struct AblationCell {
    std::string id;
    Paradigm paradigm = Paradigm::video2mask_flow;
    double p_bbs = 0.5;
    bool spa = true;
    bool dvi = true;
};

/// Rows a, b, c, c-base, e, g, h of the ablation table.
std::vector<AblationCell> default_grid();

struct AblationRow {
    AblationCell cell;
    uint64_t seed = 0;
    double j = 0, f = 0, jf = 0;
};

struct AblationReport {
    std::vector<AblationRow> rows;

    /// Columns paradigm, p_bbs, spa, dvi, seed, J, F, JF.
    std::string tsv() const;
    /// Mean J&F per cell with per-seed values.
    std::string summary() const;
    double mean_jf(std::string_view cell_id) const;
};

struct AblationData {
    const std::vector<EncodedSample>* train = nullptr;
    const std::vector<EncodedSample>* val = nullptr;
    const std::vector<shapes::Sample>* val_samples = nullptr;
    const codec::Codec<float>* codec = nullptr;
    velocity::NetConfig net;  // dvi and latent_channels are set per cell
};

/// Trains and evaluates every cell for every seed; `base` supplies epochs,
/// batch size, steps and optimizer settings.
AblationReport run_ablation(const std::vector<AblationCell>& grid, const std::vector<uint64_t>& seeds,
                            const AblationData& data, const FlowConfig& base,
                            const std::function<void(const AblationRow&)>& on_row = {});

}  // namespace flowseg::flow
