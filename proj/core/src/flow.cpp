#include "flowseg/flow.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "flowseg/parallel.hpp"

namespace flowseg::flow {

using nn::Tensor;
using nn::Var;

namespace {

constexpr uint64_t kShuffleStream = 0x5f1e;
constexpr uint64_t kNetSeedStream = 0x9e7;
constexpr uint64_t kInferStream = 0x1f;

void require_same_dims(const char* op, const nn::Dims& a, const nn::Dims& b) {
    if (a != b) throw ShapeError(std::string(op) + ": dims " + nn::dims_str(a) + " and " + nn::dims_str(b) + " differ");
}

template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& items) {
    nn::Dims dims = items.front()->dims();
    const int64_t each = items.front()->numel();
    dims.insert(dims.begin(), static_cast<int64_t>(items.size()));
    Tensor<T> out(dims);
    for (size_t i = 0; i < items.size(); ++i) {
        require_same_dims("stack", items[i]->dims(), items.front()->dims());
        std::copy(items[i]->data(), items[i]->data() + each, out.data() + static_cast<int64_t>(i) * each);
    }
    return out;
}

template <typename T>
Tensor<T> unstack(const Tensor<T>& batch, int64_t i) {
    nn::Dims dims(batch.dims().begin() + 1, batch.dims().end());
    Tensor<T> out(dims);
    const int64_t each = out.numel();
    std::copy(batch.data() + i * each, batch.data() + (i + 1) * each, out.data());
    return out;
}

void require_finite_state(const Tensor<float>& z, int step) {
    if (!z.all_finite()) throw NumericError("ode solver: state not finite after step " + std::to_string(step));
}

void require_finite_state(const Tensor<double>& z, int step) {
    if (!z.all_finite()) throw NumericError("ode solver: state not finite after step " + std::to_string(step));
}

}  // namespace

std::string_view to_string(Paradigm p) {
    switch (p) {
        case Paradigm::video2mask_flow: return "video2mask-flow";
        case Paradigm::noise2mask_flow: return "noise2mask-flow";
        case Paradigm::onestep_mask: return "onestep-mask";
        case Paradigm::onestep_velocity: return "onestep-velocity";
    }
    return "?";
}

Paradigm parse_paradigm(std::string_view name) {
    for (auto p : {Paradigm::video2mask_flow, Paradigm::noise2mask_flow, Paradigm::onestep_mask,
                   Paradigm::onestep_velocity}) {
        if (name == to_string(p)) return p;
    }
    throw ContractError("unknown paradigm '" + std::string(name) +
                        "' (expected video2mask-flow, noise2mask-flow, onestep-mask or onestep-velocity)");
}

void FlowConfig::validate() const {
    if (!(p_bbs >= 0.0 && p_bbs <= 1.0)) throw ContractError("flow config: p_bbs must lie in [0, 1]");
    if (ode_steps < 1) throw ContractError("flow config: ode_steps must be >= 1");
    if (batch < 1) throw ContractError("flow config: batch must be >= 1");
    if (epochs < 0) throw ContractError("flow config: epochs must be >= 0");
    if (!(optim.lr > 0.0)) throw ContractError("flow config: learning rate must be positive");
}

double sample_timestep(double p_bbs, Rng& rng) {
    if (!(p_bbs >= 0.0 && p_bbs <= 1.0)) throw ContractError("sample_timestep: p_bbs must lie in [0, 1]");
    if (rng.bernoulli(p_bbs)) return 0.0;
    return rng.uniform();
}

template <typename T>
Tensor<T> interpolate_state(const Tensor<T>& z0, const Tensor<T>& z1, double t) {
    require_same_dims("interpolate_state", z0.dims(), z1.dims());
    Tensor<T> out(z0.dims());
    const T a = static_cast<T>(1.0 - t), b = static_cast<T>(t);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * z1[i];
    return out;
}

template <typename T>
Tensor<T> target_velocity(const Tensor<T>& z0, const Tensor<T>& z1) {
    require_same_dims("target_velocity", z0.dims(), z1.dims());
    Tensor<T> out(z0.dims());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = z1[i] - z0[i];
    return out;
}

std::vector<EncodedSample> encode_samples(const std::vector<shapes::Sample>& samples,
                                          const codec::Codec<float>& codec) {
    codec.stats.validate(codec.config.latent_channels);
    std::vector<EncodedSample> out(samples.size());
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t i) {
        const auto& s = samples[static_cast<size_t>(i)];
        auto& e = out[static_cast<size_t>(i)];
        e.index = static_cast<int>(s.index);
        std::tie(e.video_mean, e.video_logvar) = codec::encode_clip(codec, s.video);
        e.z1 = codec::normalize_latent(codec::encode_clip(codec, codec::lift_mask(s.mask)).first, codec.stats);
        e.tokens = shapes::padded_tokens(s.query);
    });
    return out;
}

FlowBatch make_batch(const std::vector<EncodedSample>& data, const std::vector<size_t>& indices,
                     const codec::LatentStats& stats, const FlowConfig& config, uint64_t stream) {
    if (indices.empty()) throw ContractError("make_batch: no items");
    stats.validate(static_cast<int>(data.at(indices.front()).z1.dim(-1)));
    std::vector<Tensor<float>> z0s, starts;
    std::vector<const Tensor<float>*> z1s;
    FlowBatch b;
    for (size_t idx : indices) {
        const auto& e = data.at(idx);
        Rng rng(derive_seed(config.seed, stream, static_cast<uint64_t>(e.index)));
        auto z0 = codec::normalize_latent(config.spa ? codec::sample_posterior(e.video_mean, e.video_logvar, rng)
                                                     : e.video_mean,
                                          stats);
        Tensor<float> start = z0;
        if (config.paradigm == Paradigm::noise2mask_flow) {
            for (auto& v : start.values()) v = static_cast<float>(rng.normal());
        }
        b.t.push_back(config.onestep() ? 0.0 : sample_timestep(config.p_bbs, rng));
        z0s.push_back(std::move(z0));
        starts.push_back(std::move(start));
        z1s.push_back(&e.z1);
        b.tokens.insert(b.tokens.end(), e.tokens.begin(), e.tokens.end());
    }
    auto ptrs = [](const std::vector<Tensor<float>>& v) {
        std::vector<const Tensor<float>*> p;
        for (const auto& t : v) p.push_back(&t);
        return p;
    };
    b.z0 = stack(ptrs(z0s));
    b.start = stack(ptrs(starts));
    b.z1 = stack(z1s);
    return b;
}

template <typename T>
Tensor<T> network_input(const Tensor<T>& state, const Tensor<T>& video, bool dvi) {
    if (!dvi) return state;
    require_same_dims("network_input", state.dims(), video.dims());
    const int64_t C = state.dim(-1), rows = state.numel() / C;
    nn::Dims dims = state.dims();
    dims.back() = 2 * C;
    Tensor<T> out(dims);
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(state.data() + r * C, state.data() + (r + 1) * C, out.data() + r * 2 * C);
        std::copy(video.data() + r * C, video.data() + (r + 1) * C, out.data() + r * 2 * C + C);
    }
    return out;
}

Var<float> flow_loss(const FlowBatch& batch, const FlowConfig& config, const VarField<float>& field) {
    const int64_t N = batch.size();
    switch (config.paradigm) {
        case Paradigm::video2mask_flow:
        case Paradigm::noise2mask_flow: {
            Tensor<float> zt(batch.start.dims());
            const int64_t each = zt.numel() / N;
            for (int64_t i = 0; i < N; ++i) {
                const float t = static_cast<float>(batch.t[static_cast<size_t>(i)]);
                for (int64_t k = i * each; k < (i + 1) * each; ++k) {
                    zt[k] = (1.0f - t) * batch.start[k] + t * batch.z1[k];
                }
            }
            const auto v = field(nn::constant(network_input(zt, batch.z0, config.dvi)), batch.t);
            return nn::mse_loss(v, target_velocity(batch.start, batch.z1));
        }
        case Paradigm::onestep_velocity: {
            const auto v = field(nn::constant(network_input(batch.z0, batch.z0, config.dvi)),
                                 std::vector<double>(static_cast<size_t>(N), 0.0));
            return nn::mse_loss(v, target_velocity(batch.z0, batch.z1));
        }
        case Paradigm::onestep_mask: {
            const auto v = field(nn::constant(network_input(batch.z0, batch.z0, config.dvi)),
                                 std::vector<double>(static_cast<size_t>(N), 0.0));
            return nn::mse_loss(v, batch.z1);
        }
    }
    throw ContractError("flow_loss: unknown paradigm");
}

template <typename T>
Tensor<T> euler_integrate(const Tensor<T>& start, const Tensor<T>& video, const TensorField<T>& field, int steps,
                          bool dvi) {
    if (steps < 1) throw ContractError("euler_integrate: at least one step required");
    const size_t N = start.ndim() > 0 ? static_cast<size_t>(start.dim(0)) : 1;
    Tensor<T> z = start;
    const double h = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const auto v = field(network_input(z, video, dvi), std::vector<double>(N, k * h));
        require_same_dims("euler_integrate", v.dims(), z.dims());
        for (int64_t i = 0; i < z.numel(); ++i) z[i] += static_cast<T>(h * v[i]);
        require_finite_state(z, k);
    }
    return z;
}

template <typename T>
Tensor<T> solve(const Tensor<T>& start, const Tensor<T>& video, const TensorField<T>& field,
                const FlowConfig& config) {
    if (!config.onestep()) return euler_integrate(start, video, field, config.ode_steps, config.dvi);
    const size_t N = static_cast<size_t>(start.dim(0));
    const auto out = field(network_input(start, video, config.dvi), std::vector<double>(N, 0.0));
    require_same_dims("solve", out.dims(), start.dims());
    Tensor<T> z = config.paradigm == Paradigm::onestep_mask ? out : start;
    if (config.paradigm == Paradigm::onestep_velocity) {
        for (int64_t i = 0; i < z.numel(); ++i) z[i] += out[i];
    }
    require_finite_state(z, 0);
    return z;
}

VarField<float> net_field(const velocity::VelocityNet<float>& net, const std::vector<int>& tokens) {
    return [&net, tokens](const Var<float>& z_in, const std::vector<double>& t) {
        return velocity::forward(net, z_in, tokens, t);
    };
}

TensorField<float> net_tensor_field(const velocity::VelocityNet<float>& net, const std::vector<int>& tokens) {
    return [&net, tokens](const Tensor<float>& z_in, const std::vector<double>& t) {
        return velocity::evaluate(net, z_in, tokens, t);
    };
}

velocity::NetConfig net_config_for(const FlowConfig& config, int latent_channels) {
    velocity::NetConfig n;
    n.latent_channels = latent_channels;
    n.dvi = config.dvi;
    return n;
}

FlowState FlowState::fresh(const FlowConfig& config, const velocity::NetConfig& net_config) {
    config.validate();
    FlowState s;
    s.net = velocity::VelocityNet<float>::init(net_config, derive_seed(config.seed, kNetSeedStream));
    s.optim = nn::OptimState<float>(s.net.params.vars(), config.optim);
    return s;
}

void save_state(const FlowState& state, io::FrvsFile& file) {
    velocity::save_net(state.net, file, "net.");
    const auto& names = state.net.params.names();
    for (size_t i = 0; i < names.size() && i < state.optim.first_moment.size(); ++i) {
        file.add(io::FrvsTensor::from_f32("optim.m." + names[i], state.optim.first_moment[i]));
        file.add(io::FrvsTensor::from_f32("optim.v." + names[i], state.optim.second_moment[i]));
    }
    const double counters[] = {double(state.optim.step), double(state.step), double(state.epoch)};
    file.add(io::FrvsTensor::from_f64("train.counters", Tensor<double>({3}, std::vector<double>(counters, counters + 3))));
    file.add(io::FrvsTensor::from_f64(
        "train.losses", Tensor<double>({static_cast<int64_t>(state.losses.size())}, state.losses)));
}

FlowState load_state(const io::FrvsFile& file, const FlowConfig& config) {
    FlowState s;
    s.net = velocity::load_net(file, "net.");
    if (s.net.config.dvi != config.dvi) {
        throw ContractError("flow checkpoint: network was trained with dvi " + std::string(s.net.config.dvi ? "on" : "off"));
    }
    s.optim = nn::OptimState<float>(s.net.params.vars(), config.optim);
    if (file.contains("train.counters")) {
        const auto& names = s.net.params.names();
        for (size_t i = 0; i < names.size(); ++i) {
            s.optim.first_moment[i] = file.get("optim.m." + names[i]).to_tensor<float>();
            s.optim.second_moment[i] = file.get("optim.v." + names[i]).to_tensor<float>();
        }
        const auto c = file.get("train.counters").to_tensor<double>();
        s.optim.step = static_cast<int64_t>(c[0]);
        s.step = static_cast<int64_t>(c[1]);
        s.epoch = static_cast<int>(c[2]);
        const auto l = file.get("train.losses").to_tensor<double>();
        s.losses.assign(l.values().begin(), l.values().end());
    }
    return s;
}

double train_step(const FlowBatch& batch, FlowState& state, const FlowConfig& config) {
    auto params = state.net.params.vars();
    auto diagnose = [&](const std::string& what) {
        std::ostringstream msg;
        msg << "flow training: " << what << " at step " << state.step << " (lr " << config.optim.lr
            << "); recent losses:";
        const size_t from = state.losses.size() > 10 ? state.losses.size() - 10 : 0;
        for (size_t i = from; i < state.losses.size(); ++i) msg << ' ' << state.losses[i];
        return NumericError(msg.str());
    };
    double loss_value = 0;
    try {
        nn::Tape<float> tape;
        auto loss = flow_loss(batch, config, net_field(state.net, batch.tokens));
        loss_value = loss.value().item();
        if (!std::isfinite(loss_value)) throw diagnose("non-finite loss");
        tape.backward(loss);
    } catch (const NumericError& e) {
        if (std::string_view(e.what()).rfind("flow training:", 0) == 0) throw;
        throw diagnose(e.what());
    }
    state.optim.config = config.optim;
    nn::adamw_step(params, state.optim);
    state.losses.push_back(loss_value);
    ++state.step;
    return loss_value;
}

void train_flow(FlowState& state, const std::vector<EncodedSample>& data, const codec::LatentStats& stats,
                const FlowConfig& config, const TrainHooks& hooks) {
    config.validate();
    if (data.empty()) throw ContractError("train_flow: empty training corpus");
    const size_t B = static_cast<size_t>(config.batch);
    for (; state.epoch < config.epochs;) {
        std::vector<size_t> order(data.size());
        std::iota(order.begin(), order.end(), size_t{0});
        Rng shuffle(derive_seed(config.seed, kShuffleStream, static_cast<uint64_t>(state.epoch)));
        for (size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle.uniform_int(0, static_cast<int64_t>(i) - 1))]);
        }
        for (size_t from = 0; from < order.size(); from += B) {
            const std::vector<size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(from),
                                          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), from + B)));
            const auto batch = make_batch(data, idx, stats, config, static_cast<uint64_t>(state.step));
            const double loss = train_step(batch, state, config);
            if (hooks.on_step) hooks.on_step(state.step, loss);
            if (hooks.on_snapshot && state.step == hooks.snapshot_step) hooks.on_snapshot(state);
        }
        ++state.epoch;
        if (hooks.on_epoch) hooks.on_epoch(state);
    }
}

std::vector<Prediction> infer_with(const std::vector<EncodedSample>& data,
                                   const std::function<TensorField<float>(const std::vector<size_t>& items)>& field_for,
                                   const codec::Codec<float>& codec, const FlowConfig& config) {
    config.validate();
    codec.stats.validate(codec.config.latent_channels);
    if (!codec.has_strategy(codec::DecoderStrategy::finetuned)) {
        throw ContractError("infer: codec has no finetuned decoder");
    }
    std::vector<Prediction> out(data.size());
    const int64_t B = config.batch;
    const int64_t batches = (static_cast<int64_t>(data.size()) + B - 1) / B;
    parallel_for(batches, [&](int64_t bi) {
        std::vector<size_t> idx;
        for (int64_t i = bi * B; i < std::min<int64_t>((bi + 1) * B, static_cast<int64_t>(data.size())); ++i) {
            idx.push_back(static_cast<size_t>(i));
        }
        std::vector<Tensor<float>> z0s, starts;
        for (size_t i : idx) {
            auto z0 = codec::normalize_latent(data[i].video_mean, codec.stats);
            Tensor<float> start = z0;
            if (config.paradigm == Paradigm::noise2mask_flow) {
                Rng rng(derive_seed(config.seed, kInferStream, static_cast<uint64_t>(data[i].index)));
                for (auto& v : start.values()) v = static_cast<float>(rng.normal());
            }
            z0s.push_back(std::move(z0));
            starts.push_back(std::move(start));
        }
        std::vector<const Tensor<float>*> pz, ps;
        for (size_t k = 0; k < idx.size(); ++k) {
            pz.push_back(&z0s[k]);
            ps.push_back(&starts[k]);
        }
        const auto z1 = solve(stack(ps), stack(pz), field_for(idx), config);
        for (size_t k = 0; k < idx.size(); ++k) {
            const auto latent = codec::denormalize_latent(unstack(z1, static_cast<int64_t>(k)), codec.stats);
            auto& p = out[idx[k]];
            p.probability = codec::decode(codec, latent, codec::DecoderStrategy::finetuned);
            p.mask = codec::binarize(p.probability);
        }
    });
    return out;
}

std::vector<Prediction> infer(const std::vector<EncodedSample>& data, const velocity::VelocityNet<float>& net,
                              const codec::Codec<float>& codec, const FlowConfig& config) {
    if (net.config.dvi != config.dvi) throw ContractError("infer: network and flow config disagree on dvi");
    return infer_with(
        data,
        [&](const std::vector<size_t>& idx) {
            std::vector<int> tokens;
            for (size_t i : idx) tokens.insert(tokens.end(), data[i].tokens.begin(), data[i].tokens.end());
            return net_tensor_field(net, tokens);
        },
        codec, config);
}

metrics::EvalResult evaluate_predictions(const std::vector<Prediction>& preds,
                                         const std::vector<shapes::Sample>& samples,
                                         const metrics::EvalOptions& options) {
    if (preds.size() != samples.size()) throw ContractError("evaluate_predictions: prediction count mismatch");
    std::unordered_map<int64_t, int64_t> position;
    for (size_t i = 0; i < samples.size(); ++i) position[samples[i].index] = static_cast<int64_t>(i);
    std::vector<MaskTensor> p, g;
    std::vector<int64_t> partners;
    for (size_t i = 0; i < samples.size(); ++i) {
        p.push_back(preds[i].mask);
        g.push_back(samples[i].mask);
        const auto it = position.find(samples[i].pair);
        partners.push_back(samples[i].pair >= 0 && it != position.end() ? it->second : -1);
    }
    return metrics::evaluate_split(p, g, partners, options);
}

std::vector<AblationCell> default_grid() {
    return {
        {"a", Paradigm::noise2mask_flow, 0.0, false, true},
        {"b", Paradigm::onestep_mask, 0.0, false, false},
        {"c", Paradigm::onestep_velocity, 0.0, false, false},
        {"c-base", Paradigm::video2mask_flow, 0.0, false, false},
        {"e", Paradigm::video2mask_flow, 0.5, false, false},
        {"g", Paradigm::video2mask_flow, 0.5, true, false},
        {"h", Paradigm::video2mask_flow, 0.5, true, true},
    };
}

std::string AblationReport::tsv() const {
    std::ostringstream out;
    out.precision(6);
    out << std::fixed;
    out << "paradigm\tp_bbs\tspa\tdvi\tseed\tJ\tF\tJF\n";
    for (const auto& r : rows) {
        out << to_string(r.cell.paradigm) << '\t' << std::setprecision(2) << r.cell.p_bbs << '\t'
            << (r.cell.spa ? "on" : "off") << '\t' << (r.cell.dvi ? "on" : "off") << '\t' << r.seed << '\t'
            << std::setprecision(6) << r.j << '\t' << r.f << '\t' << r.jf << '\n';
    }
    return out.str();
}

double AblationReport::mean_jf(std::string_view cell_id) const {
    double sum = 0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.cell.id == cell_id) {
            sum += r.jf;
            ++n;
        }
    }
    if (n == 0) throw ContractError("ablation report: no rows for cell " + std::string(cell_id));
    return sum / n;
}

std::string AblationReport::summary() const {
    std::ostringstream out;
    out << std::fixed;
    std::vector<std::string> order;
    std::map<std::string, std::vector<const AblationRow*>> by_cell;
    for (const auto& r : rows) {
        if (!by_cell.count(r.cell.id)) order.push_back(r.cell.id);
        by_cell[r.cell.id].push_back(&r);
    }
    for (const auto& id : order) {
        const auto& cell = by_cell[id].front()->cell;
        out << std::setw(7) << std::left << id << ' ' << std::setw(17) << to_string(cell.paradigm) << " p="
            << std::setprecision(2) << cell.p_bbs << " spa=" << (cell.spa ? "on " : "off") << " dvi="
            << (cell.dvi ? "on " : "off") << "  J&F " << std::setprecision(1) << 100.0 * mean_jf(id) << "  (";
        for (size_t i = 0; i < by_cell[id].size(); ++i) {
            out << (i ? ", " : "") << std::setprecision(1) << 100.0 * by_cell[id][i]->jf;
        }
        out << ")\n";
    }
    return out.str();
}

AblationReport run_ablation(const std::vector<AblationCell>& grid, const std::vector<uint64_t>& seeds,
                            const AblationData& data, const FlowConfig& base,
                            const std::function<void(const AblationRow&)>& on_row) {
    if (!data.train || !data.val || !data.val_samples || !data.codec) {
        throw ContractError("run_ablation: training data, validation data and codec are required");
    }
    AblationReport report;
    for (const auto& cell : grid) {
        for (uint64_t seed : seeds) {
            FlowConfig cfg = base;
            cfg.paradigm = cell.paradigm;
            cfg.p_bbs = cell.p_bbs;
            cfg.spa = cell.spa;
            cfg.dvi = cell.dvi;
            cfg.seed = seed;
            velocity::NetConfig net = data.net;
            net.dvi = cell.dvi;
            net.latent_channels = data.codec->config.latent_channels;
            auto state = FlowState::fresh(cfg, net);
            train_flow(state, *data.train, data.codec->stats, cfg);
            const auto preds = infer(*data.val, state.net, *data.codec, cfg);
            const auto result = evaluate_predictions(preds, *data.val_samples);
            AblationRow row{cell, seed, result.mean_j, result.mean_f, result.mean_jf};
            report.rows.push_back(row);
            if (on_row) on_row(row);
        }
    }
    return report;
}

#define FLOWSEG_FLOW_INSTANTIATE(T)                                                                          \
    template Tensor<T> interpolate_state(const Tensor<T>&, const Tensor<T>&, double);                        \
    template Tensor<T> target_velocity(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> network_input(const Tensor<T>&, const Tensor<T>&, bool);                              \
    template Tensor<T> euler_integrate(const Tensor<T>&, const Tensor<T>&, const TensorField<T>&, int, bool); \
    template Tensor<T> solve(const Tensor<T>&, const Tensor<T>&, const TensorField<T>&, const FlowConfig&);

FLOWSEG_FLOW_INSTANTIATE(float)
FLOWSEG_FLOW_INSTANTIATE(double)

#undef FLOWSEG_FLOW_INSTANTIATE

}  // namespace flowseg::flow
