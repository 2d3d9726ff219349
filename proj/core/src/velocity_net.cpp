#include "flowseg/velocity_net.hpp"

#include <cmath>
#include <sstream>

namespace flowseg::velocity {

using nn::Tensor;
using nn::Var;

void NetConfig::validate() const {
    if (latent_channels < 1) throw ContractError("net config: latent_channels must be >= 1");
    if (width < 16 || width % 16 != 0) throw ContractError("net config: width must be a positive multiple of 16");
    if (heads < 1 || width % heads != 0) throw ContractError("net config: width must be divisible by heads");
    if (blocks < 0 || slots < 1 || vocab < 1 || mlp_ratio < 1 || patch < 1) {
        throw ContractError("net config: blocks >= 0 and slots, vocab, mlp_ratio, patch >= 1 required");
    }
    if (time_features < 2 || time_features % 2 != 0) throw ContractError("net config: time_features must be even");
}

std::string NetConfig::to_text() const {
    std::ostringstream out;
    out << "latent_channels=" << latent_channels << "\ndvi=" << (dvi ? 1 : 0) << "\nwidth=" << width
        << "\nblocks=" << blocks << "\nheads=" << heads << "\nslots=" << slots << "\nvocab=" << vocab
        << "\ntime_features=" << time_features << "\nmlp_ratio=" << mlp_ratio << "\npatch=" << patch << "\n";
    return out.str();
}

NetConfig NetConfig::from_text(const std::string& text) {
    NetConfig c;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const int v = std::stoi(line.substr(eq + 1));
        if (key == "latent_channels") c.latent_channels = v;
        else if (key == "dvi") c.dvi = v != 0;
        else if (key == "width") c.width = v;
        else if (key == "blocks") c.blocks = v;
        else if (key == "heads") c.heads = v;
        else if (key == "slots") c.slots = v;
        else if (key == "vocab") c.vocab = v;
        else if (key == "time_features") c.time_features = v;
        else if (key == "mlp_ratio") c.mlp_ratio = v;
        else if (key == "patch") c.patch = v;
        else throw ContractError("net config: unknown key " + key);
    }
    c.validate();
    return c;
}

template <typename T>
VelocityNet<T> VelocityNet<T>::init(const NetConfig& cfg, uint64_t seed) {
    cfg.validate();
    VelocityNet net;
    net.config = cfg;
    Rng rng(seed);
    auto& p = net.params;
    const int64_t D = cfg.width;
    auto linear = [&](const std::string& name, int64_t in, int64_t out) {
        p.add(name + ".w", nn::truncated_normal_tensor<T>({in, out}, 0.02, rng));
        p.add(name + ".b", Tensor<T>({out}));
    };
    auto zero_linear = [&](const std::string& name, int64_t in, int64_t out) {
        p.add(name + ".w", Tensor<T>({in, out}));
        p.add(name + ".b", Tensor<T>({out}));
    };
    linear("patch", int64_t(cfg.patch) * cfg.patch * cfg.in_channels(), D);
    linear("time.fc1", cfg.time_features, D);
    linear("time.fc2", D, D);
    p.add("cond.table", nn::truncated_normal_tensor<T>({cfg.vocab, D}, 0.02, rng));
    for (int i = 0; i < cfg.blocks; ++i) {
        const std::string b = "blocks." + std::to_string(i) + ".";
        zero_linear(b + "mod", D, 9 * D);
        linear(b + "attn.qkv", D, 3 * D);
        linear(b + "attn.out", D, D);
        linear(b + "cross.q", D, D);
        linear(b + "cross.k", D, D);
        linear(b + "cross.v", D, D);
        linear(b + "cross.out", D, D);
        linear(b + "ffn.fc1", D, int64_t(cfg.mlp_ratio) * D);
        linear(b + "ffn.fc2", int64_t(cfg.mlp_ratio) * D, D);
    }
    zero_linear("final.mod", D, 2 * D);
    linear("out", D, int64_t(cfg.patch) * cfg.patch * cfg.latent_channels);
    return net;
}

template <typename T>
VelocityNet<T> VelocityNet<T>::clone() const {
    return VelocityNet{config, params.clone()};
}

namespace {

void sincos(double pos, int n, double* out) {
    const int half = n / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = std::sin(pos * freq);
        out[half + i] = std::cos(pos * freq);
    }
}

template <typename T>
Var<T> heads_split(const Var<T>& x, int heads) {
    const int64_t N = x.dim(0), L = x.dim(1), D = x.dim(2);
    return nn::permute(nn::reshape(x, {N, L, heads, D / heads}), {0, 2, 1, 3});
}

template <typename T>
Var<T> heads_merge(const Var<T>& x) {
    const int64_t N = x.dim(0), H = x.dim(1), L = x.dim(2), dh = x.dim(3);
    return nn::reshape(nn::permute(x, {0, 2, 1, 3}), {N, L, H * dh});
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
    const double scale = 1.0 / std::sqrt(double(q.dim(2) / heads));
    auto qh = heads_split(q, heads), kh = heads_split(k, heads), vh = heads_split(v, heads);
    auto weights = nn::softmax(nn::scale(nn::matmul(qh, kh, false, true), scale));
    return heads_merge(nn::matmul(weights, vh));
}

/// layer_norm(x) * (1 + scale) + shift, with shift and scale [N, 1, D].
template <typename T>
Var<T> modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scale) {
    return nn::add(nn::mul(nn::layer_norm(x), nn::add_scalar(scale, 1.0)), shift);
}

}  // namespace

template <typename T>
Tensor<T> timestep_features(const std::vector<double>& t, int n) {
    Tensor<T> out({static_cast<int64_t>(t.size()), n});
    std::vector<double> row(static_cast<size_t>(n));
    for (size_t i = 0; i < t.size(); ++i) {
        sincos(1000.0 * t[i], n, row.data());
        for (int j = 0; j < n; ++j) out[static_cast<int64_t>(i) * n + j] = static_cast<T>(row[j]);
    }
    return out;
}

template <typename T>
Tensor<T> position_code(int64_t frames, int64_t gh, int64_t gw, int width) {
    // A quarter of the channels encode the frame, the rest split between rows and columns.
    const int ft = 2 * (width / 8), fs = (width - ft) / 2;
    Tensor<T> out({frames * gh * gw, width});
    std::vector<double> buf(static_cast<size_t>(width));
    int64_t row = 0;
    for (int64_t f = 0; f < frames; ++f) {
        for (int64_t y = 0; y < gh; ++y) {
            for (int64_t x = 0; x < gw; ++x, ++row) {
                sincos(double(f), ft, buf.data());
                sincos(double(y), fs, buf.data() + ft);
                sincos(double(x), fs, buf.data() + ft + fs);
                for (int j = 0; j < width; ++j) out[row * width + j] = static_cast<T>(buf[j]);
            }
        }
    }
    return out;
}

template <typename T>
Var<T> forward(const VelocityNet<T>& net, const Var<T>& z_in, const std::vector<int>& tokens,
               const std::vector<double>& t) {
    const auto& cfg = net.config;
    const auto& p = net.params;
    if (z_in.ndim() != 5) throw ShapeError("velocity net: input must be [N, T, h, w, C], got " + nn::dims_str(z_in.dims()));
    const int64_t N = z_in.dim(0), F = z_in.dim(1), h = z_in.dim(2), w = z_in.dim(3), Cin = z_in.dim(4);
    if (Cin != cfg.in_channels()) {
        throw ShapeError("velocity net: expected " + std::to_string(cfg.in_channels()) + " input channels (dvi " +
                         (cfg.dvi ? "on" : "off") + "), got " + std::to_string(Cin));
    }
    const int64_t P = cfg.patch, gh = h / P, gw = w / P;
    if (h % P != 0 || w % P != 0) throw ShapeError("velocity net: latent extent not divisible by patch size");
    if (static_cast<int64_t>(t.size()) != N) throw ShapeError("velocity net: one timestep per item required");
    for (double ti : t) {
        if (!(ti >= 0.0 && ti <= 1.0)) throw ContractError("velocity net: timestep outside [0, 1]");
    }
    if (static_cast<int64_t>(tokens.size()) != N * cfg.slots) {
        throw ShapeError("velocity net: expected " + std::to_string(N * cfg.slots) + " condition tokens");
    }
    const int64_t D = cfg.width, L = F * gh * gw, C = cfg.latent_channels;

    // [N, F, gh, P, gw, P, Cin] -> tokens [N, L, P*P*Cin]
    auto x = nn::reshape(z_in, {N, F, gh, P, gw, P, Cin});
    x = nn::reshape(nn::permute(x, {0, 1, 2, 4, 3, 5, 6}), {N, L, P * P * Cin});
    x = nn::add(nn::linear_layer(x, p, "patch"), nn::constant(position_code<T>(F, gh, gw, cfg.width)));

    auto cond = nn::layer_norm(nn::embedding(p.get("cond.table"), tokens, {N, cfg.slots}));
    auto temb = nn::constant(timestep_features<T>(t, cfg.time_features));
    temb = nn::linear_layer(nn::gelu(nn::linear_layer(temb, p, "time.fc1")), p, "time.fc2");
    const auto y = nn::gelu(nn::add(temb, nn::mean_axis(cond, 1)));

    for (int i = 0; i < cfg.blocks; ++i) {
        const std::string b = "blocks." + std::to_string(i) + ".";
        const auto mod = nn::reshape(nn::linear_layer(y, p, b + "mod"), {N, 1, 9 * D});
        auto chunk = [&](int j) { return nn::slice(mod, 2, j * D, D); };

        auto hs = modulate(x, chunk(0), chunk(1));
        auto qkv = nn::linear_layer(hs, p, b + "attn.qkv");
        auto sa = attention(nn::slice(qkv, 2, 0, D), nn::slice(qkv, 2, D, D), nn::slice(qkv, 2, 2 * D, D), cfg.heads);
        x = nn::add(x, nn::mul(chunk(2), nn::linear_layer(sa, p, b + "attn.out")));

        auto hc = modulate(x, chunk(3), chunk(4));
        auto ca = attention(nn::linear_layer(hc, p, b + "cross.q"), nn::linear_layer(cond, p, b + "cross.k"),
                            nn::linear_layer(cond, p, b + "cross.v"), cfg.heads);
        x = nn::add(x, nn::mul(chunk(5), nn::linear_layer(ca, p, b + "cross.out")));

        auto hf = modulate(x, chunk(6), chunk(7));
        auto ff = nn::linear_layer(nn::gelu(nn::linear_layer(hf, p, b + "ffn.fc1")), p, b + "ffn.fc2");
        x = nn::add(x, nn::mul(chunk(8), ff));
    }

    const auto fmod = nn::reshape(nn::linear_layer(y, p, "final.mod"), {N, 1, 2 * D});
    auto out = nn::linear_layer(modulate(x, nn::slice(fmod, 2, 0, D), nn::slice(fmod, 2, D, D)), p, "out");
    out = nn::reshape(out, {N, F, gh, gw, P, P, C});
    return nn::reshape(nn::permute(out, {0, 1, 2, 4, 3, 5, 6}), {N, F, h, w, C});
}

template <typename T>
Tensor<T> evaluate(const VelocityNet<T>& net, const Tensor<T>& z_in, const std::vector<int>& tokens,
                   const std::vector<double>& t) {
    return forward(net, nn::constant(z_in), tokens, t).value();
}

void save_net(const VelocityNet<float>& net, io::FrvsFile& file, const std::string& prefix) {
    file.add(io::text_tensor(prefix + "config", net.config.to_text()));
    net.params.save(file, prefix + "p.");
}

VelocityNet<float> load_net(const io::FrvsFile& file, const std::string& prefix) {
    if (!file.contains(prefix + "config")) throw ContractError("checkpoint holds no velocity net");
    VelocityNet<float> net;
    net.config = NetConfig::from_text(io::tensor_text(file.get(prefix + "config")));
    net.params = nn::ParamStore<float>::from_frvs(file, prefix + "p.");
    const auto expected = VelocityNet<float>::init(net.config, 0);
    for (const auto& name : expected.params.names()) {
        if (!net.params.contains(name) || net.params.get(name).dims() != expected.params.get(name).dims()) {
            throw ContractError("velocity net checkpoint: parameter " + name + " missing or misshapen");
        }
    }
    return net;
}

#define FLOWSEG_VELOCITY_INSTANTIATE(T)                                                                      \
    template struct VelocityNet<T>;                                                                          \
    template Tensor<T> timestep_features(const std::vector<double>&, int);                                   \
    template Tensor<T> position_code(int64_t, int64_t, int64_t, int);                                        \
    template Var<T> forward(const VelocityNet<T>&, const Var<T>&, const std::vector<int>&,                   \
                            const std::vector<double>&);                                                     \
    template Tensor<T> evaluate(const VelocityNet<T>&, const Tensor<T>&, const std::vector<int>&,            \
                                const std::vector<double>&);

FLOWSEG_VELOCITY_INSTANTIATE(float)
FLOWSEG_VELOCITY_INSTANTIATE(double)

#undef FLOWSEG_VELOCITY_INSTANTIATE

}  // namespace flowseg::velocity
