#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowseg/frvs.hpp"
#include "flowseg/params.hpp"

namespace flowseg::velocity {

/// Transformer over 1x2x2 latent patch tokens conditioned on a query and a
/// timestep.
struct NetConfig {
    int latent_channels = 8;  // C; the output always has C channels
    bool dvi = true;          // input carries the video latent as C extra channels
    int width = 128;          // D
    int blocks = 4;
    int heads = 4;
    int slots = 8;            // condition tokens per query
    int vocab = 32;
    int time_features = 64;
    int mlp_ratio = 4;
    int patch = 2;            // spatial patch edge; one frame per token

    int in_channels() const { return dvi ? 2 * latent_channels : latent_channels; }
    int head_dim() const { return width / heads; }
    /// Throws ContractError for inconsistent settings.
    void validate() const;
    /// `key = value` lines, one per field.
    std::string to_text() const;
    static NetConfig from_text(const std::string& text);
    bool operator==(const NetConfig&) const = default;
};

/// Parameter names:
///   patch.{w,b}                  token projection [p*p*Cin, D]
///   time.fc1, time.fc2           timestep MLP (sinusoid -> D -> D)
///   cond.table                   query token embeddings [vocab, D]
///   blocks.i.mod                 adaLN projection D -> 9D (zero at init)
///   blocks.i.attn.{qkv,out}      self-attention
///   blocks.i.cross.{q,k,v,out}   cross-attention to the condition slots
///   blocks.i.ffn.{fc1,fc2}       feed-forward
///   final.mod, out               last adaLN (zero at init) and token -> patch projection
template <typename T>
struct VelocityNet {
    NetConfig config;
    nn::ParamStore<T> params;

    static VelocityNet init(const NetConfig& cfg, uint64_t seed);
    VelocityNet clone() const;
};

/// Sinusoidal timestep features [N, n]: sin then cos at geometric frequencies of 1000 t.
template <typename T>
nn::Tensor<T> timestep_features(const std::vector<double>& t, int n);

/// Fixed 3-axis sinusoidal position code for a T x gh x gw token grid, [T*gh*gw, D].
template <typename T>
nn::Tensor<T> position_code(int64_t frames, int64_t gh, int64_t gw, int width);

/// Velocity for z_in [N, T, h, w, Cin] under query tokens (N * slots ids,
/// row-major) at per-item times t. Returns [N, T, h, w, C].
template <typename T>
nn::Var<T> forward(const VelocityNet<T>& net, const nn::Var<T>& z_in, const std::vector<int>& tokens,
                   const std::vector<double>& t);

/// Plain-tensor convenience wrapper around forward.
template <typename T>
nn::Tensor<T> evaluate(const VelocityNet<T>& net, const nn::Tensor<T>& z_in, const std::vector<int>& tokens,
                       const std::vector<double>& t);

void save_net(const VelocityNet<float>& net, io::FrvsFile& file, const std::string& prefix = "net.");
VelocityNet<float> load_net(const io::FrvsFile& file, const std::string& prefix = "net.");

}  // namespace flowseg::velocity
