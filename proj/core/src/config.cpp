#include "flowseg/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>
#include <variant>

#include "flowseg/frvs.hpp"

namespace flowseg::cli {

namespace {

using Field = std::variant<std::string*, int*, int64_t*, uint64_t*, double*, bool*>;

std::map<std::string, Field> fields(RunConfig& c) {
    return {
        {"data_dir", &c.data_dir},
        {"train_split", &c.train_split},
        {"val_split", &c.val_split},
        {"train_samples", &c.train_samples},
        {"val_samples", &c.val_samples},
        {"seed", &c.seed},
        {"latent_channels", &c.latent_channels},
        {"codec_width", &c.codec_width},
        {"kl_weight", &c.kl_weight},
        {"codec_epochs", &c.codec_epochs},
        {"codec_lr", &c.codec_lr},
        {"codec_batch", &c.codec_batch},
        {"decoder_strategy", &c.decoder_strategy},
        {"finetune_epochs", &c.finetune_epochs},
        {"finetune_lr", &c.finetune_lr},
        {"codec_checkpoint", &c.codec_checkpoint},
        {"paradigm", &c.paradigm},
        {"p_bbs", &c.p_bbs},
        {"spa", &c.spa},
        {"dvi", &c.dvi},
        {"ode_steps", &c.ode_steps},
        {"batch", &c.batch},
        {"epochs", &c.epochs},
        {"lr", &c.lr},
        {"weight_decay", &c.weight_decay},
        {"beta1", &c.beta1},
        {"beta2", &c.beta2},
        {"net_width", &c.net_width},
        {"net_blocks", &c.net_blocks},
        {"net_heads", &c.net_heads},
        {"time_features", &c.time_features},
        {"mlp_ratio", &c.mlp_ratio},
        {"j_aggregation", &c.j_aggregation},
    };
}

// Output order of to_text, with section comments.
const std::vector<std::pair<std::string, std::vector<std::string>>>& layout() {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> l = {
        {"data", {"data_dir", "train_split", "val_split", "train_samples", "val_samples", "seed"}},
        {"codec",
         {"latent_channels", "codec_width", "kl_weight", "codec_epochs", "codec_lr", "codec_batch", "decoder_strategy",
          "finetune_epochs", "finetune_lr", "codec_checkpoint"}},
        {"flow",
         {"paradigm", "p_bbs", "spa", "dvi", "ode_steps", "batch", "epochs", "lr", "weight_decay", "beta1", "beta2"}},
        {"velocity network", {"net_width", "net_blocks", "net_heads", "time_features", "mlp_ratio"}},
        {"evaluation", {"j_aggregation"}},
    };
    return l;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename N>
bool parse_number(const std::string& v, N& out) {
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    return ec == std::errc() && p == end;
}

void assign(Field field, const std::string& v) {
    std::visit(
        [&](auto* target) {
            using T = std::remove_pointer_t<decltype(target)>;
            if constexpr (std::is_same_v<T, std::string>) {
                *target = v;
            } else if constexpr (std::is_same_v<T, bool>) {
                if (v == "on" || v == "true" || v == "1") *target = true;
                else if (v == "off" || v == "false" || v == "0") *target = false;
                else throw ContractError("expected on/off, got '" + v + "'");
            } else {
                if (!parse_number(v, *target)) throw ContractError("not a valid number: '" + v + "'");
            }
        },
        field);
}

std::string render(Field field) {
    return std::visit(
        [](auto* target) -> std::string {
            using T = std::remove_pointer_t<decltype(target)>;
            if constexpr (std::is_same_v<T, std::string>) {
                return *target;
            } else if constexpr (std::is_same_v<T, bool>) {
                return *target ? "on" : "off";
            } else {
                char buf[64];
                auto [p, ec] = std::to_chars(buf, buf + sizeof buf, *target);
                return std::string(buf, p);
            }
        },
        field);
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig c;
    auto map = fields(c);
    std::istringstream in(text);
    int line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const auto where = "config line " + std::to_string(line_no) + ": ";
        if (eq == std::string::npos) throw ContractError(where + "expected 'key = value'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto it = map.find(key);
        if (it == map.end()) throw ContractError(where + "unknown key '" + key + "'");
        try {
            assign(it->second, value);
        } catch (const ContractError& e) {
            throw ContractError(where + key + ": " + e.what());
        }
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    const auto bytes = io::read_bytes(path);
    try {
        return parse(std::string(bytes.begin(), bytes.end()));
    } catch (const ContractError& e) {
        throw ContractError(path + ": " + e.what());
    }
}

std::string RunConfig::to_text() const {
    RunConfig copy = *this;
    auto map = fields(copy);
    std::ostringstream out;
    bool first = true;
    for (const auto& [section, keys] : layout()) {
        out << (first ? "" : "\n") << "# " << section << "\n";
        first = false;
        for (const auto& k : keys) out << k << " = " << render(map.at(k)) << "\n";
    }
    return out.str();
}

void RunConfig::validate() const {
    flow_config().validate();
    net_config().validate();
    codec::parse_strategy(decoder_strategy);
    if (train_samples < 0 || val_samples < 0) throw ContractError("config: sample counts must be >= 0");
    if (latent_channels < 1 || codec_width < 2 || codec_width % 2 != 0) {
        throw ContractError("config: latent_channels >= 1 and an even codec_width required");
    }
    if (codec_epochs < 0 || finetune_epochs < 0 || codec_batch < 1) {
        throw ContractError("config: codec epochs >= 0 and codec_batch >= 1 required");
    }
    if (!(codec_lr > 0) || !(finetune_lr > 0) || !(kl_weight >= 0)) {
        throw ContractError("config: codec learning rates must be positive and kl_weight non-negative");
    }
    if (!(weight_decay >= 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
        throw ContractError("config: weight_decay >= 0 and betas in [0, 1) required");
    }
    eval_options();
}

flow::FlowConfig RunConfig::flow_config() const {
    flow::FlowConfig f;
    f.paradigm = flow::parse_paradigm(paradigm);
    f.p_bbs = p_bbs;
    f.spa = spa;
    f.dvi = dvi;
    f.ode_steps = ode_steps;
    f.batch = batch;
    f.epochs = epochs;
    f.seed = seed;
    f.optim.lr = lr;
    f.optim.weight_decay = weight_decay;
    f.optim.beta1 = beta1;
    f.optim.beta2 = beta2;
    return f;
}

velocity::NetConfig RunConfig::net_config() const {
    velocity::NetConfig n;
    n.latent_channels = latent_channels;
    n.dvi = dvi;
    n.width = net_width;
    n.blocks = net_blocks;
    n.heads = net_heads;
    n.time_features = time_features;
    n.mlp_ratio = mlp_ratio;
    return n;
}

codec::CodecConfig RunConfig::codec_config() const {
    codec::CodecConfig c;
    c.latent_channels = latent_channels;
    c.width = codec_width;
    c.kl_weight = kl_weight;
    return c;
}

metrics::EvalOptions RunConfig::eval_options() const {
    metrics::EvalOptions o;
    if (j_aggregation == "per-clip") o.j_aggregation = metrics::JAggregation::per_clip;
    else if (j_aggregation == "per-frame") o.j_aggregation = metrics::JAggregation::per_frame;
    else throw ContractError("config: j_aggregation must be per-clip or per-frame");
    return o;
}

}  // namespace flowseg::cli
