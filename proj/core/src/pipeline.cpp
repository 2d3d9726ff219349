#include "flowseg/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "flowseg/frvs.hpp"
#include "flowseg/movingshapes.hpp"
#include "flowseg/pgm.hpp"

namespace flowseg::cli {

namespace fs = std::filesystem;

namespace {

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FileError(dir.string(), "cannot create directory: " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    io::write_bytes(path, std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

/// Writes through a temporary file so an interrupted run never leaves a torn checkpoint.
void write_atomically(const fs::path& path, const io::FrvsFile& file) {
    const fs::path tmp = path.string() + ".tmp";
    file.write(tmp);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw FileError(path.string(), "cannot replace checkpoint: " + ec.message());
}

std::vector<shapes::Sample> load_split(const RunConfig& cfg, const std::string& split, int64_t limit) {
    const fs::path dir = fs::path(cfg.data_dir) / split;
    if (!fs::is_directory(dir)) throw MissingStageError("gen-data", "no dataset split at " + dir.string());
    auto samples = shapes::load_dataset(cfg.data_dir, split);
    if (samples.empty()) throw MissingStageError("gen-data", "dataset split " + dir.string() + " is empty");
    if (limit > 0 && static_cast<int64_t>(samples.size()) > limit) samples.resize(static_cast<size_t>(limit));
    return samples;
}

codec::Codec<float> load_codec_checkpoint(const RunConfig& cfg) {
    const fs::path path = cfg.codec_checkpoint;
    if (!fs::exists(path)) throw MissingStageError("train-codec", "no codec checkpoint at " + path.string());
    return codec::load_codec(io::FrvsFile::read(path));
}

void begin_stage(const RunConfig& cfg, const fs::path& out) {
    ensure_dir(out);
    write_text(out / StagePaths::config, cfg.to_text());
}

class LossLog {
   public:
    LossLog(const fs::path& path, bool append) : path_(path), out_(path, append ? std::ios::app : std::ios::trunc) {
        if (!out_) throw FileError(path.string(), "cannot open loss log");
    }
    void add(int64_t step, double loss) {
        out_ << step << ' ' << std::setprecision(9) << loss << '\n';
        out_.flush();
        if (!out_) throw FileError(path_.string(), "write failed");
    }

   private:
    fs::path path_;
    std::ofstream out_;
};

io::FrvsFile flow_checkpoint(const RunConfig& cfg, const flow::FlowState& state, const codec::Codec<float>& c) {
    io::FrvsFile f;
    f.add(io::text_tensor("run.config", cfg.to_text()));
    flow::save_state(state, f);
    codec::save_codec(c, f, "codec.");
    return f;
}

bool is_number(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char ch) { return std::isdigit(ch); });
}

bool key_less(const std::string& a, const std::string& b) {
    if (is_number(a) && is_number(b)) return std::stoll(a) < std::stoll(b);
    return a < b;
}

}  // namespace

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const MissingStageError*>(&e)) return 3;
    if (dynamic_cast<const shapes::QueryError*>(&e)) return 4;
    if (dynamic_cast<const MisalignmentError*>(&e)) return 5;
    if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const FileError*>(&e)) return 2;
    if (dynamic_cast<const ContractError*>(&e)) return 2;
    return 1;
}

uint64_t gen_data(const fs::path& out, int64_t n, uint64_t seed, const std::string& split) {
    if (n < 1) throw UsageError("gen-data: --n must be at least 1");
    if (split.empty() || split.find('/') != std::string::npos) throw UsageError("gen-data: invalid split name");
    return shapes::generate_dataset(out, n, seed, split);
}

void train_codec(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    const auto samples = load_split(cfg, cfg.train_split, cfg.train_samples);
    begin_stage(cfg, out);
    auto c = codec::Codec<float>::init(cfg.codec_config(), derive_seed(cfg.seed, fnv1a("codec")));
    std::vector<nn::Tensor<float>> videos;
    for (const auto& s : samples) videos.push_back(s.video);
    LossLog losses(out / StagePaths::loss_log, false);
    codec::TrainOptions opts;
    opts.epochs = cfg.codec_epochs;
    opts.batch = cfg.codec_batch;
    opts.lr = cfg.codec_lr;
    opts.weight_decay = cfg.weight_decay;
    opts.seed = derive_seed(cfg.seed, fnv1a("codec-train"));
    opts.on_step = [&](int64_t step, double loss) { losses.add(step, loss); };
    const auto report = codec::pretrain_codec(c, videos, opts);
    for (size_t e = 0; e < report.epoch_loss.size(); ++e) {
        log << "codec epoch " << e + 1 << ": loss " << report.epoch_loss[e] << ", reconstruction "
            << report.epoch_recon_loss[e] << "\n";
    }
    io::FrvsFile f;
    codec::save_codec(c, f, "codec.");
    write_atomically(out / StagePaths::codec, f);
    log << "wrote " << (out / StagePaths::codec).string() << "\n";
}

void finetune_decoder(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    auto c = load_codec_checkpoint(cfg);
    const auto strategy = codec::parse_strategy(cfg.decoder_strategy);
    const auto samples = load_split(cfg, cfg.train_split, cfg.train_samples);
    begin_stage(cfg, out);
    LossLog losses(out / StagePaths::loss_log, false);
    if (strategy == codec::DecoderStrategy::frozen) {
        log << "decoder strategy 'frozen' has nothing to train; copying the codec\n";
    } else {
        std::vector<MaskTensor> masks;
        for (const auto& s : samples) masks.push_back(s.mask);
        codec::TrainOptions opts;
        opts.epochs = cfg.finetune_epochs;
        opts.batch = cfg.codec_batch;
        opts.lr = cfg.finetune_lr;
        opts.weight_decay = cfg.weight_decay;
        opts.seed = derive_seed(cfg.seed, fnv1a("codec-finetune"));
        opts.on_step = [&](int64_t step, double loss) { losses.add(step, loss); };
        const auto report = codec::finetune_decoder(c, masks, strategy, opts);
        for (size_t e = 0; e < report.epoch_loss.size(); ++e) {
            log << "finetune (" << cfg.decoder_strategy << ") epoch " << e + 1 << ": loss " << report.epoch_loss[e]
                << "\n";
        }
    }
    io::FrvsFile f;
    codec::save_codec(c, f, "codec.");
    write_atomically(out / StagePaths::codec, f);
    log << "wrote " << (out / StagePaths::codec).string() << "\n";
}

void train_flow(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    const auto c = load_codec_checkpoint(cfg);
    if (!c.has_strategy(codec::DecoderStrategy::finetuned)) {
        throw MissingStageError("finetune-decoder",
                                "codec checkpoint " + cfg.codec_checkpoint + " has no finetuned mask decoder");
    }
    const auto fcfg = cfg.flow_config();
    const auto train = load_split(cfg, cfg.train_split, cfg.train_samples);
    const fs::path ckpt = out / StagePaths::flow;

    flow::FlowState state;
    bool resumed = false;
    if (fs::exists(ckpt)) {
        const auto file = io::FrvsFile::read(ckpt);
        // Only the epoch budget may change between a run and its resumption.
        auto saved = file.contains("run.config") ? RunConfig::parse(io::tensor_text(file.get("run.config"))) : RunConfig{};
        saved.epochs = cfg.epochs;
        if (!file.contains("run.config") || saved != cfg) {
            throw UsageError("train-flow: " + ckpt.string() +
                             " was written with a different configuration; use a fresh output directory");
        }
        state = flow::load_state(file, fcfg);
        resumed = true;
        log << "resuming from epoch " << state.epoch << " (step " << state.step << ")\n";
    } else {
        state = flow::FlowState::fresh(fcfg, cfg.net_config());
    }
    begin_stage(cfg, out);
    {
        LossLog rewrite(out / StagePaths::loss_log, false);
        for (size_t i = 0; i < state.losses.size(); ++i) rewrite.add(static_cast<int64_t>(i + 1), state.losses[i]);
    }
    LossLog losses(out / StagePaths::loss_log, true);

    const auto encoded = flow::encode_samples(train, c);
    log << "encoded " << encoded.size() << " training samples; " << state.net.params.count()
        << " network parameters\n";
    flow::TrainHooks hooks;
    hooks.on_step = [&](int64_t step, double loss) { losses.add(step, loss); };
    hooks.snapshot_step = 10;
    hooks.on_snapshot = [&](const flow::FlowState& s) {
        write_atomically(out / StagePaths::snapshot, flow_checkpoint(cfg, s, c));
    };
    hooks.on_epoch = [&](const flow::FlowState& s) {
        write_atomically(ckpt, flow_checkpoint(cfg, s, c));
        double sum = 0;
        const size_t per_epoch = (encoded.size() + static_cast<size_t>(fcfg.batch) - 1) / static_cast<size_t>(fcfg.batch);
        const size_t from = s.losses.size() >= per_epoch ? s.losses.size() - per_epoch : 0;
        for (size_t i = from; i < s.losses.size(); ++i) sum += s.losses[i];
        log << "epoch " << s.epoch << ": mean loss " << sum / double(s.losses.size() - from) << "\n";
    };
    flow::train_flow(state, encoded, c.stats, fcfg, hooks);
    if (!resumed || !fs::exists(ckpt)) write_atomically(ckpt, flow_checkpoint(cfg, state, c));

    if (fs::is_directory(fs::path(cfg.data_dir) / cfg.val_split)) {
        const auto val = load_split(cfg, cfg.val_split, cfg.val_samples);
        const auto preds = flow::infer(flow::encode_samples(val, c), state.net, c, fcfg);
        const auto result = flow::evaluate_predictions(preds, val, cfg.eval_options());
        std::vector<int64_t> idx;
        for (const auto& s : val) idx.push_back(s.index);
        write_text(out / StagePaths::val_eval, metrics::result_tsv(result, idx));
        log << metrics::summary_text(result);
    }
}

FlowCheckpoint load_flow_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw MissingStageError("train-flow", "no flow checkpoint at " + path.string());
    const auto file = io::FrvsFile::read(path);
    if (!file.contains("run.config") || !file.contains("net.config")) {
        throw MissingStageError("train-flow", path.string() + " is not a complete flow checkpoint");
    }
    if (!file.contains("codec.config")) {
        throw MissingStageError("train-codec", path.string() + " holds no codec");
    }
    FlowCheckpoint ck;
    ck.config = RunConfig::parse(io::tensor_text(file.get("run.config")));
    ck.state = flow::load_state(file, ck.config.flow_config());
    ck.codec = codec::load_codec(file, "codec.");
    if (!ck.codec.has_strategy(codec::DecoderStrategy::finetuned)) {
        throw MissingStageError("finetune-decoder", path.string() + " holds no finetuned mask decoder");
    }
    return ck;
}

MaskTensor infer(const fs::path& checkpoint, const fs::path& video, const std::string& query, const fs::path& out) {
    const auto attrs = shapes::parse_query(query);
    const auto ck = load_flow_checkpoint(checkpoint);
    const auto vf = io::FrvsFile::read(video);
    if (!vf.contains("video")) throw UsageError("infer: " + video.string() + " holds no 'video' tensor");
    const auto clip = vf.get("video").to_tensor<float>();
    if (clip.ndim() != 4 || clip.dim(3) != 3) {
        throw UsageError("infer: video must be [T, H, W, 3], got " + nn::dims_str(clip.dims()));
    }
    flow::EncodedSample e;
    std::tie(e.video_mean, e.video_logvar) = codec::encode_clip(ck.codec, clip);
    e.z1 = nn::Tensor<float>(e.video_mean.dims());
    e.tokens = shapes::padded_tokens(shapes::make_query(attrs));
    const auto pred = flow::infer({e}, ck.state.net, ck.codec, ck.config.flow_config()).front();
    io::write_pgm_frames(out, pred.mask);
    io::FrvsFile pf;
    pf.add(io::FrvsTensor::from_f32("probability", pred.probability));
    pf.write(out / "probability.frvs");
    return pred.mask;
}

std::vector<std::pair<std::string, MaskTensor>> read_mask_set(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw FileError(dir.string(), "not a directory");
    std::vector<std::pair<std::string, MaskTensor>> out;
    const std::string suffix = ".mask.frvs";
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (entry.is_regular_file() && name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            const auto t = io::FrvsFile::read(entry.path()).get("mask");
            if (t.dims.size() != 3) throw FileError(entry.path().string(), "mask tensor must be [T, H, W]");
            out.emplace_back(name.substr(0, name.size() - suffix.size()),
                             MaskTensor(t.dims[0], t.dims[1], t.dims[2], t.to_u8()));
        } else if (entry.is_directory()) {
            bool has_pgm = false;
            for (const auto& f : fs::directory_iterator(entry.path())) has_pgm |= f.path().extension() == ".pgm";
            if (has_pgm) out.emplace_back(name, io::read_pgm_frames(entry.path()));
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return key_less(a.first, b.first); });
    return out;
}

metrics::EvalResult eval(const fs::path& pred, const fs::path& gt, const metrics::EvalOptions& options,
                         std::vector<int64_t>* keys) {
    const auto p = read_mask_set(pred);
    const auto g = read_mask_set(gt);
    if (p.size() != g.size()) {
        throw MisalignmentError("eval: " + std::to_string(p.size()) + " predictions but " + std::to_string(g.size()) +
                                " ground-truth masks");
    }
    if (g.empty()) throw MisalignmentError("eval: no masks found in " + gt.string());
    std::vector<MaskTensor> pm, gm;
    std::vector<int64_t> partners, ids;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i].first != g[i].first) {
            throw MisalignmentError("eval: prediction '" + p[i].first + "' has no ground truth counterpart");
        }
        if (!p[i].second.same_shape(g[i].second)) {
            throw MisalignmentError("eval: '" + p[i].first + "' has shape " + p[i].second.shape_str() +
                                    " but ground truth " + g[i].second.shape_str());
        }
        pm.push_back(p[i].second);
        gm.push_back(g[i].second);
        ids.push_back(is_number(g[i].first) ? std::stoll(g[i].first) : static_cast<int64_t>(i));
    }
    for (size_t i = 0; i < g.size(); ++i) {
        int64_t partner = -1;
        const fs::path q = gt / (g[i].first + ".query.txt");
        if (fs::exists(q)) {
            const auto bytes = io::read_bytes(q);
            std::istringstream in(std::string(bytes.begin(), bytes.end()));
            for (std::string line; std::getline(in, line);) {
                if (line.rfind("pair=", 0) == 0 && is_number(line.substr(5))) {
                    const auto it = std::find(ids.begin(), ids.end(), std::stoll(line.substr(5)));
                    if (it != ids.end()) partner = it - ids.begin();
                }
            }
        }
        partners.push_back(partner);
    }
    if (keys) *keys = ids;
    return metrics::evaluate_split(pm, gm, partners, options);
}

AblationGrid AblationGrid::parse(const std::string& text) {
    AblationGrid g;
    std::istringstream in(text);
    int line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
        const auto eq = line.find('=');
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = "grid line " + std::to_string(line_no) + ": ";
        if (eq == std::string::npos) throw UsageError(where + "expected 'key = value'");
        std::istringstream key_in(line.substr(0, eq)), rest(line.substr(eq + 1));
        std::string key;
        key_in >> key;
        if (key == "seeds") {
            for (std::string s; rest >> s;) {
                if (!is_number(s)) throw UsageError(where + "seed '" + s + "' is not a non-negative integer");
                g.seeds.push_back(std::stoull(s));
            }
        } else if (key == "cells") {
            std::string v;
            rest >> v;
            if (v != "default") throw UsageError(where + "only 'cells = default' is recognized");
            const auto d = flow::default_grid();
            g.cells.insert(g.cells.end(), d.begin(), d.end());
        } else if (key == "cell") {
            flow::AblationCell c;
            std::string paradigm, spa, dvi;
            double p = 0;
            if (!(rest >> c.id >> paradigm >> p >> spa >> dvi)) {
                throw UsageError(where + "expected 'cell = id paradigm p_bbs spa dvi'");
            }
            auto flag = [&](const std::string& v) {
                if (v == "on") return true;
                if (v == "off") return false;
                throw UsageError(where + "spa and dvi must be on or off");
            };
            try {
                c.paradigm = flow::parse_paradigm(paradigm);
            } catch (const ContractError& e) {
                throw UsageError(where + e.what());
            }
            if (!(p >= 0.0 && p <= 1.0)) throw UsageError(where + "p_bbs must lie in [0, 1]");
            c.p_bbs = p;
            c.spa = flag(spa);
            c.dvi = flag(dvi);
            g.cells.push_back(c);
        } else {
            throw UsageError(where + "unknown key '" + key + "'");
        }
    }
    if (g.cells.empty()) throw UsageError("grid: no cells");
    if (g.seeds.empty()) throw UsageError("grid: no seeds");
    return g;
}

std::string AblationGrid::to_text() const {
    std::ostringstream out;
    out << "seeds =";
    for (auto s : seeds) out << ' ' << s;
    out << "\n";
    for (const auto& c : cells) {
        out << "cell = " << c.id << ' ' << flow::to_string(c.paradigm) << ' ' << c.p_bbs << ' '
            << (c.spa ? "on" : "off") << ' ' << (c.dvi ? "on" : "off") << "\n";
    }
    return out.str();
}

flow::AblationReport ablate(const RunConfig& cfg, const AblationGrid& grid, const fs::path& out, std::ostream& log) {
    const auto c = load_codec_checkpoint(cfg);
    if (!c.has_strategy(codec::DecoderStrategy::finetuned)) {
        throw MissingStageError("finetune-decoder", "codec checkpoint has no finetuned mask decoder");
    }
    const auto train = load_split(cfg, cfg.train_split, cfg.train_samples);
    const auto val = load_split(cfg, cfg.val_split, cfg.val_samples);
    begin_stage(cfg, out);
    write_text(out / "grid.txt", grid.to_text());
    const auto etrain = flow::encode_samples(train, c);
    const auto eval_set = flow::encode_samples(val, c);
    flow::AblationData data{&etrain, &eval_set, &val, &c, cfg.net_config()};
    flow::AblationReport partial;
    const auto report = flow::run_ablation(grid.cells, grid.seeds, data, cfg.flow_config(), [&](const flow::AblationRow& r) {
        partial.rows.push_back(r);
        write_text(out / "ablation.tsv", partial.tsv());
        log << r.cell.id << " seed " << r.seed << ": J&F " << std::fixed << std::setprecision(4) << r.jf << "\n";
        log.unsetf(std::ios::fixed);
    });
    write_text(out / "ablation.tsv", report.tsv());
    write_text(out / "summary.txt", report.summary());
    log << report.summary();
    return report;
}

}  // namespace flowseg::cli
