// flowseg command-line entry point. Every subcommand is a thin wrapper over
// the pipeline functions; errors map onto exit codes via exit_code_for.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "flowseg/frvs.hpp"
#include "flowseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace flowseg;

namespace {

cli::RunConfig load_config(const std::string& path, const std::optional<uint64_t>& seed) {
    auto cfg = path.empty() ? cli::RunConfig{} : cli::RunConfig::load(path);
    if (seed) cfg.seed = *seed;
    return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
    io::write_bytes(path, std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Referring segmentation of MovingShapes clips with a video-to-mask flow."};
    app.require_subcommand(1);

    std::string out, config_path, split = "train";
    int64_t n = 0;
    uint64_t seed = 0;
    std::optional<uint64_t> seed_override;

    auto* gen = app.add_subcommand("gen-data", "Render a MovingShapes-Ref split and print its digest");
    gen->add_option("--out", out, "Dataset root")->required();
    gen->add_option("--n", n, "Number of samples")->required();
    gen->add_option("--seed", seed, "Generator seed");
    gen->add_option("--split", split, "Split name (train, val, ...)");

    auto stage = [&](const char* name, const char* help) {
        auto* s = app.add_subcommand(name, help);
        s->add_option("--config", config_path, "Run configuration (key = value lines)")->required();
        s->add_option("--out", out, "Output directory")->required();
        s->add_option("--seed", seed_override, "Override the config seed");
        return s;
    };
    auto* train_codec = stage("train-codec", "Pretrain the video/mask codec");
    auto* finetune = stage("finetune-decoder", "Train the mask decoder of the pretrained codec");
    auto* train_flow = stage("train-flow", "Train the velocity network (resumes from OUT/flow.frvs)");

    std::string checkpoint, video, query;
    auto* infer = app.add_subcommand("infer", "Segment one clip for a referring query");
    infer->add_option("--checkpoint", checkpoint, "flow.frvs from train-flow")->required();
    infer->add_option("--video", video, "FRVS file holding a 'video' tensor [T, H, W, 3]")->required();
    infer->add_option("--query", query, "Query text or key=value tuple")->required();
    infer->add_option("--out", out, "Output directory for frame_NNN.pgm and probability.frvs")->required();

    std::string pred, gt, j_aggregation = "per-clip", tsv_out;
    auto* eval = app.add_subcommand("eval", "Score predicted masks against ground truth");
    eval->add_option("--pred", pred, "Prediction directory")->required();
    eval->add_option("--gt", gt, "Ground-truth directory (a dataset split)")->required();
    eval->add_option("--j-aggregation", j_aggregation, "per-clip or per-frame")
        ->check(CLI::IsMember({"per-clip", "per-frame"}));
    eval->add_option("--out", tsv_out, "Write the per-sample TSV here instead of stdout");

    std::string grid_path;
    auto* ablate = app.add_subcommand("ablate", "Train and evaluate every cell of an ablation grid");
    ablate->add_option("--grid", grid_path, "Grid file (seeds = ..., cell = ... lines)")->required();
    ablate->add_option("--config", config_path, "Base run configuration");
    ablate->add_option("--out", out, "Report directory")->required();
    ablate->add_option("--seed", seed_override, "Override the config seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            const auto digest = cli::gen_data(out, n, seed, split);
            std::cout << std::hex << std::setw(16) << std::setfill('0') << digest << "\n";
        } else if (train_codec->parsed()) {
            cli::train_codec(load_config(config_path, seed_override), out, std::cout);
        } else if (finetune->parsed()) {
            cli::finetune_decoder(load_config(config_path, seed_override), out, std::cout);
        } else if (train_flow->parsed()) {
            cli::train_flow(load_config(config_path, seed_override), out, std::cout);
        } else if (infer->parsed()) {
            const auto mask = cli::infer(checkpoint, video, query, out);
            std::cout << "wrote " << mask.frames() << " frames to " << out << "\n";
        } else if (eval->parsed()) {
            metrics::EvalOptions opts;
            opts.j_aggregation =
                j_aggregation == "per-frame" ? metrics::JAggregation::per_frame : metrics::JAggregation::per_clip;
            std::vector<int64_t> keys;
            const auto result = cli::eval(pred, gt, opts, &keys);
            const auto tsv = metrics::result_tsv(result, keys);
            if (tsv_out.empty()) {
                std::cout << tsv;
            } else {
                write_file(tsv_out, tsv);
            }
            std::cout << metrics::summary_text(result);
        } else if (ablate->parsed()) {
            const auto bytes = io::read_bytes(grid_path);
            const auto grid = cli::AblationGrid::parse(std::string(bytes.begin(), bytes.end()));
            cli::ablate(load_config(config_path, seed_override), grid, out, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::exit_code_for(e);
    }
    return 0;
}
