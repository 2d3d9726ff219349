#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "flowseg/config.hpp"
#include "flowseg/errors.hpp"
#include "flowseg/flow.hpp"

namespace flowseg::cli {

/// Bad arguments or unusable output locations (exit code 2).
class UsageError : public ContractError {
   public:
    using ContractError::ContractError;
};

/// A stage ran before the stage producing its input (exit code 3).
class MissingStageError : public ContractError {
   public:
    MissingStageError(std::string stage, const std::string& what)
        : ContractError(what + " (run " + stage + " first)"), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

   private:
    std::string stage_;
};

/// Prediction and ground-truth sets that do not line up (exit code 5).
class MisalignmentError : public ContractError {
   public:
    using ContractError::ContractError;
};

/// Process exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

/// Generates a split and returns its digest. n < 1 is a usage error.
uint64_t gen_data(const std::filesystem::path& out, int64_t n, uint64_t seed, const std::string& split);

/// Stage outputs. Every stage writes config.txt (the effective configuration)
/// and loss.log ("step loss" per line) into its output directory.
struct StagePaths {
    static constexpr const char* codec = "codec.frvs";
    static constexpr const char* flow = "flow.frvs";          // net, optimizer state, codec and run config
    static constexpr const char* snapshot = "step10.frvs";    // flow checkpoint after step 10
    static constexpr const char* loss_log = "loss.log";
    static constexpr const char* config = "config.txt";
    static constexpr const char* val_eval = "val_eval.tsv";
};

/// Pretrains the codec on the training split.
void train_codec(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
/// Loads cfg.codec_checkpoint and trains cfg.decoder_strategy on the training masks.
void finetune_decoder(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
/// Trains the velocity net, resuming from out/flow.frvs when present, then
/// evaluates on the validation split when it exists.
void train_flow(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);

struct FlowCheckpoint {
    RunConfig config;
    flow::FlowState state;
    codec::Codec<float> codec;
};
FlowCheckpoint load_flow_checkpoint(const std::filesystem::path& path);

/// Segments `video` (an FRVS file holding a "video" tensor [T, H, W, 3])
/// for `query` (text or key=value tuple); writes frame_NNN.pgm and
/// probability.frvs into `out`. Returns the predicted mask.
MaskTensor infer(const std::filesystem::path& checkpoint, const std::filesystem::path& video, const std::string& query,
                 const std::filesystem::path& out);

/// Masks of a directory: every <key>.mask.frvs file and every
/// subdirectory of PGM frames, keyed by stem.
std::vector<std::pair<std::string, MaskTensor>> read_mask_set(const std::filesystem::path& dir);

/// Scores `pred` against `gt` (aligned by key); pairs come from
/// <key>.query.txt files in `gt` when present.
metrics::EvalResult eval(const std::filesystem::path& pred, const std::filesystem::path& gt,
                         const metrics::EvalOptions& options, std::vector<int64_t>* keys = nullptr);

/// Ablation grid file: `seeds = 0 1 2` and one `cell = id paradigm p_bbs spa dvi`
/// line per cell, or `cells = default` for the standard seven rows.
struct AblationGrid {
    std::vector<flow::AblationCell> cells;
    std::vector<uint64_t> seeds;

    static AblationGrid parse(const std::string& text);
    std::string to_text() const;
};

/// Runs the grid with data and codec from `cfg`; writes ablation.tsv and summary.txt.
flow::AblationReport ablate(const RunConfig& cfg, const AblationGrid& grid, const std::filesystem::path& out,
                            std::ostream& log);

}  // namespace flowseg::cli
