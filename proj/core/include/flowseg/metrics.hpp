#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowseg/mask.hpp"

namespace flowseg::metrics {

enum class JAggregation {
    per_clip,   // sum of intersections over sum of unions across frames
    per_frame,  // mean of per-frame IoU
};

/// Region similarity. Empty-vs-empty scores 1.
double jaccard(const MaskTensor& pred, const MaskTensor& gt, JAggregation agg = JAggregation::per_clip);

/// max(1, round(0.008 * diagonal)) pixels.
int default_boundary_tolerance(int64_t height, int64_t width);

/// Mask pixels with a 4-neighbour outside the mask; pixels outside the
/// image count as outside.
MaskTensor boundary_pixels(const MaskTensor& m);

/// Boundary F-measure averaged over frames. Per frame: both boundaries empty
/// scores 1, P + R = 0 scores 0.
double boundary_f(const MaskTensor& pred, const MaskTensor& gt, std::optional<int> tolerance = std::nullopt);

struct EvalOptions {
    JAggregation j_aggregation = JAggregation::per_clip;
    std::optional<int> tolerance;
};

struct SampleScore {
    double j = 0.0;
    double f = 0.0;
    double jf = 0.0;
};

SampleScore score(const MaskTensor& pred, const MaskTensor& gt, const EvalOptions& opts = {});

struct EvalResult {
    std::vector<SampleScore> samples;
    double mean_j = 0.0;
    double mean_f = 0.0;
    double mean_jf = 0.0;
    int64_t paired_queries = 0;
    /// Share of paired queries whose prediction overlaps its own ground truth
    /// more than the partner's; absent when there are no pairs.
    std::optional<double> disambiguation_rate;
};

/// `partners[i]` is the index of the sample sharing i's video, or -1. Pass an
/// empty vector when no pairing is known.
EvalResult evaluate_split(const std::vector<MaskTensor>& predictions, const std::vector<MaskTensor>& ground_truths,
                          const std::vector<int64_t>& partners = {}, const EvalOptions& opts = {});

/// Header "index\tJ\tF\tJF" followed by one row per sample.
std::string result_tsv(const EvalResult& r, const std::vector<int64_t>& indices);
std::string summary_text(const EvalResult& r);

}  // namespace flowseg::metrics
