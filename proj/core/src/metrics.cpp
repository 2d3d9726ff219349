#include "flowseg/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace flowseg::metrics {

namespace {

void check_aligned(const MaskTensor& a, const MaskTensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": dims " + a.shape_str() + " vs " + b.shape_str());
    }
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

double jaccard(const MaskTensor& pred, const MaskTensor& gt, JAggregation agg) {
    check_aligned(pred, gt, "jaccard");
    const auto& p = pred.bits();
    const auto& g = gt.bits();
    const int64_t fs = pred.frame_size();
    if (agg == JAggregation::per_clip) {
        int64_t inter = 0, uni = 0;
        for (size_t i = 0; i < p.size(); ++i) {
            inter += p[i] & g[i];
            uni += p[i] | g[i];
        }
        return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    double total = 0.0;
    for (int64_t t = 0; t < pred.frames(); ++t) {
        int64_t inter = 0, uni = 0;
        for (int64_t i = t * fs; i < (t + 1) * fs; ++i) {
            inter += p[i] & g[i];
            uni += p[i] | g[i];
        }
        total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    return total / static_cast<double>(pred.frames());
}

int default_boundary_tolerance(int64_t height, int64_t width) {
    const double diag = std::hypot(static_cast<double>(height), static_cast<double>(width));
    return std::max(1, static_cast<int>(std::lround(0.008 * diag)));
}

MaskTensor boundary_pixels(const MaskTensor& m) {
    MaskTensor out(m.frames(), m.height(), m.width());
    const int64_t h = m.height(), w = m.width();
    for (int64_t t = 0; t < m.frames(); ++t) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                if (!m.at(t, y, x)) continue;
                const bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1 || !m.at(t, y - 1, x) ||
                                  !m.at(t, y + 1, x) || !m.at(t, y, x - 1) || !m.at(t, y, x + 1);
                if (edge) out.set(t, y, x, true);
            }
        }
    }
    return out;
}

double boundary_f(const MaskTensor& pred, const MaskTensor& gt, std::optional<int> tolerance) {
    check_aligned(pred, gt, "boundary_f");
    const int tol = tolerance.value_or(default_boundary_tolerance(pred.height(), pred.width()));
    if (tol < 0) throw ContractError("boundary_f: negative tolerance");
    const MaskTensor pb = boundary_pixels(pred);
    const MaskTensor gb = boundary_pixels(gt);
    const int64_t h = pred.height(), w = pred.width();

    std::vector<std::pair<int, int>> disk;
    for (int dy = -tol; dy <= tol; ++dy) {
        for (int dx = -tol; dx <= tol; ++dx) {
            if (dx * dx + dy * dy <= tol * tol) disk.emplace_back(dy, dx);
        }
    }
    // Count pixels of `from` whose disk touches a pixel of `to` in frame t.
    auto matched = [&](const MaskTensor& from, const MaskTensor& to, int64_t t) {
        int64_t hits = 0;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                if (!from.at(t, y, x)) continue;
                for (const auto& [dy, dx] : disk) {
                    const int64_t yy = y + dy, xx = x + dx;
                    if (yy >= 0 && xx >= 0 && yy < h && xx < w && to.at(t, yy, xx)) {
                        ++hits;
                        break;
                    }
                }
            }
        }
        return hits;
    };

    double total = 0.0;
    for (int64_t t = 0; t < pred.frames(); ++t) {
        int64_t np = 0, ng = 0;
        for (int64_t i = t * pred.frame_size(); i < (t + 1) * pred.frame_size(); ++i) {
            np += pb.bits()[i];
            ng += gb.bits()[i];
        }
        if (np == 0 && ng == 0) {
            total += 1.0;
            continue;
        }
        if (np == 0 || ng == 0) continue;
        const double precision = static_cast<double>(matched(pb, gb, t)) / static_cast<double>(np);
        const double recall = static_cast<double>(matched(gb, pb, t)) / static_cast<double>(ng);
        if (precision + recall > 0) total += 2 * precision * recall / (precision + recall);
    }
    return total / static_cast<double>(pred.frames());
}

SampleScore score(const MaskTensor& pred, const MaskTensor& gt, const EvalOptions& opts) {
    SampleScore s;
    s.j = jaccard(pred, gt, opts.j_aggregation);
    s.f = boundary_f(pred, gt, opts.tolerance);
    s.jf = (s.j + s.f) / 2.0;
    return s;
}

EvalResult evaluate_split(const std::vector<MaskTensor>& predictions, const std::vector<MaskTensor>& ground_truths,
                          const std::vector<int64_t>& partners, const EvalOptions& opts) {
    if (predictions.size() != ground_truths.size()) {
        throw ContractError("evaluate_split: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(ground_truths.size()) + " ground truths");
    }
    if (!partners.empty() && partners.size() != predictions.size()) {
        throw ContractError("evaluate_split: partner list does not match sample count");
    }
    if (predictions.empty()) throw ContractError("evaluate_split: no samples");
    EvalResult r;
    for (size_t i = 0; i < predictions.size(); ++i) {
        r.samples.push_back(score(predictions[i], ground_truths[i], opts));
        r.mean_j += r.samples.back().j;
        r.mean_f += r.samples.back().f;
    }
    const double n = static_cast<double>(predictions.size());
    r.mean_j /= n;
    r.mean_f /= n;
    r.mean_jf = (r.mean_j + r.mean_f) / 2.0;

    int64_t wins = 0;
    for (size_t i = 0; i < partners.size(); ++i) {
        const int64_t o = partners[i];
        if (o < 0) continue;
        if (o >= static_cast<int64_t>(predictions.size())) throw ContractError("evaluate_split: partner out of range");
        ++r.paired_queries;
        const double own = jaccard(predictions[i], ground_truths[i]);
        const double other = jaccard(predictions[i], ground_truths[static_cast<size_t>(o)]);
        wins += own > other;
    }
    if (r.paired_queries > 0) r.disambiguation_rate = static_cast<double>(wins) / static_cast<double>(r.paired_queries);
    return r;
}

std::string result_tsv(const EvalResult& r, const std::vector<int64_t>& indices) {
    if (indices.size() != r.samples.size()) throw ContractError("result_tsv: index list does not match samples");
    std::string out = "index\tJ\tF\tJF\n";
    for (size_t i = 0; i < r.samples.size(); ++i) {
        const auto& s = r.samples[i];
        out += std::to_string(indices[i]) + "\t" + fmt(s.j) + "\t" + fmt(s.f) + "\t" + fmt(s.jf) + "\n";
    }
    return out;
}

std::string summary_text(const EvalResult& r) {
    std::string out;
    out += "samples  " + std::to_string(r.samples.size()) + "\n";
    out += "J        " + fmt(r.mean_j) + "\n";
    out += "F        " + fmt(r.mean_f) + "\n";
    out += "J&F      " + fmt(r.mean_jf) + "\n";
    if (r.disambiguation_rate) {
        out += "paired   " + std::to_string(r.paired_queries) + "\n";
        out += "disamb.  " + fmt(*r.disambiguation_rate) + "\n";
    }
    return out;
}

}  // namespace flowseg::metrics
