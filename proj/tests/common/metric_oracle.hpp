#pragma once

// Naive reference implementations of the segmentation metrics: explicit set
// sizes and all pairwise boundary distances, no dilation.

#include <cmath>
#include <utility>
#include <vector>

#include "flowseg/mask.hpp"
#include "flowseg/rng.hpp"

namespace flowseg::testing {

inline double oracle_jaccard(const MaskTensor& a, const MaskTensor& b) {
    int64_t inter = 0, uni = 0;
    for (int64_t t = 0; t < a.frames(); ++t) {
        for (int64_t y = 0; y < a.height(); ++y) {
            for (int64_t x = 0; x < a.width(); ++x) {
                const bool p = a.at(t, y, x), g = b.at(t, y, x);
                inter += p && g;
                uni += p || g;
            }
        }
    }
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

inline std::vector<std::pair<int64_t, int64_t>> oracle_boundary(const MaskTensor& m, int64_t t) {
    std::vector<std::pair<int64_t, int64_t>> out;
    auto in = [&](int64_t y, int64_t x) {
        return y >= 0 && x >= 0 && y < m.height() && x < m.width() && m.at(t, y, x);
    };
    for (int64_t y = 0; y < m.height(); ++y) {
        for (int64_t x = 0; x < m.width(); ++x) {
            if (in(y, x) && (!in(y - 1, x) || !in(y + 1, x) || !in(y, x - 1) || !in(y, x + 1))) out.emplace_back(y, x);
        }
    }
    return out;
}

inline double oracle_boundary_f(const MaskTensor& a, const MaskTensor& b, int tol) {
    double total = 0.0;
    for (int64_t t = 0; t < a.frames(); ++t) {
        const auto pa = oracle_boundary(a, t), pb = oracle_boundary(b, t);
        if (pa.empty() && pb.empty()) {
            total += 1.0;
            continue;
        }
        if (pa.empty() || pb.empty()) continue;
        auto share_close = [&](const auto& from, const auto& to) {
            int64_t hits = 0;
            for (const auto& [y, x] : from) {
                double best = 1e300;
                for (const auto& [yy, xx] : to) best = std::min(best, std::hypot(double(y - yy), double(x - xx)));
                hits += best <= tol;
            }
            return double(hits) / double(from.size());
        };
        const double p = share_close(pa, pb), r = share_close(pb, pa);
        if (p + r > 0) total += 2 * p * r / (p + r);
    }
    return total / double(a.frames());
}

/// Blob-like random mask: union of a few random rectangles and discs.
inline MaskTensor random_mask(Rng& rng, int64_t frames, int64_t h, int64_t w) {
    MaskTensor m(frames, h, w);
    for (int64_t t = 0; t < frames; ++t) {
        const auto blobs = rng.uniform_int(0, 3);
        for (int64_t b = 0; b < blobs; ++b) {
            const double cx = rng.uniform(0, double(w)), cy = rng.uniform(0, double(h));
            const double r = rng.uniform(1.0, double(w) / 3);
            const bool disc = rng.bernoulli(0.5);
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) {
                    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    const bool hit = disc ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= r;
                    if (hit) m.set(t, y, x, true);
                }
            }
        }
        // Salt noise to produce ragged boundaries.
        for (int64_t k = 0; k < h * w / 16; ++k) {
            m.set(t, rng.uniform_int(0, h - 1), rng.uniform_int(0, w - 1), rng.bernoulli(0.5));
        }
    }
    return m;
}

}  // namespace flowseg::testing
