#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowseg/metrics.hpp"
#include "metric_oracle.hpp"

using namespace flowseg;
using namespace flowseg::metrics;
using flowseg::testing::oracle_boundary_f;
using flowseg::testing::oracle_jaccard;
using flowseg::testing::random_mask;

namespace {

MaskTensor rect(int64_t h, int64_t w, int64_t y0, int64_t x0, int64_t rh, int64_t rw, int64_t frames = 1) {
    MaskTensor m(frames, h, w);
    for (int64_t t = 0; t < frames; ++t) {
        for (int64_t y = y0; y < y0 + rh; ++y) {
            for (int64_t x = x0; x < x0 + rw; ++x) m.set(t, y, x, true);
        }
    }
    return m;
}

MaskTensor shifted(const MaskTensor& m, int64_t dy, int64_t dx) {
    MaskTensor out(m.frames(), m.height(), m.width());
    for (int64_t t = 0; t < m.frames(); ++t) {
        for (int64_t y = 0; y < m.height(); ++y) {
            for (int64_t x = 0; x < m.width(); ++x) {
                const int64_t yy = y + dy, xx = x + dx;
                if (m.at(t, y, x) && yy >= 0 && xx >= 0 && yy < m.height() && xx < m.width()) out.set(t, yy, xx, true);
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("jaccard examples") {
    const auto a = rect(8, 8, 2, 2, 3, 3);
    CHECK(jaccard(a, a) == 1.0);
    CHECK(jaccard(a, rect(8, 8, 5, 5, 2, 2)) == 0.0);
    CHECK(jaccard(MaskTensor(1, 4, 4), MaskTensor(1, 4, 4)) == 1.0);
    const auto left = rect(4, 4, 0, 0, 4, 2), top = rect(4, 4, 0, 0, 2, 4);
    CHECK(jaccard(left, top) == doctest::Approx(4.0 / 12.0).epsilon(1e-15));
    CHECK_THROWS_AS(jaccard(MaskTensor(1, 4, 4), MaskTensor(1, 4, 5)), ShapeError);
}

TEST_CASE("per-clip and per-frame aggregation differ as documented") {
    MaskTensor pred(2, 4, 4), gt(2, 4, 4);
    // Frame 0: perfect single pixel. Frame 1: 1 of 8 pixels.
    pred.set(0, 0, 0, true);
    gt.set(0, 0, 0, true);
    for (int x = 0; x < 4; ++x) {
        gt.set(1, 0, x, true);
        gt.set(1, 1, x, true);
    }
    pred.set(1, 0, 0, true);
    CHECK(jaccard(pred, gt, JAggregation::per_clip) == doctest::Approx(2.0 / 9.0));
    CHECK(jaccard(pred, gt, JAggregation::per_frame) == doctest::Approx((1.0 + 1.0 / 8.0) / 2.0));
}

TEST_CASE("boundary F examples") {
    const auto sq = rect(16, 16, 5, 5, 6, 6);
    CHECK(boundary_f(sq, sq) == 1.0);
    CHECK(boundary_f(MaskTensor(1, 16, 16), sq) == 0.0);
    CHECK(boundary_f(sq, MaskTensor(1, 16, 16)) == 0.0);
    CHECK(boundary_f(MaskTensor(1, 16, 16), MaskTensor(1, 16, 16)) == 1.0);
    CHECK(boundary_f(shifted(sq, 0, 1), sq, 1) == 1.0);
    CHECK(oracle_boundary_f(shifted(sq, 0, 1), sq, 1) == 1.0);
    CHECK(boundary_f(shifted(sq, 0, 3), sq, 1) < 1.0);
    CHECK_THROWS_AS(boundary_f(sq, MaskTensor(2, 16, 16)), ShapeError);
}

TEST_CASE("default tolerance follows the diagonal rule") {
    CHECK(default_boundary_tolerance(32, 32) == 1);
    CHECK(default_boundary_tolerance(16, 16) == 1);
    CHECK(default_boundary_tolerance(480, 854) == 8);
    CHECK(default_boundary_tolerance(1080, 1920) == 18);
}

TEST_CASE("boundary pixels include the image border") {
    const auto full = rect(4, 4, 0, 0, 4, 4);
    const auto b = boundary_pixels(full);
    CHECK(b.count() == 12);
    CHECK_FALSE(b.at(0, 1, 1));
}

TEST_CASE("J and F match the brute-force oracle exactly on 100 random pairs") {
    Rng rng(2024);
    for (int i = 0; i < 100; ++i) {
        const auto a = random_mask(rng, 4, 16, 16);
        const auto b = random_mask(rng, 4, 16, 16);
        const int tol = default_boundary_tolerance(16, 16);
        REQUIRE(jaccard(a, b) == oracle_jaccard(a, b));
        REQUIRE(boundary_f(a, b) == oracle_boundary_f(a, b, tol));
        REQUIRE(boundary_f(a, b, 2) == oracle_boundary_f(a, b, 2));
    }
}

TEST_CASE("metric properties on random masks") {
    Rng rng(99);
    for (int i = 0; i < 100; ++i) {
        const auto a = random_mask(rng, 3, 16, 16);
        const auto b = random_mask(rng, 3, 16, 16);
        // Symmetry.
        REQUIRE(jaccard(a, b) == jaccard(b, a));
        REQUIRE(boundary_f(a, b) == boundary_f(b, a));
        // Scores are in [0, 1] and J&F is the mean.
        const auto s = score(a, b);
        REQUIRE(s.j >= 0.0);
        REQUIRE(s.j <= 1.0);
        REQUIRE(s.f >= 0.0);
        REQUIRE(s.f <= 1.0);
        REQUIRE(s.jf == (s.j + s.f) / 2.0);
        // Removing a true positive never increases J.
        MaskTensor p = a;
        for (int64_t k = 0; k < p.numel(); ++k) {
            const int64_t t = k / 256, y = (k / 16) % 16, x = k % 16;
            if (p.at(t, y, x) && b.at(t, y, x)) {
                const double before = jaccard(p, b);
                p.set(t, y, x, false);
                REQUIRE(jaccard(p, b) <= before);
                break;
            }
        }
    }
}

TEST_CASE("scores are invariant under a joint translation away from the edges") {
    Rng rng(7);
    for (int i = 0; i < 50; ++i) {
        MaskTensor a(2, 24, 24), b(2, 24, 24);
        const auto sa = random_mask(rng, 2, 12, 12), sb = random_mask(rng, 2, 12, 12);
        for (int64_t t = 0; t < 2; ++t) {
            for (int64_t y = 0; y < 12; ++y) {
                for (int64_t x = 0; x < 12; ++x) {
                    a.set(t, y + 4, x + 4, sa.at(t, y, x));
                    b.set(t, y + 4, x + 4, sb.at(t, y, x));
                }
            }
        }
        const auto dy = rng.uniform_int(-3, 3), dx = rng.uniform_int(-3, 3);
        REQUIRE(jaccard(shifted(a, dy, dx), shifted(b, dy, dx)) == jaccard(a, b));
        REQUIRE(boundary_f(shifted(a, dy, dx), shifted(b, dy, dx)) == boundary_f(a, b));
    }
}

TEST_CASE("evaluate_split aggregates and measures disambiguation") {
    Rng rng(3);
    std::vector<MaskTensor> gts;
    for (int i = 0; i < 4; ++i) gts.push_back(rect(16, 16, 2 + 2 * i, 3, 4, 4 + i, 2));
    auto r = evaluate_split(gts, gts);
    CHECK(r.mean_j == 1.0);
    CHECK(r.mean_f == 1.0);
    CHECK(r.mean_jf == 1.0);
    CHECK_FALSE(r.disambiguation_rate.has_value());

    std::vector<MaskTensor> empty(4, MaskTensor(2, 16, 16));
    r = evaluate_split(empty, gts);
    CHECK(r.mean_j == 0.0);
    CHECK(r.mean_f == 0.0);

    // Pair (0,1): sample 0 predicted right, sample 1 predicted as 0's mask.
    std::vector<MaskTensor> preds = {gts[0], gts[0], gts[2], gts[3]};
    r = evaluate_split(preds, gts, {1, 0, -1, -1});
    CHECK(r.paired_queries == 2);
    REQUIRE(r.disambiguation_rate.has_value());
    CHECK(*r.disambiguation_rate == 0.5);
    for (const auto& s : r.samples) CHECK(s.jf == (s.j + s.f) / 2.0);

    CHECK_THROWS_AS(evaluate_split(preds, {gts[0]}), ContractError);
    const auto tsv = result_tsv(r, {0, 1, 2, 3});
    CHECK(tsv.rfind("index\tJ\tF\tJF\n", 0) == 0);
}
