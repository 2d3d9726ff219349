#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "flowseg/movingshapes.hpp"
#include "flowseg/rng.hpp"

using namespace flowseg;
using namespace flowseg::shapes;

namespace {

// Independent bounce model: unfold the free path onto a triangle wave.
double folded(double start, double v, int k, double lo, double hi) {
    const double span = hi - lo;
    if (span <= 0) return lo;
    double u = std::fmod(start - lo + k * v, 2 * span);
    if (u < 0) u += 2 * span;
    return lo + (u <= span ? u : 2 * span - u);
}

bool oracle_inside(ShapeKind kind, int s, double cx, double cy, double px, double py) {
    switch (kind) {
        case ShapeKind::circle: return std::hypot(px - cx, py - cy) <= s + 1e-12;
        case ShapeKind::square: return std::max(std::abs(px - cx), std::abs(py - cy)) <= s;
        case ShapeKind::triangle: {
            // Same-side test against the three edges.
            const double ax = cx, ay = cy - s, bx = cx - s, by = cy + s, qx = cx + s, qy = cy + s;
            auto cross = [](double x1, double y1, double x2, double y2, double x, double y) {
                return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
            };
            const double c1 = cross(ax, ay, bx, by, px, py);
            const double c2 = cross(bx, by, qx, qy, px, py);
            const double c3 = cross(qx, qy, ax, ay, px, py);
            return (c1 <= 0 && c2 <= 0 && c3 <= 0) || (c1 >= 0 && c2 >= 0 && c3 >= 0);
        }
    }
    return false;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("flowseg_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("scene generation is deterministic") {
    const auto a = generate_scene(7);
    const auto b = generate_scene(7);
    CHECK(a == b);
    CHECK(describe(a) == describe(b));
    CHECK(render(a).video == render(b).video);
    CHECK_FALSE(generate_scene(8) == a);
}

TEST_CASE("supports stay inside the frame over 1000 seeds") {
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        const auto spec = generate_scene(seed);
        REQUIRE(spec.tracks.size() >= 2);
        REQUIRE(spec.tracks.size() <= 4);
        const auto r = render(spec);
        const auto& cfg = spec.config;
        for (size_t k = 0; k < spec.tracks.size(); ++k) {
            const auto& tr = spec.tracks[k];
            REQUIRE(tr.size >= kMinSize);
            REQUIRE(tr.size <= kMaxSize);
            const auto pos = track_positions(tr, cfg);
            for (int t = 0; t < cfg.frames; ++t) {
                // Count the analytic support on a canvas padded well beyond the
                // frame; every covered pixel must land inside the frame.
                int64_t outside = 0, inside = 0;
                for (int y = -12; y < cfg.height + 12; ++y) {
                    for (int x = -12; x < cfg.width + 12; ++x) {
                        if (!oracle_inside(tr.kind, tr.size, pos[t].x, pos[t].y, x + 0.5, y + 0.5)) continue;
                        const bool in = x >= 0 && y >= 0 && x < cfg.width && y < cfg.height;
                        (in ? inside : outside) += 1;
                    }
                }
                REQUIRE(outside == 0);
                int64_t drawn = 0;
                for (int y = 0; y < cfg.height; ++y) {
                    for (int x = 0; x < cfg.width; ++x) drawn += r.masks[k].at(t, y, x);
                }
                REQUIRE(drawn == inside);
            }
        }
    }
}

TEST_CASE("circle of radius 5 at the centre covers 69 to 89 pixels") {
    SceneSpec spec;
    spec.tracks.push_back({ShapeKind::circle, Color::red, 5, 16.0, 16.0, 0.0, 0.0});
    int64_t brute = 0;
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) brute += std::hypot(x + 0.5 - 16.0, y + 0.5 - 16.0) <= 5.0;
    }
    CHECK(brute >= 69);
    CHECK(brute <= 89);
    const auto r = render(spec);
    const auto area = r.masks[0].count() / spec.config.frames;
    CHECK(area == brute);
}

TEST_CASE("a still track has the same mask in every frame") {
    SceneSpec spec;
    spec.tracks.push_back({ShapeKind::triangle, Color::cyan, 6, 12.3, 20.7, 0.0, 0.0});
    spec.tracks.push_back({ShapeKind::square, Color::blue, 4, 5.0, 5.0, 1.0, 2.0});
    const auto r = render(spec);
    for (int t = 1; t < spec.config.frames; ++t) {
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) REQUIRE(r.masks[0].at(t, y, x) == r.masks[0].at(0, y, x));
        }
    }
    CHECK(motion_direction(spec.tracks[0], spec.config) == Direction::none);
}

TEST_CASE("renderer agrees with a brute-force oracle on 50 scenes") {
    for (uint64_t seed = 100; seed < 150; ++seed) {
        const auto spec = generate_scene(seed);
        const auto r = render(spec);
        const auto& cfg = spec.config;
        for (size_t k = 0; k < spec.tracks.size(); ++k) {
            const auto& tr = spec.tracks[k];
            for (int t = 0; t < cfg.frames; ++t) {
                const double cx = folded(tr.x, tr.vx, t, tr.size, cfg.width - tr.size);
                const double cy = folded(tr.y, tr.vy, t, tr.size, cfg.height - tr.size);
                for (int y = 0; y < cfg.height; ++y) {
                    for (int x = 0; x < cfg.width; ++x) {
                        REQUIRE(r.masks[k].at(t, y, x) == oracle_inside(tr.kind, tr.size, cx, cy, x + 0.5, y + 0.5));
                    }
                }
            }
        }
        // Topmost covering track sets the pixel colour.
        for (int t = 0; t < cfg.frames; ++t) {
            for (int y = 0; y < cfg.height; ++y) {
                for (int x = 0; x < cfg.width; ++x) {
                    int top = -1;
                    for (size_t k = 0; k < spec.tracks.size(); ++k) {
                        if (r.masks[k].at(t, y, x)) top = static_cast<int>(k);
                    }
                    for (int ch = 0; ch < 3; ++ch) {
                        const float v = r.video.data()[((t * cfg.height + y) * cfg.width + x) * 3 + ch];
                        if (top < 0) {
                            REQUIRE(v == background_value(spec, ch, x + 0.5, y + 0.5));
                            continue;
                        }
                        const auto& tr = spec.tracks[static_cast<size_t>(top)];
                        const Point c{folded(tr.x, tr.vx, t, tr.size, cfg.width - tr.size),
                                      folded(tr.y, tr.vy, t, tr.size, cfg.height - tr.size)};
                        const float f = static_cast<float>(shading(tr.size, c, x + 0.5, y + 0.5));
                        REQUIRE(v == doctest::Approx(f * rgb(tr.color)[static_cast<size_t>(ch)]).epsilon(1e-6));
                    }
                }
            }
        }
    }
}

TEST_CASE("video values lie in [0, 1]") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const auto r = render(generate_scene(seed));
        for (float v : r.video.values()) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
    }
}

TEST_CASE("query text and tuple forms parse back to the same attributes") {
    const auto& vocab = vocabulary();
    CHECK(vocab.size() == kVocabSize);
    CHECK(vocab[kPadToken] == "<pad>");
    for (int k = 0; k < kKindCount; ++k) {
        for (int c = 0; c < 5; ++c) {
            for (int col = -1; col < kColorCount; ++col) {
                for (int d = 0; d < 5; ++d) {
                    QueryAttributes a;
                    a.kind = static_cast<ShapeKind>(k);
                    a.comparative = static_cast<Comparative>(c);
                    if (col >= 0) a.color = static_cast<Color>(col);
                    a.direction = static_cast<Direction>(d);
                    const auto q = make_query(a);
                    REQUIRE(q.tokens.size() <= kMaxQueryTokens);
                    for (size_t i = 0; i < q.tokens.size(); ++i) {
                        REQUIRE(q.tokens[i] > 0);
                        REQUIRE(q.tokens[i] < kVocabSize);
                    }
                    REQUIRE(make_query(a) == q);
                    REQUIRE(parse_query(q.text) == a);
                    std::string tuple = "kind=" + std::string(to_string(a.kind)) +
                                        ",comparative=" + std::string(to_string(a.comparative)) +
                                        ",color=" + (a.color ? std::string(to_string(*a.color)) : "none") +
                                        ",direction=" + std::string(to_string(a.direction));
                    REQUIRE(parse_query(tuple) == a);
                }
            }
        }
    }
    const auto a = parse_query("kind=circle,comparative=smaller");
    CHECK(a.kind == ShapeKind::circle);
    CHECK(a.comparative == Comparative::smaller);
    CHECK_FALSE(a.color.has_value());
    CHECK(make_query(a).text == "the smaller circle");
}

TEST_CASE("malformed queries are rejected with the valid attribute list") {
    for (const char* bad : {"", "the", "the purple circle", "kind=hexagon", "comparative=smaller", "the circle moving",
                            "the circle moving sideways", "kind=circle,shade=red", "the circle is here",
                            "kind=circle,kind=square"}) {
        CAPTURE(bad);
        try {
            parse_query(bad);
            FAIL("accepted");
        } catch (const QueryError& e) {
            CHECK(std::string(e.what()).find("valid attributes") != std::string::npos);
        }
    }
}

TEST_CASE("resolve picks the strict extreme and refuses ties") {
    SceneSpec spec;
    spec.tracks.push_back({ShapeKind::circle, Color::red, 4, 8, 8, 0, 0});
    spec.tracks.push_back({ShapeKind::circle, Color::blue, 7, 22, 22, 2, 0});
    spec.tracks.push_back({ShapeKind::square, Color::red, 4, 8, 24, 0, 0});
    QueryAttributes q;
    q.kind = ShapeKind::circle;
    q.comparative = Comparative::smaller;
    CHECK(resolve(spec, q) == std::vector<int>{0});
    q.comparative = Comparative::bigger;
    CHECK(resolve(spec, q) == std::vector<int>{1});
    q.comparative = Comparative::faster;
    CHECK(resolve(spec, q) == std::vector<int>{1});
    q.comparative = Comparative::none;
    CHECK(resolve(spec, q).size() == 2);
    q.kind = ShapeKind::square;
    q.comparative = Comparative::smaller;
    CHECK(resolve(spec, q).empty());
    spec.tracks[1].size = 4;
    q.kind = ShapeKind::circle;
    CHECK(resolve(spec, q).empty());
}

TEST_CASE("generated samples have unique referents and exact masks") {
    const auto samples = generate_samples(200, 3, "val");
    REQUIRE(samples.size() == 200);
    int64_t paired = 0;
    for (const auto& s : samples) {
        REQUIRE(s.scene.has_value());
        const auto hits = resolve(*s.scene, s.query.attributes);
        REQUIRE(hits.size() == 1);
        REQUIRE(hits[0] == s.referent);
        if (s.query.attributes.comparative != Comparative::none) {
            int same_kind = 0;
            for (const auto& t : s.scene->tracks) same_kind += t.kind == s.query.attributes.kind;
            REQUIRE(same_kind >= 2);
        }
        const auto r = render(*s.scene);
        REQUIRE(s.mask == r.masks[static_cast<size_t>(s.referent)]);
        REQUIRE(s.video == r.video);
        if (s.pair >= 0) {
            ++paired;
            const auto& other = samples[static_cast<size_t>(s.pair)];
            REQUIRE(other.pair == s.index);
            REQUIRE(other.video == s.video);
            REQUIRE(other.referent != s.referent);
            REQUIRE_FALSE(other.mask == s.mask);
        }
    }
    CHECK(paired >= 40);
}

TEST_CASE("each shape kind is the referent in 25% to 42% of 2000 samples") {
    const auto samples = generate_samples(2000, 11, "train");
    std::array<int, kKindCount> counts{};
    for (const auto& s : samples) counts[static_cast<size_t>(s.query.attributes.kind)]++;
    for (int k = 0; k < kKindCount; ++k) {
        const double share = counts[static_cast<size_t>(k)] / 2000.0;
        CAPTURE(k);
        CHECK(share >= 0.25);
        CHECK(share <= 0.42);
    }
}

TEST_CASE("dataset bytes depend only on n, seed and split") {
    const auto a = temp_dir("ds_a"), b = temp_dir("ds_b");
    const auto da = generate_dataset(a, 10, 0, "train");
    const auto db = generate_dataset(b, 10, 0, "train");
    CHECK(da == db);
    const auto other = generate_dataset(b, 10, 0, "val");
    CHECK(other != da);
    for (int i = 0; i < 10; ++i) {
        for (const char* ext : {".video.frvs", ".mask.frvs", ".query.txt"}) {
            const auto name = std::to_string(i) + ext;
            REQUIRE(std::filesystem::exists(a / "train" / name));
        }
    }
    const auto loaded = load_dataset(a, "train");
    const auto generated = generate_samples(10, 0, "train");
    REQUIRE(loaded.size() == 10);
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].index == generated[i].index);
        CHECK(loaded[i].video == generated[i].video);
        CHECK(loaded[i].mask == generated[i].mask);
        CHECK(loaded[i].query == generated[i].query);
        CHECK(loaded[i].pair == generated[i].pair);
    }
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST_CASE("writing to an unwritable path names the path") {
    try {
        write_dataset("/proc/flowseg_no_such_dir", "train", generate_samples(1, 0, "train"));
        FAIL("no error");
    } catch (const FileError& e) {
        CHECK(e.path().find("/proc/flowseg_no_such_dir") != std::string::npos);
    }
}

TEST_CASE("query embedding rows follow token ids") {
    Rng rng(5);
    nn::Tensor<float> table_values({kVocabSize, 16});
    for (auto& v : table_values.values()) v = static_cast<float>(rng.normal());
    const auto table = nn::parameter(table_values);

    QueryAttributes a;
    a.kind = ShapeKind::square;
    a.comparative = Comparative::bigger;
    const auto e1 = embed_query(make_query(a), table).value();
    const auto e2 = embed_query(make_query(a), table).value();
    CHECK(e1 == e2);
    CHECK(e1.dims() == nn::Dims{kMaxQueryTokens, 16});

    QueryAttributes b = a;
    b.comparative = Comparative::smaller;
    CHECK_FALSE(embed_query(make_query(b), table).value() == e1);

    const auto q = make_query(a);
    for (int slot = 0; slot < kMaxQueryTokens; ++slot) {
        const int id = slot < static_cast<int>(q.tokens.size()) ? q.tokens[static_cast<size_t>(slot)] : kPadToken;
        for (int d = 0; d < 16; ++d) REQUIRE(e1[slot * 16 + d] == table_values[id * 16 + d]);
    }

    QuerySpec broken = q;
    broken.tokens[0] = kVocabSize;
    CHECK_THROWS_AS(embed_query(broken, table), ContractError);
}
