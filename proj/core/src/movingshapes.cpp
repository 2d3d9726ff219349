#include "flowseg/movingshapes.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "flowseg/frvs.hpp"
#include "flowseg/parallel.hpp"
#include "flowseg/rng.hpp"

namespace flowseg::shapes {

namespace {

constexpr std::array<std::string_view, kKindCount> kKindNames = {"circle", "square", "triangle"};
constexpr std::array<std::string_view, kColorCount> kColorNames = {"red", "green", "blue", "yellow", "magenta", "cyan"};
constexpr std::array<std::string_view, 5> kComparativeNames = {"none", "smaller", "bigger", "faster", "slower"};
constexpr std::array<std::string_view, 5> kDirectionNames = {"none", "left", "right", "up", "down"};

constexpr double kStillProbability = 0.15;
constexpr double kMinSpeed = 0.5;
constexpr double kMaxSpeed = 3.0;
// A track must keep at least this share of its support visible in every frame.
constexpr double kMinVisibleFraction = 0.5;
// Comparative queries need these margins over every competing track.
constexpr int kSizeMargin = 2;
constexpr double kSpeedRatio = 1.5;
constexpr double kSpeedGap = 0.5;
// Direction words need this much net displacement on the dominant axis.
constexpr double kMinTravel = 3.0;

template <size_t N>
int lookup(const std::array<std::string_view, N>& names, std::string_view word) {
    for (size_t i = 0; i < N; ++i) {
        if (names[i] == word) return static_cast<int>(i);
    }
    return -1;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double reflect(double p, double& v, double lo, double hi) {
    p += v;
    for (int i = 0; i < 4 && (p < lo || p > hi); ++i) {
        if (p < lo) p = 2 * lo - p;
        if (p > hi) p = 2 * hi - p;
        v = -v;
    }
    return std::clamp(p, lo, hi);
}

std::vector<std::string> split_words(std::string_view s, std::string_view seps) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (seps.find(ch) != std::string_view::npos) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

bool visibility_ok(const SceneSpec& spec, const Rendering& r) {
    const auto& cfg = spec.config;
    const int64_t n = static_cast<int64_t>(spec.tracks.size());
    std::vector<int> top(static_cast<size_t>(cfg.height * cfg.width));
    for (int t = 0; t < cfg.frames; ++t) {
        std::fill(top.begin(), top.end(), -1);
        for (int64_t k = 0; k < n; ++k) {
            for (int y = 0; y < cfg.height; ++y) {
                for (int x = 0; x < cfg.width; ++x) {
                    if (r.masks[k].at(t, y, x)) top[y * cfg.width + x] = static_cast<int>(k);
                }
            }
        }
        for (int64_t k = 0; k < n; ++k) {
            int64_t support = 0, visible = 0;
            for (int y = 0; y < cfg.height; ++y) {
                for (int x = 0; x < cfg.width; ++x) {
                    if (!r.masks[k].at(t, y, x)) continue;
                    ++support;
                    visible += top[y * cfg.width + x] == k;
                }
            }
            if (support == 0 || visible < kMinVisibleFraction * static_cast<double>(support)) return false;
        }
    }
    return true;
}

bool has_margin(const SceneSpec& spec, const QueryAttributes& q, int referent) {
    if (q.comparative == Comparative::none) return true;
    QueryAttributes base = q;
    base.comparative = Comparative::none;
    const auto& r = spec.tracks[static_cast<size_t>(referent)];
    for (int o : resolve(spec, base)) {
        if (o == referent) continue;
        const auto& other = spec.tracks[static_cast<size_t>(o)];
        switch (q.comparative) {
            case Comparative::smaller:
            case Comparative::bigger:
                if (std::abs(r.size - other.size) < kSizeMargin) return false;
                break;
            case Comparative::faster:
                if (r.speed() < kSpeedRatio * other.speed() || r.speed() - other.speed() < kSpeedGap) return false;
                break;
            case Comparative::slower:
                if (other.speed() < kSpeedRatio * r.speed() || other.speed() - r.speed() < kSpeedGap) return false;
                break;
            case Comparative::none: break;
        }
    }
    return true;
}

/// Every tuple that uniquely and robustly names `referent`.
std::vector<QueryAttributes> candidate_queries(const SceneSpec& spec, int referent) {
    const auto& track = spec.tracks[static_cast<size_t>(referent)];
    const Direction dir = motion_direction(track, spec.config);
    std::vector<QueryAttributes> out;
    for (int c = 0; c < 5; ++c) {
        for (bool with_color : {false, true}) {
            for (bool with_dir : {false, true}) {
                if (with_dir && dir == Direction::none) continue;
                QueryAttributes q;
                q.kind = track.kind;
                q.comparative = static_cast<Comparative>(c);
                if (with_color) q.color = track.color;
                if (with_dir) q.direction = dir;
                const auto hits = resolve(spec, q);
                if (hits.size() == 1 && hits[0] == referent && has_margin(spec, q, referent)) out.push_back(q);
            }
        }
    }
    return out;
}

Sample make_sample(int64_t index, const SceneSpec& scene, const Rendering& r, int referent,
                   const QueryAttributes& q) {
    Sample s;
    s.index = index;
    s.video = r.video;
    s.mask = r.masks[static_cast<size_t>(referent)];
    s.query = make_query(q);
    s.referent = referent;
    s.scene = scene;
    return s;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError(path.string(), "cannot open for reading");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::string_view to_string(ShapeKind k) { return kKindNames[static_cast<size_t>(k)]; }
std::string_view to_string(Color c) { return kColorNames[static_cast<size_t>(c)]; }
std::string_view to_string(Comparative c) { return kComparativeNames[static_cast<size_t>(c)]; }
std::string_view to_string(Direction d) { return kDirectionNames[static_cast<size_t>(d)]; }

std::array<float, 3> rgb(Color c) {
    switch (c) {
        case Color::red: return {0.95f, 0.15f, 0.10f};
        case Color::green: return {0.15f, 0.85f, 0.20f};
        case Color::blue: return {0.15f, 0.30f, 0.95f};
        case Color::yellow: return {0.95f, 0.90f, 0.15f};
        case Color::magenta: return {0.90f, 0.20f, 0.90f};
        case Color::cyan: return {0.15f, 0.90f, 0.90f};
    }
    throw ContractError("rgb: unknown color");
}

double ShapeTrack::speed() const { return std::hypot(vx, vy); }

bool SceneSpec::operator==(const SceneSpec& o) const {
    return config.frames == o.config.frames && config.height == o.config.height && config.width == o.config.width &&
           tracks == o.tracks && background_top == o.background_top && background_bottom == o.background_bottom &&
           texture == o.texture && seed == o.seed;
}

std::string describe(const SceneSpec& spec) {
    std::string out = "scene seed=" + std::to_string(spec.seed) + " frames=" + std::to_string(spec.config.frames) +
                      " size=" + std::to_string(spec.config.height) + "x" + std::to_string(spec.config.width) + "\n";
    out += "background";
    for (float v : spec.background_top) out += " " + fmt_double(v);
    for (float v : spec.background_bottom) out += " " + fmt_double(v);
    out += "\n";
    for (const auto& w : spec.texture) {
        out += "wave " + fmt_double(w.kx) + " " + fmt_double(w.ky) + " " + fmt_double(w.phase) + " " +
               fmt_double(w.amplitude) + "\n";
    }
    for (const auto& t : spec.tracks) {
        out += std::string(to_string(t.kind)) + " " + std::string(to_string(t.color)) + " " + std::to_string(t.size) +
               " " + fmt_double(t.x) + " " + fmt_double(t.y) + " " + fmt_double(t.vx) + " " + fmt_double(t.vy) + "\n";
    }
    return out;
}

std::vector<Point> track_positions(const ShapeTrack& track, const SceneConfig& cfg) {
    std::vector<Point> out;
    double x = track.x, y = track.y, vx = track.vx, vy = track.vy;
    const double s = track.size;
    for (int t = 0; t < cfg.frames; ++t) {
        out.push_back({x, y});
        x = reflect(x, vx, s, cfg.width - s);
        y = reflect(y, vy, s, cfg.height - s);
    }
    return out;
}

bool covers(ShapeKind kind, int size, Point c, double px, double py) {
    const double s = size;
    const double dx = px - c.x, dy = py - c.y;
    switch (kind) {
        case ShapeKind::circle: return dx * dx + dy * dy <= s * s;
        case ShapeKind::square: return std::abs(dx) <= s && std::abs(dy) <= s;
        case ShapeKind::triangle:
            // Apex at (cx, cy - s), base from (cx - s, cy + s) to (cx + s, cy + s).
            return dy >= -s && dy <= s && std::abs(dx) <= (dy + s) / 2.0;
    }
    return false;
}

double shading(int size, Point c, double px, double py) {
    const double d = std::hypot(px - c.x, py - c.y) / size;
    return 1.0 - 0.55 * std::min(1.0, d);
}

float background_value(const SceneSpec& spec, int c, double px, double py) {
    const double a = py / spec.config.height;
    double v = (1.0 - a) * spec.background_top[static_cast<size_t>(c)] + a * spec.background_bottom[static_cast<size_t>(c)];
    for (const auto& w : spec.texture) v += w.amplitude * std::sin(w.kx * px + w.ky * py + w.phase);
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

Direction motion_direction(const ShapeTrack& track, const SceneConfig& cfg) {
    const auto pos = track_positions(track, cfg);
    const double dx = pos.back().x - pos.front().x;
    const double dy = pos.back().y - pos.front().y;
    const double major = std::max(std::abs(dx), std::abs(dy));
    const double minor = std::min(std::abs(dx), std::abs(dy));
    if (major < kMinTravel || minor > 0.5 * major) return Direction::none;
    if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? Direction::left : Direction::right;
    return dy < 0 ? Direction::up : Direction::down;
}

SceneSpec generate_scene(uint64_t seed, const SceneConfig& cfg) {
    if (cfg.frames < 1 || cfg.height < 2 * kMinSize + 2 || cfg.width < 2 * kMinSize + 2) {
        throw ContractError("generate_scene: frame too small");
    }
    const int max_size = std::min(kMaxSize, std::min(cfg.height, cfg.width) / 2 - 1);
    Rng rng(seed);
    for (;;) {
        SceneSpec s;
        s.config = cfg;
        s.seed = seed;
        for (auto& v : s.background_top) v = static_cast<float>(rng.uniform(0.0, 0.3));
        for (auto& v : s.background_bottom) v = static_cast<float>(rng.uniform(0.0, 0.3));
        for (int w = 0; w < 3; ++w) {
            const double k = rng.uniform(0.3, 1.2), theta = rng.uniform(0.0, 2.0 * M_PI);
            s.texture.push_back({k * std::cos(theta), k * std::sin(theta), rng.uniform(0.0, 2.0 * M_PI),
                                 rng.uniform(0.02, 0.06)});
        }
        const auto count = rng.uniform_int(2, 4);
        const bool shared = rng.bernoulli(0.5);
        const auto shared_kind = static_cast<ShapeKind>(rng.uniform_int(0, kKindCount - 1));
        for (int64_t i = 0; i < count; ++i) {
            ShapeTrack t;
            t.kind = shared && i < 2 ? shared_kind : static_cast<ShapeKind>(rng.uniform_int(0, kKindCount - 1));
            t.color = static_cast<Color>(rng.uniform_int(0, kColorCount - 1));
            t.size = static_cast<int>(rng.uniform_int(kMinSize, max_size));
            t.x = rng.uniform(t.size, cfg.width - t.size);
            t.y = rng.uniform(t.size, cfg.height - t.size);
            const double speed = rng.bernoulli(kStillProbability) ? 0.0 : rng.uniform(kMinSpeed, kMaxSpeed);
            const double angle = rng.uniform(0.0, 2.0 * M_PI);
            t.vx = speed * std::cos(angle);
            t.vy = speed * std::sin(angle);
            s.tracks.push_back(t);
        }
        if (visibility_ok(s, render(s))) return s;
    }
}

Rendering render(const SceneSpec& spec) {
    const auto& cfg = spec.config;
    Rendering r;
    r.video = nn::Tensor<float>({cfg.frames, cfg.height, cfg.width, 3});
    float* px = r.video.data();
    for (int t = 0; t < cfg.frames; ++t) {
        for (int y = 0; y < cfg.height; ++y) {
            for (int x = 0; x < cfg.width; ++x) {
                for (int c = 0; c < 3; ++c) {
                    px[((t * cfg.height + y) * cfg.width + x) * 3 + c] = background_value(spec, c, x + 0.5, y + 0.5);
                }
            }
        }
    }
    for (const auto& track : spec.tracks) {
        MaskTensor mask(cfg.frames, cfg.height, cfg.width);
        const auto pos = track_positions(track, cfg);
        const auto color = rgb(track.color);
        for (int t = 0; t < cfg.frames; ++t) {
            for (int y = 0; y < cfg.height; ++y) {
                for (int x = 0; x < cfg.width; ++x) {
                    if (!covers(track.kind, track.size, pos[t], x + 0.5, y + 0.5)) continue;
                    mask.set(t, y, x, true);
                    const auto f = static_cast<float>(shading(track.size, pos[t], x + 0.5, y + 0.5));
                    for (int c = 0; c < 3; ++c) px[((t * cfg.height + y) * cfg.width + x) * 3 + c] = f * color[c];
                }
            }
        }
        r.masks.push_back(std::move(mask));
    }
    return r;
}

const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> vocab = [] {
        std::vector<std::string> v = {"<pad>", "the"};
        for (auto k : kKindNames) v.emplace_back(k);
        for (auto c : kColorNames) v.emplace_back(c);
        for (size_t i = 1; i < kComparativeNames.size(); ++i) v.emplace_back(kComparativeNames[i]);
        v.emplace_back("moving");
        for (size_t i = 1; i < kDirectionNames.size(); ++i) v.emplace_back(kDirectionNames[i]);
        while (static_cast<int>(v.size()) < kVocabSize) v.push_back("<unused" + std::to_string(v.size()) + ">");
        return v;
    }();
    return vocab;
}

QuerySpec make_query(const QueryAttributes& attrs) {
    std::vector<std::string> words = {"the"};
    if (attrs.comparative != Comparative::none) words.emplace_back(to_string(attrs.comparative));
    if (attrs.color) words.emplace_back(to_string(*attrs.color));
    words.emplace_back(to_string(attrs.kind));
    if (attrs.direction != Direction::none) {
        words.emplace_back("moving");
        words.emplace_back(to_string(attrs.direction));
    }
    QuerySpec q;
    q.attributes = attrs;
    const auto& vocab = vocabulary();
    for (const auto& w : words) {
        if (!q.text.empty()) q.text += ' ';
        q.text += w;
        q.tokens.push_back(static_cast<int>(std::find(vocab.begin(), vocab.end(), w) - vocab.begin()));
    }
    return q;
}

std::string valid_attributes_help() {
    auto join = [](auto names, size_t from) {
        std::string s;
        for (size_t i = from; i < names.size(); ++i) s += (s.empty() ? "" : "|") + std::string(names[i]);
        return s;
    };
    return "valid attributes: kind=" + join(kKindNames, 0) + " comparative=" + join(kComparativeNames, 0) +
           " color=none|" + join(kColorNames, 0) + " direction=" + join(kDirectionNames, 0) +
           "; text form: the [comparative] [color] kind [moving direction]";
}

QueryAttributes parse_query(std::string_view text) {
    auto fail = [&](const std::string& why) {
        return QueryError("cannot parse query \"" + std::string(text) + "\": " + why + "; " + valid_attributes_help());
    };
    QueryAttributes q;
    if (text.find('=') != std::string_view::npos) {
        bool have_kind = false;
        std::map<std::string, bool> seen;
        for (const auto& field : split_words(text, ", \t\n;")) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) throw fail("expected key=value, got " + field);
            const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
            if (seen[key]) throw fail("duplicate key " + key);
            seen[key] = true;
            if (key == "kind") {
                const int k = lookup(kKindNames, value);
                if (k < 0) throw fail("unknown kind " + value);
                q.kind = static_cast<ShapeKind>(k);
                have_kind = true;
            } else if (key == "comparative") {
                const int c = lookup(kComparativeNames, value);
                if (c < 0) throw fail("unknown comparative " + value);
                q.comparative = static_cast<Comparative>(c);
            } else if (key == "color") {
                if (value != "none") {
                    const int c = lookup(kColorNames, value);
                    if (c < 0) throw fail("unknown color " + value);
                    q.color = static_cast<Color>(c);
                }
            } else if (key == "direction") {
                const int d = lookup(kDirectionNames, value);
                if (d < 0) throw fail("unknown direction " + value);
                q.direction = static_cast<Direction>(d);
            } else {
                throw fail("unknown key " + key);
            }
        }
        if (!have_kind) throw fail("missing kind");
        return q;
    }

    const auto words = split_words(text, " \t\n");
    size_t i = 0;
    if (i < words.size() && words[i] == "the") ++i;
    if (i < words.size()) {
        const int c = lookup(kComparativeNames, words[i]);
        if (c > 0) {
            q.comparative = static_cast<Comparative>(c);
            ++i;
        }
    }
    if (i < words.size()) {
        const int c = lookup(kColorNames, words[i]);
        if (c >= 0) {
            q.color = static_cast<Color>(c);
            ++i;
        }
    }
    if (i >= words.size()) throw fail("missing shape kind");
    const int k = lookup(kKindNames, words[i]);
    if (k < 0) throw fail("unknown word " + words[i]);
    q.kind = static_cast<ShapeKind>(k);
    ++i;
    if (i < words.size()) {
        if (words[i] != "moving" || i + 1 >= words.size()) throw fail("expected 'moving <direction>'");
        const int d = lookup(kDirectionNames, words[i + 1]);
        if (d <= 0) throw fail("unknown direction " + words[i + 1]);
        q.direction = static_cast<Direction>(d);
        i += 2;
    }
    if (i != words.size()) throw fail("unexpected trailing words");
    return q;
}

std::vector<int> resolve(const SceneSpec& spec, const QueryAttributes& q) {
    std::vector<int> hits;
    for (size_t i = 0; i < spec.tracks.size(); ++i) {
        const auto& t = spec.tracks[i];
        if (t.kind != q.kind) continue;
        if (q.color && t.color != *q.color) continue;
        if (q.direction != Direction::none && motion_direction(t, spec.config) != q.direction) continue;
        hits.push_back(static_cast<int>(i));
    }
    if (q.comparative == Comparative::none) return hits;
    if (hits.size() < 2) return {};
    auto key = [&](int i) {
        const auto& t = spec.tracks[static_cast<size_t>(i)];
        switch (q.comparative) {
            case Comparative::smaller: return -static_cast<double>(t.size);
            case Comparative::bigger: return static_cast<double>(t.size);
            case Comparative::faster: return t.speed();
            case Comparative::slower: return -t.speed();
            case Comparative::none: break;
        }
        return 0.0;
    };
    int best = hits[0];
    int ties = 0;
    for (int i : hits) {
        if (key(i) > key(best)) {
            best = i;
            ties = 0;
        } else if (i != best && key(i) == key(best)) {
            ++ties;
        }
    }
    if (ties > 0) return {};
    return {best};
}

std::vector<int> padded_tokens(const QuerySpec& q) {
    if (static_cast<int>(q.tokens.size()) > kMaxQueryTokens) {
        throw ContractError("query has " + std::to_string(q.tokens.size()) + " tokens, limit is " +
                            std::to_string(kMaxQueryTokens));
    }
    std::vector<int> ids = q.tokens;
    for (int id : ids) {
        if (id < 0 || id >= kVocabSize) throw ContractError("query token id " + std::to_string(id) + " out of vocabulary");
    }
    ids.resize(kMaxQueryTokens, kPadToken);
    return ids;
}

template <typename T>
nn::Var<T> embed_query(const QuerySpec& q, const nn::Var<T>& table) {
    if (table.dims().size() != 2 || table.dims()[0] != kVocabSize) {
        throw ShapeError("embed_query: table dims " + nn::dims_str(table.dims()) + ", expected [" +
                         std::to_string(kVocabSize) + ",D]");
    }
    return nn::embedding(table, padded_tokens(q), {kMaxQueryTokens});
}

template nn::Var<float> embed_query(const QuerySpec&, const nn::Var<float>&);
template nn::Var<double> embed_query(const QuerySpec&, const nn::Var<double>&);

bool is_paired_index(int64_t index, int64_t n) {
    if (index % 10 >= 4) return false;
    return index % 2 == 1 || index + 1 < n;
}

std::vector<Sample> generate_samples(int64_t n, uint64_t seed, const std::string& split, const SceneConfig& cfg) {
    if (n < 1) throw ContractError("generate_samples: n must be at least 1");
    std::vector<int64_t> units;
    for (int64_t i = 0; i < n; ++i) {
        if (is_paired_index(i, n) && i % 2 == 1) continue;
        units.push_back(i);
    }
    std::vector<Sample> samples(static_cast<size_t>(n));
    const uint64_t split_hash = fnv1a(split);
    parallel_for(static_cast<int64_t>(units.size()), [&](int64_t u) {
        const int64_t i = units[static_cast<size_t>(u)];
        const bool paired = is_paired_index(i, n);
        const uint64_t base = derive_seed(seed, split_hash, static_cast<uint64_t>(i));
        for (uint64_t attempt = 0;; ++attempt) {
            const SceneSpec scene = generate_scene(derive_seed(base, attempt), cfg);
            Rng rng(derive_seed(base, attempt, 1));
            std::vector<std::vector<QueryAttributes>> options;
            std::vector<int> usable;
            for (int k = 0; k < static_cast<int>(scene.tracks.size()); ++k) {
                options.push_back(candidate_queries(scene, k));
                if (!options.back().empty()) usable.push_back(k);
            }
            auto pick_query = [&](int k) {
                const auto& opts = options[static_cast<size_t>(k)];
                return opts[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(opts.size()) - 1))];
            };
            const Rendering r = render(scene);
            if (!paired) {
                if (usable.empty()) continue;
                const int k = usable[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(usable.size()) - 1))];
                samples[static_cast<size_t>(i)] = make_sample(i, scene, r, k, pick_query(k));
                return;
            }
            // Prefer two referents of the same kind: the query then has to
            // carry the distinction.
            std::vector<std::pair<int, int>> same_kind, any;
            for (int a : usable) {
                for (int b : usable) {
                    if (a == b) continue;
                    any.emplace_back(a, b);
                    if (scene.tracks[a].kind == scene.tracks[b].kind) same_kind.emplace_back(a, b);
                }
            }
            const auto& pool = same_kind.empty() ? any : same_kind;
            if (pool.empty()) continue;
            const auto [a, b] = pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
            samples[static_cast<size_t>(i)] = make_sample(i, scene, r, a, pick_query(a));
            samples[static_cast<size_t>(i + 1)] = make_sample(i + 1, scene, r, b, pick_query(b));
            samples[static_cast<size_t>(i)].pair = i + 1;
            samples[static_cast<size_t>(i + 1)].pair = i;
            return;
        }
    });
    return samples;
}

std::string query_file_text(const Sample& s) {
    const auto& a = s.query.attributes;
    std::string out;
    out += "kind=" + std::string(to_string(a.kind)) + "\n";
    out += "comparative=" + std::string(to_string(a.comparative)) + "\n";
    out += "color=" + (a.color ? std::string(to_string(*a.color)) : std::string("none")) + "\n";
    out += "direction=" + std::string(to_string(a.direction)) + "\n";
    out += "text=" + s.query.text + "\n";
    out += "pair=" + (s.pair >= 0 ? std::to_string(s.pair) : std::string("none")) + "\n";
    return out;
}

uint64_t write_dataset(const std::filesystem::path& dir, const std::string& split, const std::vector<Sample>& samples) {
    const auto root = dir / split;
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw FileError(root.string(), "cannot create directory: " + ec.message());
    uint64_t digest = fnv1a("");
    auto emit = [&](const std::filesystem::path& path, std::span<const uint8_t> bytes) {
        io::write_bytes(path, bytes);
        digest = fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), digest);
    };
    for (const auto& s : samples) {
        const std::string stem = std::to_string(s.index);
        io::FrvsFile video;
        video.add(io::FrvsTensor::from_f32("video", s.video));
        emit(root / (stem + ".video.frvs"), video.serialize());
        io::FrvsFile mask;
        mask.add(io::FrvsTensor::from_u8("mask",
                                         {static_cast<uint32_t>(s.mask.frames()), static_cast<uint32_t>(s.mask.height()),
                                          static_cast<uint32_t>(s.mask.width())},
                                         s.mask.bits()));
        emit(root / (stem + ".mask.frvs"), mask.serialize());
        const std::string q = query_file_text(s);
        emit(root / (stem + ".query.txt"), std::span(reinterpret_cast<const uint8_t*>(q.data()), q.size()));
    }
    return digest;
}

uint64_t generate_dataset(const std::filesystem::path& dir, int64_t n, uint64_t seed, const std::string& split,
                          const SceneConfig& cfg) {
    return write_dataset(dir, split, generate_samples(n, seed, split, cfg));
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir, const std::string& split) {
    const auto root = dir / split;
    if (!std::filesystem::is_directory(root)) throw FileError(root.string(), "dataset split not found");
    std::vector<int64_t> indices;
    for (const auto& entry : std::filesystem::directory_iterator(root)) {
        const std::string name = entry.path().filename().string();
        const std::string suffix = ".query.txt";
        if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
            continue;
        }
        int64_t idx = 0;
        const auto stem = std::string_view(name).substr(0, name.size() - suffix.size());
        const auto [ptr, err] = std::from_chars(stem.data(), stem.data() + stem.size(), idx);
        if (err != std::errc() || ptr != stem.data() + stem.size()) continue;
        indices.push_back(idx);
    }
    std::sort(indices.begin(), indices.end());
    if (indices.empty()) throw FileError(root.string(), "dataset split is empty");

    std::vector<Sample> out(indices.size());
    parallel_for(static_cast<int64_t>(indices.size()), [&](int64_t k) {
        Sample& s = out[static_cast<size_t>(k)];
        s.index = indices[static_cast<size_t>(k)];
        const std::string stem = std::to_string(s.index);
        const auto qpath = root / (stem + ".query.txt");
        std::map<std::string, std::string> kv;
        std::istringstream lines(read_text(qpath));
        for (std::string line; std::getline(lines, line);) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        std::string tuple;
        for (const char* key : {"kind", "comparative", "color", "direction"}) {
            if (!kv.count(key)) throw FileError(qpath.string(), std::string("missing key ") + key);
            tuple += std::string(key) + "=" + kv[key] + ",";
        }
        try {
            s.query = make_query(parse_query(tuple));
        } catch (const QueryError& e) {
            throw FileError(qpath.string(), e.what());
        }
        if (kv.count("pair") && kv["pair"] != "none") s.pair = std::stoll(kv["pair"]);

        const auto vpath = root / (stem + ".video.frvs");
        s.video = io::FrvsFile::read(vpath).get("video").to_tensor<float>();
        if (s.video.ndim() != 4 || s.video.dim(3) != 3) throw FileError(vpath.string(), "video must be T x H x W x 3");
        const auto mpath = root / (stem + ".mask.frvs");
        const auto mt = io::FrvsFile::read(mpath).get("mask");
        if (mt.dims.size() != 3) throw FileError(mpath.string(), "mask must be T x H x W");
        s.mask = MaskTensor(mt.dims[0], mt.dims[1], mt.dims[2], mt.to_u8());
    });
    return out;
}

}  // namespace flowseg::shapes
