#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flowseg/autograd.hpp"
#include "flowseg/mask.hpp"
#include "flowseg/tensor.hpp"

namespace flowseg::shapes {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow, magenta, cyan };
enum class Comparative { none, smaller, bigger, faster, slower };
enum class Direction { none, left, right, up, down };

inline constexpr int kKindCount = 3;
inline constexpr int kColorCount = 6;
inline constexpr int kMinSize = 3;
inline constexpr int kMaxSize = 9;

std::string_view to_string(ShapeKind k);
std::string_view to_string(Color c);
std::string_view to_string(Comparative c);
std::string_view to_string(Direction d);
std::array<float, 3> rgb(Color c);

/// A shape moving linearly and bouncing off the walls.
struct ShapeTrack {
    ShapeKind kind = ShapeKind::circle;
    Color color = Color::red;
    int size = 5;  // radius or half-side, pixels
    double x = 0.0, y = 0.0;
    double vx = 0.0, vy = 0.0;

    double speed() const;
    bool operator==(const ShapeTrack&) const = default;
};

struct SceneConfig {
    int frames = 8;
    int height = 32;
    int width = 32;
};

/// A plane wave added to the background intensity.
struct TextureWave {
    double kx = 0.0, ky = 0.0, phase = 0.0, amplitude = 0.0;
    bool operator==(const TextureWave&) const = default;
};

struct SceneSpec {
    SceneConfig config;
    std::vector<ShapeTrack> tracks;
    std::array<float, 3> background_top{};
    std::array<float, 3> background_bottom{};
    std::vector<TextureWave> texture;
    uint64_t seed = 0;

    bool operator==(const SceneSpec& o) const;
};

/// Canonical text form; identical specs print identically.
std::string describe(const SceneSpec& spec);

struct Point {
    double x = 0.0, y = 0.0;
};

/// Centre of the track at every frame. Reflection keeps the centre within
/// [size, extent - size] on both axes, so the support never leaves the frame.
std::vector<Point> track_positions(const ShapeTrack& track, const SceneConfig& cfg);

/// Hard-edged point-in-shape test for a pixel centre (px, py).
bool covers(ShapeKind kind, int size, Point centre, double px, double py);

/// Brightness factor of a covered pixel: 1 at the centre falling to 0.45
/// at distance `size`.
double shading(int size, Point centre, double px, double py);

/// Background colour channel c at pixel centre (px, py).
float background_value(const SceneSpec& spec, int c, double px, double py);

/// Net displacement from first to last frame, reduced to a named direction
/// when one axis clearly dominates.
Direction motion_direction(const ShapeTrack& track, const SceneConfig& cfg);

SceneSpec generate_scene(uint64_t seed, const SceneConfig& cfg = {});

struct Rendering {
    nn::Tensor<float> video;         // T x H x W x 3, values in [0, 1]
    std::vector<MaskTensor> masks;   // one un-occluded support per track
};

Rendering render(const SceneSpec& spec);

struct QueryAttributes {
    ShapeKind kind = ShapeKind::circle;
    Comparative comparative = Comparative::none;
    std::optional<Color> color;
    Direction direction = Direction::none;

    bool operator==(const QueryAttributes&) const = default;
};

/// Vocabulary of 32 token ids; 0 is padding.
inline constexpr int kVocabSize = 32;
inline constexpr int kPadToken = 0;
inline constexpr int kMaxQueryTokens = 8;

const std::vector<std::string>& vocabulary();

struct QuerySpec {
    QueryAttributes attributes;
    std::string text;
    std::vector<int> tokens;  // unpadded, length <= kMaxQueryTokens

    bool operator==(const QuerySpec&) const = default;
};

QuerySpec make_query(const QueryAttributes& attrs);

/// Rejects text outside the attribute grammar.
class QueryError : public ContractError {
   public:
    using ContractError::ContractError;
};

/// Accepts either "kind=circle,comparative=smaller,..." or rendered text
/// such as "the smaller red circle moving left".
QueryAttributes parse_query(std::string_view text);

std::string valid_attributes_help();

/// Indices of tracks the query selects. Comparatives pick the strict extreme
/// among at least two candidates and select nothing on a tie.
std::vector<int> resolve(const SceneSpec& spec, const QueryAttributes& q);

/// Token ids padded to kMaxQueryTokens with kPadToken.
std::vector<int> padded_tokens(const QuerySpec& q);

/// Rows of `table` (kVocabSize x D) for the padded token ids: a K x D embedding.
template <typename T>
nn::Var<T> embed_query(const QuerySpec& q, const nn::Var<T>& table);

struct Sample {
    int64_t index = 0;
    nn::Tensor<float> video;
    MaskTensor mask;
    QuerySpec query;
    int64_t pair = -1;  // index of the sample sharing this video, if any
    int referent = -1;
    std::optional<SceneSpec> scene;  // absent when loaded from disk
};

/// Samples whose index i has i % 10 < 4 come in adjacent pairs sharing one
/// scene with two different referents.
bool is_paired_index(int64_t index, int64_t n);

std::vector<Sample> generate_samples(int64_t n, uint64_t seed, const std::string& split,
                                     const SceneConfig& cfg = {});

/// Writes `<dir>/<split>/<index>.{video.frvs,mask.frvs,query.txt}` and
/// returns the FNV-1a digest of all bytes written, in index order.
uint64_t write_dataset(const std::filesystem::path& dir, const std::string& split, const std::vector<Sample>& samples);

uint64_t generate_dataset(const std::filesystem::path& dir, int64_t n, uint64_t seed, const std::string& split,
                          const SceneConfig& cfg = {});

std::vector<Sample> load_dataset(const std::filesystem::path& dir, const std::string& split);

std::string query_file_text(const Sample& s);

}  // namespace flowseg::shapes
