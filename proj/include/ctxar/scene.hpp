#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctxar/image.hpp"

namespace ctxar {

enum class ShapeKind : std::uint8_t { circle, square, triangle };

inline constexpr std::size_t kPaletteSize = 8;
inline constexpr std::size_t kMaxShapes = 3;

struct Rgb {
    float r = 0, g = 0, b = 0;
};

// Every palette color has a maximum channel of exactly 1, so the brightness of
// a rendered shape equals its depth shade.
const std::array<Rgb, kPaletteSize>& palette();
const char* palette_name(std::size_t index);
const char* shape_name(ShapeKind kind);

struct ShapeSpec {
    ShapeKind kind = ShapeKind::circle;
    std::uint8_t color = 0;       // palette index
    std::int32_t cx = 16, cy = 16;  // centre on the pixel-corner lattice
    std::int32_t size = 4;          // half extent in pixels
    std::uint8_t depth_rank = 0;    // 0 is nearest

    friend bool operator==(const ShapeSpec&, const ShapeSpec&) = default;
};

struct SceneSpec {
    std::vector<ShapeSpec> shapes;
    std::uint8_t background = 0;  // 0 black, 1 dark gray

    friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct DatasetConfig {
    std::size_t scenes = 2000;
    std::size_t image_size = 32;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 3;
    std::int32_t min_size = 4;
    std::int32_t max_size = 9;
    bool gray_background = false;  // allow the dark gray background
    std::uint64_t seed = 0;

    void validate() const;
};

// Brightness of the shade used for depth rank r (nearer is brighter).
float depth_shade(std::size_t rank);
// Condition intensity of depth rank r: (3 - r) / 3.
float depth_value(std::size_t rank);

SceneSpec gen_scene(std::mt19937_64& rng, const DatasetConfig& config);
// Scene i of a dataset; each item has its own seed so any subset can be
// regenerated independently.
SceneSpec dataset_scene(const DatasetConfig& config, std::size_t index);

bool shape_covers(const ShapeSpec& shape, std::size_t x, std::size_t y);
// Index into scene.shapes of the visible shape at each pixel, -1 for background.
std::vector<int> label_map(const SceneSpec& scene, std::size_t size);
Image render_scene(const SceneSpec& scene, std::size_t size);

// ---- captions ---------------------------------------------------------------

inline constexpr std::size_t kCaptionVocab = 32;
const std::vector<std::string>& caption_words();
std::uint32_t caption_word_id(const std::string& word);  // throws on unknown words
std::vector<std::uint32_t> caption(const SceneSpec& scene, std::size_t size);
std::vector<std::uint32_t> tokenize_prompt(const std::string& prompt);
std::string caption_text(const std::vector<std::uint32_t>& ids);

// ---- conditions -------------------------------------------------------------

enum class ConditionKind : std::uint8_t { edge, depth, semantic };

const char* condition_name(ConditionKind kind);
ConditionKind parse_condition_kind(const std::string& name);

// Edge: Sobel magnitude (max over channels) at or above 0.25 of the image
// maximum, thinned by non-maximum suppression across the gradient and then to
// the brighter side of each step. Depth: brightness
// mapped back through the depth shades. Semantic: nearest palette hue, stored
// as (index + 1) / 8, background 0.
Image derive_condition(const Image& image, ConditionKind kind);
// Analytic maps from the scene; agrees with derive_condition on the render.
Image derive_condition(const SceneSpec& scene, ConditionKind kind, std::size_t size);

// ---- text serialization -----------------------------------------------------

std::string format_scene(const SceneSpec& scene);
SceneSpec parse_scene(const std::string& line);

}  // namespace ctxar
