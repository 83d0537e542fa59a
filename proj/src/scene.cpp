#include "ctxar/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ctxar/error.hpp"

namespace ctxar {

const std::array<Rgb, kPaletteSize>& palette() {
    static const std::array<Rgb, kPaletteSize> colors{{
        {1.0f, 0.0f, 0.0f},  // red
        {0.0f, 1.0f, 0.0f},  // green
        {0.0f, 0.0f, 1.0f},  // blue
        {1.0f, 1.0f, 0.0f},  // yellow
        {0.0f, 1.0f, 1.0f},  // cyan
        {1.0f, 0.0f, 1.0f},  // magenta
        {1.0f, 1.0f, 1.0f},  // white
        {1.0f, 0.5f, 0.0f},  // orange
    }};
    return colors;
}

const char* palette_name(std::size_t index) {
    static const char* names[kPaletteSize] = {"red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"};
    return index < kPaletteSize ? names[index] : "?";
}

const char* shape_name(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

void DatasetConfig::validate() const {
    if (scenes == 0) throw Error(ErrorCode::config, "dataset needs at least one scene");
    if (min_shapes < 1 || max_shapes < min_shapes || max_shapes > kMaxShapes) {
        throw Error(ErrorCode::config, "shape count range must lie in [1, 3]");
    }
    if (min_size < 1 || max_size < min_size || 2 * max_size + 2 > static_cast<std::int32_t>(image_size)) {
        throw Error(ErrorCode::config, "shape size range does not fit the canvas");
    }
}

float depth_shade(std::size_t rank) { return 1.0f - 0.2f * static_cast<float>(rank); }
float depth_value(std::size_t rank) { return static_cast<float>(3 - rank) / 3.0f; }

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::int32_t uniform_int(std::mt19937_64& rng, std::int32_t lo, std::int32_t hi) {
    return lo + static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

}  // namespace

SceneSpec gen_scene(std::mt19937_64& rng, const DatasetConfig& config) {
    config.validate();
    SceneSpec scene;
    const auto canvas = static_cast<std::int32_t>(config.image_size);
    const std::size_t n = static_cast<std::size_t>(
        uniform_int(rng, static_cast<std::int32_t>(config.min_shapes), static_cast<std::int32_t>(config.max_shapes)));
    std::vector<std::uint8_t> ranks(n);
    std::iota(ranks.begin(), ranks.end(), std::uint8_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(ranks[i - 1], ranks[rng() % i]);
    for (std::size_t i = 0; i < n; ++i) {
        ShapeSpec s;
        s.kind = static_cast<ShapeKind>(rng() % 3);
        s.color = static_cast<std::uint8_t>(rng() % kPaletteSize);
        s.size = uniform_int(rng, config.min_size, config.max_size);
        // One pixel of margin keeps every boundary inside the canvas.
        s.cx = uniform_int(rng, s.size + 1, canvas - s.size - 1);
        s.cy = uniform_int(rng, s.size + 1, canvas - s.size - 1);
        s.depth_rank = ranks[i];
        scene.shapes.push_back(s);
    }
    scene.background = config.gray_background ? static_cast<std::uint8_t>(rng() % 2) : 0;
    return scene;
}

SceneSpec dataset_scene(const DatasetConfig& config, std::size_t index) {
    std::mt19937_64 rng(splitmix64(config.seed ^ splitmix64(index)));
    return gen_scene(rng, config);
}

bool shape_covers(const ShapeSpec& s, std::size_t x, std::size_t y) {
    const double px = static_cast<double>(x) + 0.5 - s.cx;
    const double py = static_cast<double>(y) + 0.5 - s.cy;
    const double r = s.size;
    switch (s.kind) {
        case ShapeKind::circle: return px * px + py * py < r * r;
        case ShapeKind::square: return std::abs(px) < r && std::abs(py) < r;
        case ShapeKind::triangle: return py > -r && py < r && std::abs(px) < (py + r) / 2.0;
    }
    return false;
}

std::vector<int> label_map(const SceneSpec& scene, std::size_t size) {
    std::vector<int> labels(size * size, -1);
    // Paint back to front.
    std::vector<std::size_t> order(scene.shapes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scene.shapes[a].depth_rank > scene.shapes[b].depth_rank; });
    for (std::size_t i : order) {
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                if (shape_covers(scene.shapes[i], x, y)) labels[y * size + x] = static_cast<int>(i);
            }
        }
    }
    return labels;
}

Image render_scene(const SceneSpec& scene, std::size_t size) {
    const float bg = scene.background == 0 ? 0.0f : 0.2f;
    Image img(size, size, 3, bg);
    const std::vector<int> labels = label_map(scene, size);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] < 0) continue;
        const ShapeSpec& s = scene.shapes[static_cast<std::size_t>(labels[p])];
        const Rgb c = palette()[s.color];
        const float shade = depth_shade(s.depth_rank);
        img.pixels[p * 3 + 0] = c.r * shade;
        img.pixels[p * 3 + 1] = c.g * shade;
        img.pixels[p * 3 + 2] = c.b * shade;
    }
    return img;
}

// ---- captions ---------------------------------------------------------------

const std::vector<std::string>& caption_words() {
    static const std::vector<std::string> words{
        "red",    "green",  "blue",   "yellow", "cyan", "magenta", "white", "orange",     "circle", "square", "triangle",
        "small",  "medium", "large",  "left",   "center", "right", "top",   "middle",     "bottom", "near",   "mid",
        "far",    "and",    "on",     "black",  "gray", "background", "one", "two", "three", "shapes",
    };
    return words;
}

std::uint32_t caption_word_id(const std::string& word) {
    const auto& words = caption_words();
    const auto it = std::find(words.begin(), words.end(), word);
    if (it == words.end()) throw Error(ErrorCode::data, "word '" + word + "' is not in the caption vocabulary");
    return static_cast<std::uint32_t>(it - words.begin());
}

std::vector<std::uint32_t> caption(const SceneSpec& scene, std::size_t size) {
    static const char* counts[] = {"one", "two", "three"};
    static const char* depths[] = {"near", "mid", "far"};
    std::vector<std::uint32_t> ids;
    ids.push_back(caption_word_id(counts[scene.shapes.size() - 1]));
    ids.push_back(caption_word_id("shapes"));
    std::vector<const ShapeSpec*> order;
    for (const auto& s : scene.shapes) order.push_back(&s);
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->depth_rank < b->depth_rank; });
    const auto third = static_cast<std::int32_t>(size) / 3;
    auto bucket = [&](std::int32_t v, const char* lo, const char* mid, const char* hi) {
        return v < third ? lo : (v > static_cast<std::int32_t>(size) - third ? hi : mid);
    };
    for (std::size_t i = 0; i < order.size(); ++i) {
        const ShapeSpec& s = *order[i];
        if (i > 0) ids.push_back(caption_word_id("and"));
        ids.push_back(caption_word_id(s.size <= 5 ? "small" : (s.size <= 7 ? "medium" : "large")));
        ids.push_back(s.color);
        ids.push_back(caption_word_id(shape_name(s.kind)));
        ids.push_back(caption_word_id(bucket(s.cx, "left", "center", "right")));
        ids.push_back(caption_word_id(bucket(s.cy, "top", "middle", "bottom")));
        ids.push_back(caption_word_id(depths[std::min<std::size_t>(s.depth_rank, 2)]));
    }
    ids.push_back(caption_word_id("on"));
    ids.push_back(caption_word_id(scene.background == 0 ? "black" : "gray"));
    ids.push_back(caption_word_id("background"));
    return ids;
}

std::vector<std::uint32_t> tokenize_prompt(const std::string& prompt) {
    std::istringstream in(prompt);
    std::vector<std::uint32_t> ids;
    std::string word;
    while (in >> word) ids.push_back(caption_word_id(word));
    return ids;
}

std::string caption_text(const std::vector<std::uint32_t>& ids) {
    std::string out;
    for (auto id : ids) {
        if (!out.empty()) out += ' ';
        out += id < caption_words().size() ? caption_words()[id] : "<" + std::to_string(id) + ">";
    }
    return out;
}

// ---- conditions -------------------------------------------------------------

const char* condition_name(ConditionKind kind) {
    switch (kind) {
        case ConditionKind::edge: return "edge";
        case ConditionKind::depth: return "depth";
        case ConditionKind::semantic: return "semantic";
    }
    return "?";
}

ConditionKind parse_condition_kind(const std::string& name) {
    if (name == "edge") return ConditionKind::edge;
    if (name == "depth") return ConditionKind::depth;
    if (name == "semantic") return ConditionKind::semantic;
    throw Error(ErrorCode::config, "unknown condition kind '" + name + "' (edge, depth, semantic)");
}

namespace {

constexpr float kBackgroundBrightness = 0.45f;

float brightness(const Image& img, std::size_t y, std::size_t x) {
    float b = 0.0f;
    for (std::size_t c = 0; c < img.channels; ++c) b = std::max(b, img.at(y, x, c));
    return b;
}

Image edge_map(const Image& img) {
    const std::size_t h = img.height, w = img.width;
    Image out(h, w, 1);
    std::vector<float> mag(h * w, 0.0f);
    std::vector<std::uint8_t> dir(h * w, 0);  // gradient direction in 45 degree steps
    auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x, std::size_t c) {
        y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
        x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
        return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
    };
    float max_mag = 0.0f;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
            float m = 0.0f, best_gx = 0.0f, best_gy = 0.0f;
            for (std::size_t c = 0; c < img.channels; ++c) {
                const float gx = (px(yy - 1, xx + 1, c) + 2 * px(yy, xx + 1, c) + px(yy + 1, xx + 1, c)) -
                                 (px(yy - 1, xx - 1, c) + 2 * px(yy, xx - 1, c) + px(yy + 1, xx - 1, c));
                const float gy = (px(yy + 1, xx - 1, c) + 2 * px(yy + 1, xx, c) + px(yy + 1, xx + 1, c)) -
                                 (px(yy - 1, xx - 1, c) + 2 * px(yy - 1, xx, c) + px(yy - 1, xx + 1, c));
                const float mc = std::sqrt(gx * gx + gy * gy);
                if (mc > m) {
                    m = mc;
                    best_gx = gx;
                    best_gy = gy;
                }
            }
            mag[y * w + x] = m;
            double angle = std::atan2(best_gy, best_gx) * 4.0 / M_PI;  // in units of 45 degrees
            if (angle < 0) angle += 4.0;
            dir[y * w + x] = static_cast<std::uint8_t>(static_cast<int>(std::lround(angle)) % 4);
            max_mag = std::max(max_mag, m);
        }
    }
    if (max_mag == 0.0f) return out;
    const float threshold = 0.25f * max_mag;
    auto mag_at = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) return 0.0f;
        return mag[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    };
    static constexpr std::ptrdiff_t step_x[4] = {1, 1, 0, -1};
    static constexpr std::ptrdiff_t step_y[4] = {0, 1, 1, 1};
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const float m = mag[y * w + x];
            if (m < threshold) continue;
            // Non-maximum suppression across the edge; ties survive.
            const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
            const std::uint8_t d = dir[y * w + x];
            if (m < mag_at(yy + step_y[d], xx + step_x[d]) || m < mag_at(yy - step_y[d], xx - step_x[d])) continue;
            const float b = brightness(img, y, x);
            bool darker_neighbour = false;
            for (std::ptrdiff_t dy = -1; dy <= 1 && !darker_neighbour; ++dy) {
                for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                    const auto ny = static_cast<std::ptrdiff_t>(y) + dy, nx = static_cast<std::ptrdiff_t>(x) + dx;
                    if ((dy == 0 && dx == 0) || ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) ||
                        nx >= static_cast<std::ptrdiff_t>(w)) {
                        continue;
                    }
                    if (brightness(img, static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)) < b) {
                        darker_neighbour = true;
                        break;
                    }
                }
            }
            if (darker_neighbour) out.at(y, x) = 1.0f;
        }
    }
    return out;
}

}  // namespace

Image derive_condition(const Image& image, ConditionKind kind) {
    if (image.channels != 1 && image.channels != 3) {
        throw Error(ErrorCode::shape, "derive_condition expects 1 or 3 channels, got " + std::to_string(image.channels));
    }
    if (kind == ConditionKind::edge) return edge_map(image);
    Image out(image.height, image.width, 1);
    for (std::size_t y = 0; y < image.height; ++y) {
        for (std::size_t x = 0; x < image.width; ++x) {
            const float b = brightness(image, y, x);
            if (kind == ConditionKind::depth) {
                // Shades 1.0 / 0.8 / 0.6 map to 3/3, 2/3, 1/3.
                out.at(y, x) = std::clamp((b - 0.4f) / 0.6f, 0.0f, 1.0f);
                continue;
            }
            if (b < kBackgroundBrightness) continue;
            std::size_t best = 0;
            float best_d = INFINITY;
            for (std::size_t k = 0; k < kPaletteSize; ++k) {
                const Rgb c = palette()[k];
                const float ch[3] = {c.r, c.g, c.b};
                float d = 0.0f;
                for (std::size_t i = 0; i < 3; ++i) {
                    const float v = image.at(y, x, image.channels == 3 ? i : 0) / b - ch[i];
                    d += v * v;
                }
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            out.at(y, x) = static_cast<float>(best + 1) / 8.0f;
        }
    }
    return out;
}

Image derive_condition(const SceneSpec& scene, ConditionKind kind, std::size_t size) {
    if (kind == ConditionKind::edge) return edge_map(render_scene(scene, size));
    const std::vector<int> labels = label_map(scene, size);
    Image out(size, size, 1);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] < 0) continue;
        const ShapeSpec& s = scene.shapes[static_cast<std::size_t>(labels[p])];
        out.pixels[p] = kind == ConditionKind::depth ? depth_value(s.depth_rank) : static_cast<float>(s.color + 1) / 8.0f;
    }
    return out;
}

// ---- text serialization -----------------------------------------------------

std::string format_scene(const SceneSpec& scene) {
    std::ostringstream out;
    out << "bg=" << static_cast<int>(scene.background);
    for (const auto& s : scene.shapes) {
        out << ' ' << shape_name(s.kind) << ':' << static_cast<int>(s.color) << ':' << s.cx << ':' << s.cy << ':'
            << s.size << ':' << static_cast<int>(s.depth_rank);
    }
    return out.str();
}

SceneSpec parse_scene(const std::string& line) {
    auto fail = [&](const std::string& why) -> SceneSpec {
        throw Error(ErrorCode::format, "bad scene line '" + line + "': " + why);
    };
    std::istringstream in(line);
    std::string field;
    SceneSpec scene;
    if (!(in >> field) || field.rfind("bg=", 0) != 0) return fail("missing bg=");
    const int bg = std::stoi(field.substr(3));
    if (bg < 0 || bg > 1) return fail("background must be 0 or 1");
    scene.background = static_cast<std::uint8_t>(bg);
    while (in >> field) {
        std::replace(field.begin(), field.end(), ':', ' ');
        std::istringstream f(field);
        std::string kind;
        int color = 0, rank = 0;
        ShapeSpec s;
        if (!(f >> kind >> color >> s.cx >> s.cy >> s.size >> rank)) return fail("malformed shape");
        if (kind == "circle") s.kind = ShapeKind::circle;
        else if (kind == "square") s.kind = ShapeKind::square;
        else if (kind == "triangle") s.kind = ShapeKind::triangle;
        else return fail("unknown shape " + kind);
        if (color < 0 || color >= static_cast<int>(kPaletteSize) || rank < 0 || rank >= static_cast<int>(kMaxShapes)) {
            return fail("color or depth rank out of range");
        }
        s.color = static_cast<std::uint8_t>(color);
        s.depth_rank = static_cast<std::uint8_t>(rank);
        scene.shapes.push_back(s);
    }
    if (scene.shapes.empty() || scene.shapes.size() > kMaxShapes) return fail("needs 1 to 3 shapes");
    return scene;
}

}  // namespace ctxar
