#include "ctxar/metrics.hpp"

#include <cmath>
#include <string>

#include "ctxar/error.hpp"
#include "ctxar/scene.hpp"

namespace ctxar {

namespace {

void same_map_dims(const Image& a, const Image& b, const char* what) {
    if (a.height != b.height || a.width != b.width || a.channels != 1 || b.channels != 1) {
        throw Error(ErrorCode::shape, std::string(what) + ": maps must be single-channel with equal dims");
    }
}

// Pixels of `a` with a pixel of `b` in their 3x3 neighbourhood.
std::size_t matched(const Image& a, const Image& b) {
    std::size_t n = 0;
    for (std::size_t y = 0; y < a.height; ++y) {
        for (std::size_t x = 0; x < a.width; ++x) {
            if (a.at(y, x) < 0.5f) continue;
            bool hit = false;
            for (std::size_t ny = y == 0 ? 0 : y - 1; ny <= std::min(y + 1, a.height - 1) && !hit; ++ny) {
                for (std::size_t nx = x == 0 ? 0 : x - 1; nx <= std::min(x + 1, a.width - 1); ++nx) {
                    if (b.at(ny, nx) >= 0.5f) {
                        hit = true;
                        break;
                    }
                }
            }
            n += hit;
        }
    }
    return n;
}

std::size_t count_on(const Image& a) {
    std::size_t n = 0;
    for (float v : a.pixels) n += v >= 0.5f;
    return n;
}

}  // namespace

double edge_map_f1(const Image& predicted, const Image& reference) {
    same_map_dims(predicted, reference, "edge_f1");
    const std::size_t np = count_on(predicted);
    const std::size_t nr = count_on(reference);
    if (np == 0 && nr == 0) return 1.0;
    if (np == 0 || nr == 0) return 0.0;
    const double precision = static_cast<double>(matched(predicted, reference)) / static_cast<double>(np);
    const double recall = static_cast<double>(matched(reference, predicted)) / static_cast<double>(nr);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

double edge_f1(const Image& generated, const Image& edge_condition) {
    return edge_map_f1(derive_condition(generated, ConditionKind::edge), edge_condition);
}

double map_mse(const Image& a, const Image& b) {
    same_map_dims(a, b, "map_mse");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
        sum += d * d;
    }
    return a.pixels.empty() ? 0.0 : sum / static_cast<double>(a.pixels.size());
}

double depth_mse(const Image& generated, const Image& depth_condition) {
    return map_mse(derive_condition(generated, ConditionKind::depth), depth_condition);
}

double semantic_accuracy(const Image& generated, const Image& semantic_condition) {
    const Image derived = derive_condition(generated, ConditionKind::semantic);
    same_map_dims(derived, semantic_condition, "semantic_accuracy");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < derived.pixels.size(); ++i) {
        hits += std::lround(derived.pixels[i] * 8.0f) == std::lround(semantic_condition.pixels[i] * 8.0f);
    }
    return static_cast<double>(hits) / static_cast<double>(derived.pixels.size());
}

double sign_test_p(std::size_t wins, std::size_t losses) {
    const std::size_t n = wins + losses;
    if (n == 0) return 1.0;
    double p = 0.0;
    for (std::size_t k = wins; k <= n; ++k) {
        const double log_term = std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
                                std::lgamma(static_cast<double>(n - k) + 1) - static_cast<double>(n) * std::log(2.0);
        p += std::exp(log_term);
    }
    return std::min(p, 1.0);
}

}  // namespace ctxar
