#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ctxar/model.hpp"
#include "ctxar/tokenizer.hpp"

namespace testing {

// Largest |a - b| / max(1, |b|) over two equally sized ranges.
template <typename A, typename B>
double max_rel_diff(const A& a, const B& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = static_cast<double>(a[i]);
        const double y = static_cast<double>(b[i]);
        worst = std::max(worst, std::abs(x - y) / std::max(1.0, std::abs(y)));
    }
    return worst;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return worst;
}

inline ctxar::TokenGrid random_grid(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t k) {
    std::uniform_int_distribution<std::uint32_t> d(0, static_cast<std::uint32_t>(k - 1));
    ctxar::TokenGrid g(h, w);
    for (auto& id : g.ids) id = d(rng);
    return g;
}

inline std::vector<std::uint32_t> random_text(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
    std::uniform_int_distribution<std::uint32_t> d(0, static_cast<std::uint32_t>(vocab - 1));
    std::vector<std::uint32_t> t(n);
    for (auto& id : t) id = d(rng);
    return t;
}

// Small but complete configuration: three kinds, 2-D RoPE, LPE, SwiGLU.
inline ctxar::ModelConfig tiny_config(std::size_t grid = 4) {
    ctxar::ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.width = 16;
    c.codebook_size = 12;
    c.text_vocab = 10;
    c.grid_h = grid;
    c.grid_w = grid;
    return c;
}

// Replaces every parameter with N(0, stddev) so no table is degenerate.
template <typename T>
void randomize(ctxar::Transformer<T>& model, std::uint64_t seed, double stddev = 0.3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, stddev);
    for (auto* p : model.parameters()) {
        if (!p->trainable) continue;
        for (auto& x : p->value.storage()) x = static_cast<T>(d(rng));
    }
}

}  // namespace testing
