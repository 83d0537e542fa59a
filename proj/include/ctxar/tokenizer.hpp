#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxar/image.hpp"

namespace ctxar {

// h x w grid of codebook indices in raster (row-major) order.
struct TokenGrid {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<std::uint32_t> ids;

    TokenGrid() = default;
    TokenGrid(std::size_t rows, std::size_t cols, std::uint32_t fill = 0) : h(rows), w(cols), ids(rows * cols, fill) {}

    std::size_t size() const noexcept { return ids.size(); }
    std::uint32_t at(std::size_t r, std::size_t c) const { return ids[r * w + c]; }

    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

struct PatchGeometry {
    std::size_t height = 4;
    std::size_t width = 4;
};

// Patch vector quantizer shared by images and (channel-replicated) condition maps.
struct Codebook {
    PatchGeometry patch;
    std::size_t size = 0;    // K
    std::size_t dim = 0;     // patch.height * patch.width * 3
    std::vector<float> vectors;  // K x dim, sorted lexicographically
    float roundtrip_mse = 0.0f;  // quantization MSE on the fit data
    std::uint64_t dataset_fingerprint = 0;

    const float* vector(std::size_t k) const { return vectors.data() + k * dim; }

    // Hash of geometry and vectors; checkpoints record it to detect mismatches.
    std::uint64_t fingerprint() const;
};

constexpr std::size_t kKMeansIterations = 25;

// Weighted k-means over the distinct patches of `images` (1-channel images are
// replicated to RGB). Seeded farthest-point initialisation, fixed iteration count.
Codebook fit_codebook(std::span<const Image> images, std::size_t k, PatchGeometry patch, std::uint64_t seed);

// Nearest codebook entry per patch; ties go to the lowest index.
TokenGrid encode(const Image& image, const Codebook& codebook);

// Replaces each cell with its codebook patch, clamped to [0,1]. Always RGB.
Image decode(const TokenGrid& grid, const Codebook& codebook);

// Half the gap between the nearest and second-nearest centroid distance
// (Euclidean) per patch. Perturbations of a patch smaller than this radius
// cannot change its token.
std::vector<double> encode_stability_radius(const Image& image, const Codebook& codebook);

// Mean squared pixel error of decode(encode(image)) against image.
double roundtrip_mse(std::span<const Image> images, const Codebook& codebook);

void save_codebook(const std::string& path, const Codebook& codebook);
Codebook load_codebook(const std::string& path);
std::vector<std::uint8_t> serialize_codebook(const Codebook& codebook);

void save_token_grid(const std::string& path, const TokenGrid& grid);
TokenGrid load_token_grid(const std::string& path);

}  // namespace ctxar
