#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace ctxar {

// Interleaved (HWC) float image with values in [0,1]. Condition maps use one channel.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
        : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t ch = 0) { return pixels[(y * width + x) * channels + ch]; }
    float at(std::size_t y, std::size_t x, std::size_t ch = 0) const { return pixels[(y * width + x) * channels + ch]; }

    friend bool operator==(const Image&, const Image&) = default;
};

// Replicates a single-channel map to RGB; RGB input is returned unchanged.
Image to_rgb(const Image& image);

// Binary PPM (P6) for RGB and PGM (P5) for single channel, 8-bit.
void write_pnm(const std::string& path, const Image& image);
Image read_pnm(const std::string& path);

}  // namespace ctxar
