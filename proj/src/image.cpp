#include "ctxar/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ctxar/error.hpp"

namespace ctxar {

Image to_rgb(const Image& image) {
    if (image.channels == 3) return image;
    if (image.channels != 1) {
        throw Error(ErrorCode::shape, "to_rgb expects 1 or 3 channels, got " + std::to_string(image.channels));
    }
    Image out(image.height, image.width, 3);
    for (std::size_t i = 0; i < image.height * image.width; ++i) {
        out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = image.pixels[i];
    }
    return out;
}

void write_pnm(const std::string& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw Error(ErrorCode::shape, "PNM output needs 1 or 3 channels");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot open " + path + " for writing");
    out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
    std::string bytes(image.pixels.size(), '\0');
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
        bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::io, "write failed for " + path);
}

Image read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    in.get();
    if ((magic != "P6" && magic != "P5") || maxval != 255 || !in) {
        throw Error(ErrorCode::format, path + ": only 8-bit binary P5/P6 images are supported");
    }
    const std::size_t c = magic == "P6" ? 3 : 1;
    Image img(h, w, c);
    std::string bytes(h * w * c, '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw Error(ErrorCode::format, path + ": truncated image");
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.0f;
    }
    return img;
}

}  // namespace ctxar
