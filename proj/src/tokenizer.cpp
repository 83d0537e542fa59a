#include "ctxar/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "ctxar/binary_io.hpp"
#include "ctxar/error.hpp"

namespace ctxar {

namespace {

constexpr std::uint32_t kCodebookVersion = 1;

void check_geometry(const Image& image, PatchGeometry patch) {
    if (patch.height == 0 || patch.width == 0 || image.height % patch.height != 0 || image.width % patch.width != 0) {
        throw Error(ErrorCode::shape, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                          " is not divisible into " + std::to_string(patch.height) + "x" +
                                          std::to_string(patch.width) + " patches");
    }
    if (image.channels != 1 && image.channels != 3) {
        throw Error(ErrorCode::shape, "expected 1 or 3 channels, got " + std::to_string(image.channels));
    }
}

// Patch (gy,gx) as an RGB vector laid out (py, px, channel).
void extract_patch(const Image& image, PatchGeometry patch, std::size_t gy, std::size_t gx, float* out) {
    std::size_t i = 0;
    for (std::size_t py = 0; py < patch.height; ++py) {
        for (std::size_t px = 0; px < patch.width; ++px) {
            const std::size_t y = gy * patch.height + py;
            const std::size_t x = gx * patch.width + px;
            for (std::size_t ch = 0; ch < 3; ++ch) {
                out[i++] = image.at(y, x, image.channels == 1 ? 0 : ch);
            }
        }
    }
}

double squared_distance(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc;
}

std::size_t nearest(const float* patch, const Codebook& cb, double* best_out = nullptr, double* second_out = nullptr) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    double second_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < cb.size; ++k) {
        const double d = squared_distance(patch, cb.vector(k), cb.dim);
        if (d < best_d) {
            second_d = best_d;
            best_d = d;
            best = k;
        } else if (d < second_d) {
            second_d = d;
        }
    }
    if (best_out) *best_out = best_d;
    if (second_out) *second_out = second_d;
    return best;
}

}  // namespace

std::uint64_t Codebook::fingerprint() const {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(size));
    w.u32(static_cast<std::uint32_t>(dim));
    w.u32(static_cast<std::uint32_t>(patch.height));
    w.u32(static_cast<std::uint32_t>(patch.width));
    for (float v : vectors) w.f32(v);
    Fnv1a h;
    h.update(w.data());
    return h.digest();
}

Codebook fit_codebook(std::span<const Image> images, std::size_t k, PatchGeometry patch, std::uint64_t seed) {
    if (k == 0) throw Error(ErrorCode::config, "codebook size must be at least 1");
    const std::size_t dim = patch.height * patch.width * 3;

    std::map<std::vector<float>, std::uint64_t> counts;
    std::vector<float> buf(dim);
    for (const Image& img : images) {
        check_geometry(img, patch);
        for (std::size_t gy = 0; gy < img.height / patch.height; ++gy) {
            for (std::size_t gx = 0; gx < img.width / patch.width; ++gx) {
                extract_patch(img, patch, gy, gx, buf.data());
                counts[buf] += 1;
            }
        }
    }
    if (counts.size() < k) {
        throw Error(ErrorCode::data, "only " + std::to_string(counts.size()) + " distinct patches for K=" +
                                         std::to_string(k) + "; choose a smaller codebook size");
    }

    // Distinct patches in lexicographic order with multiplicities.
    const std::size_t n = counts.size();
    std::vector<float> points;
    std::vector<double> weights;
    points.reserve(n * dim);
    weights.reserve(n);
    for (const auto& [vec, count] : counts) {
        points.insert(points.end(), vec.begin(), vec.end());
        weights.push_back(static_cast<double>(count));
    }
    auto point = [&](std::size_t i) { return points.data() + i * dim; };

    // Farthest-point initialisation from a seeded first pick.
    std::mt19937_64 rng(seed);
    std::vector<float> centroids;
    centroids.reserve(k * dim);
    std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
    std::size_t pick = static_cast<std::size_t>(rng() % n);
    for (std::size_t c = 0; c < k; ++c) {
        centroids.insert(centroids.end(), point(pick), point(pick) + dim);
        const float* cen = centroids.data() + c * dim;
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            min_d[i] = std::min(min_d[i], squared_distance(point(i), cen, dim));
            if (min_d[i] > far_d) {
                far_d = min_d[i];
                far = i;
            }
        }
        pick = far;
    }

    std::vector<std::size_t> assign(n, 0);
    std::vector<double> sums(k * dim);
    std::vector<double> mass(k);
    for (std::size_t iter = 0; iter < kKMeansIterations; ++iter) {
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(mass.begin(), mass.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = squared_distance(point(i), centroids.data() + c * dim, dim);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
            mass[best] += weights[i];
            for (std::size_t j = 0; j < dim; ++j) sums[best * dim + j] += weights[i] * point(i)[j];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (mass[c] == 0.0) continue;  // empty cluster keeps its centroid
            for (std::size_t j = 0; j < dim; ++j) {
                centroids[c * dim + j] = static_cast<float>(sums[c * dim + j] / mass[c]);
            }
        }
    }

    std::vector<std::vector<float>> sorted(k);
    for (std::size_t c = 0; c < k; ++c) sorted[c].assign(centroids.begin() + c * dim, centroids.begin() + (c + 1) * dim);
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t c = 1; c < k; ++c) {
        if (sorted[c] == sorted[c - 1]) {
            throw Error(ErrorCode::data, "k-means produced duplicate centroids; choose a smaller codebook size");
        }
    }

    Codebook cb;
    cb.patch = patch;
    cb.size = k;
    cb.dim = dim;
    for (const auto& v : sorted) cb.vectors.insert(cb.vectors.end(), v.begin(), v.end());

    double err = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        nearest(point(i), cb, &d);
        err += weights[i] * d;
        total += weights[i];
    }
    cb.roundtrip_mse = static_cast<float>(err / (total * static_cast<double>(dim)));
    return cb;
}

TokenGrid encode(const Image& image, const Codebook& codebook) {
    check_geometry(image, codebook.patch);
    TokenGrid grid(image.height / codebook.patch.height, image.width / codebook.patch.width);
    std::vector<float> buf(codebook.dim);
    for (std::size_t gy = 0; gy < grid.h; ++gy) {
        for (std::size_t gx = 0; gx < grid.w; ++gx) {
            extract_patch(image, codebook.patch, gy, gx, buf.data());
            grid.ids[gy * grid.w + gx] = static_cast<std::uint32_t>(nearest(buf.data(), codebook));
        }
    }
    return grid;
}

Image decode(const TokenGrid& grid, const Codebook& codebook) {
    const PatchGeometry p = codebook.patch;
    Image img(grid.h * p.height, grid.w * p.width, 3);
    for (std::size_t gy = 0; gy < grid.h; ++gy) {
        for (std::size_t gx = 0; gx < grid.w; ++gx) {
            const std::uint32_t id = grid.ids[gy * grid.w + gx];
            if (id >= codebook.size) {
                throw Error(ErrorCode::range, "token id " + std::to_string(id) + " outside codebook of size " +
                                                  std::to_string(codebook.size));
            }
            const float* v = codebook.vector(id);
            std::size_t i = 0;
            for (std::size_t py = 0; py < p.height; ++py) {
                for (std::size_t px = 0; px < p.width; ++px) {
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        img.at(gy * p.height + py, gx * p.width + px, ch) = std::clamp(v[i++], 0.0f, 1.0f);
                    }
                }
            }
        }
    }
    return img;
}

std::vector<double> encode_stability_radius(const Image& image, const Codebook& codebook) {
    check_geometry(image, codebook.patch);
    const std::size_t gh = image.height / codebook.patch.height;
    const std::size_t gw = image.width / codebook.patch.width;
    std::vector<double> out(gh * gw);
    std::vector<float> buf(codebook.dim);
    for (std::size_t gy = 0; gy < gh; ++gy) {
        for (std::size_t gx = 0; gx < gw; ++gx) {
            extract_patch(image, codebook.patch, gy, gx, buf.data());
            double best = 0.0, second = 0.0;
            nearest(buf.data(), codebook, &best, &second);
            out[gy * gw + gx] = codebook.size < 2 ? std::numeric_limits<double>::infinity()
                                                  : 0.5 * (std::sqrt(second) - std::sqrt(best));
        }
    }
    return out;
}

double roundtrip_mse(std::span<const Image> images, const Codebook& codebook) {
    double err = 0.0;
    std::size_t count = 0;
    for (const Image& img : images) {
        const Image rgb = to_rgb(img);
        const Image rec = decode(encode(rgb, codebook), codebook);
        for (std::size_t i = 0; i < rgb.pixels.size(); ++i) {
            const double d = static_cast<double>(rgb.pixels[i]) - rec.pixels[i];
            err += d * d;
        }
        count += rgb.pixels.size();
    }
    return count == 0 ? 0.0 : err / static_cast<double>(count);
}

std::vector<std::uint8_t> serialize_codebook(const Codebook& cb) {
    ByteWriter w;
    w.magic("CTXC");
    w.u32(kCodebookVersion);
    w.u32(static_cast<std::uint32_t>(cb.size));
    w.u32(static_cast<std::uint32_t>(cb.dim));
    w.u32(static_cast<std::uint32_t>(cb.patch.height));
    w.u32(static_cast<std::uint32_t>(cb.patch.width));
    for (float v : cb.vectors) w.f32(v);
    w.f32(cb.roundtrip_mse);
    w.u64(cb.dataset_fingerprint);
    return w.data();
}

void save_codebook(const std::string& path, const Codebook& cb) { write_file(path, serialize_codebook(cb)); }

Codebook load_codebook(const std::string& path) {
    ByteReader r(read_file(path), path);
    r.expect_magic("CTXC");
    const std::uint32_t version = r.u32();
    if (version != kCodebookVersion) {
        throw Error(ErrorCode::format, path + ": unsupported codebook version " + std::to_string(version));
    }
    Codebook cb;
    cb.size = r.u32();
    cb.dim = r.u32();
    cb.patch.height = r.u32();
    cb.patch.width = r.u32();
    if (cb.size == 0 || cb.dim != cb.patch.height * cb.patch.width * 3) {
        throw Error(ErrorCode::format, path + ": inconsistent codebook header");
    }
    cb.vectors.resize(cb.size * cb.dim);
    for (float& v : cb.vectors) v = r.f32();
    cb.roundtrip_mse = r.f32();
    cb.dataset_fingerprint = r.u64();
    r.expect_end();
    return cb;
}

void save_token_grid(const std::string& path, const TokenGrid& grid) {
    ByteWriter w;
    w.magic("CTXG");
    w.u32(static_cast<std::uint32_t>(grid.h));
    w.u32(static_cast<std::uint32_t>(grid.w));
    for (std::uint32_t id : grid.ids) {
        if (id > 0xFFFF) throw Error(ErrorCode::range, "token id " + std::to_string(id) + " does not fit in u16");
        w.u16(static_cast<std::uint16_t>(id));
    }
    write_file(path, w.data());
}

TokenGrid load_token_grid(const std::string& path) {
    ByteReader r(read_file(path), path);
    r.expect_magic("CTXG");
    TokenGrid g;
    g.h = r.u32();
    g.w = r.u32();
    g.ids.resize(g.h * g.w);
    for (auto& id : g.ids) id = r.u16();
    r.expect_end();
    return g;
}

}  // namespace ctxar
