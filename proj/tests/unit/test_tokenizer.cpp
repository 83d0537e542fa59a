#include <filesystem>
#include <random>

#include "ctxar/binary_io.hpp"
#include "ctxar/error.hpp"
#include "ctxar/experiment.hpp"
#include "ctxar/tokenizer.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace ctxar;
using namespace testing;

namespace {

Image random_image(std::mt19937_64& rng, std::size_t size = 32) {
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Image img(size, size, 3);
    for (auto& x : img.pixels) x = d(rng);
    return img;
}

Image two_color_image(std::mt19937_64& rng, Rgb a, Rgb b) {
    Image img(32, 32, 3);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t py = 0; py < 8; ++py) {
        for (std::size_t px = 0; px < 8; ++px) {
            const Rgb c = coin(rng) ? a : b;
            for (std::size_t y = 0; y < 4; ++y) {
                for (std::size_t x = 0; x < 4; ++x) {
                    img.at(py * 4 + y, px * 4 + x, 0) = c.r;
                    img.at(py * 4 + y, px * 4 + x, 1) = c.g;
                    img.at(py * 4 + y, px * 4 + x, 2) = c.b;
                }
            }
        }
    }
    return img;
}

Codebook small_codebook(std::uint64_t seed, std::size_t k = 16) {
    std::mt19937_64 rng(seed);
    std::vector<Image> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(random_image(rng));
    return fit_codebook(imgs, k, PatchGeometry{}, seed);
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("ctxar_test_" + name);
}

}  // namespace

TEST_SUITE("tokenizer") {

TEST_CASE("all-black images with K=1 give a single zero vector") {
    std::vector<Image> imgs(3, Image(32, 32, 3, 0.0f));
    const Codebook cb = fit_codebook(imgs, 1, PatchGeometry{}, 0);
    REQUIRE(cb.size == 1);
    REQUIRE(cb.dim == 48);
    for (float v : cb.vectors) CHECK(v == 0.0f);
    CHECK(cb.roundtrip_mse == 0.0f);
}

TEST_CASE("two-color images with K=2 recover the two colors") {
    std::mt19937_64 rng(1);
    const Rgb a{0.9f, 0.1f, 0.2f}, b{0.1f, 0.3f, 0.8f};
    std::vector<Image> imgs;
    for (int i = 0; i < 5; ++i) imgs.push_back(two_color_image(rng, a, b));
    const Codebook cb = fit_codebook(imgs, 2, PatchGeometry{}, 3);
    // Sorted lexicographically, so the b-colored patch (r = 0.1) comes first.
    for (std::size_t j = 0; j < 16; ++j) {
        CHECK(cb.vector(0)[3 * j + 0] == doctest::Approx(b.r));
        CHECK(cb.vector(0)[3 * j + 2] == doctest::Approx(b.b));
        CHECK(cb.vector(1)[3 * j + 0] == doctest::Approx(a.r));
        CHECK(cb.vector(1)[3 * j + 1] == doctest::Approx(a.g));
    }
    CHECK(cb.roundtrip_mse < 1e-12);
}

TEST_CASE("k-means beats a random codebook on random images") {
    std::mt19937_64 rng(2);
    std::vector<Image> imgs;
    for (int i = 0; i < 8; ++i) imgs.push_back(random_image(rng));
    const Codebook fitted = fit_codebook(imgs, 64, PatchGeometry{}, 5);
    Codebook random = fitted;
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (auto& v : random.vectors) v = d(rng);
    CHECK(roundtrip_mse(imgs, fitted) <= roundtrip_mse(imgs, random));
}

TEST_CASE("codebook invariants: sorted, distinct, finite, recorded MSE") {
    std::mt19937_64 rng(3);
    std::vector<Image> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(random_image(rng));
    const Codebook cb = fit_codebook(imgs, 32, PatchGeometry{}, 9);
    for (std::size_t k = 1; k < cb.size; ++k) {
        const std::vector<float> prev(cb.vector(k - 1), cb.vector(k - 1) + cb.dim);
        const std::vector<float> cur(cb.vector(k), cb.vector(k) + cb.dim);
        CHECK(prev < cur);
    }
    for (float v : cb.vectors) CHECK(std::isfinite(v));
    CHECK(std::abs(cb.roundtrip_mse - roundtrip_mse(imgs, cb)) < 1e-6);

    const Codebook again = fit_codebook(imgs, 32, PatchGeometry{}, 9);
    CHECK(again.vectors == cb.vectors);
}

TEST_CASE("fewer distinct patches than K is an error suggesting a smaller K") {
    std::vector<Image> imgs(2, Image(32, 32, 3, 0.5f));
    try {
        fit_codebook(imgs, 4, PatchGeometry{}, 0);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("smaller") != std::string::npos);
    }
}

TEST_CASE("encode: tiled codebook vector, shapes and ties") {
    const Codebook cb = small_codebook(4);
    for (std::uint32_t j : {0u, 7u, 15u}) {
        const TokenGrid uniform(8, 8, j);
        const Image img = decode(uniform, cb);
        const TokenGrid g = encode(img, cb);
        CHECK(g.h == 8);
        CHECK(g.w == 8);
        CHECK(g.size() == 64);
        for (auto id : g.ids) CHECK(id == j);
    }
    // Equidistant from two identical-distance centroids: lowest index wins.
    Codebook two;
    two.size = 2;
    two.dim = 48;
    two.vectors.assign(96, 0.0f);
    for (std::size_t i = 48; i < 96; ++i) two.vectors[i] = 1.0f;
    const TokenGrid tie = encode(Image(4, 4, 3, 0.5f), two);
    CHECK(tie.ids == std::vector<std::uint32_t>{0});
}

TEST_CASE("encode(decode(grid)) is the identity on random grids") {
    const Codebook cb = small_codebook(5, 24);
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const TokenGrid g = random_grid(rng, 8, 8, cb.size);
        CHECK(encode(decode(g, cb), cb) == g);
    }
}

TEST_CASE("perturbations inside the stability radius never change a token") {
    const Codebook cb = small_codebook(7, 24);
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const Image img = random_image(rng);
        const TokenGrid base = encode(img, cb);
        const std::vector<double> radius = encode_stability_radius(img, cb);
        REQUIRE(radius.size() == 64);
        Image moved = img;
        std::normal_distribution<double> d(0.0, 1.0);
        for (std::size_t py = 0; py < 8; ++py) {
            for (std::size_t px = 0; px < 8; ++px) {
                // Random direction scaled to 0.99 of the radius (Euclidean over the patch).
                std::vector<double> dir(48);
                double norm = 0;
                for (auto& x : dir) {
                    x = d(rng);
                    norm += x * x;
                }
                norm = std::sqrt(norm);
                std::size_t i = 0;
                for (std::size_t y = 0; y < 4; ++y) {
                    for (std::size_t x = 0; x < 4; ++x) {
                        for (std::size_t c = 0; c < 3; ++c) {
                            moved.at(py * 4 + y, px * 4 + x, c) +=
                                static_cast<float>(0.99 * radius[py * 8 + px] * dir[i++] / norm);
                        }
                    }
                }
            }
        }
        CHECK(encode(moved, cb) == base);
    }
}

TEST_CASE("dimension and id errors") {
    const Codebook cb = small_codebook(9);
    CHECK_THROWS_AS(encode(Image(30, 32, 3), cb), Error);
    TokenGrid bad(8, 8, 0);
    bad.ids[5] = static_cast<std::uint32_t>(cb.size);
    CHECK_THROWS_AS(decode(bad, cb), Error);
}

TEST_CASE("decode with a zero codebook is black and clamps to [0,1]") {
    Codebook zero;
    zero.size = 1;
    zero.dim = 48;
    zero.vectors.assign(48, 0.0f);
    const Image img = decode(TokenGrid(8, 8, 0), zero);
    CHECK(img.height == 32);
    CHECK(img.channels == 3);
    for (float v : img.pixels) CHECK(v == 0.0f);

    Codebook wild = zero;
    for (std::size_t i = 0; i < 48; ++i) wild.vectors[i] = (i % 2) ? 1.7f : -0.4f;
    for (float v : decode(TokenGrid(1, 1, 0), wild).pixels) CHECK((v == 0.0f || v == 1.0f));
}

TEST_CASE("single-channel maps encode as their RGB replication") {
    const Codebook cb = small_codebook(10);
    std::mt19937_64 rng(11);
    Image gray(32, 32, 1);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (auto& x : gray.pixels) x = d(rng);
    CHECK(encode(gray, cb) == encode(to_rgb(gray), cb));
}

TEST_CASE("codebook and token grid files round-trip and reject bad magic") {
    const Codebook cb = small_codebook(12);
    const auto path = temp_path("cb.ctxc").string();
    save_codebook(path, cb);
    const auto bytes = read_file(path);
    REQUIRE(bytes.size() > 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CTXC");
    const Codebook back = load_codebook(path);
    CHECK(back.vectors == cb.vectors);
    CHECK(back.size == cb.size);
    CHECK(back.roundtrip_mse == cb.roundtrip_mse);
    CHECK(back.fingerprint() == cb.fingerprint());

    std::mt19937_64 rng(13);
    const TokenGrid g = random_grid(rng, 8, 8, 64);
    const auto gpath = temp_path("g.ctxg").string();
    save_token_grid(gpath, g);
    CHECK(load_token_grid(gpath) == g);
    const auto gbytes = read_file(gpath);
    CHECK(gbytes.size() == 4 + 4 + 4 + 64 * 2);

    auto broken = bytes;
    broken[0] = 'X';
    write_file(path, broken);
    CHECK_THROWS_AS(load_codebook(path), Error);
    std::filesystem::remove(path);
    std::filesystem::remove(gpath);
}

TEST_CASE("a different K changes the fingerprint") {
    std::mt19937_64 rng(14);
    std::vector<Image> imgs;
    for (int i = 0; i < 3; ++i) imgs.push_back(random_image(rng));
    CHECK(fit_codebook(imgs, 16, PatchGeometry{}, 1).fingerprint() !=
          fit_codebook(imgs, 17, PatchGeometry{}, 1).fingerprint());
}

TEST_CASE("dataset codebook: recorded round-trip MSE bounds the ground truth") {
    DatasetConfig dc;
    dc.scenes = 300;
    const Dataset d = generate_dataset(dc);
    const Codebook cb = fit_dataset_codebook(d, 64, PatchGeometry{}, 7);
    CHECK(cb.dataset_fingerprint == dataset_hash(d));
    const auto imgs = dataset_images(d);
    CHECK(roundtrip_mse(imgs, cb) <= cb.roundtrip_mse + 1e-6);
}

}  // TEST_SUITE
