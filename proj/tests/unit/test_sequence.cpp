#include <random>

#include "ctxar/error.hpp"
#include "ctxar/sequence.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace ctxar;
using namespace testing;

namespace {

SequenceConfig config8() { return SequenceConfig{3, 8, 8, 64}; }

Tensor<double> random_table(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor<double> t({rows, cols});
    for (auto& x : t.storage()) x = d(rng);
    return t;
}

std::vector<double> rotate_oracle(std::vector<double> x, std::size_t heads, GridPos pos, double base) {
    const std::size_t hd = x.size() / heads;
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < hd / 4; ++i) {
            const double theta = std::pow(base, -4.0 * i / static_cast<double>(hd));
            for (auto [off, ang] : {std::pair{0ul, pos.row * theta}, std::pair{hd / 2, pos.col * theta}}) {
                double& a = x[h * hd + off + 2 * i];
                double& b = x[h * hd + off + 2 * i + 1];
                const double na = a * std::cos(ang) - b * std::sin(ang);
                const double nb = a * std::sin(ang) + b * std::cos(ang);
                a = na;
                b = nb;
            }
        }
    }
    return x;
}

}  // namespace

TEST_SUITE("sequence") {

TEST_CASE("segment counts and lengths") {
    std::mt19937_64 rng(1);
    const TokenGrid img = random_grid(rng, 8, 8, 64);
    const std::vector<std::uint32_t> text{3, 4};

    const auto s0 = build_sequence({}, text, &img, config8());
    CHECK(s0.segments.size() == 2);
    CHECK(s0.length() == 66);

    std::vector<ConditionInput> conds{{0, random_grid(rng, 8, 8, 64)}, {1, random_grid(rng, 8, 8, 64)}};
    const auto s1 = build_sequence(conds, text, &img, config8());
    CHECK(s1.segments.size() == 4);
    CHECK(s1.length() == 194);
    CHECK(s1.segments[0].role == SegmentRole::cond(0));
    CHECK(s1.segments[1].role == SegmentRole::cond(1));
    CHECK(s1.segments[2].role == SegmentRole::text());
    CHECK(s1.segments[3].role == SegmentRole::image());

    // Empty text and omitted kinds produce no segment.
    const auto s2 = build_sequence(std::span(conds).subspan(1), {}, &img, config8());
    CHECK(s2.segments.size() == 2);
    CHECK(s2.length() == 128);
}

TEST_CASE("raster positions; text carries none") {
    std::mt19937_64 rng(2);
    std::vector<ConditionInput> conds{{2, random_grid(rng, 8, 8, 64)}};
    const TokenGrid img = random_grid(rng, 8, 8, 64);
    const std::vector<std::uint32_t> text{1, 2, 3};
    const auto seq = build_sequence(conds, text, &img, config8());
    CHECK(seq.segments[0].position(9) == GridPos{1, 1});
    const auto pos = seq.positions();
    REQUIRE(pos.size() == 64 + 3 + 64);
    CHECK(pos[9] == GridPos{1, 1});
    for (std::size_t i = 64; i < 67; ++i) CHECK(!pos[i].has_value());
    for (std::size_t t = 0; t < 64; ++t) CHECK(pos[67 + t] == GridPos{static_cast<std::uint32_t>(t / 8), static_cast<std::uint32_t>(t % 8)});
}

TEST_CASE("image segment is teacher-forced from the start token") {
    std::mt19937_64 rng(3);
    const TokenGrid img = random_grid(rng, 8, 8, 64);
    const auto seq = build_sequence({}, {}, &img, config8());
    const Segment& s = *seq.find(SegmentRole::image());
    CHECK(s.ids[0] == 64);
    for (std::size_t t = 1; t < 64; ++t) CHECK(s.ids[t] == img.ids[t - 1]);
    CHECK(seq.image_targets == img.ids);
}

TEST_CASE("canonical order does not depend on input order") {
    std::mt19937_64 rng(4);
    const TokenGrid a = random_grid(rng, 8, 8, 64), b = random_grid(rng, 8, 8, 64), c = random_grid(rng, 8, 8, 64);
    std::vector<ConditionInput> fwd{{0, a}, {1, b}, {2, c}};
    std::vector<ConditionInput> rev{{2, c}, {0, a}, {1, b}};
    const auto s1 = build_sequence(fwd, {}, nullptr, config8());
    const auto s2 = build_sequence(rev, {}, nullptr, config8());
    REQUIRE(s1.segments.size() == s2.segments.size());
    for (std::size_t i = 0; i < s1.segments.size(); ++i) {
        CHECK(s1.segments[i].role == s2.segments[i].role);
        CHECK(s1.segments[i].ids == s2.segments[i].ids);
    }
}

TEST_CASE("build_sequence errors") {
    std::mt19937_64 rng(5);
    std::vector<ConditionInput> wrong{{0, random_grid(rng, 4, 8, 64)}};
    CHECK_THROWS_AS(build_sequence(wrong, {}, nullptr, config8()), Error);
    const TokenGrid small = random_grid(rng, 4, 4, 64);
    CHECK_THROWS_AS(build_sequence({}, {}, &small, config8()), Error);
    std::vector<ConditionInput> dup{{1, random_grid(rng, 8, 8, 64)}, {1, random_grid(rng, 8, 8, 64)}};
    CHECK_THROWS_AS(build_sequence(dup, {}, nullptr, config8()), Error);
    std::vector<ConditionInput> unknown{{3, random_grid(rng, 8, 8, 64)}};
    CHECK_THROWS_AS(build_sequence(unknown, {}, nullptr, config8()), Error);
}

TEST_CASE("embed uses the right table per role and matches a gather oracle") {
    std::mt19937_64 rng(6);
    const auto ti = random_table(rng, 65, 8);
    const auto tc0 = random_table(rng, 65, 8), tc1 = random_table(rng, 65, 8), tc2 = random_table(rng, 65, 8);
    const auto tt = random_table(rng, 32, 8);
    std::vector<ConditionInput> conds{{1, random_grid(rng, 8, 8, 64)}};
    const TokenGrid img = random_grid(rng, 8, 8, 64);
    const std::vector<std::uint32_t> text{31, 0, 7};
    const auto seq = build_sequence(conds, text, &img, config8());

    Graph<double> g(false);
    EmbeddingVars<double> tables{g.constant(ti), {g.constant(tc0), g.constant(tc1), g.constant(tc2)}, g.constant(tt)};
    const auto out = embed(seq, tables).value();
    REQUIRE(out.shape() == Shape{131, 8});
    std::size_t row = 0;
    for (const Segment& s : seq.segments) {
        const Tensor<double>& table = s.role.kind == RoleKind::image  ? ti
                                      : s.role.kind == RoleKind::text ? tt
                                                                      : tc1;
        for (std::uint32_t id : s.ids) {
            for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(row, c) == table.at(id, c));
            ++row;
        }
    }

    Graph<double> z(false);
    EmbeddingVars<double> zeros{z.constant(Tensor<double>({65, 8})),
                                {z.constant(Tensor<double>({65, 8})), z.constant(Tensor<double>({65, 8})),
                                 z.constant(Tensor<double>({65, 8}))},
                                z.constant(Tensor<double>({32, 8}))};
    for (double x : embed(seq, zeros).value().storage()) CHECK(x == 0.0);
}

TEST_CASE("embed names the segment of an out-of-range id") {
    std::mt19937_64 rng(7);
    Graph<double> g(false);
    EmbeddingVars<double> tables{g.constant(random_table(rng, 65, 4)), {g.constant(random_table(rng, 65, 4))},
                                 g.constant(random_table(rng, 5, 4))};
    const std::vector<std::uint32_t> text{1, 9};
    const auto seq = build_sequence({}, text, nullptr, SequenceConfig{1, 8, 8, 64});
    try {
        embed(seq, tables);
        FAIL("expected a range error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::range);
        CHECK(std::string(e.what()).find("text") != std::string::npos);
    }
}

TEST_CASE("rope2d: origin is the identity and matches the rotation oracle") {
    const std::size_t heads = 3, hd = 8;
    Rope2d<double> rope(hd, 8, 8, 10000.0);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> x(heads * hd);
    for (auto& v : x) v = d(rng);
    auto y = x;
    rope.apply(y.data(), heads, GridPos{0, 0});
    CHECK(y == x);
    for (GridPos p : {GridPos{1, 0}, GridPos{0, 5}, GridPos{7, 3}}) {
        auto z = x;
        rope.apply(z.data(), heads, p);
        CHECK(max_abs_diff(z, rotate_oracle(x, heads, p, 10000.0)) < 1e-12);
        rope.apply(z.data(), heads, p, true);
        CHECK(max_abs_diff(z, x) < 1e-12);
    }
    CHECK_THROWS_AS(Rope2d<double>(6, 8, 8, 10000.0), Error);
}

TEST_CASE("rope2d scores depend only on the relative offset") {
    const std::size_t hd = 16;
    Rope2d<double> rope(hd, 16, 16, 10000.0);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> d(0.0, 1.0);
    std::uniform_int_distribution<std::uint32_t> cell(0, 7), shift(0, 8);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> q(hd), k(hd);
        for (auto& v : q) v = d(rng);
        for (auto& v : k) v = d(rng);
        const GridPos p1{cell(rng), cell(rng)}, p2{cell(rng), cell(rng)};
        const std::uint32_t dr = shift(rng), dc = shift(rng);
        auto dot_at = [&](GridPos a, GridPos b) {
            auto qa = q, kb = k;
            rope.apply(qa.data(), 1, a);
            rope.apply(kb.data(), 1, b);
            double s = 0;
            for (std::size_t i = 0; i < hd; ++i) s += qa[i] * kb[i];
            return s;
        };
        const double base = dot_at(p1, p2);
        const double moved = dot_at(GridPos{p1.row + dr, p1.col + dc}, GridPos{p2.row + dr, p2.col + dc});
        CHECK(std::abs(base - moved) < 1e-6);
    }
}

TEST_CASE("condition and image tokens at the same cell get the same rotation") {
    std::mt19937_64 rng(10);
    std::vector<ConditionInput> conds{{0, random_grid(rng, 8, 8, 64)}, {2, random_grid(rng, 8, 8, 64)}};
    const TokenGrid img = random_grid(rng, 8, 8, 64);
    const std::vector<std::uint32_t> text{1, 2};
    const auto seq = build_sequence(conds, text, &img, config8());
    const auto pos = seq.positions();
    const std::size_t img_off = seq.offset_of(SegmentRole::image());
    for (std::size_t t = 0; t < 64; ++t) {
        for (std::size_t base : {std::size_t{0}, std::size_t{64}}) {
            REQUIRE(pos[base + t].has_value());
            CHECK(Rope2d<double>::angles(*pos[base + t], 16, 10000.0) ==
                  Rope2d<double>::angles(*pos[img_off + t], 16, 10000.0));
        }
    }

    // Through the differentiable op: identical inputs at identical cells rotate identically.
    const std::size_t heads = 2, hd = 8;
    Rope2d<double> rope(hd, 8, 8, 10000.0);
    Tensor<double> x({seq.length(), heads * hd});
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> proto(heads * hd);
    for (auto& v : proto) v = d(rng);
    for (std::size_t r = 0; r < seq.length(); ++r) std::copy(proto.begin(), proto.end(), x.row(r).begin());
    Graph<double> g(false);
    const auto y = rope2d(g.constant(x), std::span(pos), heads, rope).value();
    for (std::size_t t = 0; t < 64; ++t) {
        for (std::size_t c = 0; c < heads * hd; ++c) {
            CHECK(y.at(t, c) == y.at(img_off + t, c));
            CHECK(y.at(64 + t, c) == y.at(img_off + t, c));
        }
    }
    for (std::size_t r = 128; r < 130; ++r) {
        for (std::size_t c = 0; c < heads * hd; ++c) CHECK(y.at(r, c) == proto[c]);
    }
}

TEST_CASE("apply_lpe: zero is a no-op, offsets broadcast to every head, roles are checked") {
    const std::size_t heads = 2, hd = 4, d = heads * hd, n = 16;
    std::mt19937_64 rng(11);
    Tensor<double> rows({n, d});
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : rows.storage()) v = nd(rng);

    auto copy = rows;
    const RowSegment seg{0, n, SegmentRole::cond(1), 0};
    apply_lpe_rows(copy.data(), d, heads, seg, Tensor<double>({n, hd}));
    CHECK(copy == rows);

    const auto p = random_table(rng, n, hd);
    copy = rows;
    apply_lpe_rows(copy.data(), d, heads, seg, p);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t c = 0; c < hd; ++c) CHECK(copy.at(r, h * hd + c) == rows.at(r, h * hd + c) + p.at(r, c));
        }
    }

    const RowSegment text{0, 2, SegmentRole::text(), 0};
    CHECK_THROWS_AS(apply_lpe_rows(copy.data(), d, heads, text, p), Error);
    const RowSegment image{0, 2, SegmentRole::image(), 0};
    CHECK_THROWS_AS(apply_lpe_rows(copy.data(), d, heads, image, p), Error);
}

TEST_CASE("distinct offsets make identical condition grids distinguishable") {
    const std::size_t heads = 2, hd = 4, d = heads * hd, n = 16;
    std::mt19937_64 rng(12);
    Tensor<double> x({2 * n, d});
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) x.at(r, c) = x.at(n + r, c) = nd(rng);
    }
    const std::vector<RowSegment> segs{{0, n, SegmentRole::cond(0), 0}, {n, n, SegmentRole::cond(1), 0}};
    Graph<double> g(false);
    std::vector<Var<double>> same{g.constant(Tensor<double>({n, hd})), g.constant(Tensor<double>({n, hd}))};
    const auto y0 = apply_lpe(g.constant(x), std::span<const RowSegment>(segs), std::span<const Var<double>>(same), heads).value();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) CHECK(y0.at(r, c) == y0.at(n + r, c));
    }
    std::vector<Var<double>> distinct{g.constant(random_table(rng, n, hd)), g.constant(random_table(rng, n, hd))};
    const auto y1 = apply_lpe(g.constant(x), std::span<const RowSegment>(segs), std::span<const Var<double>>(distinct), heads).value();
    for (std::size_t r = 0; r < n; ++r) CHECK(y1.at(r, 0) != y1.at(n + r, 0));
}

}  // TEST_SUITE
