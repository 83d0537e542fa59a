#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>

#include "ctxar/config.hpp"
#include "ctxar/error.hpp"
#include "ctxar/experiment.hpp"
#include "ctxar/metrics.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace ctxar;
using namespace testing;

namespace {

std::uint8_t palette_index(const std::string& name) {
    for (std::size_t i = 0; i < kPaletteSize; ++i) {
        if (name == palette_name(i)) return static_cast<std::uint8_t>(i);
    }
    throw std::logic_error("no color " + name);
}

SceneSpec one_shape(ShapeKind kind, const std::string& color, std::int32_t cx, std::int32_t cy, std::int32_t size) {
    SceneSpec s;
    s.shapes.push_back({kind, palette_index(color), cx, cy, size, 0});
    return s;
}

bool contains(const std::vector<std::uint32_t>& ids, const std::string& word) {
    return std::find(ids.begin(), ids.end(), caption_word_id(word)) != ids.end();
}

// Shared small dataset and codebook for the round-trip checks.
struct Fixture {
    Dataset dataset;
    Codebook codebook;
    Fixture() {
        DatasetConfig dc;
        dc.scenes = 400;
        dataset = generate_dataset(dc);
        codebook = fit_dataset_codebook(dataset, 64, PatchGeometry{}, 7);
    }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("caption of one red circle names its color and shape") {
    const SceneSpec s = one_shape(ShapeKind::circle, "red", 16, 16, 6);
    const auto ids = caption(s, 32);
    CHECK(contains(ids, "red"));
    CHECK(contains(ids, "circle"));
    CHECK(ids == caption(s, 32));
    for (auto id : ids) CHECK(id < kCaptionVocab);
    CHECK(caption_words().size() <= kCaptionVocab);
    CHECK(tokenize_prompt("red circle") == std::vector<std::uint32_t>{caption_word_id("red"), caption_word_id("circle")});
    CHECK_THROWS_AS(tokenize_prompt("purple circle"), Error);
}

TEST_CASE("same seed gives identical scenes, images and captions") {
    DatasetConfig dc;
    dc.scenes = 50;
    dc.seed = 77;
    const Dataset a = generate_dataset(dc), b = generate_dataset(dc);
    CHECK(a.scenes == b.scenes);
    CHECK(dataset_hash(a) == dataset_hash(b));
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(render_scene(a.scenes[i], 32).pixels == render_scene(b.scenes[i], 32).pixels);
        CHECK(caption(a.scenes[i], 32) == caption(b.scenes[i], 32));
        CHECK(dataset_scene(dc, i) == a.scenes[i]);
    }
    dc.seed = 78;
    CHECK(dataset_hash(generate_dataset(dc)) != dataset_hash(a));
}

TEST_CASE("scene invariants: shapes inside the canvas, distinct ranks") {
    DatasetConfig dc;
    dc.scenes = 500;
    dc.gray_background = true;
    for (const SceneSpec& s : generate_dataset(dc).scenes) {
        REQUIRE(s.shapes.size() >= 1);
        REQUIRE(s.shapes.size() <= 3);
        std::vector<int> ranks;
        for (const ShapeSpec& sh : s.shapes) {
            CHECK(sh.cx - sh.size >= 0);
            CHECK(sh.cy - sh.size >= 0);
            CHECK(sh.cx + sh.size <= 32);
            CHECK(sh.cy + sh.size <= 32);
            ranks.push_back(sh.depth_rank);
        }
        std::sort(ranks.begin(), ranks.end());
        CHECK(std::adjacent_find(ranks.begin(), ranks.end()) == ranks.end());
        CHECK(parse_scene(format_scene(s)) == s);
    }
}

TEST_CASE("2000 scenes generate quickly with uniform shape kinds") {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset d = generate_dataset(DatasetConfig{});
    for (const SceneSpec& s : d.scenes) (void)render_scene(s, 32);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(seconds < 10.0);
    std::array<double, 3> count{};
    double total = 0;
    for (const SceneSpec& s : d.scenes) {
        for (const ShapeSpec& sh : s.shapes) {
            count[static_cast<std::size_t>(sh.kind)] += 1;
            total += 1;
        }
    }
    double chi2 = 0;
    for (double c : count) chi2 += (c - total / 3) * (c - total / 3) / (total / 3);
    CHECK(chi2 < 9.21);  // chi-square 0.99 quantile, 2 degrees of freedom
}

TEST_CASE("edge map of a blank image is empty") {
    for (float v : derive_condition(Image(32, 32, 3, 0.0f), ConditionKind::edge).pixels) CHECK(v == 0.0f);
    for (float v : derive_condition(Image(32, 32, 3, 0.2f), ConditionKind::edge).pixels) CHECK(v == 0.0f);
}

TEST_CASE("edge map of a filled square is its one-pixel boundary ring") {
    const SceneSpec s = one_shape(ShapeKind::square, "green", 15, 13, 6);
    auto covered = [&](int x, int y) {
        return x >= 0 && y >= 0 && x < 32 && y < 32 && shape_covers(s.shapes[0], x, y);
    };
    const Image from_render = derive_condition(render_scene(s, 32), ConditionKind::edge);
    const Image analytic = derive_condition(s, ConditionKind::edge, 32);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            const bool ring = covered(x, y) && (!covered(x - 1, y) || !covered(x + 1, y) || !covered(x, y - 1) ||
                                                !covered(x, y + 1));
            CHECK(from_render.at(y, x, 0) == (ring ? 1.0f : 0.0f));
            CHECK(analytic.at(y, x, 0) == from_render.at(y, x, 0));
        }
    }
}

TEST_CASE("analytic maps agree with maps derived from the render") {
    const Dataset& d = fixture().dataset;
    for (std::size_t i = 0; i < 60; ++i) {
        const Image img = render_scene(d.scenes[i], 32);
        for (ConditionKind k : {ConditionKind::edge, ConditionKind::depth, ConditionKind::semantic}) {
            // The depth estimator is continuous in brightness, so allow float rounding.
            CHECK(max_abs_diff(derive_condition(img, k).pixels, derive_condition(d.scenes[i], k, 32).pixels) <= 1e-6);
        }
    }
    CHECK_THROWS_AS(parse_condition_kind("hed"), Error);
}

TEST_CASE("depth: the nearer shape is strictly brighter") {
    SceneSpec s;
    s.shapes.push_back({ShapeKind::circle, palette_index("blue"), 10, 10, 6, 1});
    s.shapes.push_back({ShapeKind::square, palette_index("red"), 22, 22, 6, 0});
    const Image depth = derive_condition(s, ConditionKind::depth, 32);
    const float far = depth.at(10, 10, 0), near = depth.at(22, 22, 0);
    CHECK(near > far);
    CHECK(far > 0.0f);
    CHECK(depth.at(0, 31, 0) == 0.0f);
    CHECK(near == doctest::Approx(depth_value(0)));
    CHECK(far == doctest::Approx(depth_value(1)));
    const Image sem = derive_condition(s, ConditionKind::semantic, 32);
    CHECK(sem.at(22, 22, 0) == doctest::Approx((palette_index("red") + 1) / 8.0));
    CHECK(sem.at(0, 0, 0) == 0.0f);
}

TEST_CASE("edge_f1 examples") {
    const SceneSpec s = one_shape(ShapeKind::triangle, "yellow", 16, 16, 8);
    const Image img = render_scene(s, 32);
    const Image cond = derive_condition(s, ConditionKind::edge, 32);
    CHECK(edge_f1(img, cond) == 1.0);
    CHECK(edge_f1(Image(32, 32, 3, 0.0f), cond) == 0.0);
    CHECK(edge_map_f1(Image(32, 32, 1, 0.0f), Image(32, 32, 1, 0.0f)) == 1.0);
    // A one-pixel shift stays within the tolerance.
    Image shifted(32, 32, 1, 0.0f);
    for (std::size_t y = 0; y < 32; ++y) {
        for (std::size_t x = 1; x < 32; ++x) shifted.at(y, x, 0) = cond.at(y, x - 1, 0);
    }
    CHECK(edge_map_f1(shifted, cond) == 1.0);
    const double f = edge_f1(render_scene(one_shape(ShapeKind::circle, "red", 8, 8, 4), 32), cond);
    CHECK(f >= 0.0);
    CHECK(f < 0.5);
}

TEST_CASE("depth_mse closed form and symmetry") {
    const Dataset& d = fixture().dataset;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (std::size_t i = 0; i < 10; ++i) {
        const Image c = derive_condition(d.scenes[i], ConditionKind::depth, 32);
        double m = 0;
        for (float v : c.pixels) m += static_cast<double>(v) * v;
        m /= static_cast<double>(c.pixels.size());
        CHECK(depth_mse(Image(32, 32, 3, 0.0f), c) == doctest::Approx(m).epsilon(1e-9));
        Image a(32, 32, 1), b(32, 32, 1);
        for (auto& x : a.pixels) x = u(rng);
        for (auto& x : b.pixels) x = u(rng);
        CHECK(map_mse(a, b) == map_mse(b, a));
        CHECK(map_mse(a, a) == 0.0);
        CHECK(depth_mse(render_scene(d.scenes[i], 32), c) < 1e-12);
    }
}

TEST_CASE("ground-truth round trips through the codebook") {
    const Fixture& f = fixture();
    double f1 = 0, mse = 0, acc = 0, gt_mse = 0;
    const std::size_t n = f.dataset.scenes.size();
    for (const SceneSpec& s : f.dataset.scenes) {
        const SceneTargets t = scene_targets(s, 32, f.codebook);
        const Image decoded = decode(t.image_grid, f.codebook);
        f1 += edge_f1(decoded, t.maps[0]) / n;
        mse += depth_mse(decoded, t.maps[1]) / n;
        acc += semantic_accuracy(decoded, t.maps[2]) / n;
        gt_mse = std::max(gt_mse, depth_mse(t.image, t.maps[1]));
    }
    MESSAGE("round-trip edge F1 " << f1 << ", depth MSE " << mse << ", semantic accuracy " << acc);
    CHECK(f1 >= 0.95);
    CHECK(gt_mse <= f.codebook.roundtrip_mse);
    // Decoded images lose shading detail; this bounds the metric floor a model can reach.
    CHECK(mse < 0.05);
    CHECK(acc > 0.9);
}

TEST_CASE("dataset files round-trip and reject unknown header keys") {
    DatasetConfig dc;
    dc.scenes = 20;
    dc.seed = 5;
    dc.gray_background = true;
    const Dataset d = generate_dataset(dc);
    const auto path = (std::filesystem::temp_directory_path() / "ctxar_test_scenes.txt").string();
    save_dataset(path, d);
    const Dataset back = load_dataset(path);
    CHECK(back.scenes == d.scenes);
    CHECK(dataset_hash(back) == dataset_hash(d));

    std::string text;
    {
        std::ifstream in(path);
        text.assign(std::istreambuf_iterator<char>(in), {});
    }
    {
        std::ofstream out(path);
        out << "colour=7\n" << text;
    }
    CHECK_THROWS_AS(load_dataset(path), Error);
    std::filesystem::remove(path);
}

TEST_CASE("config files: parse, reject unknown keys, round-trip") {
    const RunConfig c = parse_config(
        "# desk run\n"
        "dataset.scenes = 300\n"
        "model.conditions=edge,semantic\n"
        "model.use_lpe=false\n"
        "train.lr=0.001\n"
        "sample.cfg_scale=2.5\n",
        "run.cfg");
    CHECK(c.dataset.scenes == 300);
    CHECK(c.model.condition_kinds == std::vector<std::string>{"edge", "semantic"});
    CHECK(!c.model.use_lpe);
    CHECK(c.train.lr == 1e-3);
    CHECK(c.eval.sampler.cfg_scale == 2.5);

    const RunConfig again = parse_config(format_config(c));
    CHECK(format_config(again) == format_config(c));
    for (const std::string& key : config_keys()) CHECK(format_config(c).find(key + "=") != std::string::npos);

    try {
        parse_config("dataset.scenes=10\nmodel.depth=3\n", "run.cfg");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::config);
        CHECK(std::string(e.what()).find("run.cfg:2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("model.conditions=edge,pose\n"), Error);
    CHECK_THROWS_AS(parse_config("train.lr=fast\n"), Error);
}

TEST_CASE("subset parsing and enumeration") {
    CHECK(parse_subset("").empty());
    CHECK(parse_subset("none").empty());
    CHECK(parse_subset("edge,depth") == std::vector<std::string>{"edge", "depth"});
    CHECK_THROWS_AS(parse_subset("edge,edge"), Error);
    CHECK_THROWS_AS(parse_subset("edge,"), Error);
    const auto all = all_subsets({"edge", "depth", "semantic"});
    REQUIRE(all.size() == 8);
    CHECK(all[0].empty());
    CHECK(all[7].size() == 3);
}

TEST_CASE("sign test and paired comparison") {
    CHECK(sign_test_p(10, 0) == doctest::Approx(1.0 / 1024));
    CHECK(sign_test_p(0, 0) == 1.0);
    CHECK(sign_test_p(5, 5) == doctest::Approx(638.0 / 1024));
    CHECK(sign_test_p(0, 7) == doctest::Approx(1.0));

    SubsetResult on, off;
    on.kinds = {"depth"};
    for (int i = 0; i < 12; ++i) {
        SampleMetrics a, b;
        a.depth_mse = i < 10 ? 0.01 : 0.05;
        b.depth_mse = i < 10 ? 0.04 : 0.05;  // two ties
        on.samples.push_back(a);
        off.samples.push_back(b);
    }
    const PairedComparison p = compare_paired("depth", on, off);
    CHECK(p.wins == 10);
    CHECK(p.losses == 0);
    CHECK(p.ties == 2);
    CHECK(p.p_value == doctest::Approx(1.0 / 1024));
    off.samples.pop_back();
    CHECK_THROWS_AS(compare_paired("depth", on, off), Error);
}

TEST_CASE("bench pair counts equal the closed forms") {
    BenchConfig bc;
    bc.repetitions = 2;
    bc.warmup = 0;
    bc.max_conditions = 3;
    ModelConfig mc = tiny_config();
    mc.condition_kinds = {"c0", "c1", "c2"};
    const BenchReport r = bench_attention(mc, bc);
    CHECK(r.rows.size() == 3 * 4);
    for (const BenchRow& row : r.rows) {
        CHECK(row.pairs == row.closed_form);
        CHECK(row.repetitions == 2);
        CHECK(row.mean_ms > 0.0);
    }
    CHECK(r.row(AttentionMode::dense_causal, 0).pairs == r.row(AttentionMode::ccpr_icbp, 0).pairs);
    CHECK(r.row(AttentionMode::dense_causal, 3).pairs > r.row(AttentionMode::ccpr_icbp, 3).pairs);
    const std::string text = format_bench(r);
    CHECK(text.find("mode,m,tokens,pairs,closed_form,repetitions,mean_ms,stddev_ms") != std::string::npos);
}

TEST_CASE("a small evaluation produces a well-formed report") {
    const Fixture& f = fixture();
    ModelConfig mc;
    mc.layers = 1;
    mc.width = 32;
    mc.heads = 2;
    Transformer<float> model(mc, 1);
    EvalConfig ec;
    ec.samples = 3;
    const auto scenes = eval_scenes(f.dataset.config, ec, f.codebook);
    REQUIRE(scenes.size() == 3);
    const MetricsReport r = evaluate(model, f.codebook, scenes, {{}, {"edge"}, {"edge", "depth"}}, ec);
    CHECK(r.subsets.size() == 3);
    CHECK(r.unconditional().kinds.empty());
    CHECK(r.find("edge+depth", 3.0).samples.size() == 3);
    for (const SubsetResult& s : r.subsets) {
        for (const SampleMetrics& m : s.samples) {
            CHECK(m.edge_f1 >= 0.0);
            CHECK(m.edge_f1 <= 1.0);
            CHECK(m.depth_mse >= 0.0);
            CHECK(m.semantic_accuracy >= 0.0);
            CHECK(m.semantic_accuracy <= 1.0);
        }
    }
    // Repeating a subset reproduces it exactly.
    const SubsetResult again = evaluate_subset(model, f.codebook, scenes, {"edge"}, ec);
    for (std::size_t i = 0; i < 3; ++i) CHECK(again.samples[i].edge_f1 == r.find("edge", 3.0).samples[i].edge_f1);
    const std::string text = format_report(r);
    CHECK(text.find("subset,cfg,samples,edge_f1,depth_mse,semantic_accuracy") != std::string::npos);
    CHECK(text.find("none@3") != std::string::npos);
}

}  // TEST_SUITE
