#include <filesystem>
#include <random>

#include "ctxar/binary_io.hpp"
#include "ctxar/error.hpp"
#include "ctxar/training.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace ctxar;
using namespace testing;

namespace {

std::vector<TrainingExample> random_examples(std::mt19937_64& rng, const ModelConfig& c, std::size_t n) {
    std::vector<TrainingExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        TrainingExample ex;
        for (std::size_t k = 0; k < c.kinds(); ++k) {
            ex.conditions.push_back({static_cast<std::uint8_t>(k), random_grid(rng, c.grid_h, c.grid_w, c.codebook_size)});
        }
        ex.text = random_text(rng, 3, c.text_vocab);
        ex.image = random_grid(rng, c.grid_h, c.grid_w, c.codebook_size);
        out.push_back(std::move(ex));
    }
    return out;
}

template <typename T>
Tensor<T> logits_of(Transformer<T>& model, const UnifiedSequence& seq, const ActiveSet& active = ActiveSet::all()) {
    Graph<T> g(false);
    const VisibilityMask mask = build_mask(SequenceLayout::of(seq), model.config().attention, active);
    return model.forward(g, std::span(&seq, 1), std::span(&mask, 1)).value();
}

// Straight-line forward of the whole network with plain loops, in double.
std::vector<double> oracle_forward(const Transformer<double>& model, const UnifiedSequence& seq,
                                   const VisibilityMask& mask) {
    const ModelConfig& c = model.config();
    const std::size_t d = c.width, hd = c.head_dim(), H = c.heads, n = seq.length(), f = c.ffn();
    const double eps = c.norm_eps;
    using Mat = std::vector<double>;
    auto matmul = [](const Mat& a, const Tensor<double>& w, std::size_t rows) {
        const std::size_t k = w.dim(0), m = w.dim(1);
        Mat out(rows * m, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0;
                for (std::size_t i = 0; i < k; ++i) s += a[r * k + i] * w.at(i, j);
                out[r * m + j] = s;
            }
        }
        return out;
    };
    auto rmsnorm = [&](const Mat& x, const Tensor<double>& w) {
        Mat y(x.size());
        for (std::size_t r = 0; r < n; ++r) {
            double ss = 0;
            for (std::size_t i = 0; i < d; ++i) ss += x[r * d + i] * x[r * d + i];
            const double inv = 1.0 / std::sqrt(ss / d + eps);
            for (std::size_t i = 0; i < d; ++i) y[r * d + i] = x[r * d + i] * inv * w[i];
        }
        return y;
    };
    const auto pos = seq.positions();
    auto rotate = [&](Mat& x) {
        for (std::size_t r = 0; r < n; ++r) {
            if (!pos[r]) continue;
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t i = 0; i < hd / 4; ++i) {
                    const double theta = std::pow(c.rope_base, -4.0 * i / static_cast<double>(hd));
                    for (auto [off, ang] : {std::pair{0ul, pos[r]->row * theta}, std::pair{hd / 2, pos[r]->col * theta}}) {
                        double& a = x[r * d + h * hd + off + 2 * i];
                        double& b = x[r * d + h * hd + off + 2 * i + 1];
                        const double na = a * std::cos(ang) - b * std::sin(ang);
                        b = a * std::sin(ang) + b * std::cos(ang);
                        a = na;
                    }
                }
            }
        }
    };
    std::vector<int> cond_kind(n, -1);
    std::vector<std::size_t> cell(n, 0);
    Mat x(n * d);
    std::size_t row = 0;
    for (const Segment& s : seq.segments) {
        const Tensor<double>& table = s.role.kind == RoleKind::image  ? model.image_embedding().value
                                      : s.role.kind == RoleKind::text ? model.text_embedding().value
                                                                      : model.condition_embedding(s.role.condition).value;
        for (std::size_t i = 0; i < s.length(); ++i, ++row) {
            for (std::size_t j = 0; j < d; ++j) x[row * d + j] = table.at(s.ids[i], j);
            if (s.role.is_condition()) {
                cond_kind[row] = s.role.condition;
                cell[row] = i;
            }
        }
    }
    const ExplicitMask e = mask.expand();
    for (const auto& L : model.layers()) {
        Mat h = rmsnorm(x, L.attn_norm.value);
        Mat q = matmul(h, L.wq.value, n), k = matmul(h, L.wk.value, n), v = matmul(h, L.wv.value, n);
        rotate(q);
        rotate(k);
        if (c.use_lpe) {
            for (std::size_t r = 0; r < n; ++r) {
                if (cond_kind[r] < 0) continue;
                const Tensor<double>& p = model.lpe(static_cast<std::size_t>(cond_kind[r])).value;
                for (std::size_t hh = 0; hh < H; ++hh) {
                    for (std::size_t j = 0; j < hd; ++j) {
                        q[r * d + hh * hd + j] += p.at(cell[r], j);
                        k[r * d + hh * hd + j] += p.at(cell[r], j);
                    }
                }
            }
        }
        Mat a(n * d, 0.0);
        for (std::size_t hh = 0; hh < H; ++hh) {
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> s(n, 0.0);
                double mx = -1e300;
                for (std::size_t j = 0; j < n; ++j) {
                    if (!e.visible(i, j)) continue;
                    for (std::size_t t = 0; t < hd; ++t) s[j] += q[i * d + hh * hd + t] * k[j * d + hh * hd + t];
                    s[j] /= std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, s[j]);
                }
                double z = 0;
                for (std::size_t j = 0; j < n; ++j) z += e.visible(i, j) ? std::exp(s[j] - mx) : 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    if (!e.visible(i, j)) continue;
                    const double p = std::exp(s[j] - mx) / z;
                    for (std::size_t t = 0; t < hd; ++t) a[i * d + hh * hd + t] += p * v[j * d + hh * hd + t];
                }
            }
        }
        const Mat o = matmul(a, L.wo.value, n);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];
        const Mat h2 = rmsnorm(x, L.mlp_norm.value);
        Mat g = matmul(h2, L.w_gate.value, n);
        const Mat u = matmul(h2, L.w_up.value, n);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
        (void)f;
        const Mat down = matmul(g, L.w_down.value, n);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += down[i];
    }
    return matmul(rmsnorm(x, model.final_norm().value), model.head().value, n);
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("ctxar_test_" + name);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config sizing and validation") {
    ModelConfig c;
    CHECK(c.ffn() == 352);
    CHECK(c.head_dim() == 32);
    CHECK(c.kind_index("depth") == 1);
    try {
        (void)c.kind_index("pose");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("edge,depth,semantic") != std::string::npos);
    }
    ModelConfig bad = c;
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = c;
    bad.width = 24;
    bad.heads = 4;  // head_dim 6
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("condition tables start as copies of the image table") {
    Transformer<float> model(ModelConfig{}, 3);
    for (std::size_t k = 0; k < 3; ++k) CHECK(model.condition_embedding(k).value == model.image_embedding().value);
}

TEST_CASE("zero head gives uniform logits and loss ln K") {
    Transformer<double> model(tiny_config(), 1);
    model.head().value.fill(0.0);
    std::mt19937_64 rng(2);
    const TokenGrid img = random_grid(rng, 4, 4, 12);
    std::vector<ConditionInput> conds{{1, random_grid(rng, 4, 4, 12)}};
    const auto seq = build_sequence(conds, random_text(rng, 2, 10), &img, model.config().sequence_config());
    for (double x : logits_of(model, seq).storage()) CHECK(x == 0.0);
    Graph<double> g(false);
    const VisibilityMask mask = build_mask(SequenceLayout::of(seq), model.config().attention);
    CHECK(std::abs(model.loss(g, std::span(&seq, 1), std::span(&mask, 1)).value().item() - std::log(12.0)) < 1e-12);
}

TEST_CASE("forward is deterministic") {
    ModelConfig c = tiny_config();
    Transformer<float> a(c, 5), b(c, 5);
    std::mt19937_64 rng(6);
    const TokenGrid img = random_grid(rng, 4, 4, 12);
    std::vector<ConditionInput> conds{{0, random_grid(rng, 4, 4, 12)}, {2, random_grid(rng, 4, 4, 12)}};
    const auto seq = build_sequence(conds, random_text(rng, 3, 10), &img, c.sequence_config());
    CHECK(logits_of(a, seq) == logits_of(b, seq));
    CHECK(logits_of(a, seq) == logits_of(a, seq));
}

TEST_CASE("forward matches a hand-composed oracle") {
    for (AttentionMode mode : {AttentionMode::dense_causal, AttentionMode::ccpr, AttentionMode::ccpr_icbp}) {
        ModelConfig c;
        c.layers = 1;
        c.heads = 2;
        c.width = 8;
        c.codebook_size = 6;
        c.text_vocab = 5;
        c.grid_h = c.grid_w = 2;
        c.attention = mode;
        Transformer<double> model(c, 7);
        randomize(model, 8);
        std::mt19937_64 rng(9);
        const TokenGrid img = random_grid(rng, 2, 2, 6);
        std::vector<ConditionInput> conds{{0, random_grid(rng, 2, 2, 6)}, {2, random_grid(rng, 2, 2, 6)}};
        const auto seq = build_sequence(conds, random_text(rng, 2, 5), &img, c.sequence_config());
        ActiveSet active;
        active.set(2, false);
        const VisibilityMask mask = build_mask(SequenceLayout::of(seq), mode, active);
        const auto got = logits_of(model, seq, active);
        CHECK(max_abs_diff(got.storage(), oracle_forward(model, seq, mask)) < 1e-10);
    }
}

TEST_CASE("with offsets off, identical grids under two kinds give identical rows") {
    ModelConfig c = tiny_config();
    std::mt19937_64 rng(10);
    const TokenGrid grid = random_grid(rng, 4, 4, 12);
    std::vector<ConditionInput> conds{{0, grid}, {1, grid}};
    for (bool lpe : {false, true}) {
        c.use_lpe = lpe;
        Transformer<double> model(c, 11);
        // Equal tables for both kinds, distinct from the image table.
        randomize(model, 12);
        model.condition_embedding(1).value = model.condition_embedding(0).value;
        if (!lpe) {
            for (std::size_t k = 0; k < 3; ++k) model.lpe(k).value.fill(0.0);
        }
        const auto seq = build_sequence(conds, {}, nullptr, c.sequence_config());
        const auto out = logits_of(model, seq);
        const double diff = max_abs_diff(std::vector<double>(out.data(), out.data() + 16 * 12),
                                         std::vector<double>(out.data() + 16 * 12, out.data() + 32 * 12));
        if (lpe) CHECK(diff > 1e-3);
        else CHECK(diff == 0.0);
    }
}

TEST_CASE("loss reads image positions only") {
    std::mt19937_64 rng(13);
    const TokenGrid img = random_grid(rng, 4, 4, 12);
    std::vector<ConditionInput> conds{{1, random_grid(rng, 4, 4, 12)}};
    const auto seq = build_sequence(conds, random_text(rng, 4, 10), &img, SequenceConfig{3, 4, 4, 12});
    const LossTargets t = image_loss_targets(std::span(&seq, 1));
    REQUIRE(t.mask.size() == seq.length());
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor<double> logits({seq.length(), 12});
    for (auto& x : logits.storage()) x = d(rng);
    Graph<double> g(false);
    const double base = cross_entropy(g.constant(logits), t.targets, t.mask).value().item();
    for (std::size_t r = 0; r < 20; ++r) {
        for (std::size_t c = 0; c < 12; ++c) logits.at(r, c) = 0.0;  // condition and text rows
    }
    CHECK(cross_entropy(g.constant(logits), t.targets, t.mask).value().item() == base);
    for (std::size_t r = 0; r < 20; ++r) CHECK(t.mask[r] == 0);
    for (std::size_t r = 20; r < 36; ++r) CHECK(t.mask[r] == 1);
}

TEST_CASE("full-model gradients match central differences in double") {
    for (AttentionMode mode : {AttentionMode::dense_causal, AttentionMode::ccpr, AttentionMode::ccpr_icbp}) {
        ModelConfig c = tiny_config(2);
        c.attention = mode;
        Transformer<double> model(c, 14);
        randomize(model, 15, 0.4);
        std::mt19937_64 rng(16);
        std::vector<UnifiedSequence> seqs;
        std::vector<VisibilityMask> masks;
        for (int i = 0; i < 2; ++i) {
            const TokenGrid img = random_grid(rng, 2, 2, 12);
            std::vector<ConditionInput> conds{{0, random_grid(rng, 2, 2, 12)}, {1, random_grid(rng, 2, 2, 12)}};
            seqs.push_back(build_sequence(conds, random_text(rng, 2, 10), &img, c.sequence_config()));
            ActiveSet active;
            active.set(1, i == 0);
            masks.push_back(build_mask(SequenceLayout::of(seqs.back()), mode, active));
        }
        model.zero_grad();
        {
            Graph<double> g;
            g.backward(model.loss(g, seqs, masks));
        }
        auto params = model.parameters();
        std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
        double worst = 0;
        for (int trial = 0; trial < 50; ++trial) {
            Parameter<double>* p = params[pick(rng)];
            std::uniform_int_distribution<std::size_t> at(0, p->value.size() - 1);
            const std::size_t i = at(rng);
            const double saved = p->value[i];
            auto eval = [&](double v) {
                p->value[i] = v;
                Graph<double> g(false);
                return model.loss(g, seqs, masks).value().item();
            };
            const double num = (eval(saved + 1e-5) - eval(saved - 1e-5)) / 2e-5;
            p->value[i] = saved;
            const double ana = p->grad[i];
            if (std::abs(num) + std::abs(ana) < 1e-9) continue;
            worst = std::max(worst, std::abs(num - ana) / std::max(std::abs(num), std::abs(ana)));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("drop_conditions extremes and frequencies") {
    const std::vector<std::uint8_t> present{0, 1, 2};
    std::mt19937_64 rng(17);
    TrainConfig none;
    none.text_drop_p = none.cond_drop_p = 0.0;
    const ActiveSet keep = drop_conditions(rng, present, true, none);
    for (std::uint8_t k : present) CHECK(keep.has(k));
    CHECK(keep.text);
    TrainConfig all;
    all.text_drop_p = all.cond_drop_p = 1.0;
    const ActiveSet drop = drop_conditions(rng, present, true, all);
    for (std::uint8_t k : present) CHECK(!drop.has(k));
    CHECK(!drop.text);

    TrainConfig def;
    std::size_t text = 0, cond[3] = {0, 0, 0};
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const ActiveSet a = drop_conditions(rng, present, true, def);
        text += !a.text;
        for (std::uint8_t k : present) cond[k] += !a.has(k);
    }
    CHECK(std::abs(static_cast<double>(text) / n - 0.10) <= 0.02);
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(static_cast<double>(cond[k]) / n - 0.25) <= 0.02);
}

TEST_CASE("initial loss of the default model is close to ln 64") {
    ModelConfig c;
    Trainer trainer(c, TrainConfig{}, 0);
    std::mt19937_64 rng(18);
    const auto data = random_examples(rng, c, 16);
    std::vector<UnifiedSequence> seqs;
    std::vector<VisibilityMask> masks;
    for (const auto& ex : data) {
        seqs.push_back(build_sequence(ex.conditions, ex.text, &ex.image, c.sequence_config()));
        masks.push_back(build_mask(SequenceLayout::of(seqs.back()), c.attention));
    }
    Graph<float> g(false);
    const double loss = trainer.model().loss(g, seqs, masks).value().item();
    CHECK(std::abs(loss - std::log(64.0)) < 0.05);
}

TEST_CASE("training reduces the loss on a fixed set") {
    ModelConfig c = tiny_config();
    TrainConfig tc;
    tc.batch_size = 8;
    tc.accumulation = 2;
    tc.lr = 3e-3;
    Trainer trainer(c, tc, 0);
    std::mt19937_64 rng(19);
    const auto data = random_examples(rng, c, 8);
    double first = 0, last = 0;
    for (int i = 0; i < 60; ++i) {
        const double l = trainer.step(data);
        if (i < 5) first += l / 5;
        if (i >= 55) last += l / 5;
    }
    CHECK(last < first);
}

TEST_CASE("four accumulated micro-batches equal one fused batch") {
    ModelConfig c = tiny_config();
    std::mt19937_64 rng(20);
    const auto data = random_examples(rng, c, 4);
    std::vector<ActiveSet> active(4);
    active[1].set(0, false);
    active[2].text = false;
    active[3] = ActiveSet::none();
    TrainConfig accum;
    accum.batch_size = 4;
    accum.accumulation = 4;
    // Large eps keeps the first AdamW step linear in the gradient; with eps 1e-8
    // it is g/|g| and float rounding on near-zero gradients flips whole updates.
    accum.eps = 1.0;
    accum.lr = 1e-2;
    TrainConfig fused = accum;
    fused.accumulation = 1;
    Transformer<float> a(c, 21), b(c, 21), before(c, 21);
    OptimizerState<float> sa, sb;
    training_step(a, sa, data, active, accum, 0);
    training_step(b, sb, data, active, fused, 0);
    // With equal micro-batch sizes the fused mean equals the mean of the micro-batch means.
    auto pa = a.parameters(), pb = b.parameters(), p0 = before.parameters();
    double worst = 0, scale = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        for (std::size_t j = 0; j < pa[i]->value.size(); ++j) {
            const double ua = pa[i]->value[j] - p0[i]->value[j];
            const double ub = pb[i]->value[j] - p0[i]->value[j];
            worst = std::max(worst, std::abs(ua - ub));
            scale = std::max(scale, std::abs(ub));
        }
    }
    REQUIRE(scale > 0);
    CHECK(worst / scale <= 1e-6);
}

TEST_CASE("non-finite loss aborts naming the iteration") {
    ModelConfig c = tiny_config();
    Transformer<float> model(c, 22);
    model.head().value[0] = std::numeric_limits<float>::infinity();
    std::mt19937_64 rng(23);
    const auto data = random_examples(rng, c, 4);
    std::vector<ActiveSet> active(4);
    OptimizerState<float> st;
    TrainConfig tc;
    tc.batch_size = 4;
    try {
        training_step(model, st, data, active, tc, 7);
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::numeric);
        CHECK(std::string(e.what()).find("iteration 7") != std::string::npos);
    }
}

TEST_CASE("checkpoint bytes round-trip and resume is bit-identical") {
    ModelConfig c = tiny_config();
    TrainConfig tc;
    tc.batch_size = 4;
    tc.accumulation = 2;
    tc.seed = 24;
    std::mt19937_64 rng(25);
    const auto data = random_examples(rng, c, 10);

    Trainer straight(c, tc, 0xabc);
    std::vector<double> losses;
    for (int i = 0; i < 6; ++i) losses.push_back(straight.step(data));

    Trainer first(c, tc, 0xabc);
    for (int i = 0; i < 3; ++i) CHECK(first.step(data) == losses[i]);
    const auto path = temp_path("ckpt.ctxm").string();
    save_checkpoint(path, first.checkpoint());
    const auto bytes = read_file(path);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CTXM");
    const Checkpoint loaded = load_checkpoint(path, 0xabc);
    CHECK(serialize_checkpoint(loaded) == bytes);
    CHECK(loaded.iteration == 3);

    Trainer resumed(loaded);
    for (int i = 3; i < 6; ++i) CHECK(resumed.step(data) == losses[i]);
    CHECK(serialize_checkpoint(resumed.checkpoint()) == serialize_checkpoint(straight.checkpoint()));

    try {
        load_checkpoint(path, 0xdef);
        FAIL("expected a fingerprint error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::fingerprint);
    }
    auto broken = bytes;
    broken[1] = '?';
    CHECK_THROWS_AS(deserialize_checkpoint(broken), Error);
    std::filesystem::remove(path);
}

TEST_CASE("frozen offsets stay zero through training") {
    ModelConfig c = tiny_config();
    c.use_lpe = false;
    TrainConfig tc;
    tc.batch_size = 4;
    Trainer trainer(c, tc, 0);
    std::mt19937_64 rng(26);
    const auto data = random_examples(rng, c, 4);
    for (int i = 0; i < 3; ++i) trainer.step(data);
    for (std::size_t k = 0; k < 3; ++k) {
        for (float v : trainer.model().lpe(k).value.storage()) CHECK(v == 0.0f);
    }
}

TEST_CASE("parameters copy across precisions") {
    ModelConfig c = tiny_config();
    Transformer<float> f(c, 27);
    Transformer<double> d(c, 99);
    copy_parameters(f, d);
    Transformer<float> back(c, 98);
    copy_parameters(d, back);
    auto pf = f.parameters(), pb = back.parameters();
    for (std::size_t i = 0; i < pf.size(); ++i) CHECK(pf[i]->value == pb[i]->value);
}

}  // TEST_SUITE
