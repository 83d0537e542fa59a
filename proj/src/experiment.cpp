#include "ctxar/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ctxar/binary_io.hpp"
#include "ctxar/metrics.hpp"

namespace ctxar {

namespace {

std::string dataset_header(const DatasetConfig& c) {
    std::ostringstream out;
    out << "scenes=" << c.scenes << '\n'
        << "image_size=" << c.image_size << '\n'
        << "min_shapes=" << c.min_shapes << '\n'
        << "max_shapes=" << c.max_shapes << '\n'
        << "min_size=" << c.min_size << '\n'
        << "max_size=" << c.max_size << '\n'
        << "gray_background=" << (c.gray_background ? 1 : 0) << '\n'
        << "seed=" << c.seed << '\n';
    return out.str();
}

std::uint64_t parse_u64(const std::string& v, const std::string& what) {
    try {
        std::size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size() || v.front() == '-') throw std::invalid_argument(v);
        return x;
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::format, what + ": expected an unsigned integer, got '" + v + "'");
    }
}

ConditionKind kind_of(const std::string& name) { return parse_condition_kind(name); }

}  // namespace

// ---- dataset ----------------------------------------------------------------

Dataset generate_dataset(const DatasetConfig& config) {
    config.validate();
    Dataset d{config, {}};
    d.scenes.reserve(config.scenes);
    for (std::size_t i = 0; i < config.scenes; ++i) d.scenes.push_back(dataset_scene(config, i));
    return d;
}

std::uint64_t dataset_hash(const Dataset& dataset) {
    Fnv1a h;
    const std::string header = dataset_header(dataset.config);
    h.update(header.data(), header.size());
    for (const SceneSpec& s : dataset.scenes) {
        const std::string line = format_scene(s) + '\n';
        h.update(line.data(), line.size());
    }
    return h.digest();
}

void save_dataset(const std::string& path, const Dataset& dataset) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path);
    out << dataset_header(dataset.config) << "scenes\n";
    for (const SceneSpec& s : dataset.scenes) out << format_scene(s) << '\n';
    if (!out) throw Error(ErrorCode::io, "write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path);
    Dataset d;
    std::string line;
    bool body = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (body) {
            if (!line.empty()) d.scenes.push_back(parse_scene(line));
            continue;
        }
        if (line == "scenes") {
            body = true;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::format, path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = line.substr(0, eq);
        const std::string what = path + ":" + std::to_string(lineno);
        const std::uint64_t v = parse_u64(line.substr(eq + 1), what);
        DatasetConfig& c = d.config;
        if (key == "scenes") c.scenes = v;
        else if (key == "image_size") c.image_size = v;
        else if (key == "min_shapes") c.min_shapes = v;
        else if (key == "max_shapes") c.max_shapes = v;
        else if (key == "min_size") c.min_size = static_cast<std::int32_t>(v);
        else if (key == "max_size") c.max_size = static_cast<std::int32_t>(v);
        else if (key == "gray_background") c.gray_background = v != 0;
        else if (key == "seed") c.seed = v;
        else throw Error(ErrorCode::format, what + ": unknown dataset key '" + key + "'");
    }
    if (!body) throw Error(ErrorCode::format, path + ": missing scenes section");
    if (d.scenes.size() != d.config.scenes) {
        throw Error(ErrorCode::format, path + ": header promises " + std::to_string(d.config.scenes) +
                                           " scenes, file holds " + std::to_string(d.scenes.size()));
    }
    d.config.validate();
    return d;
}

std::vector<Image> dataset_images(const Dataset& dataset) {
    std::vector<Image> images;
    images.reserve(dataset.scenes.size());
    for (const SceneSpec& s : dataset.scenes) images.push_back(render_scene(s, dataset.config.image_size));
    return images;
}

Codebook fit_dataset_codebook(const Dataset& dataset, std::size_t k, PatchGeometry patch, std::uint64_t seed) {
    const std::vector<Image> images = dataset_images(dataset);
    Codebook cb = fit_codebook(images, k, patch, seed);
    cb.dataset_fingerprint = dataset_hash(dataset);
    return cb;
}

SceneTargets scene_targets(const SceneSpec& scene, std::size_t size, const Codebook& codebook) {
    SceneTargets t;
    t.scene = scene;
    t.image = render_scene(scene, size);
    t.image_grid = encode(t.image, codebook);
    for (ConditionKind k : {ConditionKind::edge, ConditionKind::depth, ConditionKind::semantic}) {
        t.maps.push_back(derive_condition(scene, k, size));
        t.grids.push_back(encode(to_rgb(t.maps.back()), codebook));
    }
    t.caption = caption(scene, size);
    return t;
}

std::vector<TrainingExample> build_examples(const Dataset& dataset, const Codebook& codebook,
                                            const ModelConfig& model_config) {
    std::vector<TrainingExample> out;
    out.reserve(dataset.scenes.size());
    for (const SceneSpec& s : dataset.scenes) {
        const SceneTargets t = scene_targets(s, dataset.config.image_size, codebook);
        if (t.image_grid.h != model_config.grid_h || t.image_grid.w != model_config.grid_w) {
            throw Error(ErrorCode::config, "images tokenize to " + std::to_string(t.image_grid.h) + "x" +
                                               std::to_string(t.image_grid.w) + " but the model grid is " +
                                               std::to_string(model_config.grid_h) + "x" +
                                               std::to_string(model_config.grid_w));
        }
        TrainingExample ex;
        for (std::size_t k = 0; k < model_config.kinds(); ++k) {
            const auto kind = static_cast<std::size_t>(kind_of(model_config.condition_kinds[k]));
            ex.conditions.push_back({static_cast<std::uint8_t>(k), t.grids[kind]});
        }
        ex.text = t.caption;
        ex.image = t.image_grid;
        out.push_back(std::move(ex));
    }
    return out;
}

double mean_loss(const Transformer<float>& model, std::span<const TrainingExample> examples) {
    const ModelConfig& mc = model.config();
    const SequenceConfig sc = mc.sequence_config();
    // forward() is non-const only because it hands out parameter nodes.
    auto& m = const_cast<Transformer<float>&>(model);
    double sum = 0.0;
    std::size_t count = 0;
    const std::size_t chunk = 8;
    for (std::size_t start = 0; start < examples.size(); start += chunk) {
        const std::size_t end = std::min(examples.size(), start + chunk);
        std::vector<UnifiedSequence> seqs;
        std::vector<VisibilityMask> masks;
        for (std::size_t i = start; i < end; ++i) {
            seqs.push_back(build_sequence(examples[i].conditions, examples[i].text, &examples[i].image, sc));
            masks.push_back(build_mask(SequenceLayout::of(seqs.back()), mc.attention));
        }
        Graph<float> graph(false);
        sum += m.loss(graph, seqs, masks).value().item() * static_cast<double>(end - start);
        count += end - start;
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

void train_until(Trainer& trainer, std::span<const TrainingExample> data, std::uint64_t until,
                 const std::function<void(std::uint64_t, double)>& on_step) {
    while (trainer.iteration() < until) {
        const double loss = trainer.step(data);
        if (on_step) on_step(trainer.iteration(), loss);
    }
}

// ---- evaluation -------------------------------------------------------------

std::string SubsetResult::name() const {
    if (kinds.empty()) return "none";
    std::string s;
    for (const auto& k : kinds) s += (s.empty() ? "" : "+") + k;
    return s;
}

SampleMetrics SubsetResult::mean() const {
    SampleMetrics m;
    if (samples.empty()) return m;
    for (const SampleMetrics& s : samples) {
        m.edge_f1 += s.edge_f1;
        m.depth_mse += s.depth_mse;
        m.semantic_accuracy += s.semantic_accuracy;
    }
    const double n = static_cast<double>(samples.size());
    m.edge_f1 /= n;
    m.depth_mse /= n;
    m.semantic_accuracy /= n;
    return m;
}

const SubsetResult& MetricsReport::unconditional() const {
    for (const SubsetResult& s : subsets) {
        if (s.kinds.empty()) return s;
    }
    throw Error(ErrorCode::contract, "report has no unconditional row");
}

const SubsetResult& MetricsReport::find(const std::string& name, double cfg_scale) const {
    for (const SubsetResult& s : subsets) {
        if (s.name() == name && s.cfg_scale == cfg_scale) return s;
    }
    throw Error(ErrorCode::contract, "report has no row " + name + " at cfg " + std::to_string(cfg_scale));
}

std::vector<std::vector<std::string>> all_subsets(const std::vector<std::string>& kinds) {
    std::vector<std::vector<std::string>> out;
    for (std::size_t mask = 0; mask < (std::size_t{1} << kinds.size()); ++mask) {
        std::vector<std::string> s;
        for (std::size_t k = 0; k < kinds.size(); ++k) {
            if ((mask >> k) & 1u) s.push_back(kinds[k]);
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<std::string> parse_subset(const std::string& text) {
    std::vector<std::string> out;
    if (text.empty() || text == "none") return out;
    if (text.back() == ',') throw Error(ErrorCode::usage, "empty kind in subset '" + text + "'");
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) throw Error(ErrorCode::usage, "empty kind in subset '" + text + "'");
        if (std::find(out.begin(), out.end(), item) != out.end()) {
            throw Error(ErrorCode::usage, "kind '" + item + "' repeated in subset '" + text + "'");
        }
        out.push_back(item);
    }
    return out;
}

std::vector<SceneTargets> eval_scenes(const DatasetConfig& dataset_config, const EvalConfig& config,
                                      const Codebook& codebook) {
    DatasetConfig held_out = dataset_config;
    held_out.seed = config.seed;
    held_out.scenes = std::max<std::size_t>(config.samples, 1);
    held_out.validate();
    std::vector<SceneTargets> out;
    out.reserve(config.samples);
    for (std::size_t i = 0; i < config.samples; ++i) {
        out.push_back(scene_targets(dataset_scene(held_out, i), held_out.image_size, codebook));
    }
    return out;
}

SubsetResult evaluate_subset(const Transformer<float>& model, const Codebook& codebook,
                             std::span<const SceneTargets> scenes, const std::vector<std::string>& kinds,
                             const EvalConfig& config) {
    SubsetResult result;
    result.kinds = kinds;
    result.cfg_scale = config.sampler.cfg_scale;
    result.samples.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const SceneTargets& t = scenes[i];
        GenerationRequest req;
        for (const std::string& k : kinds) {
            req.conditions.push_back({k, t.grids[static_cast<std::size_t>(kind_of(k))]});
        }
        if (config.use_text) req.text = t.caption;
        req.sampler = config.sampler;
        req.sampler.seed = config.sampler.seed + i;
        const Image generated = decode(generate(model, req), codebook);
        SampleMetrics m;
        m.edge_f1 = edge_f1(generated, t.maps[0]);
        m.depth_mse = depth_mse(generated, t.maps[1]);
        m.semantic_accuracy = semantic_accuracy(generated, t.maps[2]);
        result.samples.push_back(m);
    }
    return result;
}

MetricsReport evaluate(const Transformer<float>& model, const Codebook& codebook,
                       std::span<const SceneTargets> scenes, const std::vector<std::vector<std::string>>& subsets,
                       const EvalConfig& config) {
    MetricsReport report;
    report.samples = scenes.size();
    report.seed = config.seed;
    for (const auto& s : subsets) report.subsets.push_back(evaluate_subset(model, codebook, scenes, s, config));
    return report;
}

PairedComparison compare_paired(const std::string& kind, const SubsetResult& active, const SubsetResult& inactive) {
    if (active.samples.size() != inactive.samples.size()) {
        throw Error(ErrorCode::shape, "paired comparison needs equal sample counts");
    }
    PairedComparison c;
    c.kind = kind;
    const ConditionKind k = kind_of(kind);
    for (std::size_t i = 0; i < active.samples.size(); ++i) {
        const SampleMetrics& a = active.samples[i];
        const SampleMetrics& b = inactive.samples[i];
        double diff = 0.0;  // positive when the active run is better
        switch (k) {
            case ConditionKind::edge: diff = a.edge_f1 - b.edge_f1; break;
            case ConditionKind::depth: diff = b.depth_mse - a.depth_mse; break;
            case ConditionKind::semantic: diff = a.semantic_accuracy - b.semantic_accuracy; break;
        }
        if (diff > 0) ++c.wins;
        else if (diff < 0) ++c.losses;
        else ++c.ties;
    }
    c.p_value = sign_test_p(c.wins, c.losses);
    return c;
}

std::string format_report(const MetricsReport& report) {
    std::ostringstream out;
    out << std::setprecision(6);
    out << "samples=" << report.samples << '\n' << "seed=" << report.seed << '\n';
    for (const SubsetResult& s : report.subsets) {
        const SampleMetrics m = s.mean();
        const std::string key = s.name() + "@" + std::to_string(s.cfg_scale).substr(0, 4);
        out << key << ".edge_f1=" << m.edge_f1 << '\n'
            << key << ".depth_mse=" << m.depth_mse << '\n'
            << key << ".semantic_accuracy=" << m.semantic_accuracy << '\n';
    }
    out << "subset,cfg,samples,edge_f1,depth_mse,semantic_accuracy\n";
    for (const SubsetResult& s : report.subsets) {
        const SampleMetrics m = s.mean();
        out << s.name() << ',' << s.cfg_scale << ',' << s.samples.size() << ',' << m.edge_f1 << ','
            << m.depth_mse << ',' << m.semantic_accuracy << '\n';
    }
    return out.str();
}

// ---- LPE ablation -----------------------------------------------------------

bool AblationReport::within(double lo, double hi) const {
    if (ratios.empty()) return false;
    for (const AdherenceRatio& r : ratios) {
        if (!(r.ratio >= lo && r.ratio <= hi)) return false;
    }
    return true;
}

AblationReport ablate_lpe(std::span<const TrainingExample> data, const Codebook& codebook,
                          std::span<const SceneTargets> scenes, ModelConfig model_config,
                          const TrainConfig& train_config, std::uint64_t iterations, const EvalConfig& eval_config,
                          const ProgressFn& progress) {
    std::vector<std::vector<std::string>> subsets{{}};
    for (const auto& k : model_config.condition_kinds) subsets.push_back({k});

    AblationReport report;
    report.iterations = iterations;
    for (bool lpe : {false, true}) {
        model_config.use_lpe = lpe;
        Trainer trainer(model_config, train_config, codebook.fingerprint());
        const std::string tag = lpe ? "rope+lpe" : "rope";
        train_until(trainer, data, iterations, [&](std::uint64_t it, double loss) {
            if (progress && (it % 100 == 0 || it == iterations)) {
                progress(tag + " iter=" + std::to_string(it) + " loss=" + std::to_string(loss));
            }
        });
        (lpe ? report.rope_lpe : report.rope_only) = evaluate(trainer.model(), codebook, scenes, subsets, eval_config);
    }
    for (const auto& k : model_config.condition_kinds) {
        const double cfg = eval_config.sampler.cfg_scale;
        const SampleMetrics a = report.rope_only.find(k, cfg).mean();
        const SampleMetrics b = report.rope_lpe.find(k, cfg).mean();
        AdherenceRatio r;
        r.kind = k;
        switch (kind_of(k)) {
            case ConditionKind::edge: r.rope_only = a.edge_f1; r.rope_lpe = b.edge_f1; break;
            case ConditionKind::depth: r.rope_only = a.depth_mse; r.rope_lpe = b.depth_mse; break;
            case ConditionKind::semantic:
                r.rope_only = a.semantic_accuracy;
                r.rope_lpe = b.semantic_accuracy;
                break;
        }
        r.ratio = r.rope_lpe / r.rope_only;
        report.ratios.push_back(r);
    }
    return report;
}

std::string format_ablation(const AblationReport& report) {
    std::ostringstream out;
    out << std::setprecision(6);
    out << "iterations=" << report.iterations << '\n';
    for (const AdherenceRatio& r : report.ratios) {
        out << r.kind << ".rope=" << r.rope_only << '\n'
            << r.kind << ".rope_lpe=" << r.rope_lpe << '\n'
            << r.kind << ".ratio=" << r.ratio << '\n';
    }
    out << "within_half_to_double=" << (report.within(0.5, 2.0) ? "true" : "false") << '\n';
    out << "# rope only\n" << format_report(report.rope_only);
    out << "# rope + lpe\n" << format_report(report.rope_lpe);
    return out.str();
}

// ---- attention benchmark ----------------------------------------------------

const BenchRow& BenchReport::row(AttentionMode mode, std::size_t conditions) const {
    for (const BenchRow& r : rows) {
        if (r.mode == mode && r.conditions == conditions) return r;
    }
    throw Error(ErrorCode::contract, "no bench row for " + attention_mode_name(mode) + " m=" +
                                         std::to_string(conditions));
}

BenchReport bench_attention(const ModelConfig& model_config, const BenchConfig& config) {
    if (config.repetitions == 0) throw Error(ErrorCode::config, "bench needs at least one repetition");
    const AttentionMode modes[] = {AttentionMode::dense_causal, AttentionMode::ccpr, AttentionMode::ccpr_icbp};

    ModelConfig base = model_config;
    base.condition_kinds.clear();
    for (std::size_t k = 0; k < config.max_conditions; ++k) base.condition_kinds.push_back("c" + std::to_string(k));
    if (base.text_vocab == 0) base.text_vocab = 1;

    std::mt19937_64 rng(config.seed);
    std::uniform_int_distribution<std::uint32_t> code(0, static_cast<std::uint32_t>(base.codebook_size - 1));
    std::uniform_int_distribution<std::uint32_t> word(0, static_cast<std::uint32_t>(base.text_vocab - 1));
    auto random_grid = [&] {
        TokenGrid g(base.grid_h, base.grid_w);
        for (auto& id : g.ids) id = code(rng);
        return g;
    };

    struct Case {
        BenchRow row;
        std::unique_ptr<Transformer<float>> model;
        UnifiedSequence seq;
        VisibilityMask mask;
        std::vector<double> times;
    };
    std::vector<Case> cases;
    for (std::size_t m = 0; m <= config.max_conditions; ++m) {
        std::vector<ConditionInput> conds;
        for (std::size_t k = 0; k < m; ++k) conds.push_back({static_cast<std::uint8_t>(k), random_grid()});
        std::vector<std::uint32_t> text(config.text_len);
        for (auto& t : text) t = word(rng);
        const TokenGrid image = random_grid();
        for (AttentionMode mode : modes) {
            ModelConfig mc = base;
            mc.attention = mode;
            Case c;
            c.model = std::make_unique<Transformer<float>>(mc, config.seed);
            c.seq = build_sequence(conds, text, &image, mc.sequence_config());
            const SequenceLayout layout = SequenceLayout::of(c.seq);
            c.mask = build_mask(layout, mode);
            c.row.mode = mode;
            c.row.conditions = m;
            c.row.tokens = layout.total();
            c.row.pairs = c.mask.popcount();
            c.row.closed_form = closed_form_pair_count(m, base.image_tokens(), config.text_len, mode);
            const std::uint64_t from_layout = attended_pair_count(layout, mode);
            if (c.row.pairs != c.row.closed_form || from_layout != c.row.closed_form) {
                throw Error(ErrorCode::contract, "pair count mismatch for " + attention_mode_name(mode) + " m=" +
                                                     std::to_string(m) + ": mask " + std::to_string(c.row.pairs) +
                                                     ", layout " + std::to_string(from_layout) + ", closed form " +
                                                     std::to_string(c.row.closed_form));
            }
            cases.push_back(std::move(c));
        }
    }

    auto run_once = [](Case& c) {
        Graph<float> graph(true);
        c.model->zero_grad();
        const auto start = std::chrono::steady_clock::now();
        Var<float> loss = c.model->loss(graph, std::span(&c.seq, 1), std::span(&c.mask, 1));
        graph.backward(loss);
        const auto stop = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(stop - start).count();
    };
    // Round-robin over cases so slow drifts in machine load hit every case alike.
    for (std::size_t rep = 0; rep < config.warmup + config.repetitions; ++rep) {
        for (Case& c : cases) {
            const double ms = run_once(c);
            if (rep >= config.warmup) c.times.push_back(ms);
        }
    }

    BenchReport report;
    report.model = base;
    report.config = config;
    for (Case& c : cases) {
        double mean = 0.0;
        for (double t : c.times) mean += t;
        mean /= static_cast<double>(c.times.size());
        double var = 0.0;
        for (double t : c.times) var += (t - mean) * (t - mean);
        c.row.repetitions = c.times.size();
        c.row.mean_ms = mean;
        c.row.stddev_ms = c.times.size() > 1 ? std::sqrt(var / static_cast<double>(c.times.size() - 1)) : 0.0;
        report.rows.push_back(c.row);
    }
    return report;
}

std::string format_bench(const BenchReport& report) {
    std::ostringstream out;
    out << std::setprecision(6);
    out << "layers=" << report.model.layers << '\n'
        << "width=" << report.model.width << '\n'
        << "heads=" << report.model.heads << '\n'
        << "condition_tokens=" << report.model.image_tokens() << '\n'
        << "text_tokens=" << report.config.text_len << '\n'
        << "image_tokens=" << report.model.image_tokens() << '\n'
        << "repetitions=" << report.config.repetitions << '\n'
        << "batch=1\n";
    for (const BenchRow& r : report.rows) {
        const std::string key = attention_mode_name(r.mode) + ".m" + std::to_string(r.conditions);
        out << key << ".pairs=" << r.pairs << '\n' << key << ".mean_ms=" << r.mean_ms << '\n';
    }
    out << "mode,m,tokens,pairs,closed_form,repetitions,mean_ms,stddev_ms\n";
    for (const BenchRow& r : report.rows) {
        out << attention_mode_name(r.mode) << ',' << r.conditions << ',' << r.tokens << ',' << r.pairs << ','
            << r.closed_form << ',' << r.repetitions << ',' << r.mean_ms << ',' << r.stddev_ms << '\n';
    }
    return out.str();
}

}  // namespace ctxar
