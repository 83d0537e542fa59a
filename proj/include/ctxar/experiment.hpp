#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctxar/inference.hpp"
#include "ctxar/scene.hpp"
#include "ctxar/tokenizer.hpp"
#include "ctxar/training.hpp"

namespace ctxar {

// ---- dataset ----------------------------------------------------------------

struct Dataset {
    DatasetConfig config;
    std::vector<SceneSpec> scenes;
};

Dataset generate_dataset(const DatasetConfig& config);
// Hash of the config and every scene; a pure function of (seed, config).
std::uint64_t dataset_hash(const Dataset& dataset);

// Text format: `key=value` header lines, a `scenes` line, then one scene per line.
void save_dataset(const std::string& path, const Dataset& dataset);
Dataset load_dataset(const std::string& path);

std::vector<Image> dataset_images(const Dataset& dataset);
// Codebook over the rendered images, tagged with the dataset hash.
Codebook fit_dataset_codebook(const Dataset& dataset, std::size_t k, PatchGeometry patch, std::uint64_t seed);

// Ground truth for one scene: its render and the three analytic condition maps
// (edge, depth, semantic order) plus their token grids.
struct SceneTargets {
    SceneSpec scene;
    Image image;
    std::vector<Image> maps;
    std::vector<TokenGrid> grids;
    TokenGrid image_grid;
    std::vector<std::uint32_t> caption;
};
SceneTargets scene_targets(const SceneSpec& scene, std::size_t size, const Codebook& codebook);

// Image, every configured condition kind and the caption, tokenized.
std::vector<TrainingExample> build_examples(const Dataset& dataset, const Codebook& codebook,
                                            const ModelConfig& model_config);

// Mean image-position loss with every segment active, no dropout.
double mean_loss(const Transformer<float>& model, std::span<const TrainingExample> examples);

// Steps `trainer` until it reaches `until`; `on_step` sees (iteration, loss).
void train_until(Trainer& trainer, std::span<const TrainingExample> data, std::uint64_t until,
                 const std::function<void(std::uint64_t, double)>& on_step = {});

// ---- evaluation -------------------------------------------------------------

struct EvalConfig {
    std::size_t samples = 200;
    std::uint64_t seed = 1000;  // held-out scenes come from a dataset with this seed
    SamplerConfig sampler;      // sampler.seed + i is used for sample i
    bool use_text = false;      // condition on captions as well
};

struct SampleMetrics {
    double edge_f1 = 0.0;
    double depth_mse = 0.0;
    double semantic_accuracy = 0.0;
};

struct SubsetResult {
    std::vector<std::string> kinds;  // empty: unconditional
    double cfg_scale = 0.0;
    std::vector<SampleMetrics> samples;

    std::string name() const;
    SampleMetrics mean() const;
};

struct MetricsReport {
    std::size_t samples = 0;
    std::uint64_t seed = 0;
    std::vector<SubsetResult> subsets;

    // The unconditional row (throws if absent).
    const SubsetResult& unconditional() const;
    const SubsetResult& find(const std::string& name, double cfg_scale) const;
};

// Every subset of `kinds`, by ascending bitmask (the empty set first).
std::vector<std::vector<std::string>> all_subsets(const std::vector<std::string>& kinds);
std::vector<std::string> parse_subset(const std::string& text);  // "edge,depth", "none" or ""

std::vector<SceneTargets> eval_scenes(const DatasetConfig& dataset_config, const EvalConfig& config,
                                      const Codebook& codebook);

// Generates one image per scene with `kinds` active and scores it against the
// scene's ground-truth maps. Sample i uses the same scene and sampler seed in
// every subset, so results pair across subsets.
SubsetResult evaluate_subset(const Transformer<float>& model, const Codebook& codebook,
                             std::span<const SceneTargets> scenes, const std::vector<std::string>& kinds,
                             const EvalConfig& config);

MetricsReport evaluate(const Transformer<float>& model, const Codebook& codebook,
                       std::span<const SceneTargets> scenes, const std::vector<std::vector<std::string>>& subsets,
                       const EvalConfig& config);

// Paired comparison of one kind's metric with the kind active versus inactive.
struct PairedComparison {
    std::string kind;
    std::size_t wins = 0;
    std::size_t losses = 0;
    std::size_t ties = 0;
    double p_value = 1.0;
};
// `active` and `inactive` must come from the same scenes and seeds.
PairedComparison compare_paired(const std::string& kind, const SubsetResult& active, const SubsetResult& inactive);

// Key=value summary lines followed by a CSV table with one row per subset.
std::string format_report(const MetricsReport& report);

// ---- LPE ablation -----------------------------------------------------------

// Per-kind adherence metric with that kind active: edge F1, depth MSE and
// semantic accuracy.
struct AdherenceRatio {
    std::string kind;
    double rope_only = 0.0;
    double rope_lpe = 0.0;
    double ratio = 0.0;  // rope_lpe / rope_only
};

struct AblationReport {
    std::uint64_t iterations = 0;
    MetricsReport rope_only;  // P_k frozen at zero
    MetricsReport rope_lpe;   // P_k learned
    std::vector<AdherenceRatio> ratios;

    bool within(double lo, double hi) const;
};

using ProgressFn = std::function<void(const std::string&)>;

// Trains two models from the same seed, identical except for use_lpe, and
// evaluates the unconditional and single-kind subsets of each.
AblationReport ablate_lpe(std::span<const TrainingExample> data, const Codebook& codebook,
                          std::span<const SceneTargets> scenes, ModelConfig model_config,
                          const TrainConfig& train_config, std::uint64_t iterations, const EvalConfig& eval_config,
                          const ProgressFn& progress = {});
std::string format_ablation(const AblationReport& report);

// ---- attention benchmark ----------------------------------------------------

struct BenchRow {
    AttentionMode mode = AttentionMode::dense_causal;
    std::size_t conditions = 0;
    std::size_t tokens = 0;
    std::uint64_t pairs = 0;        // popcount of the mask
    std::uint64_t closed_form = 0;  // closed_form_pair_count
    std::size_t repetitions = 0;
    double mean_ms = 0.0;
    double stddev_ms = 0.0;
};

struct BenchConfig {
    std::size_t max_conditions = 4;
    std::size_t repetitions = 20;
    std::size_t warmup = 2;
    std::size_t text_len = 8;
    std::uint64_t seed = 0;
};

struct BenchReport {
    ModelConfig model;
    BenchConfig config;
    std::vector<BenchRow> rows;

    const BenchRow& row(AttentionMode mode, std::size_t conditions) const;
};

// Times forward+backward of the loss for one sequence (batch 1) with m = 0..max
// condition blocks under each attention mode. Throws if any mask popcount
// differs from the closed form.
BenchReport bench_attention(const ModelConfig& model_config, const BenchConfig& config);
std::string format_bench(const BenchReport& report);

}  // namespace ctxar
