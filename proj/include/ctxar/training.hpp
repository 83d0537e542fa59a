#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctxar/model.hpp"
#include "ctxar/optim.hpp"

namespace ctxar {

// Uniform draw in [0, 1) with 53 random bits.
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct TrainConfig {
    double text_drop_p = 0.1;
    double cond_drop_p = 0.25;  // independently per kind
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t batch_size = 16;
    std::size_t accumulation = 4;
    std::size_t iterations = 5000;
    std::uint64_t seed = 0;

    AdamWConfig adamw() const { return {lr, beta1, beta2, eps, weight_decay}; }
    void validate() const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Every kind in `present` is dropped with probability cond_drop_p (one draw
// per kind, ascending), then the text with text_drop_p (one draw, always taken).
ActiveSet drop_conditions(std::mt19937_64& rng, std::span<const std::uint8_t> present, bool text_present,
                          const TrainConfig& config);

struct TrainingExample {
    std::vector<ConditionInput> conditions;
    std::vector<std::uint32_t> text;
    TokenGrid image;
};

// One optimizer update: the batch is split into config.accumulation equal
// micro-batches whose gradients (each scaled by 1/accumulation) are summed
// before a single AdamW step. Inactive segments stay in the sequence and are
// masked. Returns the mean image-position loss; throws on a non-finite loss.
double training_step(Transformer<float>& model, OptimizerState<float>& optimizer,
                     std::span<const TrainingExample> batch, std::span<const ActiveSet> active,
                     const TrainConfig& config, std::uint64_t iteration);

struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    std::vector<Parameter<float>> parameters;  // canonical order
    OptimizerState<float> optimizer;
    std::string rng_state;
    std::uint64_t iteration = 0;
    std::uint64_t codebook_fingerprint = 0;
};

class Trainer {
public:
    Trainer(const ModelConfig& model_config, const TrainConfig& train_config, std::uint64_t codebook_fingerprint);
    explicit Trainer(const Checkpoint& checkpoint);

    // Samples a batch (with replacement), draws dropout and runs training_step.
    double step(std::span<const TrainingExample> data);

    Transformer<float>& model() noexcept { return model_; }
    const Transformer<float>& model() const noexcept { return model_; }
    const TrainConfig& config() const noexcept { return config_; }
    TrainConfig& config() noexcept { return config_; }
    std::uint64_t iteration() const noexcept { return iteration_; }
    std::uint64_t codebook_fingerprint() const noexcept { return fingerprint_; }

    Checkpoint checkpoint() const;

private:
    TrainConfig config_;
    Transformer<float> model_;
    OptimizerState<float> optimizer_;
    std::mt19937_64 rng_;
    std::uint64_t iteration_ = 0;
    std::uint64_t fingerprint_ = 0;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what = "checkpoint");
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
// With `expected_fingerprint`, refuses a checkpoint trained against another codebook.
Checkpoint load_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

// Model with the checkpoint's parameter values.
Transformer<float> model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace ctxar
