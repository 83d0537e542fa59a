#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ctxar/experiment.hpp"

namespace ctxar {

// Everything a CLI run can be configured with. Config files are flat
// `key=value` lines; `#` starts a comment; unknown keys are rejected.
struct RunConfig {
    DatasetConfig dataset;
    std::size_t codebook_size = 64;
    PatchGeometry patch;
    std::uint64_t codebook_seed = 7;
    ModelConfig model;
    TrainConfig train;
    std::uint64_t checkpoint_every = 500;
    EvalConfig eval;
    BenchConfig bench;
    std::uint64_t ablate_iterations = 0;  // 0: train.iterations

    // Fills derived fields (model grid and codebook size) and validates.
    void finalize();
};

void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();
RunConfig parse_config(const std::string& text, const std::string& source = "config");
RunConfig load_config(const std::string& path);
std::string format_config(const RunConfig& config);

}  // namespace ctxar
