#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctxar/model.hpp"

namespace ctxar {

struct SamplerConfig {
    double cfg_scale = 3.0;
    double temperature = 1.0;
    std::size_t top_k = 0;  // 0: the whole codebook
    std::uint64_t seed = 0;

    void validate(std::size_t codebook_size) const;
};

struct NamedCondition {
    std::string kind;
    TokenGrid grid;
};

struct GenerationRequest {
    std::vector<NamedCondition> conditions;  // any subset of the trained kinds
    std::vector<std::uint32_t> text;
    SamplerConfig sampler;
};

// Condition + text prefix of a request; unknown kinds are rejected with the
// list of trained kinds.
UnifiedSequence request_prefix(const ModelConfig& config, const GenerationRequest& request);

struct StreamPair {
    DecodeSession<float> conditional;
    DecodeSession<float> unconditional;  // empty prefix
};

StreamPair prefill(const Transformer<float>& model, const GenerationRequest& request);

// l_u + scale * (l_c - l_u), evaluated as (1 - scale) * l_u + scale * l_c so
// that scale 0 and 1 return the inputs exactly.
std::vector<float> cfg_combine(std::span<const float> conditional, std::span<const float> unconditional,
                               double scale);

// Temperature softmax over the top_k largest logits (ties to the lower id),
// then one multinomial draw; argmax when temperature < 1e-6 or top_k == 1.
std::uint32_t sample_token(std::span<const float> logits, const SamplerConfig& config, std::mt19937_64& rng);

// Called after every decode step with the step index and both streams.
using StepObserver = std::function<void(std::size_t, const DecodeSession<float>&, const DecodeSession<float>&)>;

// Samples all h*w image tokens; both streams are fed the same token each step.
TokenGrid generate(const Transformer<float>& model, const GenerationRequest& request,
                   const StepObserver& observer = {});

// Conditional stream only (no guidance).
TokenGrid generate_single(const Transformer<float>& model, const GenerationRequest& request);

// Per-step logits of prefill+decode when `image` is fed as the token history.
template <typename T>
std::vector<std::vector<T>> decode_logits(const Transformer<T>& model, const UnifiedSequence& prefix,
                                          const TokenGrid& image);

extern template std::vector<std::vector<float>> decode_logits<float>(const Transformer<float>&,
                                                                     const UnifiedSequence&, const TokenGrid&);
extern template std::vector<std::vector<double>> decode_logits<double>(const Transformer<double>&,
                                                                       const UnifiedSequence&, const TokenGrid&);

}  // namespace ctxar
