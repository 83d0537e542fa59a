#include "ctxar/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctxar/training.hpp"

namespace ctxar {

void SamplerConfig::validate(std::size_t codebook_size) const {
    if (!(cfg_scale >= 0.0) || !std::isfinite(cfg_scale)) throw Error(ErrorCode::config, "cfg scale must be >= 0");
    if (!(temperature > 0.0)) throw Error(ErrorCode::config, "temperature must be > 0");
    if (top_k > codebook_size) {
        throw Error(ErrorCode::config, "top_k " + std::to_string(top_k) + " exceeds codebook size " +
                                           std::to_string(codebook_size));
    }
}

UnifiedSequence request_prefix(const ModelConfig& config, const GenerationRequest& request) {
    std::vector<ConditionInput> inputs;
    for (const auto& c : request.conditions) inputs.push_back(ConditionInput{config.kind_index(c.kind), c.grid});
    return build_sequence(inputs, request.text, nullptr, config.sequence_config());
}

StreamPair prefill(const Transformer<float>& model, const GenerationRequest& request) {
    StreamPair streams{DecodeSession<float>(model), DecodeSession<float>(model)};
    streams.conditional.prefill(request_prefix(model.config(), request));
    streams.unconditional.prefill(request_prefix(model.config(), GenerationRequest{}));
    return streams;
}

std::vector<float> cfg_combine(std::span<const float> conditional, std::span<const float> unconditional,
                               double scale) {
    if (conditional.size() != unconditional.size()) {
        throw Error(ErrorCode::shape, "cfg_combine: " + std::to_string(conditional.size()) + " vs " +
                                          std::to_string(unconditional.size()) + " logits");
    }
    const float s = static_cast<float>(scale);
    const float r = static_cast<float>(1.0 - scale);
    std::vector<float> out(conditional.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = r * unconditional[i] + s * conditional[i];
    return out;
}

std::uint32_t sample_token(std::span<const float> logits, const SamplerConfig& config, std::mt19937_64& rng) {
    if (logits.empty()) throw Error(ErrorCode::shape, "sample_token: no logits");
    for (float x : logits) {
        if (!std::isfinite(x)) throw Error(ErrorCode::numeric, "sample_token: non-finite logit");
    }
    const std::size_t k = (config.top_k == 0 || config.top_k > logits.size()) ? logits.size() : config.top_k;
    if (config.temperature < 1e-6 || k == 1) {
        return static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    std::vector<std::uint32_t> ids(logits.size());
    std::iota(ids.begin(), ids.end(), 0u);
    std::stable_sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b]; });
    ids.resize(k);
    std::sort(ids.begin(), ids.end());
    double max_v = -INFINITY;
    for (auto id : ids) max_v = std::max(max_v, static_cast<double>(logits[id]));
    std::vector<double> w(k);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        w[i] = std::exp((static_cast<double>(logits[ids[i]]) - max_v) / config.temperature);
        total += w[i];
    }
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        acc += w[i];
        if (u < acc) return ids[i];
    }
    return ids[k - 1];
}

TokenGrid generate(const Transformer<float>& model, const GenerationRequest& request, const StepObserver& observer) {
    const ModelConfig& cfg = model.config();
    request.sampler.validate(cfg.codebook_size);
    StreamPair s = prefill(model, request);
    std::mt19937_64 rng(request.sampler.seed);
    TokenGrid grid(cfg.grid_h, cfg.grid_w);
    std::uint32_t input = cfg.start_token();
    for (std::size_t t = 0; t < cfg.image_tokens(); ++t) {
        const std::vector<float> lc = s.conditional.step(input);
        const std::vector<float> lu = s.unconditional.step(input);
        const std::vector<float> l = cfg_combine(lc, lu, request.sampler.cfg_scale);
        input = sample_token(l, request.sampler, rng);
        grid.ids[t] = input;
        if (observer) observer(t, s.conditional, s.unconditional);
    }
    return grid;
}

TokenGrid generate_single(const Transformer<float>& model, const GenerationRequest& request) {
    const ModelConfig& cfg = model.config();
    request.sampler.validate(cfg.codebook_size);
    DecodeSession<float> session(model);
    session.prefill(request_prefix(cfg, request));
    std::mt19937_64 rng(request.sampler.seed);
    TokenGrid grid(cfg.grid_h, cfg.grid_w);
    std::uint32_t input = cfg.start_token();
    for (std::size_t t = 0; t < cfg.image_tokens(); ++t) {
        input = sample_token(session.step(input), request.sampler, rng);
        grid.ids[t] = input;
    }
    return grid;
}

template <typename T>
std::vector<std::vector<T>> decode_logits(const Transformer<T>& model, const UnifiedSequence& prefix,
                                          const TokenGrid& image) {
    const ModelConfig& cfg = model.config();
    if (image.h != cfg.grid_h || image.w != cfg.grid_w) {
        throw Error(ErrorCode::shape, "image grid " + std::to_string(image.h) + "x" + std::to_string(image.w) +
                                          " does not match the model grid");
    }
    DecodeSession<T> session(model);
    session.prefill(prefix);
    std::vector<std::vector<T>> out;
    std::uint32_t input = cfg.start_token();
    for (std::size_t t = 0; t < cfg.image_tokens(); ++t) {
        out.push_back(session.step(input));
        input = image.ids[t];
    }
    return out;
}

template std::vector<std::vector<float>> decode_logits<float>(const Transformer<float>&, const UnifiedSequence&,
                                                              const TokenGrid&);
template std::vector<std::vector<double>> decode_logits<double>(const Transformer<double>&, const UnifiedSequence&,
                                                                const TokenGrid&);

}  // namespace ctxar
