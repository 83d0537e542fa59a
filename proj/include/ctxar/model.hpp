#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ctxar/attention.hpp"
#include "ctxar/autograd.hpp"
#include "ctxar/sequence.hpp"

namespace ctxar {

struct ModelConfig {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t width = 128;
    std::size_t ffn_hidden = 0;  // 0: Llama sizing, 2/3 * 4 * width rounded up to 32
    std::size_t codebook_size = 64;
    std::size_t text_vocab = 32;
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;
    std::vector<std::string> condition_kinds{"edge", "depth", "semantic"};
    AttentionMode attention = AttentionMode::ccpr_icbp;
    double rope_base = 10000.0;
    bool use_lpe = true;
    double norm_eps = 1e-5;

    std::size_t head_dim() const noexcept { return heads == 0 ? 0 : width / heads; }
    std::size_t ffn() const noexcept;
    std::size_t kinds() const noexcept { return condition_kinds.size(); }
    std::size_t image_tokens() const noexcept { return grid_h * grid_w; }
    std::uint32_t start_token() const noexcept { return static_cast<std::uint32_t>(codebook_size); }
    SequenceConfig sequence_config() const;
    // Index of a named kind; throws listing the configured kinds.
    std::uint8_t kind_index(const std::string& name) const;
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Llama-style decoder: pre-norm blocks of RMSNorm -> masked multi-head
// attention -> RMSNorm -> SwiGLU, residual throughout, with per-kind
// condition embedding tables and per-kind positional offsets.
template <typename T>
class Transformer {
public:
    struct Layer {
        Parameter<T> attn_norm, wq, wk, wv, wo;
        Parameter<T> mlp_norm, w_gate, w_up, w_down;
    };

    Transformer(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    const Rope2d<T>& rope() const noexcept { return rope_; }

    // Canonical order: embeddings, positional offsets, layers, final norm, head.
    std::vector<Parameter<T>*> parameters();
    std::vector<const Parameter<T>*> parameters() const;
    Parameter<T>& parameter(const std::string& name);

    Parameter<T>& image_embedding() { return embed_image_; }
    Parameter<T>& condition_embedding(std::size_t k) { return embed_cond_.at(k); }
    Parameter<T>& text_embedding() { return embed_text_; }
    Parameter<T>& lpe(std::size_t k) { return lpe_.at(k); }
    Parameter<T>& head() { return head_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }
    const Parameter<T>& image_embedding() const { return embed_image_; }
    const Parameter<T>& condition_embedding(std::size_t k) const { return embed_cond_.at(k); }
    const Parameter<T>& text_embedding() const { return embed_text_; }
    const Parameter<T>& lpe(std::size_t k) const { return lpe_.at(k); }
    const Parameter<T>& final_norm() const { return final_norm_; }
    const Parameter<T>& head() const { return head_; }

    void zero_grad();

    // Logits [sum of lengths, K] for a packed batch; masks[i] must be built for
    // batch[i]'s layout.
    Var<T> forward(Graph<T>& graph, std::span<const UnifiedSequence> batch, std::span<const VisibilityMask> masks);

    // Mean cross-entropy over image slots of the whole packed batch.
    Var<T> loss(Graph<T>& graph, std::span<const UnifiedSequence> batch, std::span<const VisibilityMask> masks);

private:
    ModelConfig config_;
    Rope2d<T> rope_;
    Parameter<T> embed_image_;
    std::vector<Parameter<T>> embed_cond_;
    Parameter<T> embed_text_;
    std::vector<Parameter<T>> lpe_;
    std::vector<Layer> layers_;
    Parameter<T> final_norm_;
    Parameter<T> head_;
};

// Image-slot targets and selection flags for a packed batch.
struct LossTargets {
    std::vector<std::uint32_t> targets;
    std::vector<std::uint8_t> mask;
};
LossTargets image_loss_targets(std::span<const UnifiedSequence> batch);

// Copies parameter values between precisions (same config required).
template <typename To, typename From>
void copy_parameters(const Transformer<From>& from, Transformer<To>& to);

// Incremental inference over one stream: prefill a condition+text prefix, then
// feed image slots one at a time. Owns its KV cache.
template <typename T>
class DecodeSession {
public:
    explicit DecodeSession(const Transformer<T>& model);

    // Processes the prefix (no image segment). Returns logits for the prefix rows.
    Tensor<T> prefill(const UnifiedSequence& prefix);

    // Feeds the next image slot (start token first, then the previous token) and
    // returns logits [K] predicting that slot's cell.
    std::vector<T> step(std::uint32_t input_token);

    const KVCache<T>& cache() const noexcept { return cache_; }
    std::size_t image_steps() const noexcept { return image_steps_; }

private:
    struct Rows {
        std::vector<std::uint32_t> ids;
        std::vector<SegmentRole> roles;
        std::vector<std::optional<GridPos>> positions;
        std::vector<RowSegment> condition_segments;  // offsets relative to these rows
    };
    Tensor<T> run(const Rows& rows, std::size_t first_row, const VisibilityMask& mask);

    const Transformer<T>* model_;
    KVCache<T> cache_;
    std::size_t image_steps_ = 0;
};

#define CTXAR_MODEL_EXTERN(T)             \
    extern template class Transformer<T>; \
    extern template class DecodeSession<T>;

CTXAR_MODEL_EXTERN(float)
CTXAR_MODEL_EXTERN(double)

#undef CTXAR_MODEL_EXTERN

extern template void copy_parameters<double, float>(const Transformer<float>&, Transformer<double>&);
extern template void copy_parameters<float, double>(const Transformer<double>&, Transformer<float>&);
extern template void copy_parameters<float, float>(const Transformer<float>&, Transformer<float>&);
extern template void copy_parameters<double, double>(const Transformer<double>&, Transformer<double>&);

}  // namespace ctxar
