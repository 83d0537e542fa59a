#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxar/autograd.hpp"
#include "ctxar/sequence.hpp"

namespace ctxar {

enum class AttentionMode : std::uint8_t {
    dense_causal,  // lower triangle over the whole sequence
    ccpr,          // cross-condition restriction, causal inside every block
    ccpr_icbp,     // as ccpr, bidirectional inside each condition block
};

std::string attention_mode_name(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& name);

struct SegmentSpan {
    SegmentRole role;
    std::size_t start = 0;
    std::size_t length = 0;

    std::size_t end() const noexcept { return start + length; }
    friend bool operator==(const SegmentSpan&, const SegmentSpan&) = default;
};

// Contiguous segments covering [0, total) in canonical order: conditions by
// ascending kind, then text, then image.
class SequenceLayout {
public:
    SequenceLayout() = default;
    explicit SequenceLayout(std::vector<SegmentSpan> segments);

    static SequenceLayout of(const UnifiedSequence& seq);
    // `condition_kinds` lists the kinds present; each block has `condition_len` tokens.
    static SequenceLayout make(std::span<const std::uint8_t> condition_kinds, std::size_t condition_len,
                               std::size_t text_len, std::size_t image_len);

    const std::vector<SegmentSpan>& segments() const noexcept { return segments_; }
    std::size_t total() const noexcept { return total_; }
    std::size_t segment_index(std::size_t row) const;
    bool has_image() const noexcept;
    std::size_t condition_count() const noexcept;

    // Grows (or creates) the trailing image segment by `n` rows.
    void append_image(std::size_t n);

    friend bool operator==(const SequenceLayout&, const SequenceLayout&) = default;

private:
    std::vector<SegmentSpan> segments_;
    std::size_t total_ = 0;
};

// Which condition kinds (bitmask) and whether the text segment take part.
struct ActiveSet {
    std::uint32_t conditions = ~std::uint32_t{0};
    bool text = true;

    static ActiveSet all() { return {}; }
    static ActiveSet none() { return {0, false}; }
    bool has(std::uint8_t kind) const noexcept { return (conditions >> kind) & 1u; }
    void set(std::uint8_t kind, bool on) {
        if (on) conditions |= (1u << kind);
        else conditions &= ~(1u << kind);
    }
};

enum class BlockPattern : std::uint8_t { none, causal, full };

struct BlockRule {
    std::size_t query_segment = 0;
    std::size_t key_segment = 0;
    BlockPattern pattern = BlockPattern::none;
};

struct KeyRange {
    std::size_t begin = 0;
    std::size_t end = 0;
};

// Explicit T x T visibility matrix; used by tests and the reference path.
struct ExplicitMask {
    std::size_t size = 0;
    std::vector<std::uint8_t> cells;

    bool visible(std::size_t q, std::size_t k) const { return cells[q * size + k] != 0; }
    std::size_t popcount() const;
};

// Block-rule visibility: one pattern per (query segment, key segment) pair.
class VisibilityMask {
public:
    VisibilityMask() = default;
    VisibilityMask(SequenceLayout layout, std::vector<BlockPattern> rules);

    const SequenceLayout& layout() const noexcept { return layout_; }
    BlockPattern rule(std::size_t query_segment, std::size_t key_segment) const;
    std::vector<BlockRule> rules() const;

    // Visible key ranges of `row`, ascending and disjoint.
    void visible_ranges(std::size_t row, std::vector<KeyRange>& out) const;
    std::uint64_t popcount() const;
    ExplicitMask expand() const;

private:
    SequenceLayout layout_;
    std::vector<BlockPattern> rules_;  // segments x segments
};

VisibilityMask build_mask(const SequenceLayout& layout, AttentionMode mode, const ActiveSet& active = ActiveSet::all());

// Visible (query, key) pairs with every segment active, from segment sizes.
std::uint64_t attended_pair_count(const SequenceLayout& layout, AttentionMode mode);

// Closed form for m equal condition blocks of N tokens, T text tokens and an
// N-token image segment.
std::uint64_t closed_form_pair_count(std::uint64_t m, std::uint64_t n, std::uint64_t t, AttentionMode mode);

// Rows of a packed batch that share one mask.
struct PackedMask {
    std::size_t row_offset = 0;
    const VisibilityMask* mask = nullptr;
};

// softmax(Q K^T / sqrt(head_dim) restricted to the mask) V per head over packed
// sequences. Only visible key ranges are touched.
template <typename T>
Var<T> attend(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::span<const PackedMask> items);

// Attention for query rows [first_row, first_row + n) of `mask`'s layout against
// keys/values stored row-major in mask coordinates.
template <typename T>
void attend_rows(const T* q, std::size_t n, std::size_t first_row, const T* keys, const T* values, std::size_t d,
                 std::size_t heads, const VisibilityMask& mask, T* out);

// Reference path: dense scores, explicit mask, masked softmax over every column.
template <typename T>
Tensor<T> attend_explicit(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                          const ExplicitMask& mask);

// Per-layer keys (post RoPE/LPE) and values of the processed prefix and every
// decoded image row.
template <typename T>
class KVCache {
public:
    KVCache() = default;
    KVCache(std::size_t layers, std::size_t width) : keys_(layers), values_(layers), width_(width) {}

    std::size_t layers() const noexcept { return keys_.size(); }
    std::size_t width() const noexcept { return width_; }
    std::size_t length() const noexcept { return layout_.total(); }
    bool prefilled() const noexcept { return prefilled_; }
    const SequenceLayout& layout() const noexcept { return layout_; }

    // Starts a cache for a condition+text prefix; rejects image segments.
    void begin_prefill(const SequenceLayout& prefix);
    // Registers one more image row; call before appending that row's keys.
    void begin_image_row();
    void append(std::size_t layer, const T* k_rows, const T* v_rows, std::size_t n);

    const T* keys(std::size_t layer) const { return keys_[layer].data(); }
    const T* values(std::size_t layer) const { return values_[layer].data(); }
    std::size_t rows(std::size_t layer) const { return keys_[layer].size() / width_; }

private:
    std::vector<std::vector<T>> keys_;
    std::vector<std::vector<T>> values_;
    std::size_t width_ = 0;
    SequenceLayout layout_;
    bool prefilled_ = false;
};

#define CTXAR_ATTENTION_EXTERN(T)                                                                            \
    extern template Var<T> attend<T>(Var<T>, Var<T>, Var<T>, std::size_t, std::span<const PackedMask>);     \
    extern template void attend_rows<T>(const T*, std::size_t, std::size_t, const T*, const T*, std::size_t, \
                                        std::size_t, const VisibilityMask&, T*);                            \
    extern template Tensor<T> attend_explicit<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                                 std::size_t, const ExplicitMask&);                         \
    extern template class KVCache<T>;

CTXAR_ATTENTION_EXTERN(float)
CTXAR_ATTENTION_EXTERN(double)

#undef CTXAR_ATTENTION_EXTERN

}  // namespace ctxar
