#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxar/autograd.hpp"
#include "ctxar/tokenizer.hpp"

namespace ctxar {

enum class RoleKind : std::uint8_t { condition, text, image };

struct SegmentRole {
    RoleKind kind = RoleKind::image;
    std::uint8_t condition = 0;  // meaningful for RoleKind::condition only

    static SegmentRole cond(std::uint8_t k) { return {RoleKind::condition, k}; }
    static SegmentRole text() { return {RoleKind::text, 0}; }
    static SegmentRole image() { return {RoleKind::image, 0}; }

    bool is_condition() const noexcept { return kind == RoleKind::condition; }
    std::string name() const;

    friend bool operator==(const SegmentRole&, const SegmentRole&) = default;
};

struct GridPos {
    std::uint32_t row = 0;
    std::uint32_t col = 0;
    friend bool operator==(const GridPos&, const GridPos&) = default;
};

struct Segment {
    SegmentRole role;
    std::vector<std::uint32_t> ids;  // ids fed to the embedding table
    std::size_t grid_w = 0;          // raster width; 0 for text

    std::size_t length() const noexcept { return ids.size(); }
    // Raster coordinates for grid segments, none for text.
    std::optional<GridPos> position(std::size_t i) const {
        if (role.kind == RoleKind::text) return std::nullopt;
        return GridPos{static_cast<std::uint32_t>(i / grid_w), static_cast<std::uint32_t>(i % grid_w)};
    }
};

// S = [c_1 .. c_m, c_T, q] with conditions in ascending kind order. Omitted
// kinds and empty text produce no segment.
//
// The image segment is teacher-forced: slot t sits at grid cell t, carries the
// previous token (the start token at t = 0) and predicts the token of cell t.
struct UnifiedSequence {
    std::vector<Segment> segments;
    std::vector<std::uint32_t> image_targets;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;

    std::size_t length() const;
    std::vector<std::optional<GridPos>> positions() const;
    const Segment* find(SegmentRole role) const;
    std::size_t offset_of(SegmentRole role) const;  // throws if absent
};

struct ConditionInput {
    std::uint8_t kind = 0;
    TokenGrid grid;
};

struct SequenceConfig {
    std::size_t condition_kinds = 3;
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;
    std::uint32_t start_token = 64;  // image-table row used at image slot 0
};

UnifiedSequence build_sequence(std::span<const ConditionInput> conditions, std::span<const std::uint32_t> text,
                               const TokenGrid* image, const SequenceConfig& config);

// Embedding tables E_I, E_{C_k} (one per kind) and E_T as graph nodes.
template <typename T>
struct EmbeddingVars {
    Var<T> image;
    std::vector<Var<T>> conditions;
    Var<T> text;
};

// Condition(k) rows from E_{C_k}, text rows from E_T, image rows from E_I.
template <typename T>
Var<T> embed(const UnifiedSequence& seq, const EmbeddingVars<T>& tables);

// 2-D rotary embedding: the first half of each head rotates by row * theta_i,
// the second half by col * theta_i, theta_i = base^(-4i/head_dim), adjacent
// channel pairs.
template <typename T>
class Rope2d {
public:
    Rope2d() = default;
    Rope2d(std::size_t head_dim, std::size_t max_rows, std::size_t max_cols, double base);

    std::size_t head_dim() const noexcept { return head_dim_; }

    // Rotation angle of each channel pair at `pos` (head_dim/2 entries).
    static std::vector<double> angles(GridPos pos, std::size_t head_dim, double base);

    // Rotates every head of one row in place; `inverse` applies the transpose.
    void apply(T* row, std::size_t heads, GridPos pos, bool inverse = false) const;

private:
    std::size_t head_dim_ = 0;
    std::size_t max_rows_ = 0;
    std::size_t max_cols_ = 0;
    std::vector<T> cos_row_, sin_row_, cos_col_, sin_col_;  // [pos][pair]
};

template <typename T>
Var<T> rope2d(Var<T> x, std::span<const std::optional<GridPos>> positions, std::size_t heads, const Rope2d<T>& rope);

// A run of rows belonging to one segment of the (possibly packed) input.
struct RowSegment {
    std::size_t row_offset = 0;
    std::size_t length = 0;
    SegmentRole role;
    std::size_t first_cell = 0;  // raster index of the first row
};

// Adds P_k[cell] to every head of each row of a Condition(k) segment, in place.
// Throws ErrorCode::contract for any other role.
template <typename T>
void apply_lpe_rows(T* rows, std::size_t d, std::size_t heads, const RowSegment& seg, const Tensor<T>& lpe);

// Differentiable form over all `segments` (must all be condition segments);
// `lpe[k]` is P_k with shape [h*w, head_dim].
template <typename T>
Var<T> apply_lpe(Var<T> x, std::span<const RowSegment> segments, std::span<const Var<T>> lpe, std::size_t heads);

#define CTXAR_SEQUENCE_EXTERN(T)                                                                              \
    extern template Var<T> embed<T>(const UnifiedSequence&, const EmbeddingVars<T>&);                         \
    extern template class Rope2d<T>;                                                                          \
    extern template Var<T> rope2d<T>(Var<T>, std::span<const std::optional<GridPos>>, std::size_t,            \
                                     const Rope2d<T>&);                                                       \
    extern template void apply_lpe_rows<T>(T*, std::size_t, std::size_t, const RowSegment&, const Tensor<T>&); \
    extern template Var<T> apply_lpe<T>(Var<T>, std::span<const RowSegment>, std::span<const Var<T>>, std::size_t);

CTXAR_SEQUENCE_EXTERN(float)
CTXAR_SEQUENCE_EXTERN(double)

#undef CTXAR_SEQUENCE_EXTERN

}  // namespace ctxar
