#include "ctxar/sequence.hpp"

#include <algorithm>
#include <cmath>

#include "ctxar/kernels.hpp"

namespace ctxar {

std::string SegmentRole::name() const {
    switch (kind) {
        case RoleKind::condition: return "condition[" + std::to_string(condition) + "]";
        case RoleKind::text: return "text";
        case RoleKind::image: return "image";
    }
    return "?";
}

std::size_t UnifiedSequence::length() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += s.length();
    return n;
}

std::vector<std::optional<GridPos>> UnifiedSequence::positions() const {
    std::vector<std::optional<GridPos>> out;
    out.reserve(length());
    for (const auto& s : segments) {
        for (std::size_t i = 0; i < s.length(); ++i) out.push_back(s.position(i));
    }
    return out;
}

const Segment* UnifiedSequence::find(SegmentRole role) const {
    for (const auto& s : segments) {
        if (s.role == role) return &s;
    }
    return nullptr;
}

std::size_t UnifiedSequence::offset_of(SegmentRole role) const {
    std::size_t off = 0;
    for (const auto& s : segments) {
        if (s.role == role) return off;
        off += s.length();
    }
    throw Error(ErrorCode::contract, "sequence has no " + role.name() + " segment");
}

UnifiedSequence build_sequence(std::span<const ConditionInput> conditions, std::span<const std::uint32_t> text,
                               const TokenGrid* image, const SequenceConfig& config) {
    UnifiedSequence seq;
    seq.grid_h = config.grid_h;
    seq.grid_w = config.grid_w;

    auto check_grid = [&](const TokenGrid& g, const std::string& what) {
        if (g.h != config.grid_h || g.w != config.grid_w || g.ids.size() != g.h * g.w) {
            throw Error(ErrorCode::shape, what + " grid is " + std::to_string(g.h) + "x" + std::to_string(g.w) +
                                              ", expected " + std::to_string(config.grid_h) + "x" +
                                              std::to_string(config.grid_w));
        }
    };

    std::vector<const ConditionInput*> sorted;
    for (const auto& c : conditions) sorted.push_back(&c);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->kind < b->kind; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const ConditionInput& c = *sorted[i];
        if (c.kind >= config.condition_kinds) {
            throw Error(ErrorCode::range, "condition kind " + std::to_string(c.kind) + " not configured (have " +
                                              std::to_string(config.condition_kinds) + ")");
        }
        if (i > 0 && sorted[i - 1]->kind == c.kind) {
            throw Error(ErrorCode::contract, "duplicate condition kind " + std::to_string(c.kind));
        }
        check_grid(c.grid, SegmentRole::cond(c.kind).name());
        seq.segments.push_back(Segment{SegmentRole::cond(c.kind), c.grid.ids, config.grid_w});
    }
    if (!text.empty()) {
        seq.segments.push_back(Segment{SegmentRole::text(), {text.begin(), text.end()}, 0});
    }
    if (image != nullptr) {
        check_grid(*image, "image");
        Segment s{SegmentRole::image(), {}, config.grid_w};
        s.ids.reserve(image->size());
        s.ids.push_back(config.start_token);
        s.ids.insert(s.ids.end(), image->ids.begin(), image->ids.end() - 1);
        seq.image_targets = image->ids;
        seq.segments.push_back(std::move(s));
    }
    return seq;
}

// ---- embedding --------------------------------------------------------------

template <typename T>
Var<T> embed(const UnifiedSequence& seq, const EmbeddingVars<T>& tables) {
    std::vector<Var<T>> parts;
    for (const auto& s : seq.segments) {
        Var<T> table;
        switch (s.role.kind) {
            case RoleKind::condition:
                if (s.role.condition >= tables.conditions.size()) {
                    throw Error(ErrorCode::range, "no embedding table for " + s.role.name());
                }
                table = tables.conditions[s.role.condition];
                break;
            case RoleKind::text: table = tables.text; break;
            case RoleKind::image: table = tables.image; break;
        }
        const std::size_t rows = table.value().dim(0);
        for (std::uint32_t id : s.ids) {
            if (id >= rows) {
                throw Error(ErrorCode::range, "token id " + std::to_string(id) + " in " + s.role.name() +
                                                  " segment exceeds table size " + std::to_string(rows));
            }
        }
        parts.push_back(gather_rows(table, std::span<const std::uint32_t>(s.ids)));
    }
    if (parts.empty()) throw Error(ErrorCode::shape, "cannot embed an empty sequence");
    if (parts.size() == 1) return parts[0];
    return concat_rows(std::span<const Var<T>>(parts));
}

// ---- 2-D RoPE ---------------------------------------------------------------

template <typename T>
Rope2d<T>::Rope2d(std::size_t head_dim, std::size_t max_rows, std::size_t max_cols, double base)
    : head_dim_(head_dim), max_rows_(max_rows), max_cols_(max_cols) {
    if (head_dim == 0 || head_dim % 4 != 0) {
        throw Error(ErrorCode::config, "2-D RoPE needs head_dim divisible by 4, got " + std::to_string(head_dim));
    }
    const std::size_t quarter = head_dim / 4;
    auto fill = [&](std::size_t n, std::vector<T>& c, std::vector<T>& s) {
        c.resize(n * quarter);
        s.resize(n * quarter);
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t i = 0; i < quarter; ++i) {
                const double theta = std::pow(base, -4.0 * static_cast<double>(i) / static_cast<double>(head_dim));
                const double a = static_cast<double>(p) * theta;
                c[p * quarter + i] = static_cast<T>(std::cos(a));
                s[p * quarter + i] = static_cast<T>(std::sin(a));
            }
        }
    };
    fill(max_rows, cos_row_, sin_row_);
    fill(max_cols, cos_col_, sin_col_);
}

template <typename T>
std::vector<double> Rope2d<T>::angles(GridPos pos, std::size_t head_dim, double base) {
    const std::size_t quarter = head_dim / 4;
    std::vector<double> out(head_dim / 2);
    for (std::size_t i = 0; i < quarter; ++i) {
        const double theta = std::pow(base, -4.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        out[i] = static_cast<double>(pos.row) * theta;
        out[quarter + i] = static_cast<double>(pos.col) * theta;
    }
    return out;
}

template <typename T>
void Rope2d<T>::apply(T* row, std::size_t heads, GridPos pos, bool inverse) const {
    if (pos.row >= max_rows_ || pos.col >= max_cols_) {
        throw Error(ErrorCode::range, "grid position outside the RoPE table");
    }
    const std::size_t quarter = head_dim_ / 4;
    const T* cr = cos_row_.data() + pos.row * quarter;
    const T* sr = sin_row_.data() + pos.row * quarter;
    const T* cc = cos_col_.data() + pos.col * quarter;
    const T* sc = sin_col_.data() + pos.col * quarter;
    const T sign = inverse ? T{-1} : T{1};
    for (std::size_t h = 0; h < heads; ++h) {
        T* x = row + h * head_dim_;
        for (std::size_t i = 0; i < quarter; ++i) {
            const T c = cr[i], s = sign * sr[i];
            const T a = x[2 * i], b = x[2 * i + 1];
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
        T* y = x + head_dim_ / 2;
        for (std::size_t i = 0; i < quarter; ++i) {
            const T c = cc[i], s = sign * sc[i];
            const T a = y[2 * i], b = y[2 * i + 1];
            y[2 * i] = a * c - b * s;
            y[2 * i + 1] = a * s + b * c;
        }
    }
}

template <typename T>
Var<T> rope2d(Var<T> x, std::span<const std::optional<GridPos>> positions, std::size_t heads, const Rope2d<T>& rope) {
    const Tensor<T>& xv = x.value();
    const std::size_t d = xv.cols();
    if (xv.rank() != 2 || xv.rows() != positions.size() || d != heads * rope.head_dim()) {
        throw Error(ErrorCode::shape, "rope2d: input " + shape_str(xv.shape()) + " vs " + std::to_string(positions.size()) +
                                          " positions and " + std::to_string(heads) + " heads");
    }
    Tensor<T> out = xv;
    for (std::size_t r = 0; r < positions.size(); ++r) {
        if (positions[r]) rope.apply(out.data() + r * d, heads, *positions[r]);
    }
    std::vector<std::optional<GridPos>> pos(positions.begin(), positions.end());
    return x.graph().emit(std::move(out), {x}, [x, d, heads, &rope, pos = std::move(pos)](Graph<T>& g, std::size_t self) {
        Tensor<T> dy = g.grad(self);
        for (std::size_t r = 0; r < pos.size(); ++r) {
            if (pos[r]) rope.apply(dy.data() + r * d, heads, *pos[r], true);
        }
        Tensor<T>& dx = g.grad(x.id());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    });
}

// ---- learnable positional offsets ---------------------------------------------

template <typename T>
void apply_lpe_rows(T* rows, std::size_t d, std::size_t heads, const RowSegment& seg, const Tensor<T>& lpe) {
    if (!seg.role.is_condition()) {
        throw Error(ErrorCode::contract, "learnable positional offsets apply to condition segments only, got " + seg.role.name());
    }
    const std::size_t hd = d / heads;
    if (lpe.rank() != 2 || lpe.cols() != hd || seg.first_cell + seg.length > lpe.rows()) {
        throw Error(ErrorCode::shape, "positional offset table " + shape_str(lpe.shape()) + " does not cover segment");
    }
    for (std::size_t i = 0; i < seg.length; ++i) {
        const T* p = lpe.data() + (seg.first_cell + i) * hd;
        T* row = rows + (seg.row_offset + i) * d;
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < hd; ++j) row[h * hd + j] += p[j];
        }
    }
}

template <typename T>
Var<T> apply_lpe(Var<T> x, std::span<const RowSegment> segments, std::span<const Var<T>> lpe, std::size_t heads) {
    Tensor<T> out = x.value();
    const std::size_t d = out.cols();
    for (const auto& seg : segments) {
        if (!seg.role.is_condition()) {
            throw Error(ErrorCode::contract, "learnable positional offsets apply to condition segments only, got " + seg.role.name());
        }
        if (seg.role.condition >= lpe.size()) throw Error(ErrorCode::range, "no offset table for " + seg.role.name());
        apply_lpe_rows(out.data(), d, heads, seg, lpe[seg.role.condition].value());
    }
    std::vector<Var<T>> inputs{x};
    inputs.insert(inputs.end(), lpe.begin(), lpe.end());
    std::vector<RowSegment> segs(segments.begin(), segments.end());
    std::vector<Var<T>> tables(lpe.begin(), lpe.end());
    return x.graph().emit(std::move(out), std::span<const Var<T>>(inputs),
                          [x, d, heads, segs = std::move(segs), tables = std::move(tables)](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        if (g.needs_grad(x.id())) {
            Tensor<T>& dx = g.grad(x.id());
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        }
        const std::size_t hd = d / heads;
        for (const auto& seg : segs) {
            const Var<T>& table = tables[seg.role.condition];
            if (!g.needs_grad(table.id())) continue;
            Tensor<T>& dp = g.grad(table.id());
            for (std::size_t i = 0; i < seg.length; ++i) {
                const T* row = dy.data() + (seg.row_offset + i) * d;
                T* p = dp.data() + (seg.first_cell + i) * hd;
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t j = 0; j < hd; ++j) p[j] += row[h * hd + j];
                }
            }
        }
    });
}

#define CTXAR_SEQUENCE_INSTANTIATE(T)                                                                      \
    template Var<T> embed<T>(const UnifiedSequence&, const EmbeddingVars<T>&);                             \
    template class Rope2d<T>;                                                                              \
    template Var<T> rope2d<T>(Var<T>, std::span<const std::optional<GridPos>>, std::size_t, const Rope2d<T>&); \
    template void apply_lpe_rows<T>(T*, std::size_t, std::size_t, const RowSegment&, const Tensor<T>&);   \
    template Var<T> apply_lpe<T>(Var<T>, std::span<const RowSegment>, std::span<const Var<T>>, std::size_t);

CTXAR_SEQUENCE_INSTANTIATE(float)
CTXAR_SEQUENCE_INSTANTIATE(double)

}  // namespace ctxar
