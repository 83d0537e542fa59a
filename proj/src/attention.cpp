#include "ctxar/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctxar/kernels.hpp"

namespace ctxar {

std::string attention_mode_name(AttentionMode mode) {
    switch (mode) {
        case AttentionMode::dense_causal: return "dense_causal";
        case AttentionMode::ccpr: return "ccpr";
        case AttentionMode::ccpr_icbp: return "ccpr_icbp";
    }
    return "?";
}

AttentionMode parse_attention_mode(const std::string& name) {
    if (name == "dense_causal") return AttentionMode::dense_causal;
    if (name == "ccpr") return AttentionMode::ccpr;
    if (name == "ccpr_icbp") return AttentionMode::ccpr_icbp;
    throw Error(ErrorCode::config, "unknown attention mode '" + name + "' (dense_causal, ccpr, ccpr_icbp)");
}

// ---- layout -----------------------------------------------------------------

namespace {

int role_rank(const SegmentRole& r) {
    switch (r.kind) {
        case RoleKind::condition: return r.condition;
        case RoleKind::text: return 1000;
        case RoleKind::image: return 1001;
    }
    return 0;
}

}  // namespace

SequenceLayout::SequenceLayout(std::vector<SegmentSpan> segments) : segments_(std::move(segments)) {
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        const SegmentSpan& s = segments_[i];
        if (s.start != cursor || s.length == 0) {
            throw Error(ErrorCode::contract, "layout segments must be contiguous and non-empty");
        }
        if (i > 0 && role_rank(segments_[i - 1].role) >= role_rank(s.role)) {
            throw Error(ErrorCode::contract, "layout segments are not in canonical order");
        }
        cursor = s.end();
    }
    total_ = cursor;
}

SequenceLayout SequenceLayout::of(const UnifiedSequence& seq) {
    std::vector<SegmentSpan> spans;
    std::size_t cursor = 0;
    for (const auto& s : seq.segments) {
        spans.push_back(SegmentSpan{s.role, cursor, s.length()});
        cursor += s.length();
    }
    return SequenceLayout(std::move(spans));
}

SequenceLayout SequenceLayout::make(std::span<const std::uint8_t> condition_kinds, std::size_t condition_len,
                                    std::size_t text_len, std::size_t image_len) {
    std::vector<std::uint8_t> kinds(condition_kinds.begin(), condition_kinds.end());
    std::sort(kinds.begin(), kinds.end());
    std::vector<SegmentSpan> spans;
    std::size_t cursor = 0;
    auto push = [&](SegmentRole role, std::size_t len) {
        if (len == 0) return;
        spans.push_back(SegmentSpan{role, cursor, len});
        cursor += len;
    };
    for (std::uint8_t k : kinds) push(SegmentRole::cond(k), condition_len);
    push(SegmentRole::text(), text_len);
    push(SegmentRole::image(), image_len);
    return SequenceLayout(std::move(spans));
}

std::size_t SequenceLayout::segment_index(std::size_t row) const {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        if (row < segments_[i].end()) return i;
    }
    throw Error(ErrorCode::range, "row " + std::to_string(row) + " outside layout of " + std::to_string(total_));
}

bool SequenceLayout::has_image() const noexcept {
    return !segments_.empty() && segments_.back().role.kind == RoleKind::image;
}

std::size_t SequenceLayout::condition_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(segments_.begin(), segments_.end(),
                                                  [](const SegmentSpan& s) { return s.role.is_condition(); }));
}

void SequenceLayout::append_image(std::size_t n) {
    if (n == 0) return;
    if (has_image()) {
        segments_.back().length += n;
    } else {
        segments_.push_back(SegmentSpan{SegmentRole::image(), total_, n});
    }
    total_ += n;
}

// ---- masks ------------------------------------------------------------------

std::size_t ExplicitMask::popcount() const {
    return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

VisibilityMask::VisibilityMask(SequenceLayout layout, std::vector<BlockPattern> rules)
    : layout_(std::move(layout)), rules_(std::move(rules)) {
    const std::size_t n = layout_.segments().size();
    if (rules_.size() != n * n) throw Error(ErrorCode::shape, "mask rule table does not match layout");
    for (std::size_t i = 0; i < n; ++i) {
        if (rules_[i * n + i] == BlockPattern::none) {
            throw Error(ErrorCode::contract, "mask diagonal block must be visible");
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i && rules_[i * n + j] == BlockPattern::causal) {
                throw Error(ErrorCode::contract, "causal pattern is only defined on diagonal blocks");
            }
        }
    }
}

BlockPattern VisibilityMask::rule(std::size_t query_segment, std::size_t key_segment) const {
    return rules_[query_segment * layout_.segments().size() + key_segment];
}

std::vector<BlockRule> VisibilityMask::rules() const {
    std::vector<BlockRule> out;
    const std::size_t n = layout_.segments().size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) out.push_back(BlockRule{i, j, rules_[i * n + j]});
    }
    return out;
}

void VisibilityMask::visible_ranges(std::size_t row, std::vector<KeyRange>& out) const {
    out.clear();
    const std::size_t qi = layout_.segment_index(row);
    const auto& segs = layout_.segments();
    for (std::size_t ki = 0; ki < segs.size(); ++ki) {
        KeyRange r;
        switch (rule(qi, ki)) {
            case BlockPattern::none: continue;
            case BlockPattern::full: r = {segs[ki].start, segs[ki].end()}; break;
            case BlockPattern::causal: r = {segs[ki].start, row + 1}; break;
        }
        if (!out.empty() && out.back().end == r.begin) {
            out.back().end = r.end;
        } else {
            out.push_back(r);
        }
    }
}

std::uint64_t VisibilityMask::popcount() const {
    std::uint64_t total = 0;
    std::vector<KeyRange> ranges;
    for (std::size_t row = 0; row < layout_.total(); ++row) {
        visible_ranges(row, ranges);
        for (const auto& r : ranges) total += r.end - r.begin;
    }
    return total;
}

ExplicitMask VisibilityMask::expand() const {
    ExplicitMask m;
    m.size = layout_.total();
    m.cells.assign(m.size * m.size, 0);
    std::vector<KeyRange> ranges;
    for (std::size_t row = 0; row < m.size; ++row) {
        visible_ranges(row, ranges);
        for (const auto& r : ranges) {
            std::fill(m.cells.begin() + row * m.size + r.begin, m.cells.begin() + row * m.size + r.end, 1);
        }
    }
    return m;
}

VisibilityMask build_mask(const SequenceLayout& layout, AttentionMode mode, const ActiveSet& active) {
    const auto& segs = layout.segments();
    const std::size_t n = segs.size();
    auto is_active = [&](const SegmentRole& r) {
        switch (r.kind) {
            case RoleKind::condition: return active.has(r.condition);
            case RoleKind::text: return active.text;
            case RoleKind::image: return true;
        }
        return true;
    };
    std::vector<BlockPattern> rules(n * n, BlockPattern::none);
    for (std::size_t qi = 0; qi < n; ++qi) {
        const SegmentRole& qr = segs[qi].role;
        for (std::size_t ki = 0; ki < n; ++ki) {
            const SegmentRole& kr = segs[ki].role;
            BlockPattern p = BlockPattern::none;
            if (qi == ki) {
                p = (mode == AttentionMode::ccpr_icbp && qr.is_condition()) ? BlockPattern::full : BlockPattern::causal;
            } else if (!is_active(qr) || !is_active(kr) || ki > qi) {
                p = BlockPattern::none;
            } else if (mode == AttentionMode::dense_causal) {
                p = BlockPattern::full;
            } else {
                // Only image queries look across segments.
                p = qr.kind == RoleKind::image ? BlockPattern::full : BlockPattern::none;
            }
            rules[qi * n + ki] = p;
        }
    }
    return VisibilityMask(layout, std::move(rules));
}

std::uint64_t attended_pair_count(const SequenceLayout& layout, AttentionMode mode) {
    const VisibilityMask mask = build_mask(layout, mode);
    const auto& segs = layout.segments();
    std::uint64_t total = 0;
    for (const BlockRule& r : mask.rules()) {
        const std::uint64_t a = segs[r.query_segment].length;
        const std::uint64_t b = segs[r.key_segment].length;
        switch (r.pattern) {
            case BlockPattern::none: break;
            case BlockPattern::full: total += a * b; break;
            case BlockPattern::causal: total += a * (a + 1) / 2; break;
        }
    }
    return total;
}

std::uint64_t closed_form_pair_count(std::uint64_t m, std::uint64_t n, std::uint64_t t, AttentionMode mode) {
    const std::uint64_t tri_n = n * (n + 1) / 2;
    const std::uint64_t tri_t = t * (t + 1) / 2;
    switch (mode) {
        case AttentionMode::dense_causal: {
            const std::uint64_t l = m * n + t + n;
            return l * (l + 1) / 2;
        }
        case AttentionMode::ccpr: return m * tri_n + tri_t + n * (m * n + t) + tri_n;
        case AttentionMode::ccpr_icbp: return m * n * n + tri_t + n * (m * n + t) + tri_n;
    }
    return 0;
}

// ---- attention kernels ------------------------------------------------------

namespace {

// One query row, all heads. `keys_t` is the transposed key matrix (column j is
// key j, leading dimension `ld`). `probs` receives heads x visible probabilities.
template <typename T>
void attend_one_row(const T* q, const T* keys_t, std::size_t ld, const T* values, std::size_t d, std::size_t heads,
                    T scale,
                    std::span<const KeyRange> ranges, std::size_t visible, T* out, T* probs) {
    const std::size_t hd = d / heads;
    std::fill(out, out + d, T{0});
    std::size_t bounds[64];
    std::vector<std::size_t> spill;
    std::span<std::size_t> bound_span(bounds, 2 * ranges.size());
    if (2 * ranges.size() > 64) {
        spill.resize(2 * ranges.size());
        bound_span = std::span<std::size_t>(spill);
    }
    for (std::size_t r = 0; r < ranges.size(); ++r) {
        bound_span[2 * r] = ranges[r].begin;
        bound_span[2 * r + 1] = ranges[r].end;
    }
    for (std::size_t h = 0; h < heads; ++h) {
        const T* qh = q + h * hd;
        T* p = probs + h * visible;
        T max_v = -std::numeric_limits<T>::infinity();
        std::size_t i = 0;
        for (const auto& r : ranges) {
            kernels::dot_cols(qh, keys_t + h * hd * ld + r.begin, ld, r.end - r.begin, hd, scale, p + i);
            i += r.end - r.begin;
        }
        for (i = 0; i < visible; ++i) max_v = std::max(max_v, p[i]);
        if (visible == 0) throw Error(ErrorCode::contract, "attention row has no visible key");
        T total{0};
        for (i = 0; i < visible; ++i) {
            p[i] = std::exp(p[i] - max_v);
            total += p[i];
        }
        for (i = 0; i < visible; ++i) p[i] = p[i] / total;
        kernels::weighted_sum_ranges(p, std::span<const std::size_t>(bound_span), values + h * hd, d, hd, out + h * hd);
    }
}

std::size_t range_size(std::span<const KeyRange> ranges) {
    std::size_t n = 0;
    for (const auto& r : ranges) n += r.end - r.begin;
    return n;
}

}  // namespace

template <typename T>
Var<T> attend(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::span<const PackedMask> items) {
    const Tensor<T>& qv = q.value();
    const Tensor<T>& kv = k.value();
    const Tensor<T>& vv = v.value();
    if (qv.rank() != 2 || qv.shape() != kv.shape() || qv.shape() != vv.shape() || heads == 0 || qv.cols() % heads != 0) {
        throw Error(ErrorCode::shape, "attend: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) + ", v " +
                                          shape_str(vv.shape()) + ", heads " + std::to_string(heads));
    }
    const std::size_t d = qv.cols();
    const T scale = T{1} / std::sqrt(static_cast<T>(d / heads));
    std::size_t covered = 0;
    for (const auto& it : items) covered += it.mask->layout().total();
    if (covered != qv.rows()) {
        throw Error(ErrorCode::shape, "attend: masks cover " + std::to_string(covered) + " rows, input has " +
                                          std::to_string(qv.rows()));
    }

    struct RowRecord {
        std::vector<KeyRange> ranges;
        std::size_t visible = 0;
        std::size_t prob_offset = 0;
    };
    std::vector<RowRecord> records(qv.rows());
    std::vector<std::size_t> row_base(qv.rows());
    std::size_t prob_total = 0;
    for (const auto& it : items) {
        for (std::size_t r = 0; r < it.mask->layout().total(); ++r) {
            RowRecord& rec = records[it.row_offset + r];
            it.mask->visible_ranges(r, rec.ranges);
            rec.visible = range_size(rec.ranges);
            rec.prob_offset = prob_total;
            prob_total += rec.visible * heads;
            row_base[it.row_offset + r] = it.row_offset;
        }
    }
    std::vector<T> probs(prob_total);
    std::vector<T> keys_t(kv.size());
    kernels::transpose(kv.data(), kv.rows(), d, keys_t.data());
    const std::size_t ld = kv.rows();
    Tensor<T> out(qv.shape());
    for (std::size_t row = 0; row < qv.rows(); ++row) {
        const RowRecord& rec = records[row];
        const std::size_t base = row_base[row];
        attend_one_row(qv.data() + row * d, keys_t.data() + base, ld, vv.data() + base * d, d, heads, scale,
                       std::span<const KeyRange>(rec.ranges), rec.visible, out.data() + row * d,
                       probs.data() + rec.prob_offset);
    }

    // Rows of one query segment share their key set (causal rows see a prefix
    // of it), so backward runs per segment with dense products over that set.
    struct QueryBlock {
        std::size_t row_begin = 0;
        std::size_t rows = 0;
        std::vector<KeyRange> cols;  // packed row indices
        std::size_t width = 0;
    };
    std::vector<QueryBlock> blocks;
    for (const auto& it : items) {
        for (const auto& seg : it.mask->layout().segments()) {
            if (seg.length == 0) continue;
            QueryBlock blk{it.row_offset + seg.start, seg.length, records[it.row_offset + seg.end() - 1].ranges, 0};
            for (auto& r : blk.cols) {
                r.begin += it.row_offset;
                r.end += it.row_offset;
                blk.width += r.end - r.begin;
            }
            blocks.push_back(std::move(blk));
        }
    }

    return q.graph().emit(std::move(out), {q, k, v},
                          [q, k, v, d, heads, scale, records = std::move(records), row_base = std::move(row_base),
                           blocks = std::move(blocks), probs = std::move(probs)](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        const Tensor<T>& qv = g.value(q.id());
        const Tensor<T>& kv = g.value(k.id());
        const Tensor<T>& vv = g.value(v.id());
        Tensor<T>* dq = g.needs_grad(q.id()) ? &g.grad(q.id()) : nullptr;
        Tensor<T>* dk = g.needs_grad(k.id()) ? &g.grad(k.id()) : nullptr;
        Tensor<T>* dv = g.needs_grad(v.id()) ? &g.grad(v.id()) : nullptr;
        const std::size_t hd = d / heads;
        const std::size_t total = qv.rows();

        // Per-head contiguous copies [total, hd].
        auto split = [&](const Tensor<T>& src, std::size_t h, std::vector<T>& dst) {
            dst.resize(total * hd);
            for (std::size_t r = 0; r < total; ++r) {
                std::copy_n(src.data() + r * d + h * hd, hd, dst.data() + r * hd);
            }
        };
        auto merge = [&](const std::vector<T>& src, std::size_t h, Tensor<T>& dst) {
            for (std::size_t r = 0; r < total; ++r) {
                T* o = dst.data() + r * d + h * hd;
                const T* s = src.data() + r * hd;
                for (std::size_t c = 0; c < hd; ++c) o[c] += s[c];
            }
        };
        auto gather = [&](const std::vector<T>& src, const QueryBlock& blk, std::vector<T>& dst) {
            dst.resize(blk.width * hd);
            std::size_t off = 0;
            for (const auto& r : blk.cols) {
                std::copy(src.begin() + r.begin * hd, src.begin() + r.end * hd, dst.begin() + off * hd);
                off += r.end - r.begin;
            }
        };
        auto scatter = [&](const std::vector<T>& src, const QueryBlock& blk, std::vector<T>& dst) {
            std::size_t off = 0;
            for (const auto& r : blk.cols) {
                const std::size_t n = (r.end - r.begin) * hd;
                for (std::size_t i = 0; i < n; ++i) dst[r.begin * hd + i] += src[off * hd + i];
                off += r.end - r.begin;
            }
        };

        std::vector<T> qh, kh, vh, gyh, dqh, dkh, dvh;
        std::vector<T> kg, vg, dkg, dvg, pm, dp;
        for (std::size_t h = 0; h < heads; ++h) {
            split(qv, h, qh);
            split(kv, h, kh);
            split(vv, h, vh);
            split(dy, h, gyh);
            dqh.assign(total * hd, T{0});
            dkh.assign(total * hd, T{0});
            dvh.assign(total * hd, T{0});
            for (const QueryBlock& blk : blocks) {
                const std::size_t nq = blk.rows;
                const std::size_t nk = blk.width;
                gather(kh, blk, kg);
                gather(vh, blk, vg);
                // Dense probabilities over the block's key set.
                pm.assign(nq * nk, T{0});
                for (std::size_t i = 0; i < nq; ++i) {
                    const std::size_t row = blk.row_begin + i;
                    const auto& rec = records[row];
                    const T* p = probs.data() + rec.prob_offset + h * rec.visible;
                    for (const auto& r : rec.ranges) {
                        const std::size_t begin = r.begin + row_base[row];
                        std::size_t col = 0;
                        for (const auto& c : blk.cols) {
                            if (begin >= c.begin && begin < c.end) {
                                col += begin - c.begin;
                                break;
                            }
                            col += c.end - c.begin;
                        }
                        std::copy_n(p, r.end - r.begin, pm.data() + i * nk + col);
                        p += r.end - r.begin;
                    }
                }
                const T* gy = gyh.data() + blk.row_begin * hd;
                dp.resize(nq * nk);
                kernels::gemm(gy, vg.data(), dp.data(), nq, hd, nk, false, true, false);
                for (std::size_t i = 0; i < nq; ++i) {
                    T* pr = pm.data() + i * nk;
                    T* dr = dp.data() + i * nk;
                    T inner{0};
                    for (std::size_t j = 0; j < nk; ++j) inner += pr[j] * dr[j];
                    for (std::size_t j = 0; j < nk; ++j) dr[j] = pr[j] * (dr[j] - inner) * scale;
                }
                if (dv) {
                    dvg.resize(nk * hd);
                    kernels::gemm(pm.data(), gy, dvg.data(), nk, nq, hd, true, false, false);
                    scatter(dvg, blk, dvh);
                }
                if (dq) kernels::gemm(dp.data(), kg.data(), dqh.data() + blk.row_begin * hd, nq, nk, hd, false, false, true);
                if (dk) {
                    dkg.resize(nk * hd);
                    kernels::gemm(dp.data(), qh.data() + blk.row_begin * hd, dkg.data(), nk, nq, hd, true, false, false);
                    scatter(dkg, blk, dkh);
                }
            }
            if (dq) merge(dqh, h, *dq);
            if (dk) merge(dkh, h, *dk);
            if (dv) merge(dvh, h, *dv);
        }
    });
}

template <typename T>
void attend_rows(const T* q, std::size_t n, std::size_t first_row, const T* keys, const T* values, std::size_t d,
                 std::size_t heads, const VisibilityMask& mask, T* out) {
    const T scale = T{1} / std::sqrt(static_cast<T>(d / heads));
    std::vector<KeyRange> ranges;
    std::vector<T> probs;
    const std::size_t ld = mask.layout().total();
    std::vector<T> keys_t(ld * d);
    kernels::transpose(keys, ld, d, keys_t.data());
    for (std::size_t i = 0; i < n; ++i) {
        mask.visible_ranges(first_row + i, ranges);
        const std::size_t visible = range_size(ranges);
        probs.resize(visible * heads);
        attend_one_row(q + i * d, keys_t.data(), ld, values, d, heads, scale, std::span<const KeyRange>(ranges), visible,
                       out + i * d, probs.data());
    }
}

template <typename T>
Tensor<T> attend_explicit(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                          const ExplicitMask& mask) {
    const std::size_t rows = q.rows();
    const std::size_t d = q.cols();
    if (mask.size != rows || k.rows() != rows || v.rows() != rows) {
        throw Error(ErrorCode::shape, "attend_explicit: mask size does not match inputs");
    }
    const std::size_t hd = d / heads;
    const T scale = T{1} / std::sqrt(static_cast<T>(hd));
    Tensor<T> out(q.shape());
    std::vector<T> scores(rows);
    std::vector<T> keys_t(k.size());
    kernels::transpose(k.data(), rows, d, keys_t.data());
    for (std::size_t r = 0; r < rows; ++r) {
        const std::span<const std::uint8_t> vis(mask.cells.data() + r * rows, rows);
        for (std::size_t h = 0; h < heads; ++h) {
            kernels::dot_cols(q.data() + r * d + h * hd, keys_t.data() + h * hd * rows, rows, rows, hd, scale,
                              scores.data());
            kernels::masked_softmax_row(std::span<T>(scores), vis);
            T* oh = out.data() + r * d + h * hd;
            const std::size_t all[2] = {0, rows};
            kernels::weighted_sum_ranges(scores.data(), std::span<const std::size_t>(all), v.data() + h * hd, d, hd, oh);
        }
    }
    return out;
}

// ---- KV cache ---------------------------------------------------------------

template <typename T>
void KVCache<T>::begin_prefill(const SequenceLayout& prefix) {
    if (prefix.has_image()) throw Error(ErrorCode::contract, "prefill prefix must not contain image tokens");
    for (auto& k : keys_) k.clear();
    for (auto& v : values_) v.clear();
    layout_ = prefix;
    prefilled_ = true;
}

template <typename T>
void KVCache<T>::begin_image_row() {
    if (!prefilled_) throw Error(ErrorCode::contract, "cache extended before prefill");
    layout_.append_image(1);
}

template <typename T>
void KVCache<T>::append(std::size_t layer, const T* k_rows, const T* v_rows, std::size_t n) {
    if (!prefilled_) throw Error(ErrorCode::contract, "cache extended before prefill");
    if (rows(layer) + n > layout_.total()) {
        throw Error(ErrorCode::contract, "cache rows would exceed the cached layout length");
    }
    keys_[layer].insert(keys_[layer].end(), k_rows, k_rows + n * width_);
    values_[layer].insert(values_[layer].end(), v_rows, v_rows + n * width_);
}

#define CTXAR_ATTENTION_INSTANTIATE(T)                                                                       \
    template Var<T> attend<T>(Var<T>, Var<T>, Var<T>, std::size_t, std::span<const PackedMask>);            \
    template void attend_rows<T>(const T*, std::size_t, std::size_t, const T*, const T*, std::size_t,       \
                                 std::size_t, const VisibilityMask&, T*);                                   \
    template Tensor<T> attend_explicit<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                                          const ExplicitMask&);                                             \
    template class KVCache<T>;

CTXAR_ATTENTION_INSTANTIATE(float)
CTXAR_ATTENTION_INSTANTIATE(double)

}  // namespace ctxar
