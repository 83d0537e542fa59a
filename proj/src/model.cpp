#include "ctxar/model.hpp"

#include <cmath>
#include <random>

#include "ctxar/kernels.hpp"

namespace ctxar {

// ---- config -----------------------------------------------------------------

std::size_t ModelConfig::ffn() const noexcept {
    if (ffn_hidden != 0) return ffn_hidden;
    const std::size_t raw = (8 * width) / 3;
    return ((raw + 31) / 32) * 32;
}

SequenceConfig ModelConfig::sequence_config() const {
    return SequenceConfig{kinds(), grid_h, grid_w, start_token()};
}

std::uint8_t ModelConfig::kind_index(const std::string& name) const {
    for (std::size_t i = 0; i < condition_kinds.size(); ++i) {
        if (condition_kinds[i] == name) return static_cast<std::uint8_t>(i);
    }
    std::string known;
    for (const auto& k : condition_kinds) known += (known.empty() ? "" : ",") + k;
    throw Error(ErrorCode::config, "unknown condition kind '" + name + "' (trained kinds: " + known + ")");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::config, m); };
    if (layers == 0 || heads == 0 || width == 0) fail("layers, heads and width must be positive");
    if (width % heads != 0) fail("width " + std::to_string(width) + " is not divisible by heads " + std::to_string(heads));
    if (head_dim() % 4 != 0) fail("head_dim " + std::to_string(head_dim()) + " must be divisible by 4 for 2-D RoPE");
    if (codebook_size == 0 || codebook_size > 0xFFFF) fail("codebook size must be in [1, 65535]");
    if (text_vocab == 0) fail("text vocabulary must be non-empty");
    if (grid_h == 0 || grid_w == 0) fail("grid must be non-empty");
    if (condition_kinds.size() > 32) fail("at most 32 condition kinds");
    for (std::size_t i = 0; i < condition_kinds.size(); ++i) {
        for (std::size_t j = i + 1; j < condition_kinds.size(); ++j) {
            if (condition_kinds[i] == condition_kinds[j]) fail("duplicate condition kind " + condition_kinds[i]);
        }
    }
}

// ---- parameters -------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.storage()) x = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
Tensor<T> ones(std::size_t n) {
    return Tensor<T>(Shape{n}, T{1});
}

}  // namespace

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const std::size_t d = config_.width;
    const std::size_t vocab = config_.codebook_size + 1;  // + start token
    const std::size_t f = config_.ffn();
    const double std_w = 0.02;
    const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.layers));
    std::mt19937_64 rng(seed);

    rope_ = Rope2d<T>(config_.head_dim(), config_.grid_h, config_.grid_w, config_.rope_base);
    embed_image_ = Parameter<T>("embed.image", normal_tensor<T>({vocab, d}, std_w, rng));
    for (std::size_t k = 0; k < config_.kinds(); ++k) {
        // Condition tables start as exact copies of the image table.
        embed_cond_.emplace_back("embed.cond." + config_.condition_kinds[k], embed_image_.value);
    }
    embed_text_ = Parameter<T>("embed.text", normal_tensor<T>({config_.text_vocab, d}, std_w, rng));
    for (std::size_t k = 0; k < config_.kinds(); ++k) {
        lpe_.emplace_back("lpe." + config_.condition_kinds[k],
                          normal_tensor<T>({config_.image_tokens(), config_.head_dim()}, std_w, rng));
        lpe_.back().trainable = config_.use_lpe;
        if (!config_.use_lpe) lpe_.back().value.fill(T{0});
    }
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Layer layer;
        layer.attn_norm = Parameter<T>(p + "attn_norm", ones<T>(d));
        layer.wq = Parameter<T>(p + "wq", normal_tensor<T>({d, d}, std_w, rng), true);
        layer.wk = Parameter<T>(p + "wk", normal_tensor<T>({d, d}, std_w, rng), true);
        layer.wv = Parameter<T>(p + "wv", normal_tensor<T>({d, d}, std_w, rng), true);
        layer.wo = Parameter<T>(p + "wo", normal_tensor<T>({d, d}, std_out, rng), true);
        layer.mlp_norm = Parameter<T>(p + "mlp_norm", ones<T>(d));
        layer.w_gate = Parameter<T>(p + "w_gate", normal_tensor<T>({d, f}, std_w, rng), true);
        layer.w_up = Parameter<T>(p + "w_up", normal_tensor<T>({d, f}, std_w, rng), true);
        layer.w_down = Parameter<T>(p + "w_down", normal_tensor<T>({f, d}, std_out, rng), true);
        layers_.push_back(std::move(layer));
    }
    final_norm_ = Parameter<T>("final_norm", ones<T>(d));
    head_ = Parameter<T>("head", normal_tensor<T>({d, config_.codebook_size}, std_w, rng), true);
}

template <typename T>
std::vector<Parameter<T>*> Transformer<T>::parameters() {
    std::vector<Parameter<T>*> out{&embed_image_};
    for (auto& p : embed_cond_) out.push_back(&p);
    out.push_back(&embed_text_);
    for (auto& p : lpe_) out.push_back(&p);
    for (auto& l : layers_) {
        for (Parameter<T>* p : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w_gate, &l.w_up, &l.w_down}) {
            out.push_back(p);
        }
    }
    out.push_back(&final_norm_);
    out.push_back(&head_);
    return out;
}

template <typename T>
std::vector<const Parameter<T>*> Transformer<T>::parameters() const {
    auto mutable_params = const_cast<Transformer*>(this)->parameters();
    return {mutable_params.begin(), mutable_params.end()};
}

template <typename T>
Parameter<T>& Transformer<T>::parameter(const std::string& name) {
    for (Parameter<T>* p : parameters()) {
        if (p->name == name) return *p;
    }
    throw Error(ErrorCode::range, "no parameter named " + name);
}

template <typename T>
void Transformer<T>::zero_grad() {
    for (Parameter<T>* p : parameters()) p->zero_grad();
}

// ---- training forward -------------------------------------------------------

template <typename T>
Var<T> Transformer<T>::forward(Graph<T>& graph, std::span<const UnifiedSequence> batch,
                               std::span<const VisibilityMask> masks) {
    if (batch.size() != masks.size() || batch.empty()) {
        throw Error(ErrorCode::shape, "forward needs one mask per sequence");
    }
    const std::size_t heads = config_.heads;

    EmbeddingVars<T> tables;
    tables.image = graph.param(embed_image_);
    for (auto& p : embed_cond_) tables.conditions.push_back(graph.param(p));
    tables.text = graph.param(embed_text_);

    std::vector<Var<T>> parts;
    std::vector<std::optional<GridPos>> positions;
    std::vector<RowSegment> cond_segments;
    std::vector<PackedMask> packed;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const UnifiedSequence& seq = batch[i];
        if (!(masks[i].layout() == SequenceLayout::of(seq))) {
            throw Error(ErrorCode::contract, "mask layout does not match sequence " + std::to_string(i));
        }
        parts.push_back(embed(seq, tables));
        auto pos = seq.positions();
        positions.insert(positions.end(), pos.begin(), pos.end());
        std::size_t seg_off = offset;
        for (const auto& s : seq.segments) {
            if (s.role.is_condition()) cond_segments.push_back(RowSegment{seg_off, s.length(), s.role, 0});
            seg_off += s.length();
        }
        packed.push_back(PackedMask{offset, &masks[i]});
        offset += seq.length();
    }
    Var<T> x = parts.size() == 1 ? parts[0] : concat_rows(std::span<const Var<T>>(parts));

    std::vector<Var<T>> lpe_vars;
    if (config_.use_lpe) {
        for (auto& p : lpe_) lpe_vars.push_back(graph.param(p));
    }
    const T eps = static_cast<T>(config_.norm_eps);
    const std::span<const std::optional<GridPos>> pos_span(positions);
    for (auto& layer : layers_) {
        Var<T> h = rmsnorm(x, graph.param(layer.attn_norm), eps);
        Var<T> q = rope2d(matmul(h, graph.param(layer.wq)), pos_span, heads, rope_);
        Var<T> k = rope2d(matmul(h, graph.param(layer.wk)), pos_span, heads, rope_);
        Var<T> v = matmul(h, graph.param(layer.wv));
        if (config_.use_lpe && !cond_segments.empty()) {
            q = apply_lpe(q, std::span<const RowSegment>(cond_segments), std::span<const Var<T>>(lpe_vars), heads);
            k = apply_lpe(k, std::span<const RowSegment>(cond_segments), std::span<const Var<T>>(lpe_vars), heads);
        }
        Var<T> a = attend(q, k, v, heads, std::span<const PackedMask>(packed));
        x = add(x, matmul(a, graph.param(layer.wo)));
        Var<T> h2 = rmsnorm(x, graph.param(layer.mlp_norm), eps);
        Var<T> gate = silu(matmul(h2, graph.param(layer.w_gate)));
        Var<T> up = matmul(h2, graph.param(layer.w_up));
        x = add(x, matmul(mul(gate, up), graph.param(layer.w_down)));
    }
    x = rmsnorm(x, graph.param(final_norm_), eps);
    return matmul(x, graph.param(head_));
}

LossTargets image_loss_targets(std::span<const UnifiedSequence> batch) {
    LossTargets out;
    for (const auto& seq : batch) {
        for (const auto& s : seq.segments) {
            const bool image = s.role.kind == RoleKind::image;
            for (std::size_t i = 0; i < s.length(); ++i) {
                out.targets.push_back(image ? seq.image_targets.at(i) : 0);
                out.mask.push_back(image ? 1 : 0);
            }
        }
    }
    return out;
}

template <typename T>
Var<T> Transformer<T>::loss(Graph<T>& graph, std::span<const UnifiedSequence> batch,
                            std::span<const VisibilityMask> masks) {
    Var<T> logits = forward(graph, batch, masks);
    const LossTargets t = image_loss_targets(batch);
    return cross_entropy(logits, std::span<const std::uint32_t>(t.targets), std::span<const std::uint8_t>(t.mask));
}

template <typename To, typename From>
void copy_parameters(const Transformer<From>& from, Transformer<To>& to) {
    if (!(from.config() == to.config())) throw Error(ErrorCode::config, "copy_parameters: config mismatch");
    auto src = from.parameters();
    auto dst = to.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i]->value = src[i]->value.template cast<To>();
        dst[i]->trainable = src[i]->trainable;
        dst[i]->zero_grad();
    }
}

// ---- incremental inference --------------------------------------------------

namespace {

template <typename T>
void rmsnorm_rows(const T* x, const T* w, T* y, std::size_t n, std::size_t d, T eps) {
    for (std::size_t r = 0; r < n; ++r) {
        const T* xr = x + r * d;
        T ms{0};
        for (std::size_t c = 0; c < d; ++c) ms += xr[c] * xr[c];
        ms /= static_cast<T>(d);
        const T inv = T{1} / std::sqrt(ms + eps);
        for (std::size_t c = 0; c < d; ++c) y[r * d + c] = xr[c] * inv * w[c];
    }
}

}  // namespace

template <typename T>
DecodeSession<T>::DecodeSession(const Transformer<T>& model)
    : model_(&model), cache_(model.config().layers, model.config().width) {}

template <typename T>
Tensor<T> DecodeSession<T>::prefill(const UnifiedSequence& prefix) {
    const SequenceLayout layout = SequenceLayout::of(prefix);
    cache_.begin_prefill(layout);
    image_steps_ = 0;
    Rows rows;
    std::size_t off = 0;
    for (const auto& s : prefix.segments) {
        for (std::size_t i = 0; i < s.length(); ++i) {
            rows.ids.push_back(s.ids[i]);
            rows.roles.push_back(s.role);
            rows.positions.push_back(s.position(i));
        }
        if (s.role.is_condition()) rows.condition_segments.push_back(RowSegment{off, s.length(), s.role, 0});
        off += s.length();
    }
    if (rows.ids.empty()) return Tensor<T>(Shape{0, model_->config().codebook_size});
    const VisibilityMask mask = build_mask(layout, model_->config().attention);
    return run(rows, 0, mask);
}

template <typename T>
std::vector<T> DecodeSession<T>::step(std::uint32_t input_token) {
    const ModelConfig& cfg = model_->config();
    if (!cache_.prefilled()) throw Error(ErrorCode::contract, "decode step before prefill");
    if (image_steps_ >= cfg.image_tokens()) throw Error(ErrorCode::contract, "image grid already complete");
    cache_.begin_image_row();
    Rows rows;
    rows.ids.push_back(input_token);
    rows.roles.push_back(SegmentRole::image());
    rows.positions.push_back(GridPos{static_cast<std::uint32_t>(image_steps_ / cfg.grid_w),
                                     static_cast<std::uint32_t>(image_steps_ % cfg.grid_w)});
    const VisibilityMask mask = build_mask(cache_.layout(), cfg.attention);
    Tensor<T> logits = run(rows, cache_.length() - 1, mask);
    ++image_steps_;
    return std::move(logits.storage());
}

template <typename T>
Tensor<T> DecodeSession<T>::run(const Rows& rows, std::size_t first_row, const VisibilityMask& mask) {
    const Transformer<T>& m = *model_;
    const ModelConfig& cfg = m.config();
    const std::size_t n = rows.ids.size();
    const std::size_t d = cfg.width;
    const std::size_t f = cfg.ffn();
    const std::size_t heads = cfg.heads;
    const T eps = static_cast<T>(cfg.norm_eps);

    std::vector<T> x(n * d), h(n * d), q(n * d), k(n * d), v(n * d), a(n * d);
    std::vector<T> gate(n * f), up(n * f);
    for (std::size_t i = 0; i < n; ++i) {
        const SegmentRole& role = rows.roles[i];
        const Parameter<T>& table = role.kind == RoleKind::condition ? m.condition_embedding(role.condition)
                                    : role.kind == RoleKind::text    ? m.text_embedding()
                                                                     : m.image_embedding();
        if (rows.ids[i] >= table.value.dim(0)) {
            throw Error(ErrorCode::range, "token id " + std::to_string(rows.ids[i]) + " in " + role.name() +
                                              " segment exceeds table size " + std::to_string(table.value.dim(0)));
        }
        std::copy_n(table.value.data() + rows.ids[i] * d, d, x.data() + i * d);
    }

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& layer = m.layers()[l];
        rmsnorm_rows(x.data(), layer.attn_norm.value.data(), h.data(), n, d, eps);
        kernels::gemm(h.data(), layer.wq.value.data(), q.data(), n, d, d, false, false, false);
        kernels::gemm(h.data(), layer.wk.value.data(), k.data(), n, d, d, false, false, false);
        kernels::gemm(h.data(), layer.wv.value.data(), v.data(), n, d, d, false, false, false);
        for (std::size_t i = 0; i < n; ++i) {
            if (rows.positions[i]) {
                m.rope().apply(q.data() + i * d, heads, *rows.positions[i]);
                m.rope().apply(k.data() + i * d, heads, *rows.positions[i]);
            }
        }
        if (cfg.use_lpe) {
            for (const auto& seg : rows.condition_segments) {
                apply_lpe_rows(q.data(), d, heads, seg, m.lpe(seg.role.condition).value);
                apply_lpe_rows(k.data(), d, heads, seg, m.lpe(seg.role.condition).value);
            }
        }
        cache_.append(l, k.data(), v.data(), n);
        attend_rows(q.data(), n, first_row, cache_.keys(l), cache_.values(l), d, heads, mask, a.data());
        kernels::gemm(a.data(), layer.wo.value.data(), x.data(), n, d, d, false, false, true);

        rmsnorm_rows(x.data(), layer.mlp_norm.value.data(), h.data(), n, d, eps);
        kernels::gemm(h.data(), layer.w_gate.value.data(), gate.data(), n, d, f, false, false, false);
        kernels::gemm(h.data(), layer.w_up.value.data(), up.data(), n, d, f, false, false, false);
        for (std::size_t i = 0; i < n * f; ++i) {
            const T g = gate[i];
            gate[i] = g / (T{1} + std::exp(-g)) * up[i];
        }
        kernels::gemm(gate.data(), layer.w_down.value.data(), x.data(), n, f, d, false, false, true);
    }
    rmsnorm_rows(x.data(), m.final_norm().value.data(), h.data(), n, d, eps);
    Tensor<T> logits(Shape{n, cfg.codebook_size});
    kernels::gemm(h.data(), m.head().value.data(), logits.data(), n, d, cfg.codebook_size, false, false, false);
    return logits;
}

template class Transformer<float>;
template class Transformer<double>;
template class DecodeSession<float>;
template class DecodeSession<double>;

template void copy_parameters<double, float>(const Transformer<float>&, Transformer<double>&);
template void copy_parameters<float, double>(const Transformer<double>&, Transformer<float>&);
template void copy_parameters<float, float>(const Transformer<float>&, Transformer<float>&);
template void copy_parameters<double, double>(const Transformer<double>&, Transformer<double>&);

}  // namespace ctxar
