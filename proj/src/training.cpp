#include "ctxar/training.hpp"

#include <cmath>
#include <sstream>

#include "ctxar/binary_io.hpp"

namespace ctxar {

void TrainConfig::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::config, std::string(name) + " must be in [0, 1]");
    };
    prob(text_drop_p, "text_drop_p");
    prob(cond_drop_p, "cond_drop_p");
    if (!(lr > 0.0)) throw Error(ErrorCode::config, "lr must be positive");
    if (batch_size == 0 || accumulation == 0 || batch_size % accumulation != 0) {
        throw Error(ErrorCode::config, "batch_size " + std::to_string(batch_size) +
                                           " must be a positive multiple of accumulation " +
                                           std::to_string(accumulation));
    }
}

ActiveSet drop_conditions(std::mt19937_64& rng, std::span<const std::uint8_t> present, bool text_present,
                          const TrainConfig& config) {
    ActiveSet active{0, false};
    for (std::uint8_t kind : present) {
        const bool dropped = uniform01(rng) < config.cond_drop_p;
        active.set(kind, !dropped);
    }
    const bool text_dropped = uniform01(rng) < config.text_drop_p;
    active.text = text_present && !text_dropped;
    return active;
}

double training_step(Transformer<float>& model, OptimizerState<float>& optimizer,
                     std::span<const TrainingExample> batch, std::span<const ActiveSet> active,
                     const TrainConfig& config, std::uint64_t iteration) {
    if (batch.size() != active.size()) throw Error(ErrorCode::shape, "one active set per example required");
    if (batch.empty() || batch.size() % config.accumulation != 0) {
        throw Error(ErrorCode::shape, "batch of " + std::to_string(batch.size()) + " does not split into " +
                                          std::to_string(config.accumulation) + " micro-batches");
    }
    const ModelConfig& mc = model.config();
    const SequenceConfig sc = mc.sequence_config();
    const std::size_t micro = batch.size() / config.accumulation;
    const float inv_accum = 1.0f / static_cast<float>(config.accumulation);

    model.zero_grad();
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < batch.size(); start += micro) {
        std::vector<UnifiedSequence> seqs;
        std::vector<VisibilityMask> masks;
        for (std::size_t i = start; i < start + micro; ++i) {
            const TrainingExample& ex = batch[i];
            seqs.push_back(build_sequence(ex.conditions, ex.text, &ex.image, sc));
            masks.push_back(build_mask(SequenceLayout::of(seqs.back()), mc.attention, active[i]));
        }
        Graph<float> graph(true);
        Var<float> loss = model.loss(graph, seqs, masks);
        const float value = loss.value().item();
        if (!std::isfinite(value)) {
            throw Error(ErrorCode::numeric, "non-finite loss at iteration " + std::to_string(iteration));
        }
        loss_sum += value;
        graph.backward(scale(loss, inv_accum));
    }
    auto params = model.parameters();
    adamw_step<float>(params, optimizer, config.adamw());
    return loss_sum / static_cast<double>(config.accumulation);
}

// ---- trainer ----------------------------------------------------------------

Trainer::Trainer(const ModelConfig& model_config, const TrainConfig& train_config,
                 std::uint64_t codebook_fingerprint)
    : config_(train_config), model_(model_config, train_config.seed), rng_(train_config.seed ^ 0x9e3779b97f4a7c15ULL),
      fingerprint_(codebook_fingerprint) {
    config_.validate();
}

Trainer::Trainer(const Checkpoint& ckpt)
    : config_(ckpt.train_config), model_(model_from_checkpoint(ckpt)), optimizer_(ckpt.optimizer),
      iteration_(ckpt.iteration), fingerprint_(ckpt.codebook_fingerprint) {
    config_.validate();
    std::istringstream in(ckpt.rng_state);
    in >> rng_;
    if (!in) throw Error(ErrorCode::format, "checkpoint RNG state is unreadable");
}

double Trainer::step(std::span<const TrainingExample> data) {
    if (data.empty()) throw Error(ErrorCode::data, "training set is empty");
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::vector<TrainingExample> batch;
    std::vector<ActiveSet> active;
    batch.reserve(config_.batch_size);
    for (std::size_t i = 0; i < config_.batch_size; ++i) {
        const TrainingExample& ex = data[pick(rng_)];
        std::vector<std::uint8_t> present;
        for (const auto& c : ex.conditions) present.push_back(c.kind);
        active.push_back(drop_conditions(rng_, present, !ex.text.empty(), config_));
        batch.push_back(ex);
    }
    const double loss = training_step(model_, optimizer_, batch, active, config_, iteration_);
    ++iteration_;
    return loss;
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.model_config = model_.config();
    c.train_config = config_;
    for (const Parameter<float>* p : model_.parameters()) {
        Parameter<float> copy(p->name, p->value, p->decay);
        copy.trainable = p->trainable;
        c.parameters.push_back(std::move(copy));
    }
    c.optimizer = optimizer_;
    std::ostringstream out;
    out << rng_;
    c.rng_state = out.str();
    c.iteration = iteration_;
    c.codebook_fingerprint = fingerprint_;
    return c;
}

Transformer<float> model_from_checkpoint(const Checkpoint& ckpt) {
    Transformer<float> model(ckpt.model_config, 0);
    auto params = model.parameters();
    if (params.size() != ckpt.parameters.size()) {
        throw Error(ErrorCode::format, "checkpoint holds " + std::to_string(ckpt.parameters.size()) +
                                           " parameters, model has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter<float>& src = ckpt.parameters[i];
        if (src.name != params[i]->name || src.value.shape() != params[i]->value.shape()) {
            throw Error(ErrorCode::format, "checkpoint parameter " + src.name + " " + shape_str(src.value.shape()) +
                                               " does not match " + params[i]->name + " " +
                                               shape_str(params[i]->value.shape()));
        }
        params[i]->value = src.value;
        params[i]->trainable = src.trainable;
        params[i]->zero_grad();
    }
    return model;
}

// ---- serialization ----------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void write_tensor(ByteWriter& w, const Tensor<float>& t) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float x : t.values()) w.f32(x);
}

Tensor<float> read_tensor(ByteReader& r) {
    const std::uint32_t rank = r.u32();
    if (rank > 4) throw Error(ErrorCode::format, "checkpoint tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    Tensor<float> t(shape);
    for (auto& x : t.storage()) x = r.f32();
    return t;
}

void write_model_config(ByteWriter& w, const ModelConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.layers));
    w.u32(static_cast<std::uint32_t>(c.heads));
    w.u32(static_cast<std::uint32_t>(c.width));
    w.u32(static_cast<std::uint32_t>(c.ffn_hidden));
    w.u32(static_cast<std::uint32_t>(c.codebook_size));
    w.u32(static_cast<std::uint32_t>(c.text_vocab));
    w.u32(static_cast<std::uint32_t>(c.grid_h));
    w.u32(static_cast<std::uint32_t>(c.grid_w));
    w.u32(static_cast<std::uint32_t>(c.condition_kinds.size()));
    for (const auto& k : c.condition_kinds) w.str(k);
    w.u8(static_cast<std::uint8_t>(c.attention));
    w.f64(c.rope_base);
    w.u8(c.use_lpe ? 1 : 0);
    w.f64(c.norm_eps);
}

ModelConfig read_model_config(ByteReader& r) {
    ModelConfig c;
    c.layers = r.u32();
    c.heads = r.u32();
    c.width = r.u32();
    c.ffn_hidden = r.u32();
    c.codebook_size = r.u32();
    c.text_vocab = r.u32();
    c.grid_h = r.u32();
    c.grid_w = r.u32();
    c.condition_kinds.resize(r.u32());
    for (auto& k : c.condition_kinds) k = r.str();
    const std::uint8_t mode = r.u8();
    if (mode > static_cast<std::uint8_t>(AttentionMode::ccpr_icbp)) {
        throw Error(ErrorCode::format, "checkpoint attention mode " + std::to_string(mode));
    }
    c.attention = static_cast<AttentionMode>(mode);
    c.rope_base = r.f64();
    c.use_lpe = r.u8() != 0;
    c.norm_eps = r.f64();
    c.validate();
    return c;
}

void write_train_config(ByteWriter& w, const TrainConfig& c) {
    w.f64(c.text_drop_p);
    w.f64(c.cond_drop_p);
    w.f64(c.lr);
    w.f64(c.beta1);
    w.f64(c.beta2);
    w.f64(c.eps);
    w.f64(c.weight_decay);
    w.u64(c.batch_size);
    w.u64(c.accumulation);
    w.u64(c.iterations);
    w.u64(c.seed);
}

TrainConfig read_train_config(ByteReader& r) {
    TrainConfig c;
    c.text_drop_p = r.f64();
    c.cond_drop_p = r.f64();
    c.lr = r.f64();
    c.beta1 = r.f64();
    c.beta2 = r.f64();
    c.eps = r.f64();
    c.weight_decay = r.f64();
    c.batch_size = r.u64();
    c.accumulation = r.u64();
    c.iterations = r.u64();
    c.seed = r.u64();
    return c;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
    ByteWriter w;
    w.magic("CTXM");
    w.u32(kCheckpointVersion);
    write_model_config(w, c.model_config);
    write_train_config(w, c.train_config);
    w.u32(static_cast<std::uint32_t>(c.parameters.size()));
    for (const auto& p : c.parameters) {
        w.str(p.name);
        w.u8(p.decay ? 1 : 0);
        w.u8(p.trainable ? 1 : 0);
        write_tensor(w, p.value);
    }
    w.u64(c.optimizer.step);
    const bool moments = !c.optimizer.first_moment.empty();
    w.u8(moments ? 1 : 0);
    if (moments) {
        if (c.optimizer.first_moment.size() != c.parameters.size() ||
            c.optimizer.second_moment.size() != c.parameters.size()) {
            throw Error(ErrorCode::contract, "optimizer state does not match the parameter list");
        }
        for (std::size_t i = 0; i < c.parameters.size(); ++i) {
            write_tensor(w, c.optimizer.first_moment[i]);
            write_tensor(w, c.optimizer.second_moment[i]);
        }
    }
    w.str(c.rng_state);
    w.u64(c.iteration);
    w.u64(c.codebook_fingerprint);
    return w.data();
}

Checkpoint deserialize_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what) {
    ByteReader r(std::move(bytes), what);
    r.expect_magic("CTXM");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw Error(ErrorCode::format, what + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    c.model_config = read_model_config(r);
    c.train_config = read_train_config(r);
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const bool decay = r.u8() != 0;
        const bool trainable = r.u8() != 0;
        Parameter<float> p(std::move(name), read_tensor(r), decay);
        p.trainable = trainable;
        c.parameters.push_back(std::move(p));
    }
    c.optimizer.step = r.u64();
    if (r.u8() != 0) {
        for (std::uint32_t i = 0; i < count; ++i) {
            c.optimizer.first_moment.push_back(read_tensor(r));
            c.optimizer.second_moment.push_back(read_tensor(r));
        }
    }
    c.rng_state = r.str();
    c.iteration = r.u64();
    c.codebook_fingerprint = r.u64();
    r.expect_end();
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
    write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_fingerprint) {
    Checkpoint c = deserialize_checkpoint(read_file(path), path);
    if (expected_fingerprint && *expected_fingerprint != c.codebook_fingerprint) {
        std::ostringstream msg;
        msg << path << " was trained with codebook fingerprint " << std::hex << c.codebook_fingerprint
            << ", active codebook has " << *expected_fingerprint;
        throw Error(ErrorCode::fingerprint, msg.str());
    }
    return c;
}

}  // namespace ctxar
