#include "ctxar/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace ctxar {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t x = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw Error(ErrorCode::config, key + ": expected an unsigned integer, got '" + v + "'");
    }
    return x;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
        return x;
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::config, key + ": expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw Error(ErrorCode::config, key + ": expected true/false, got '" + v + "'");
}

std::string num(double x) {
    std::ostringstream out;
    out.precision(17);
    out << x;
    return out.str();
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename M>
Field size_field(M member) {
    return {[member](RunConfig& c, const std::string& k, const std::string& v) {
                std::invoke(member, c) = static_cast<std::remove_reference_t<decltype(std::invoke(member, c))>>(
                    to_u64(k, v));
            },
            [member](const RunConfig& c) { return std::to_string(std::invoke(member, const_cast<RunConfig&>(c))); }};
}

template <typename M>
Field real_field(M member) {
    return {[member](RunConfig& c, const std::string& k, const std::string& v) { std::invoke(member, c) = to_double(k, v); },
            [member](const RunConfig& c) { return num(std::invoke(member, const_cast<RunConfig&>(c))); }};
}

template <typename M>
Field bool_field(M member) {
    return {[member](RunConfig& c, const std::string& k, const std::string& v) { std::invoke(member, c) = to_bool(k, v); },
            [member](const RunConfig& c) { return std::string(std::invoke(member, const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        t["dataset.scenes"] = size_field([](RunConfig& c) -> auto& { return c.dataset.scenes; });
        t["dataset.image_size"] = size_field([](RunConfig& c) -> auto& { return c.dataset.image_size; });
        t["dataset.min_shapes"] = size_field([](RunConfig& c) -> auto& { return c.dataset.min_shapes; });
        t["dataset.max_shapes"] = size_field([](RunConfig& c) -> auto& { return c.dataset.max_shapes; });
        t["dataset.min_size"] = size_field([](RunConfig& c) -> auto& { return c.dataset.min_size; });
        t["dataset.max_size"] = size_field([](RunConfig& c) -> auto& { return c.dataset.max_size; });
        t["dataset.gray_background"] = bool_field([](RunConfig& c) -> auto& { return c.dataset.gray_background; });
        t["dataset.seed"] = size_field([](RunConfig& c) -> auto& { return c.dataset.seed; });

        t["codebook.size"] = size_field([](RunConfig& c) -> auto& { return c.codebook_size; });
        t["codebook.patch"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                   c.patch.height = c.patch.width = to_u64(k, v);
                               },
                               [](const RunConfig& c) { return std::to_string(c.patch.height); }};
        t["codebook.seed"] = size_field([](RunConfig& c) -> auto& { return c.codebook_seed; });

        t["model.layers"] = size_field([](RunConfig& c) -> auto& { return c.model.layers; });
        t["model.heads"] = size_field([](RunConfig& c) -> auto& { return c.model.heads; });
        t["model.width"] = size_field([](RunConfig& c) -> auto& { return c.model.width; });
        t["model.ffn_hidden"] = size_field([](RunConfig& c) -> auto& { return c.model.ffn_hidden; });
        t["model.rope_base"] = real_field([](RunConfig& c) -> auto& { return c.model.rope_base; });
        t["model.norm_eps"] = real_field([](RunConfig& c) -> auto& { return c.model.norm_eps; });
        t["model.use_lpe"] = bool_field([](RunConfig& c) -> auto& { return c.model.use_lpe; });
        t["model.attention"] = {[](RunConfig& c, const std::string&, const std::string& v) {
                                    c.model.attention = parse_attention_mode(v);
                                },
                                [](const RunConfig& c) { return attention_mode_name(c.model.attention); }};
        t["model.conditions"] = {[](RunConfig& c, const std::string&, const std::string& v) {
                                     c.model.condition_kinds = parse_subset(v);
                                     for (const auto& k : c.model.condition_kinds) parse_condition_kind(k);
                                 },
                                 [](const RunConfig& c) {
                                     std::string s;
                                     for (const auto& k : c.model.condition_kinds) s += (s.empty() ? "" : ",") + k;
                                     return s.empty() ? std::string("none") : s;
                                 }};

        t["train.text_drop_p"] = real_field([](RunConfig& c) -> auto& { return c.train.text_drop_p; });
        t["train.cond_drop_p"] = real_field([](RunConfig& c) -> auto& { return c.train.cond_drop_p; });
        t["train.lr"] = real_field([](RunConfig& c) -> auto& { return c.train.lr; });
        t["train.beta1"] = real_field([](RunConfig& c) -> auto& { return c.train.beta1; });
        t["train.beta2"] = real_field([](RunConfig& c) -> auto& { return c.train.beta2; });
        t["train.eps"] = real_field([](RunConfig& c) -> auto& { return c.train.eps; });
        t["train.weight_decay"] = real_field([](RunConfig& c) -> auto& { return c.train.weight_decay; });
        t["train.batch_size"] = size_field([](RunConfig& c) -> auto& { return c.train.batch_size; });
        t["train.accumulation"] = size_field([](RunConfig& c) -> auto& { return c.train.accumulation; });
        t["train.iterations"] = size_field([](RunConfig& c) -> auto& { return c.train.iterations; });
        t["train.seed"] = size_field([](RunConfig& c) -> auto& { return c.train.seed; });
        t["train.checkpoint_every"] = size_field([](RunConfig& c) -> auto& { return c.checkpoint_every; });

        t["sample.cfg_scale"] = real_field([](RunConfig& c) -> auto& { return c.eval.sampler.cfg_scale; });
        t["sample.temperature"] = real_field([](RunConfig& c) -> auto& { return c.eval.sampler.temperature; });
        t["sample.top_k"] = size_field([](RunConfig& c) -> auto& { return c.eval.sampler.top_k; });
        t["sample.seed"] = size_field([](RunConfig& c) -> auto& { return c.eval.sampler.seed; });

        t["eval.samples"] = size_field([](RunConfig& c) -> auto& { return c.eval.samples; });
        t["eval.seed"] = size_field([](RunConfig& c) -> auto& { return c.eval.seed; });
        t["eval.use_text"] = bool_field([](RunConfig& c) -> auto& { return c.eval.use_text; });

        t["bench.max_conditions"] = size_field([](RunConfig& c) -> auto& { return c.bench.max_conditions; });
        t["bench.repetitions"] = size_field([](RunConfig& c) -> auto& { return c.bench.repetitions; });
        t["bench.warmup"] = size_field([](RunConfig& c) -> auto& { return c.bench.warmup; });
        t["bench.text_len"] = size_field([](RunConfig& c) -> auto& { return c.bench.text_len; });
        t["bench.seed"] = size_field([](RunConfig& c) -> auto& { return c.bench.seed; });

        t["ablate.iterations"] = size_field([](RunConfig& c) -> auto& { return c.ablate_iterations; });
        return t;
    }();
    return table;
}

}  // namespace

void RunConfig::finalize() {
    dataset.validate();
    if (patch.height == 0 || patch.width == 0 || dataset.image_size % patch.height != 0 ||
        dataset.image_size % patch.width != 0) {
        throw Error(ErrorCode::config, "codebook.patch must divide dataset.image_size");
    }
    model.codebook_size = codebook_size;
    model.text_vocab = kCaptionVocab;
    model.grid_h = dataset.image_size / patch.height;
    model.grid_w = dataset.image_size / patch.width;
    model.validate();
    train.validate();
    eval.sampler.validate(codebook_size);
    if (eval.samples == 0) throw Error(ErrorCode::config, "eval.samples must be positive");
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    const auto& t = fields();
    const auto it = t.find(key);
    if (it == t.end()) throw Error(ErrorCode::config, "unknown config key '" + key + "'");
    it->second.set(config, key, value);
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, f] : fields()) keys.push_back(k);
    return keys;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
    RunConfig config;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = source + ":" + std::to_string(lineno) + ": ";
        if (eq == std::string::npos) throw Error(ErrorCode::config, where + "expected key=value");
        try {
            set_config_value(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const Error& e) {
            throw Error(e.code(), where + e.what());
        }
    }
    return config;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io, "cannot open config " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), path);
}

std::string format_config(const RunConfig& config) {
    std::string out;
    for (const auto& [k, f] : fields()) out += k + "=" + f.get(config) + "\n";
    return out;
}

}  // namespace ctxar
