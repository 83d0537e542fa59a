#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctxar/config.hpp"
#include "ctxar/error.hpp"
#include "ctxar/experiment.hpp"
#include "ctxar/inference.hpp"
#include "ctxar/metrics.hpp"

namespace fs = std::filesystem;
using namespace ctxar;

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::vector<std::string> overrides;  // --set key=value
};

RunConfig load_run_config(const Globals& g) {
    RunConfig c = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
    for (const std::string& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error(ErrorCode::usage, "--set expects key=value, got '" + kv + "'");
        set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return c;
}

std::string out_path(const Globals& g, const std::string& name) {
    fs::create_directories(g.out);
    return (fs::path(g.out) / name).string();
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path);
    out << text;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Dataset and codebook must belong together.
struct Assets {
    Dataset dataset;
    Codebook codebook;
};

Assets load_assets(const std::string& dataset_path, const std::string& codebook_path) {
    Assets a{load_dataset(dataset_path), load_codebook(codebook_path)};
    const std::uint64_t h = dataset_hash(a.dataset);
    if (a.codebook.dataset_fingerprint != h) {
        throw Error(ErrorCode::fingerprint, "codebook " + codebook_path + " was fitted on dataset " +
                                                hex(a.codebook.dataset_fingerprint) + ", not " + dataset_path + " (" +
                                                hex(h) + ")");
    }
    return a;
}

// ---- subcommands ------------------------------------------------------------

int cmd_dataset_gen(const Globals& g) {
    RunConfig c = load_run_config(g);
    if (g.seed) c.dataset.seed = *g.seed;
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset d = generate_dataset(c.dataset);
    const double secs = seconds_since(t0);
    const std::string path = out_path(g, "scenes.txt");
    save_dataset(path, d);
    std::size_t kinds[3] = {0, 0, 0};
    for (const auto& s : d.scenes) {
        for (const auto& sh : s.shapes) ++kinds[static_cast<int>(sh.kind)];
    }
    std::cout << "scenes=" << d.scenes.size() << "\nseed=" << c.dataset.seed << "\nhash=" << hex(dataset_hash(d))
              << "\ncircles=" << kinds[0] << "\nsquares=" << kinds[1] << "\ntriangles=" << kinds[2]
              << "\nseconds=" << secs << "\npath=" << path << '\n';
    const Image preview = render_scene(d.scenes.front(), d.config.image_size);
    write_pnm(out_path(g, "scene0.ppm"), preview);
    return 0;
}

int cmd_codebook_fit(const Globals& g, const std::string& dataset_path) {
    RunConfig c = load_run_config(g);
    if (g.seed) c.codebook_seed = *g.seed;
    const Dataset d = load_dataset(dataset_path);
    const auto t0 = std::chrono::steady_clock::now();
    const Codebook cb = fit_dataset_codebook(d, c.codebook_size, c.patch, c.codebook_seed);
    const std::string path = out_path(g, "codebook.ctxc");
    save_codebook(path, cb);
    std::cout << "size=" << cb.size << "\npatch=" << cb.patch.height << 'x' << cb.patch.width
              << "\nroundtrip_mse=" << cb.roundtrip_mse << "\nfingerprint=" << hex(cb.fingerprint())
              << "\ndataset=" << hex(cb.dataset_fingerprint) << "\nseconds=" << seconds_since(t0)
              << "\npath=" << path << '\n';
    return 0;
}

int cmd_train(const Globals& g, const std::string& dataset_path, const std::string& codebook_path,
              const std::string& resume, std::optional<std::uint64_t> iterations) {
    RunConfig c = load_run_config(g);
    if (g.seed) c.train.seed = *g.seed;
    c.finalize();
    const Assets a = load_assets(dataset_path, codebook_path);

    std::optional<Trainer> trainer;
    if (!resume.empty()) {
        trainer.emplace(load_checkpoint(resume, a.codebook.fingerprint()));
    } else {
        trainer.emplace(c.model, c.train, a.codebook.fingerprint());
    }
    const std::uint64_t until = iterations ? *iterations : trainer->config().iterations;
    const std::vector<TrainingExample> data = build_examples(a.dataset, a.codebook, trainer->model().config());
    const std::string ckpt_path = out_path(g, "checkpoint.ctxm");
    std::ofstream log(out_path(g, "train_log.csv"), resume.empty() ? std::ios::trunc : std::ios::app);
    if (resume.empty()) log << "iteration,loss,seconds\n";

    const auto t0 = std::chrono::steady_clock::now();
    train_until(*trainer, data, until, [&](std::uint64_t it, double loss) {
        log << it << ',' << loss << ',' << seconds_since(t0) << '\n';
        if (it % 50 == 0 || it == until) {
            std::cout << "iter=" << it << " loss=" << loss << " seconds=" << seconds_since(t0) << std::endl;
        }
        if (c.checkpoint_every != 0 && it % c.checkpoint_every == 0 && it != until) {
            save_checkpoint(ckpt_path, trainer->checkpoint());
        }
    });
    save_checkpoint(ckpt_path, trainer->checkpoint());
    std::cout << "iteration=" << trainer->iteration() << "\ncheckpoint=" << ckpt_path << '\n';
    return 0;
}

int cmd_sample(const Globals& g, const std::string& checkpoint_path, const std::string& codebook_path,
               const std::vector<std::string>& conditions, const std::string& prompt,
               std::optional<double> cfg, std::optional<double> temperature, std::optional<std::size_t> top_k) {
    RunConfig c = load_run_config(g);
    const Codebook cb = load_codebook(codebook_path);
    const Checkpoint ckpt = load_checkpoint(checkpoint_path, cb.fingerprint());
    const Transformer<float> model = model_from_checkpoint(ckpt);

    GenerationRequest req;
    req.sampler = c.eval.sampler;
    if (g.seed) req.sampler.seed = *g.seed;
    if (cfg) req.sampler.cfg_scale = *cfg;
    if (temperature) req.sampler.temperature = *temperature;
    if (top_k) req.sampler.top_k = *top_k;
    for (const std::string& spec : conditions) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
            throw Error(ErrorCode::usage, "--conditions expects kind=path, got '" + spec + "'");
        }
        const std::string kind = spec.substr(0, eq);
        const std::string path = spec.substr(eq + 1);
        const std::string ext = fs::path(path).extension().string();
        TokenGrid grid;
        if (ext == ".ppm" || ext == ".pgm") grid = encode(to_rgb(read_pnm(path)), cb);
        else grid = load_token_grid(path);
        req.conditions.push_back({kind, grid});
    }
    if (!prompt.empty()) req.text = tokenize_prompt(prompt);

    const TokenGrid out = generate(model, req);
    const std::string grid_path = out_path(g, "sample.ctxg");
    const std::string image_path = out_path(g, "sample.ppm");
    save_token_grid(grid_path, out);
    write_pnm(image_path, decode(out, cb));
    std::cout << "cfg_scale=" << req.sampler.cfg_scale << "\ntemperature=" << req.sampler.temperature
              << "\nseed=" << req.sampler.seed << "\ngrid=" << grid_path << "\nimage=" << image_path << '\n';
    return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint_path, const std::string& codebook_path,
             const std::string& dataset_path, const std::string& subset, std::optional<std::size_t> samples,
             std::optional<double> cfg) {
    RunConfig c = load_run_config(g);
    if (g.seed) c.eval.sampler.seed = *g.seed;
    if (samples) c.eval.samples = *samples;
    if (cfg) c.eval.sampler.cfg_scale = *cfg;
    const Assets a = load_assets(dataset_path, codebook_path);
    const Checkpoint ckpt = load_checkpoint(checkpoint_path, a.codebook.fingerprint());
    const Transformer<float> model = model_from_checkpoint(ckpt);

    std::vector<std::vector<std::string>> subsets;
    if (subset.empty()) {
        subsets = all_subsets(model.config().condition_kinds);
    } else {
        subsets.push_back(parse_subset(subset));
        for (const auto& k : subsets.front()) model.config().kind_index(k);
        // Unconditional baseline alongside the requested subset.
        if (!subsets.front().empty()) subsets.push_back({});
    }
    const auto scenes = eval_scenes(a.dataset.config, c.eval, a.codebook);
    const MetricsReport report = evaluate(model, a.codebook, scenes, subsets, c.eval);
    const std::string text = format_report(report);
    write_text(out_path(g, "metrics.txt"), text);
    std::cout << text;
    return 0;
}

int cmd_bench(const Globals& g) {
    RunConfig c = load_run_config(g);
    if (g.seed) c.bench.seed = *g.seed;
    c.finalize();
    const BenchReport report = bench_attention(c.model, c.bench);
    const std::string text = format_bench(report);
    write_text(out_path(g, "bench.txt"), text);
    std::cout << text;
    return 0;
}

int cmd_ablate(const Globals& g, const std::string& dataset_path, const std::string& codebook_path) {
    RunConfig c = load_run_config(g);
    if (g.seed) c.train.seed = *g.seed;
    c.finalize();
    const Assets a = load_assets(dataset_path, codebook_path);
    const std::vector<TrainingExample> data = build_examples(a.dataset, a.codebook, c.model);
    const auto scenes = eval_scenes(a.dataset.config, c.eval, a.codebook);
    const std::uint64_t iters = c.ablate_iterations != 0 ? c.ablate_iterations : c.train.iterations;
    const AblationReport report = ablate_lpe(data, a.codebook, scenes, c.model, c.train, iters, c.eval,
                                             [](const std::string& line) { std::cout << line << std::endl; });
    const std::string text = format_ablation(report);
    write_text(out_path(g, "ablate_lpe.txt"), text);
    std::cout << text;
    return 0;
}

std::string one_line(std::string s) {
    for (char& ch : s) {
        if (ch == '\n' || ch == '\r') ch = ' ';
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Context-conditioned autoregressive image generation at toy scale"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "key=value config file")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "seed for the subcommand's randomness");
    app.add_option("--out", g.out, "output directory");
    app.add_option("--set", g.overrides, "config override key=value (repeatable)");

    std::string dataset_path, codebook_path, checkpoint_path, resume, prompt, subset;
    std::vector<std::string> conditions;
    std::optional<std::uint64_t> iterations;
    std::optional<std::size_t> samples, top_k;
    std::optional<double> cfg, temperature;

    auto* dataset = app.add_subcommand("dataset", "synthetic scene dataset");
    dataset->require_subcommand(1);
    auto* dataset_gen = dataset->add_subcommand("gen", "generate scenes.txt");

    auto* codebook = app.add_subcommand("codebook", "patch codebook");
    codebook->require_subcommand(1);
    auto* codebook_fit = codebook->add_subcommand("fit", "fit codebook.ctxc on a dataset");
    codebook_fit->add_option("--dataset", dataset_path, "scenes.txt")->required();

    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--dataset", dataset_path, "scenes.txt")->required();
    train->add_option("--codebook", codebook_path, "codebook.ctxc")->required();
    train->add_option("--resume", resume, "checkpoint to continue from");
    train->add_option("--iterations", iterations, "stop at this iteration count");

    auto* sample = app.add_subcommand("sample", "generate one image");
    sample->add_option("--checkpoint", checkpoint_path)->required();
    sample->add_option("--codebook", codebook_path)->required();
    sample->add_option("--conditions", conditions, "kind=path (.ctxg grid or .ppm/.pgm map)")->delimiter(',');
    sample->add_option("--prompt", prompt, "caption words");
    sample->add_option("--cfg", cfg, "guidance scale");
    sample->add_option("--temperature", temperature);
    sample->add_option("--top-k", top_k);

    auto* eval = app.add_subcommand("eval", "adherence metrics on held-out scenes");
    eval->add_option("--checkpoint", checkpoint_path)->required();
    eval->add_option("--codebook", codebook_path)->required();
    eval->add_option("--dataset", dataset_path, "training scenes.txt (for its config)")->required();
    eval->add_option("--subset", subset, "comma-separated kinds, or none; default all subsets");
    eval->add_option("--samples", samples);
    eval->add_option("--cfg", cfg);

    auto* bench = app.add_subcommand("bench-attn", "attention cost per mode and condition count");

    auto* ablate = app.add_subcommand("ablate-lpe", "train with and without learned positional offsets");
    ablate->add_option("--dataset", dataset_path)->required();
    ablate->add_option("--codebook", codebook_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << '\n';
        return 2;
    }

    try {
        if (*dataset_gen) return cmd_dataset_gen(g);
        if (*codebook_fit) return cmd_codebook_fit(g, dataset_path);
        if (*train) return cmd_train(g, dataset_path, codebook_path, resume, iterations);
        if (*sample) return cmd_sample(g, checkpoint_path, codebook_path, conditions, prompt, cfg, temperature, top_k);
        if (*eval) return cmd_eval(g, checkpoint_path, codebook_path, dataset_path, subset, samples, cfg);
        if (*bench) return cmd_bench(g);
        if (*ablate) return cmd_ablate(g, dataset_path, codebook_path);
    } catch (const Error& e) {
        std::cerr << "error: " << error_code_name(e.code()) << ": " << one_line(e.what()) << '\n';
        return e.code() == ErrorCode::usage ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << one_line(e.what()) << '\n';
        return 1;
    }
    return 2;
}
