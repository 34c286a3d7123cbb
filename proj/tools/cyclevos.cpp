#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "cvos/config.hpp"
#include "cvos/experiment.hpp"
#include "cvos/image_io.hpp"
#include "cvos/kernels.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cvos;

namespace {

const std::vector<std::string> kCommon{"seed", "out"};
const std::vector<std::string> kSuiteKeys{"train-count", "val-count", "eval-count", "height",    "width",
                                          "length",      "min-targets", "max-targets", "distractors", "occlusion"};
const std::vector<std::string> kModelKeys{"features", "key-channels", "value-channels"};
const std::vector<std::string> kTrainKeys{"epochs",      "batch-size",      "lr",
                                          "gamma",       "cycle-mode",      "detach-cycle",
                                          "cycle-weight", "augment", "curriculum-base", "curriculum-step",
                                          "curriculum-period"};
const std::vector<std::string> kInferKeys{"strategy", "mem-period", "correction", "alpha",     "iters-n",
                                          "period-k", "clamp",      "gamma",      "soft-masks", "degrade",
                                          "degrade-checkpoint"};
const std::vector<std::string> kErfKeys{"erf-m", "erf-alpha", "erf-target", "erf-reference", "gamma"};
const std::vector<std::string> kAblateKeys{"seeds", "strategies", "degradations", "reuse", "alpha",
                                           "iters-n", "period-k", "clamp", "mem-period"};

struct Command {
    CLI::App* app = nullptr;
    std::string config_file;
    // key -> captured values (empty vector for a bare boolean flag)
    std::map<std::string, std::vector<std::string>> given;
    std::map<std::string, CLI::Option*> options;
};

void add_keys(Command& cmd, const std::vector<std::string>& keys) {
    for (const auto& key : keys) {
        if (cmd.options.count(key)) continue;
        const auto* k = find_config_key(key);
        auto& slot = cmd.given[key];
        auto* opt = cmd.app->add_option("--" + key, slot, k->help + " [" + k->default_value + "]");
        if (k->kind == ValueKind::Bool) {
            opt->expected(0, 1);
        } else {
            opt->expected(1);
        }
        cmd.options[key] = opt;
    }
}

std::unique_ptr<Command> make_command(CLI::App& app, const std::string& name, const std::string& help,
                                      std::initializer_list<const std::vector<std::string>*> groups,
                                      const std::vector<std::string>& extra = {}) {
    auto cmd = std::make_unique<Command>();
    cmd->app = app.add_subcommand(name, help);
    cmd->app->add_option("--config", cmd->config_file, "key = value config file (or a run.json)");
    add_keys(*cmd, kCommon);
    for (const auto* g : groups) add_keys(*cmd, *g);
    add_keys(*cmd, extra);
    return cmd;
}

RunConfig resolve(const Command& cmd) {
    RunConfig cfg;
    if (!cmd.config_file.empty()) cfg.load_file(cmd.config_file);
    for (const auto& [key, opt] : cmd.options) {
        if (opt->count() == 0) continue;
        const auto& v = cmd.given.at(key);
        cfg.set(key, v.empty() || v.back().empty() ? "true" : v.back());
    }
    return cfg;
}

std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return s.str();
}

class Run {
public:
    Run(std::string command, const RunConfig& cfg) : command_(std::move(command)), cfg_(cfg) {
        out_ = cfg.get_path("out");
        if (out_.empty()) throw std::invalid_argument("--out is required");
        fs::create_directories(out_);
        start_ = std::chrono::steady_clock::now();
    }

    const fs::path& out() const { return out_; }
    void output(const fs::path& p) { outputs_.push_back(p.lexically_relative(out_).generic_string()); }
    json& extra() { return extra_; }

    void finish(const std::string& error = "") const {
        json j;
        j["command"] = command_;
        j["config"] = cfg_.to_json();
        j["seed"] = cfg_.get_int("seed");
        j["threads"] = kernels::max_threads();
        j["started"] = started_;
        j["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        j["status"] = error.empty() ? "ok" : "failed";
        if (!error.empty()) {
            j["error"] = error;
            j["partial_outputs"] = true;
        }
        j["outputs"] = outputs_;
        if (!extra_.is_null()) j["results"] = extra_;
        std::ofstream(out_ / "run.json") << j.dump(2) << "\n";
    }

private:
    std::string command_;
    RunConfig cfg_;
    fs::path out_;
    std::string started_ = now_iso();
    std::chrono::steady_clock::time_point start_;
    std::vector<std::string> outputs_;
    json extra_;
};

std::string split_or(const RunConfig& cfg, const std::string& fallback) {
    const auto s = cfg.get("split");
    return s.empty() ? fallback : s;
}

std::vector<VideoSequence> load_split(const RunConfig& cfg, const std::string& split) {
    const auto root = cfg.get_path("suite");
    if (root.empty()) throw std::invalid_argument("--suite is required");
    std::vector<VideoSequence> out;
    for (auto& e : load_suite(root, split)) out.push_back(std::move(e.sequence));
    if (out.empty()) throw std::runtime_error("suite " + root.string() + " has no '" + split + "' sequences");
    return out;
}

std::pair<ModelConfig, Weights<float>> load_model(const RunConfig& cfg, const std::string& key = "checkpoint") {
    const auto path = cfg.get_path(key);
    if (path.empty()) throw std::invalid_argument("--" + key + " is required");
    return load_checkpoint(path);
}

PropagationOptions propagation_options(const RunConfig& cfg) {
    PropagationOptions o;
    o.strategy = cfg.strategy();
    o.correction = cfg.correction();
    o.loss.gamma = cfg.get_float("gamma");
    return o;
}

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

void cmd_synth(const RunConfig& cfg, Run& run) {
    const auto spec = cfg.suite();
    const auto suite = generate_suite(spec);
    save_suite(suite, spec, run.out());
    run.output(run.out() / "suite.json");
    std::uint64_t h = 1469598103934665603ULL;
    json sums = json::object();
    for (const auto& e : suite) {
        const auto c = sequence_checksum(e.sequence);
        sums[e.sequence.name] = c;
        h = (h ^ c) * 1099511628211ULL;
    }
    run.extra() = {{"sequences", suite.size()}, {"checksum", h}, {"sequence_checksums", sums}};
    std::cout << "wrote " << suite.size() << " sequences to " << run.out().string() << " (checksum " << std::hex
              << h << std::dec << ")\n";
}

void cmd_train(const RunConfig& cfg, Run& run) {
    const auto data = load_split(cfg, split_or(cfg, "train"));
    const auto model = cfg.model(data.front().height(), data.front().width());
    const auto tc = cfg.train();
    std::cerr << "training on " << data.size() << " sequences, " << tc.epochs << " epochs, "
              << layer_layout(model).size() << " layers\n";
    const auto stem = run.out() / "model";
    const auto t = train_or_load(data, model, tc, stem, false, [&](std::size_t epoch, const LossBreakdown& m) {
        std::cerr << "epoch " << epoch + 1 << "/" << tc.epochs << "  forward " << fmt(m.forward) << "  cycle "
                  << fmt(m.cycle) << "  total " << fmt(m.total) << "\n";
    });
    for (const char* ext : {".ckpt", ".csv", ".json"}) {
        auto p = stem;
        p += ext;
        run.output(p);
    }
    run.extra() = {{"seconds", t.seconds}, {"weights_fingerprint", fingerprint(t.weights)}};
    std::cout << "checkpoint " << (stem.string() + ".ckpt") << " (" << fmt(t.seconds, 1) << " s)\n";
}

Degradation degradation_of(const RunConfig& cfg, std::optional<std::pair<ModelConfig, Weights<float>>>& alt) {
    Degradation d;
    d.mode = parse_degrade(cfg.get("degrade"));
    if (d.mode == DegradeMode::BaselinePredict) {
        alt = load_model(cfg, "degrade-checkpoint");
        d.model = &alt->first;
        d.weights = &alt->second;
    }
    return d;
}

InferenceRun infer_split(const RunConfig& cfg, const std::vector<VideoSequence>& data, bool keep) {
    const auto [model, weights] = load_model(cfg);
    std::optional<std::pair<ModelConfig, Weights<float>>> alt;
    const auto d = degradation_of(cfg, alt);
    return run_inference(data, model, weights, propagation_options(cfg), d, keep);
}

void cmd_infer(const RunConfig& cfg, Run& run) {
    const auto data = load_split(cfg, split_or(cfg, "eval"));
    const auto r = infer_split(cfg, data, true);
    for (const auto& p : r.results) {
        save_propagation(p, run.out() / p.name, cfg.get_bool("soft-masks"));
        run.output(run.out() / p.name / "masks");
    }
    write_timing_json(r.timings, propagation_options(cfg), run.out() / "timing.json");
    run.output(run.out() / "timing.json");
    run.extra() = {{"J", r.report.j}, {"F", r.report.f}, {"J&F", r.report.jf}, {"fps", r.report.fps}};
    std::cout << "J " << fmt(r.report.j) << "  F " << fmt(r.report.f) << "  J&F " << fmt(r.report.jf) << "  fps "
              << fmt(r.report.fps, 1) << "\n";
}

std::vector<PredictedSequence> load_predictions(const fs::path& dir, const std::vector<VideoSequence>& data) {
    std::map<std::string, double> seconds;
    if (fs::exists(dir / "timing.json")) {
        std::ifstream in(dir / "timing.json");
        for (const auto& s : json::parse(in).at("sequences")) seconds[s.at("name")] = s.at("seconds");
    }
    std::vector<PredictedSequence> out;
    for (const auto& v : data) {
        const auto masks = dir / v.name / "masks";
        if (!fs::exists(masks)) continue;
        PredictedSequence p{v.name, {}, seconds.count(v.name) ? seconds[v.name] : 0.0};
        for (std::size_t t = 0; t < v.length(); ++t) {
            const auto f = masks / (frame_file_stem(t) + ".png");
            if (!fs::exists(f)) throw std::runtime_error("missing prediction " + f.string());
            p.labels.push_back(read_label_png(f));
        }
        out.push_back(std::move(p));
    }
    return out;
}

void cmd_eval(const RunConfig& cfg, Run& run) {
    const auto data = load_split(cfg, split_or(cfg, "eval"));
    EvalReport report;
    if (!cfg.get("pred").empty()) {
        report = evaluate(load_predictions(cfg.get_path("pred"), data), data);
    } else {
        const auto r = infer_split(cfg, data, false);
        report = r.report;
        write_timing_json(r.timings, propagation_options(cfg), run.out() / "timing.json");
        run.output(run.out() / "timing.json");
    }
    write_eval_csv(report, run.out() / "per_sequence.csv");
    write_eval_json(report, run.out() / "summary.json");
    run.output(run.out() / "per_sequence.csv");
    run.output(run.out() / "summary.json");
    run.extra() = {{"J", report.j}, {"F", report.f}, {"J&F", report.jf}, {"skipped", report.skipped}};
    for (const auto& s : report.sequences) {
        std::cout << std::left << std::setw(16) << s.name << " J " << fmt(s.j) << "  F " << fmt(s.f) << "  J&F "
                  << fmt(s.jf) << "\n";
    }
    std::cout << std::left << std::setw(16) << "mean" << " J " << fmt(report.j) << "  F " << fmt(report.f)
              << "  J&F " << fmt(report.jf) << "\n";
}

void cmd_erf(const RunConfig& cfg, Run& run) {
    const auto data = load_split(cfg, split_or(cfg, "eval"));
    const auto [model, weights] = load_model(cfg);
    LossConfig loss;
    loss.gamma = cfg.get_float("gamma");
    const auto probe = run_erf_probe(data, model, weights, cfg.erf(), cfg.get_size("erf-target"),
                                     cfg.get_size("erf-reference"), loss);
    const std::size_t plane = model.height * model.width;
    json seqs = json::array();
    for (const auto& s : probe.sequences) {
        for (std::size_t i = 0; i < s.heatmap.dim(0); ++i) {
            Tensor<float> p(Shape{model.height, model.width});
            std::copy_n(s.heatmap.data.begin() + static_cast<std::ptrdiff_t>(i * plane), plane, p.data.begin());
            const auto stem = run.out() / s.name / ("obj" + std::to_string(i + 1));
            write_heatmap(stem, p);
            run.output(stem.string() + ".pgm");
            run.output(stem.string() + ".f32");
        }
        seqs.push_back({{"name", s.name}, {"reference", s.reference}, {"target", s.target}, {"J_in", s.j_in},
                        {"J_ex", s.j_ex}});
    }
    json pairs = json::array();
    for (const auto& p : probe.pairs) {
        pairs.push_back({{"sequence", p.sequence},
                         {"object", p.object},
                         {"mean_in", p.mean_in},
                         {"mean_out", p.mean_out},
                         {"first_loss", p.first_loss},
                         {"last_loss", p.last_loss}});
    }
    const json summary = {{"pairs", pairs},
                          {"sequences", seqs},
                          {"concentrated", probe.concentrated},
                          {"pair_count", probe.pairs.size()},
                          {"J_in", probe.j_in},
                          {"J_ex", probe.j_ex}};
    std::ofstream(run.out() / "erf.json") << summary.dump(2) << "\n";
    run.output(run.out() / "erf.json");
    run.extra() = {{"concentrated", probe.concentrated},
                   {"pair_count", probe.pairs.size()},
                   {"J_in", probe.j_in},
                   {"J_ex", probe.j_ex}};
    std::cout << "in-object mean > outside on " << probe.concentrated << "/" << probe.pairs.size()
              << " pairs; J(in) " << fmt(probe.j_in) << "  J(ex) " << fmt(probe.j_ex) << "\n";
}

void cmd_ablate(const RunConfig& cfg, Run& run) {
    const auto train = load_split(cfg, "train");
    const auto eval = load_split(cfg, split_or(cfg, "eval"));
    AblationSpec spec;
    spec.model = cfg.model(train.front().height(), train.front().width());
    spec.train = cfg.train();
    spec.seeds.clear();
    for (const auto& s : cfg.get_list("seeds")) spec.seeds.push_back(std::stoull(s));
    if (spec.seeds.empty()) throw std::invalid_argument("--seeds is empty");
    spec.strategies.clear();
    for (const auto& s : cfg.get_list("strategies")) spec.strategies.push_back(parse_strategy(s));
    spec.degradations.clear();
    for (const auto& s : cfg.get_list("degradations")) spec.degradations.push_back(parse_degrade(s));
    spec.correction = cfg.correction();
    spec.mem_period = cfg.get_size("mem-period");
    spec.work_dir = run.out() / "models";
    spec.reuse = cfg.get_bool("reuse");
    const auto rows = run_ablation(train, eval, spec, [](const std::string& s) { std::cerr << s << "\n"; });
    write_ablation_csv(rows, run.out() / "ablation.csv");
    write_ablation_markdown(rows, run.out() / "ablation.md");
    run.output(run.out() / "ablation.csv");
    run.output(run.out() / "ablation.md");
    std::ifstream md(run.out() / "ablation.md");
    std::cout << md.rdbuf();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cycle-consistent video object segmentation toolkit"};
    app.require_subcommand(1);
    std::vector<std::pair<std::unique_ptr<Command>, void (*)(const RunConfig&, Run&)>> commands;
    commands.emplace_back(make_command(app, "synth", "generate the synthetic benchmark suite", {&kSuiteKeys}),
                          cmd_synth);
    commands.emplace_back(
        make_command(app, "train", "train a model", {&kModelKeys, &kTrainKeys}, {"suite", "split"}), cmd_train);
    commands.emplace_back(make_command(app, "infer", "propagate masks with a trained model", {&kInferKeys},
                                       {"suite", "split", "checkpoint"}),
                          cmd_infer);
    commands.emplace_back(make_command(app, "eval", "score predictions (or run inference) against ground truth",
                                       {&kInferKeys}, {"suite", "split", "checkpoint", "pred"}),
                          cmd_eval);
    commands.emplace_back(
        make_command(app, "erf", "cycle effective receptive fields", {&kErfKeys}, {"suite", "split", "checkpoint"}),
        cmd_erf);
    commands.emplace_back(make_command(app, "ablate", "paired-seed component ablation",
                                       {&kModelKeys, &kTrainKeys, &kAblateKeys}, {"suite", "split"}),
                          cmd_ablate);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    kernels::configure_threads();
    for (auto& [cmd, fn] : commands) {
        if (!cmd->app->parsed()) continue;
        std::optional<Run> run;
        try {
            const auto cfg = resolve(*cmd);
            run.emplace(cmd->app->get_name(), cfg);
            fn(cfg, *run);
            run->finish();
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            if (run) {
                try {
                    run->finish(e.what());
                } catch (const std::exception&) {
                }
            }
            return 1;
        }
    }
    return 0;
}
