#include "cvos/experiment.hpp"

#include <fstream>
#include <iomanip>
#include <algorithm>
#include <map>
#include <set>
#include <tuple>
#include <sstream>
#include <stdexcept>

namespace cvos {

namespace fs = std::filesystem;
using nlohmann::json;

json to_json(const ModelConfig& m) {
    return {{"height", m.height},
            {"width", m.width},
            {"feature_channels", m.feature_channels},
            {"key_channels", m.key_channels},
            {"value_channels", m.value_channels}};
}

json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"gamma", c.gamma},
            {"seed", c.seed},
            {"curriculum_base", c.curriculum_base},
            {"curriculum_step", c.curriculum_step},
            {"curriculum_period", c.curriculum_period},
            {"cycle_mode", cycle_mode_name(c.cycle_mode)},
            {"detach_cycle", c.detach_cycle},
            {"cycle_weight", c.cycle_weight},
            {"augment", c.augment}};
}

json to_json(const PropagationOptions& o) {
    return {{"strategy", strategy_name(o.strategy.kind)},
            {"mem_period", o.strategy.mem_period},
            {"correction",
             {{"enabled", o.correction.enabled},
              {"alpha", o.correction.alpha},
              {"iterations", o.correction.iterations},
              {"period", o.correction.period},
              {"clamp", o.correction.clamp}}},
            {"gamma", o.loss.gamma}};
}

TrainedModel train_or_load(const std::vector<VideoSequence>& dataset, const ModelConfig& model,
                           const TrainConfig& cfg, const fs::path& stem, bool reuse, const EpochCallback& on_epoch) {
    auto with = [&](const char* ext) {
        auto p = stem;
        p += ext;
        return p;
    };
    const json meta = {{"model", to_json(model)}, {"train", to_json(cfg)}, {"sequences", dataset.size()}};
    if (reuse && fs::exists(with(".ckpt")) && fs::exists(with(".json"))) {
        std::ifstream in(with(".json"));
        json stored;
        try {
            stored = json::parse(in);
        } catch (const json::exception&) {
        }
        if (stored == meta) {
            auto [m, w] = load_checkpoint(with(".ckpt"));
            if (m == model) return {m, std::move(w), true, 0.0};
        }
    }
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    auto r = run_training(dataset, model, cfg, {with(".ckpt"), with(".csv"), with(".diagnostics.json")}, on_epoch);
    std::ofstream(with(".json")) << meta.dump(2) << "\n";
    return {model, std::move(r.weights), false, r.seconds};
}

InferenceRun run_inference(const std::vector<VideoSequence>& sequences, const ModelConfig& model,
                           const Weights<float>& weights, const PropagationOptions& options,
                           const Degradation& degradation, bool keep_results) {
    InferenceRun run;
    std::vector<PredictedSequence> preds;
    PropagationOptions opts = options;
    opts.record_final_loss = opts.record_final_loss || opts.correction.enabled;
    for (const auto& v : sequences) {
        if (v.masks.empty() || !v.masks[0]) throw std::invalid_argument("run_inference: '" + v.name + "' has no first mask");
        auto first = object_planes<float>(*v.masks[0], v.object_count);
        if (degradation.mode != DegradeMode::None) {
            first = degrade_mask(first, frame_tensor<float>(v.frames[0]), degradation);
        }
        auto r = propagate(v, first, model, weights, opts);
        r.labels.front() = *v.masks[0];
        for (const auto& rec : r.frames) {
            if (!rec.corrected || rec.correction_losses.empty()) continue;
            ++run.corrected_frames;
            if (rec.final_loss <= rec.correction_losses.front()) ++run.non_increasing;
        }
        run.timings.push_back(timing_of(r));
        preds.push_back({r.name, r.labels, r.seconds});
        if (keep_results) run.results.push_back(std::move(r));
    }
    run.report = evaluate(preds, sequences);
    return run;
}

ErfProbe run_erf_probe(const std::vector<VideoSequence>& sequences, const ModelConfig& model,
                       const Weights<float>& weights, const ErfConfig& cfg, std::size_t target, std::size_t reference,
                       const LossConfig& loss) {
    ErfProbe probe;
    const std::size_t plane = model.height * model.width;
    for (const auto& v : sequences) {
        const std::size_t T = v.length();
        const std::size_t l = reference == 0 ? (T + 1) / 2 : reference;
        if (target < 1 || target > T || l < 1 || l > T) {
            throw std::invalid_argument("run_erf_probe: frame out of range for '" + v.name + "'");
        }
        if (!v.masks[target - 1] || !v.masks[l - 1] || !v.masks[0]) {
            throw std::invalid_argument("run_erf_probe: '" + v.name + "' lacks ground truth at the probed frames");
        }
        const auto xl = frame_tensor<float>(v.frames[l - 1]);
        const auto xt = frame_tensor<float>(v.frames[target - 1]);
        const auto x1 = frame_tensor<float>(v.frames[0]);
        const auto yl = object_planes<float>(*v.masks[l - 1], v.object_count);
        const auto yt = object_planes<float>(*v.masks[target - 1], v.object_count);
        auto erf = compute_cycle_erf(model, weights, xl, xt, yt, cfg, loss);
        for (std::size_t i = 0; i < v.object_count; ++i) {
            double in = 0.0, out = 0.0;
            std::size_t n_in = 0, n_out = 0;
            for (std::size_t u = 0; u < plane; ++u) {
                const double h = erf.heatmap[i * plane + u];
                if (yl[i * plane + u] > 0.5f) {
                    in += h;
                    ++n_in;
                } else {
                    out += h;
                    ++n_out;
                }
            }
            ErfPairStat s;
            s.sequence = v.name;
            s.object = i + 1;
            s.mean_in = n_in ? in / static_cast<double>(n_in) : 0.0;
            s.mean_out = n_out ? out / static_cast<double>(n_out) : 0.0;
            if (!erf.losses[i].empty()) {
                s.first_loss = erf.losses[i].front();
                s.last_loss = erf.losses[i].back();
            }
            if (s.mean_in > s.mean_out) ++probe.concentrated;
            probe.pairs.push_back(s);
        }
        ErfSequence seq{v.name, l, target, std::move(erf.heatmap), 0.0, 0.0};
        for (const auto mode : {ErfPartition::In, ErfPartition::Ex}) {
            const auto rec = partitioned_reconstruct(model, weights, xl, seq.heatmap, yl, mode, x1);
            const auto labels = to_label_map(label_map(rec), model.height, model.width);
            double j = 0.0;
            for (std::size_t id = 1; id <= v.object_count; ++id) j += jaccard(labels, *v.masks[0], id, v.object_count);
            j /= static_cast<double>(v.object_count);
            (mode == ErfPartition::In ? seq.j_in : seq.j_ex) = j;
        }
        probe.j_in += seq.j_in;
        probe.j_ex += seq.j_ex;
        probe.sequences.push_back(std::move(seq));
    }
    if (!sequences.empty()) {
        probe.j_in /= static_cast<double>(sequences.size());
        probe.j_ex /= static_cast<double>(sequences.size());
    }
    return probe;
}

namespace {

const char* const kArms[] = {"baseline", "+cyclic", "+GC", "+both"};

std::string fixed(double v, int digits = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

}  // namespace

std::vector<AblationRow> run_ablation(const std::vector<VideoSequence>& train, const std::vector<VideoSequence>& eval,
                                      const AblationSpec& spec, const LogFn& log) {
    const auto say = [&](const std::string& s) {
        if (log) log(s);
    };
    std::vector<AblationRow> rows;
    for (const auto seed : spec.seeds) {
        TrainConfig base = spec.train;
        base.seed = seed;
        base.cycle_weight = 0.0;
        TrainConfig cyc = spec.train;
        cyc.seed = seed;
        if (cyc.cycle_weight == 0.0) cyc.cycle_weight = 1.0;
        const auto dir = spec.work_dir / ("seed" + std::to_string(seed));
        say("seed " + std::to_string(seed) + ": baseline model");
        const auto b = train_or_load(train, spec.model, base, dir / "baseline", spec.reuse);
        say(b.loaded ? "  reused checkpoint" : "  trained in " + fixed(b.seconds, 1) + " s");
        say("seed " + std::to_string(seed) + ": cyclic model");
        const auto c = train_or_load(train, spec.model, cyc, dir / "cyclic", spec.reuse);
        say(c.loaded ? "  reused checkpoint" : "  trained in " + fixed(c.seconds, 1) + " s");

        for (const char* arm : kArms) {
            const std::string a = arm;
            const auto& w = (a == "+cyclic" || a == "+both") ? c.weights : b.weights;
            for (const auto strategy : spec.strategies) {
                for (const auto degrade : spec.degradations) {
                    PropagationOptions o;
                    o.strategy = {strategy, spec.mem_period};
                    o.correction = spec.correction;
                    o.correction.enabled = a == "+GC" || a == "+both";
                    o.loss = spec.train.loss();
                    const Degradation d{degrade, &spec.model, &b.weights};
                    const auto run = run_inference(eval, spec.model, w, o, d);
                    rows.push_back({seed, a, strategy, degrade, run.report.j, run.report.f, run.report.jf,
                                    run.report.fps});
                    say("  " + a + " " + strategy_name(strategy) + " " + degrade_name(degrade) +
                        ": J&F " + fixed(run.report.jf));
                }
            }
        }
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "seed,arm,strategy,degradation,J,F,J&F,fps\n" << std::setprecision(9);
    for (const auto& r : rows) {
        out << r.seed << "," << r.arm << "," << strategy_name(r.strategy) << "," << degrade_name(r.degradation)
            << "," << r.j << "," << r.f << "," << r.jf << "," << r.fps << "\n";
    }
}

void write_ablation_markdown(const std::vector<AblationRow>& rows, const fs::path& path) {
    struct Mean {
        double j = 0, f = 0, jf = 0, fps = 0;
        std::size_t n = 0;
        void add(const AblationRow& r) {
            j += r.j, f += r.f, jf += r.jf, fps += r.fps;
            ++n;
        }
        double m(double v) const { return n ? v / static_cast<double>(n) : 0.0; }
    };
    std::map<std::tuple<std::string, StrategyKind, DegradeMode>, Mean> mean;
    std::vector<StrategyKind> strategies;
    std::vector<DegradeMode> degradations;
    std::set<std::uint64_t> seeds;
    for (const auto& r : rows) {
        mean[{r.arm, r.strategy, r.degradation}].add(r);
        if (std::find(strategies.begin(), strategies.end(), r.strategy) == strategies.end()) strategies.push_back(r.strategy);
        if (std::find(degradations.begin(), degradations.end(), r.degradation) == degradations.end()) {
            degradations.push_back(r.degradation);
        }
        seeds.insert(r.seed);
    }
    const auto has = [&](const std::string& arm, StrategyKind s, DegradeMode d) { return mean.count({arm, s, d}) > 0; };
    const StrategyKind main = std::find(strategies.begin(), strategies.end(), StrategyKind::Mem) != strategies.end()
                                  ? StrategyKind::Mem
                                  : (strategies.empty() ? StrategyKind::Mem : strategies.front());

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "# Ablation\n\nMeans over " << seeds.size() << " paired seed(s).\n\n";
    out << "## Components (" << strategy_name(main) << ", clean first mask)\n\n";
    out << "| Variant | J | F | J&F | FPS |\n|---|---|---|---|---|\n";
    for (const char* arm : kArms) {
        if (!has(arm, main, DegradeMode::None)) continue;
        const auto& m = mean.at({arm, main, DegradeMode::None});
        out << "| " << arm << " | " << fixed(m.m(m.j)) << " | " << fixed(m.m(m.f)) << " | " << fixed(m.m(m.jf))
            << " | " << fixed(m.m(m.fps), 1) << " |\n";
    }
    out << "\n## Reference set (J&F, clean first mask)\n\n";
    out << "| Strategy | baseline | +cyclic | delta |\n|---|---|---|---|\n";
    for (const auto s : strategies) {
        if (!has("baseline", s, DegradeMode::None) || !has("+cyclic", s, DegradeMode::None)) continue;
        const auto& b = mean.at({"baseline", s, DegradeMode::None});
        const auto& c = mean.at({"+cyclic", s, DegradeMode::None});
        out << "| " << strategy_name(s) << " | " << fixed(b.m(b.jf)) << " | " << fixed(c.m(c.jf)) << " | "
            << fixed(c.m(c.jf) - b.m(b.jf)) << " |\n";
    }
    out << "\n## First-mask quality (J&F, " << strategy_name(main) << ")\n\n";
    out << "| Degradation |";
    for (const char* arm : kArms) out << " " << arm << " |";
    out << "\n|---|---|---|---|---|\n";
    for (const auto d : degradations) {
        out << "| " << degrade_name(d) << " |";
        for (const char* arm : kArms) {
            if (!has(arm, main, d)) {
                out << " - |";
                continue;
            }
            const auto& m = mean.at({arm, main, d});
            out << " " << fixed(m.m(m.jf)) << " |";
        }
        out << "\n";
    }
}

}  // namespace cvos
