// Experiment plumbing shared by the command-line tool and the acceptance
// harness: checkpoint caching, split-level inference with scoring, and the
// paired-seed component ablation.
#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cvos/cycle_erf.hpp"
#include "cvos/inference.hpp"
#include "cvos/metrics.hpp"
#include "cvos/trainer.hpp"
#include "json.hpp"

namespace cvos {

nlohmann::json to_json(const ModelConfig& m);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const PropagationOptions& o);

struct TrainedModel {
    ModelConfig model;
    Weights<float> weights;
    bool loaded = false;  // reused from disk
    double seconds = 0.0;
};

// Trains and writes <stem>.ckpt, <stem>.csv and <stem>.json (the configs).
// With reuse, an existing checkpoint whose recorded configs match is loaded
// instead.
TrainedModel train_or_load(const std::vector<VideoSequence>& dataset, const ModelConfig& model,
                           const TrainConfig& cfg, const std::filesystem::path& stem, bool reuse,
                           const EpochCallback& on_epoch = {});

struct InferenceRun {
    EvalReport report;
    std::vector<TimingEntry> timings;
    std::vector<PropagationResult> results;  // kept on request
    std::size_t corrected_frames = 0;
    // Corrected frames whose final reconstruction loss is <= the first.
    std::size_t non_increasing = 0;
};

// Propagates every sequence from its (optionally degraded) first mask and
// scores frames 2..T against the ground truth.
InferenceRun run_inference(const std::vector<VideoSequence>& sequences, const ModelConfig& model,
                           const Weights<float>& weights, const PropagationOptions& options,
                           const Degradation& degradation = {}, bool keep_results = false);

struct ErfPairStat {
    std::string sequence;
    std::size_t object = 0;
    double mean_in = 0.0;   // heatmap mean over the object on the reference frame
    double mean_out = 0.0;  // and over the rest
    double first_loss = 0.0;
    double last_loss = 0.0;
};

struct ErfSequence {
    std::string name;
    std::size_t reference = 0;  // 1-based
    std::size_t target = 0;     // 1-based
    Tensor<float> heatmap;      // [N,H,W]
    double j_in = 0.0;          // reconstruction of frame 1 from the in-object part
    double j_ex = 0.0;          // and from the rest
};

struct ErfProbe {
    std::vector<ErfPairStat> pairs;
    std::vector<ErfSequence> sequences;
    std::size_t concentrated = 0;  // pairs with mean_in > mean_out
    double j_in = 0.0;
    double j_ex = 0.0;
};

// reference = 0 picks the middle frame. Frame numbers are 1-based.
ErfProbe run_erf_probe(const std::vector<VideoSequence>& sequences, const ModelConfig& model,
                       const Weights<float>& weights, const ErfConfig& cfg, std::size_t target = 1,
                       std::size_t reference = 0, const LossConfig& loss = {});

struct AblationSpec {
    std::vector<std::uint64_t> seeds{1, 2, 3};
    ModelConfig model;
    TrainConfig train;
    std::vector<StrategyKind> strategies{StrategyKind::First, StrategyKind::Prev, StrategyKind::FirstPrev,
                                         StrategyKind::Mem};
    std::vector<DegradeMode> degradations{DegradeMode::None, DegradeMode::BoundingBox};
    // Settings for the +GC arms; `enabled` is ignored.
    CorrectionConfig correction;
    std::size_t mem_period = 5;
    std::filesystem::path work_dir;
    bool reuse = true;
};

struct AblationRow {
    std::uint64_t seed = 0;
    std::string arm;  // baseline, +cyclic, +GC, +both
    StrategyKind strategy = StrategyKind::Mem;
    DegradeMode degradation = DegradeMode::None;
    double j = 0.0;
    double f = 0.0;
    double jf = 0.0;
    double fps = 0.0;
};

using LogFn = std::function<void(const std::string&)>;

// Baseline (cycle weight 0) and cyclic models share init and data order per
// seed. Baseline-predict degradation uses the same seed's baseline model.
std::vector<AblationRow> run_ablation(const std::vector<VideoSequence>& train, const std::vector<VideoSequence>& eval,
                                      const AblationSpec& spec, const LogFn& log = {});

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);
// Component table (MEM, clean), strategy table and degradation table, each
// averaged over seeds.
void write_ablation_markdown(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace cvos
