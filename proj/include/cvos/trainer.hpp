// Cyclic training: sample 3-frame clips under a widening temporal window,
// predict forward (1 -> a -> t), predict frame 1 back from the predictions,
// and optimize both reconstruction losses with Adam.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cvos/dataio.hpp"
#include "cvos/losses.hpp"
#include "cvos/segnet.hpp"

namespace cvos {

enum class CycleMode { Simple, FullHistory };

const char* cycle_mode_name(CycleMode mode);
CycleMode parse_cycle_mode(const std::string& name);

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 2;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double gamma = 1.0;
    std::uint64_t seed = 0;
    std::size_t curriculum_base = 5;
    std::size_t curriculum_step = 5;
    std::size_t curriculum_period = 20;
    CycleMode cycle_mode = CycleMode::Simple;
    bool detach_cycle = false;
    // Weight of the backward (frame 1) term; 0 trains the baseline.
    double cycle_weight = 1.0;
    // Random horizontal flips and time reversal of sampled clips.
    bool augment = false;

    void validate() const;
    LossConfig loss() const;
};

// base + step * floor(epoch / period)
std::size_t max_interval(const TrainConfig& cfg, std::size_t epoch);

// Three strictly increasing frame indices; consecutive gaps never exceed
// max_interval. Empty (with a warning) when the video is too short or lacks
// ground truth at the chosen frames.
std::optional<std::array<std::size_t, 3>> sample_clip(const VideoSequence& video, std::size_t epoch,
                                                      const TrainConfig& cfg, std::mt19937_64& rng);

template <typename T>
struct ClipData {
    std::array<Tensor<T>, 3> frames;  // [3,H,W]
    std::array<Tensor<T>, 3> masks;   // [N,H,W]
};

template <typename T>
ClipData<T> make_clip(const VideoSequence& video, const std::array<std::size_t, 3>& index);

template <typename T>
struct ClipGraph {
    Var<T> pred_a;
    Var<T> pred_t;
    Var<T> pred_1;
    Var<T> forward_loss;
    Var<T> cycle_loss;
    Var<T> total;
};

// Records one clip's losses on the network's tape.
template <typename T>
ClipGraph<T> forward_clip(SegNet<T>& net, const ClipData<T>& clip, const TrainConfig& cfg);

struct LossBreakdown {
    double forward = 0.0;
    double cycle = 0.0;
    double total = 0.0;
};

struct AdamState {
    std::vector<Tensor<float>> m;
    std::vector<Tensor<float>> v;
    std::uint64_t step = 0;

    static AdamState zeros_like(const Weights<float>& w);
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// One Adam update from the mean loss over a batch of clips. Optionally
// reports the L2 norm of each parameter's gradient.
LossBreakdown train_step(const std::vector<ClipData<float>>& batch, const ModelConfig& model, Weights<float>& weights,
                         AdamState& opt, const TrainConfig& cfg,
                         std::map<std::string, double>* grad_norms = nullptr);

struct LossRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    LossBreakdown loss;
};

struct TrainResult {
    Weights<float> weights;
    std::vector<LossRecord> log;
    // Largest gradient norm seen per parameter over the run.
    std::map<std::string, double> max_grad_norm;
    double seconds = 0.0;
};

struct TrainOutputs {
    std::filesystem::path checkpoint;
    std::filesystem::path loss_csv;
    // Written before aborting on a non-finite loss.
    std::filesystem::path diagnostics;
};

using EpochCallback = std::function<void(std::size_t epoch, const LossBreakdown& mean)>;

TrainResult run_training(const std::vector<VideoSequence>& dataset, const ModelConfig& model, const TrainConfig& cfg,
                         const TrainOutputs& outputs = {}, const EpochCallback& on_epoch = {});

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path);

}  // namespace cvos
