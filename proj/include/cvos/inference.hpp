// Sequential mask propagation with reference-set strategies and test-time
// gradient correction of predicted masks.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cvos/dataio.hpp"
#include "cvos/losses.hpp"
#include "cvos/segnet.hpp"

namespace cvos {

enum class StrategyKind { First, Prev, FirstPrev, Mem };

const char* strategy_name(StrategyKind kind);
// first | prev | first+prev | mem
StrategyKind parse_strategy(const std::string& name);

struct Strategy {
    StrategyKind kind = StrategyKind::Mem;
    // MEM appends the prediction of frame t when (t - 2) % period == 0.
    std::size_t mem_period = 5;

    void validate() const;
};

// Correction rate picked by the validation sweep.
inline constexpr double kDefaultCorrectionRate = 2.0;

struct CorrectionConfig {
    bool enabled = false;
    double alpha = kDefaultCorrectionRate;
    std::size_t iterations = 10;
    // Corrected frames: t = 2, 2 + period, ...
    std::size_t period = 5;
    bool clamp = true;

    void validate() const;
    bool applies_to(std::size_t frame_number) const;
};

struct CorrectionResult {
    Tensor<float> mask;
    // Reconstruction loss of each iterate before its update.
    std::vector<double> losses;
    bool stopped_early = false;
};

// Refines the prediction for frame t by descending the loss of
// reconstructing the first mask from {(frame_t, mask)}. Weights are read only.
CorrectionResult gradient_correct(const ModelConfig& model, const Weights<float>& weights,
                                  const Tensor<float>& pred_t, const Tensor<float>& frame_t,
                                  const Tensor<float>& frame_1, const Tensor<float>& mask_1,
                                  const CorrectionConfig& cfg, const LossConfig& loss = {});

// seg_loss(segment({(frame_t, pred_t)}, frame_1), mask_1)
double reconstruction_loss(const ModelConfig& model, const Weights<float>& weights, const Tensor<float>& pred_t,
                           const Tensor<float>& frame_t, const Tensor<float>& frame_1, const Tensor<float>& mask_1,
                           const LossConfig& loss = {});

struct FrameRecord {
    std::size_t frame = 0;  // 1-based
    // 1-based frame numbers of the references used, in order.
    std::vector<std::size_t> memory_frames;
    std::uint64_t memory_fingerprint = 0;
    bool corrected = false;
    // Prediction added to the MEM memory.
    bool appended = false;
    std::vector<double> correction_losses;
    double final_loss = 0.0;  // set when corrected
};

struct PropagationResult {
    std::string name;
    // Object scores [N,H,W] per frame; frame 1 holds the given mask.
    std::vector<Tensor<float>> scores;
    std::vector<LabelMap> labels;
    std::vector<FrameRecord> frames;  // frames 2..T
    double seconds = 0.0;
    double correction_seconds = 0.0;
    std::size_t corrected_frames = 0;
};

struct PropagationOptions {
    Strategy strategy;
    CorrectionConfig correction;
    LossConfig loss;
    // Records the reconstruction loss after each correction (one extra forward).
    bool record_final_loss = false;
};

// first_mask: [N,H,W] planes for frame 1.
PropagationResult propagate(const VideoSequence& video, const Tensor<float>& first_mask, const ModelConfig& model,
                            const Weights<float>& weights, const PropagationOptions& options);
// Uses the sequence's own first mask; throws if it is missing.
PropagationResult propagate(const VideoSequence& video, const ModelConfig& model, const Weights<float>& weights,
                            const PropagationOptions& options);

enum class DegradeMode { None, BoundingBox, BaselinePredict };

const char* degrade_name(DegradeMode mode);
// none | bbox | baseline
DegradeMode parse_degrade(const std::string& name);

// Per plane: the tight box around values > 0.5 filled with 1. Empty planes
// are returned unchanged.
Tensor<float> bounding_box_mask(const Tensor<float>& planes);

// The alternate model's hard prediction for frame 1 from {(frame_1, mask)}.
Tensor<float> baseline_predict_mask(const Tensor<float>& frame_1, const Tensor<float>& planes,
                                    const ModelConfig& model, const Weights<float>& weights);

struct Degradation {
    DegradeMode mode = DegradeMode::None;
    // Required for BaselinePredict.
    const ModelConfig* model = nullptr;
    const Weights<float>* weights = nullptr;
};

Tensor<float> degrade_mask(const Tensor<float>& planes, const Tensor<float>& frame_1, const Degradation& how);

// masks/NNNNN.png label maps and, if requested, soft/objK/NNNNN.pgm planes.
void save_propagation(const PropagationResult& result, const std::filesystem::path& dir, bool soft_masks);

struct TimingEntry {
    std::string name;
    std::size_t frames = 0;
    double seconds = 0.0;
    double correction_seconds = 0.0;
    std::size_t corrected_frames = 0;
};

TimingEntry timing_of(const PropagationResult& result);

void write_timing_json(const std::vector<TimingEntry>& entries, const PropagationOptions& options,
                       const std::filesystem::path& path);

}  // namespace cvos
