// Cycle effective receptive field: starting from an empty mask on a reference
// frame, descend the loss of segmenting a target frame's object from that
// mask, then keep the positive part. Plus the in/ex partition probe.
#pragma once

#include <filesystem>
#include <vector>

#include "cvos/inference.hpp"

namespace cvos {

struct ErfConfig {
    std::size_t iterations = 50;
    double alpha = kDefaultCorrectionRate;

    void validate() const;
};

struct ErfResult {
    // relu of the optimized mask, one plane per object: [N,H,W].
    Tensor<float> heatmap;
    // Loss before each update, per object.
    std::vector<std::vector<double>> losses;
    bool stopped_early = false;
};

// target_mask: [N,H,W] ground truth on target_frame. Objects are optimized
// independently. Weights are read only.
ErfResult compute_cycle_erf(const ModelConfig& model, const Weights<float>& weights,
                            const Tensor<float>& reference_frame, const Tensor<float>& target_frame,
                            const Tensor<float>& target_mask, const ErfConfig& cfg, const LossConfig& loss = {});

enum class ErfPartition { In, Ex };

const char* partition_name(ErfPartition mode);

// erf * mask (in) or erf * (1 - mask) (ex), per plane.
Tensor<float> partition_erf(const Tensor<float>& erf, const Tensor<float>& reference_mask, ErfPartition mode);

// segment({(reference_frame, partition_erf(...))}, first_frame)
Tensor<float> partitioned_reconstruct(const ModelConfig& model, const Weights<float>& weights,
                                      const Tensor<float>& reference_frame, const Tensor<float>& erf,
                                      const Tensor<float>& reference_mask, ErfPartition mode,
                                      const Tensor<float>& first_frame);

// <stem>.pgm, scaled so the maximum maps to 255 (all zero if max <= 0), and
// <stem>.f32: a text line "CVOSF32 <width> <height>\n" followed by
// width*height little-endian float32 values in row-major order.
void write_heatmap(const std::filesystem::path& stem, const Tensor<float>& plane);
Tensor<float> read_heatmap_f32(const std::filesystem::path& path);

}  // namespace cvos
