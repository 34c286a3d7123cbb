// Region similarity J, contour accuracy F and sequence-level evaluation.
#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "cvos/dataio.hpp"

namespace cvos {

// |pred ∩ gt| / |pred ∪ gt| for one object id; 1 when both are empty.
double jaccard(const LabelMap& pred, const LabelMap& gt, std::size_t object_id, std::size_t object_count = 255);

// Boundary pixels: the object set minus its 4-neighbour erosion. Pixels
// outside the image count as background.
std::vector<std::uint8_t> boundary_map(const LabelMap& labels, std::size_t object_id);

// Boundary F-measure with matching radius `tolerance` (Euclidean disc).
double boundary_f(const LabelMap& pred, const LabelMap& gt, std::size_t object_id, double tolerance,
                  std::size_t object_count = 255);

// max(1, round(0.0075 * image diagonal))
double default_boundary_tolerance(std::size_t height, std::size_t width);

struct ObjectScore {
    std::size_t object_id = 0;
    double j = 0.0;
    double f = 0.0;
};

struct SequenceScore {
    std::string name;
    std::vector<ObjectScore> objects;
    std::size_t scored_frames = 0;
    double j = 0.0;
    double f = 0.0;
    double jf = 0.0;
    double fps = 0.0;
};

struct EvalReport {
    std::vector<SequenceScore> sequences;
    std::vector<std::string> skipped;
    double j = 0.0;
    double f = 0.0;
    double jf = 0.0;
    double fps = 0.0;
};

// Predicted label maps for every frame of one sequence.
struct PredictedSequence {
    std::string name;
    std::vector<LabelMap> labels;
    double seconds = 0.0;
};

// Scores frames 2..T of one sequence. Throws if ground truth is missing.
SequenceScore evaluate_sequence(const PredictedSequence& pred, const VideoSequence& gt, double tolerance = -1.0);

// Matches predictions to ground truth by name. Sequences without complete
// ground truth (or without a prediction) are skipped with a warning.
EvalReport evaluate(const std::vector<PredictedSequence>& preds, const std::vector<VideoSequence>& gts,
                    double tolerance = -1.0);

// sequence,object,J,F,J&F rows (object "mean" summarises a sequence).
void write_eval_csv(const EvalReport& report, const std::filesystem::path& path);
void write_eval_json(const EvalReport& report, const std::filesystem::path& path);

}  // namespace cvos
