// Video sequences, the synthetic moving-shapes benchmark, and on-disk layout:
//   <seq>/frames/NNNNN.(png|ppm)
//   <seq>/masks/NNNNN.png      (8-bit indexed, 0 = background)
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cvos/image_io.hpp"
#include "cvos/tensor.hpp"

namespace cvos {

struct VideoSequence {
    std::string name;
    std::vector<RgbImage> frames;
    // One slot per frame; the first must be present.
    std::vector<std::optional<LabelMap>> masks;
    std::size_t object_count = 0;

    std::size_t length() const { return frames.size(); }
    std::size_t height() const { return frames.empty() ? 0 : frames.front().height; }
    std::size_t width() const { return frames.empty() ? 0 : frames.front().width; }
    // True when every frame has a mask, i.e. the sequence can be scored.
    bool has_full_ground_truth() const;
    void validate() const;
};

// [3,H,W] with values k/255.
template <typename T>
Tensor<T> frame_tensor(const RgbImage& image);

// Binary [H,W] plane of one object id.
template <typename T>
Tensor<T> object_plane(const LabelMap& labels, std::size_t object_id);

// Binary [N,H,W] planes for ids 1..N.
template <typename T>
Tensor<T> object_planes(const LabelMap& labels, std::size_t object_count);

LabelMap to_label_map(const std::vector<std::uint8_t>& labels, std::size_t height, std::size_t width);

enum class ShapeKind { Square, Disc, Bar };

const char* shape_name(ShapeKind kind);
ShapeKind parse_shape(const std::string& name);

struct SynthSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t length = 16;
    std::size_t targets = 1;
    std::size_t distractors = 1;
    std::vector<ShapeKind> shapes{ShapeKind::Square, ShapeKind::Disc, ShapeKind::Bar};
    // Object extent (square side, disc diameter, bar length), pixels.
    double min_size = 10.0;
    double max_size = 16.0;
    double min_speed = 1.0;
    double max_speed = 3.0;
    // Per-pixel uniform color noise amplitude, 8-bit units.
    double color_noise = 12.0;
    // Distractors copy a target's shape and color (within the noise range).
    bool similar_distractors = true;
    // Without occlusion targets move in disjoint horizontal lanes and are
    // drawn above all distractors, so target masks are never covered.
    bool allow_occlusion = false;
    std::uint64_t seed = 0;

    void validate() const;
};

// One rendered object track, kept for tests and diagnostics.
struct SynthObject {
    ShapeKind shape = ShapeKind::Square;
    bool distractor = false;
    // Target this object imitates (distractors) or its own index (targets).
    std::size_t template_target = 0;
    double size = 0.0;
    double thickness = 0.0;
    double angle = 0.0;
    // Bar rotation per frame, radians.
    double spin = 0.0;
    std::array<double, 3> color{};
    std::vector<double> cx, cy;
};

struct SynthResult {
    VideoSequence sequence;
    std::vector<SynthObject> objects;
};

SynthResult generate_synthetic_detailed(const SynthSpec& spec, const std::string& name = "synthetic");
VideoSequence generate_synthetic(const SynthSpec& spec, const std::string& name = "synthetic");

// Pixel-center coverage test for one object at frame t.
bool covers(const SynthObject& obj, std::size_t t, double px, double py);

struct SuiteSpec {
    std::size_t train = 20;
    std::size_t val = 5;
    std::size_t eval = 5;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t length = 16;
    std::size_t min_targets = 1;
    std::size_t max_targets = 2;
    std::size_t distractors = 1;
    bool allow_occlusion = false;
    std::uint64_t seed = 0;
};

struct SuiteEntry {
    std::string split;
    VideoSequence sequence;
};

std::vector<SuiteEntry> generate_suite(const SuiteSpec& spec);

// Writes every sequence under root/<name> plus root/suite.json.
void save_suite(const std::vector<SuiteEntry>& suite, const SuiteSpec& spec, const std::filesystem::path& root);

// Reads root/suite.json and the sequences of one split ("" = all).
std::vector<SuiteEntry> load_suite(const std::filesystem::path& root, const std::string& split = "");

VideoSequence load_sequence(const std::filesystem::path& dir);
// Frames as .png unless frame_ext is ".ppm"; masks for present slots.
void save_sequence(const VideoSequence& seq, const std::filesystem::path& dir, const std::string& frame_ext = ".png");
// Label maps only, as masks/NNNNN.png for frames with a value.
void save_label_maps(const std::vector<std::optional<LabelMap>>& labels, const std::filesystem::path& dir);

std::string frame_file_stem(std::size_t index);

// FNV-1a over frame and mask bytes.
std::uint64_t sequence_checksum(const VideoSequence& seq);

}  // namespace cvos
