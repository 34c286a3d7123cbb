#pragma once

// Memory-matching segmentation network.
//
//   query encoder   RGB frame + xy       -> key [Ck,h,w], value [Cv,h,w]
//   memory encoder  RGB frame + xy + mask -> key, value       (h = H/4, w = W/4)
//   readout         softmax(q.k / sqrt(Ck)) over all memory positions
//   decoder         [query value, readout] -> probability plane at full size
//
// xy are two constant planes holding pixel coordinates scaled to [-1, 1].
// Objects are segmented independently and merged with soft aggregation.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cvos/autodiff.hpp"
#include "cvos/tensor.hpp"

namespace cvos {

inline constexpr std::size_t kCoordChannels = 2;

struct ModelConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t feature_channels = 16;
    std::size_t key_channels = 8;
    std::size_t value_channels = 16;
    static constexpr std::size_t kDownsample = 4;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Named parameter tensors in a fixed order.
template <typename T>
class Weights {
public:
    using Entry = std::pair<std::string, Tensor<T>>;

    Weights() = default;

    void add(std::string name, Tensor<T> value);
    bool contains(const std::string& name) const;
    const Tensor<T>& get(const std::string& name) const;
    Tensor<T>& get(const std::string& name);

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t parameter_count() const;

    template <typename U>
    Weights<U> cast() const {
        Weights<U> out;
        for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
        return out;
    }

    bool operator==(const Weights&) const = default;

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// Layer layout of the network for a config. Weight names are stable and used
// in checkpoints. The memory key head has no bias: a constant added to every
// memory key shifts each query's scores uniformly and cannot affect the read.
struct LayerSpec {
    std::string name;
    std::size_t out_channels;
    std::size_t in_channels;
    std::size_t kernel;
    bool bias = true;
};
std::vector<LayerSpec> layer_layout(const ModelConfig& cfg);

// Uniform in [-a, a] with a = sqrt(6 / fan_in) for weights and biases.
template <typename T>
Weights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed);

// All-zero parameters with the correct shapes.
template <typename T>
Weights<T> zero_weights(const ModelConfig& cfg);

// Checks names, shapes and finiteness against the config.
template <typename T>
void validate_weights(const ModelConfig& cfg, const Weights<T>& w);

template <typename T>
std::uint64_t fingerprint(const Weights<T>& w);

template <typename T>
struct KeyValue {
    Var<T> key;    // [Ck, h, w]
    Var<T> value;  // [Cv, h, w]
};

template <typename T>
struct MemoryBank {
    std::vector<Var<T>> keys;    // each [Ck, h*w]
    std::vector<Var<T>> values;  // each [Cv, h*w]

    void append(const KeyValue<T>& kv);
    std::size_t entries() const { return keys.size(); }
};

template <typename T>
struct Reference {
    Var<T> frame;  // [3, H, W]
    Var<T> mask;   // [N, H, W]
};

// Network bound to a tape. Parameters are recorded once at construction, as
// variables when gradients w.r.t. weights are wanted, else as constants.
template <typename T>
class SegNet {
public:
    SegNet(const ModelConfig& cfg, const Weights<T>& weights, Tape<T>& tape, bool weight_grads = false);

    const ModelConfig& config() const { return cfg_; }
    Tape<T>& tape() { return *tape_; }
    Var<T> param(const std::string& name) const;
    const std::vector<std::pair<std::string, Var<T>>>& params() const { return params_; }
    // Replaces one parameter with a caller-provided node of the same shape.
    void rebind(const std::string& name, Var<T> value);

    KeyValue<T> encode_query(Var<T> frame);
    // mask: [H, W]. Values need not lie in [0,1].
    KeyValue<T> encode_memory(Var<T> frame, Var<T> mask);
    // -> [2 Cv, h, w]
    Var<T> read(const KeyValue<T>& query, const MemoryBank<T>& memory);
    // Attention weights [h*w query positions, total memory positions].
    Var<T> attention(const Var<T>& query_key, const MemoryBank<T>& memory);
    // -> [H, W] probabilities
    Var<T> decode(Var<T> readout);

    // Per-object probability planes [N, H, W] before aggregation.
    Var<T> segment_planes(const std::vector<Reference<T>>& refs, Var<T> target);
    // Aggregated object scores [N, H, W].
    Var<T> segment(const std::vector<Reference<T>>& refs, Var<T> target);

private:
    Var<T> conv(Var<T> x, const std::string& layer, std::size_t stride);
    void check_frame(const Var<T>& frame, const char* op) const;

    ModelConfig cfg_;
    Tape<T>* tape_;
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::map<std::string, Var<T>> by_name_;
    Var<T> coords_;
};

// Soft merge: background = prod_i (1 - p_i), scores normalized to sum to 1.
template <typename T>
Var<T> aggregate_objects(Var<T> planes);

// Label map from object scores [N,H,W]: background score is 1 - sum(scores)
// clipped at 0; ties resolve to the lower label.
template <typename T>
std::vector<std::uint8_t> label_map(const Tensor<T>& scores);

// Binary file: "CVOS", u32 version, u32 x6 config block, then records of
// (u32 name length, name bytes, u32 rank, u32 dims..., f32 values) until EOF.
// All integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Weights<float>& w);
std::pair<ModelConfig, Weights<float>> load_checkpoint(const std::filesystem::path& path);

}  // namespace cvos
