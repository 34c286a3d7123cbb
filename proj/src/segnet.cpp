#include "cvos/segnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace cvos {

void ModelConfig::validate() const {
    if (height == 0 || width == 0 || height % kDownsample != 0 || width % kDownsample != 0) {
        throw std::invalid_argument("ModelConfig: height and width must be positive multiples of 4, got " +
                                    std::to_string(height) + "x" + std::to_string(width));
    }
    if (feature_channels < 1 || key_channels < 1 || value_channels < 1) {
        throw std::invalid_argument("ModelConfig: channel counts must be >= 1");
    }
}

template <typename T>
void Weights<T>::add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("Weights: duplicate name " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(std::move(name), std::move(value));
}

template <typename T>
bool Weights<T>::contains(const std::string& name) const {
    return index_.count(name) != 0;
}

template <typename T>
const Tensor<T>& Weights<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("Weights: no tensor named " + name);
    return entries_[it->second].second;
}

template <typename T>
Tensor<T>& Weights<T>::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("Weights: no tensor named " + name);
    return entries_[it->second].second;
}

template <typename T>
std::size_t Weights<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
}

std::vector<LayerSpec> layer_layout(const ModelConfig& cfg) {
    const std::size_t F = cfg.feature_channels, K = cfg.key_channels, V = cfg.value_channels;
    return {
        {"query.conv1", F, 3 + kCoordChannels, 3},     {"query.conv2", F, F, 3},     {"query.conv3", F, F, 3},
        {"query.key", K, F, 1},       {"query.value", V, F, 1},     {"memory.conv1", F, 4 + kCoordChannels, 3},
        {"memory.conv2", F, F, 3},    {"memory.conv3", F, F, 3},    {"memory.key", K, F, 1, false},
        {"memory.value", V, F, 1},    {"decoder.conv1", F, 2 * V, 3}, {"decoder.conv2", F, F, 3},
        {"decoder.conv3", 1, F, 3},
    };
}

template <typename T>
Weights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Weights<T> w;
    for (const auto& l : layer_layout(cfg)) {
        const std::size_t fan_in = l.in_channels * l.kernel * l.kernel;
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-a, a);
        Tensor<T> weight(Shape{l.out_channels, l.in_channels, l.kernel, l.kernel});
        for (auto& v : weight.data) v = static_cast<T>(dist(rng));
        w.add(l.name + ".weight", std::move(weight));
        if (l.bias) {
            Tensor<T> bias(Shape{l.out_channels});
            for (auto& v : bias.data) v = static_cast<T>(dist(rng));
            w.add(l.name + ".bias", std::move(bias));
        }
    }
    return w;
}

template <typename T>
Weights<T> zero_weights(const ModelConfig& cfg) {
    cfg.validate();
    Weights<T> w;
    for (const auto& l : layer_layout(cfg)) {
        w.add(l.name + ".weight", Tensor<T>(Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}));
        if (l.bias) w.add(l.name + ".bias", Tensor<T>(Shape{l.out_channels}));
    }
    return w;
}

template <typename T>
void validate_weights(const ModelConfig& cfg, const Weights<T>& w) {
    const Weights<T> expected = zero_weights<T>(cfg);
    if (expected.entries().size() != w.entries().size()) {
        throw std::invalid_argument("Weights: expected " + std::to_string(expected.entries().size()) +
                                    " tensors, got " + std::to_string(w.entries().size()));
    }
    for (const auto& [name, t] : expected.entries()) {
        if (!w.contains(name)) throw std::invalid_argument("Weights: missing tensor " + name);
        const auto& actual = w.get(name);
        if (actual.shape != t.shape) {
            throw std::invalid_argument("Weights: tensor " + name + " has shape " + to_string(actual.shape) +
                                        ", expected " + to_string(t.shape));
        }
        for (T v : actual.data)
            if (!std::isfinite(v)) throw std::invalid_argument("Weights: non-finite value in " + name);
    }
}

template <typename T>
std::uint64_t fingerprint(const Weights<T>& w) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, t] : w.entries()) {
        for (char ch : name) {
            h ^= static_cast<unsigned char>(ch);
            h *= 1099511628211ULL;
        }
        h = fingerprint(t, h);
    }
    return h;
}

template <typename T>
void MemoryBank<T>::append(const KeyValue<T>& kv) {
    const auto& ks = kv.key.shape();
    const auto& vs = kv.value.shape();
    if (ks.size() != 3 || vs.size() != 3 || ks[1] != vs[1] || ks[2] != vs[2]) {
        throw std::invalid_argument("MemoryBank: key " + to_string(ks) + " and value " + to_string(vs) +
                                    " disagree on positions");
    }
    keys.push_back(ad::reshape(kv.key, Shape{ks[0], ks[1] * ks[2]}));
    values.push_back(ad::reshape(kv.value, Shape{vs[0], vs[1] * vs[2]}));
}

template <typename T>
SegNet<T>::SegNet(const ModelConfig& cfg, const Weights<T>& weights, Tape<T>& tape, bool weight_grads)
    : cfg_(cfg), tape_(&tape) {
    cfg_.validate();
    validate_weights(cfg_, weights);
    for (const auto& [name, t] : weights.entries()) {
        Var<T> v = weight_grads ? tape.variable(t) : tape.constant(t);
        params_.emplace_back(name, v);
        by_name_[name] = v;
    }
    Tensor<T> c(Shape{kCoordChannels, cfg_.height, cfg_.width});
    const std::size_t plane = cfg_.height * cfg_.width;
    for (std::size_t y = 0; y < cfg_.height; ++y) {
        for (std::size_t x = 0; x < cfg_.width; ++x) {
            c[y * cfg_.width + x] = static_cast<T>(2.0 * static_cast<double>(x) / static_cast<double>(cfg_.width - 1) - 1.0);
            c[plane + y * cfg_.width + x] =
                static_cast<T>(2.0 * static_cast<double>(y) / static_cast<double>(cfg_.height - 1) - 1.0);
        }
    }
    coords_ = tape.constant(c);
}

template <typename T>
Var<T> SegNet<T>::param(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("SegNet: no parameter " + name);
    return it->second;
}

template <typename T>
void SegNet<T>::rebind(const std::string& name, Var<T> value) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("SegNet: no parameter " + name);
    if (value.tape != tape_ || value.shape() != it->second.shape()) {
        throw std::invalid_argument("SegNet::rebind: " + name + " expects shape " + to_string(it->second.shape()) +
                                    " on the network's tape");
    }
    it->second = value;
    for (auto& [n, v] : params_)
        if (n == name) v = value;
}

template <typename T>
Var<T> SegNet<T>::conv(Var<T> x, const std::string& layer, std::size_t stride) {
    const Var<T> w = param(layer + ".weight");
    const std::size_t k = w.shape()[2];
    auto b = by_name_.find(layer + ".bias");
    if (b == by_name_.end()) return ad::conv2d(x, w, stride, k / 2);
    return ad::conv2d(x, w, b->second, stride, k / 2);
}

template <typename T>
void SegNet<T>::check_frame(const Var<T>& frame, const char* op) const {
    const Shape expected{3, cfg_.height, cfg_.width};
    if (frame.shape() != expected) {
        throw std::invalid_argument(std::string(op) + ": frame shape " + to_string(frame.shape()) +
                                    " does not match model input " + to_string(expected));
    }
}

template <typename T>
KeyValue<T> SegNet<T>::encode_query(Var<T> frame) {
    check_frame(frame, "encode_query");
    auto x = ad::concat(std::vector<Var<T>>{frame, coords_}, 0);
    auto h = ad::relu(conv(x, "query.conv1", 2));
    h = ad::relu(conv(h, "query.conv2", 2));
    h = conv(h, "query.conv3", 1);
    return {conv(h, "query.key", 1), conv(h, "query.value", 1)};
}

template <typename T>
KeyValue<T> SegNet<T>::encode_memory(Var<T> frame, Var<T> mask) {
    check_frame(frame, "encode_memory");
    const Shape expected{cfg_.height, cfg_.width};
    if (mask.shape() != expected) {
        throw std::invalid_argument("encode_memory: mask shape " + to_string(mask.shape()) +
                                    " does not match frame dims " + to_string(expected));
    }
    auto x = ad::concat(std::vector<Var<T>>{frame, coords_, ad::reshape(mask, Shape{1, cfg_.height, cfg_.width})}, 0);
    auto h = ad::relu(conv(x, "memory.conv1", 2));
    h = ad::relu(conv(h, "memory.conv2", 2));
    h = conv(h, "memory.conv3", 1);
    return {conv(h, "memory.key", 1), conv(h, "memory.value", 1)};
}

namespace {

// Canonical entry order so that the read does not depend on insertion order.
template <typename T>
std::vector<std::size_t> canonical_order(const MemoryBank<T>& memory) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> keys;
    for (std::size_t i = 0; i < memory.entries(); ++i)
        keys.emplace_back(fingerprint(memory.keys[i].value()), fingerprint(memory.values[i].value()));
    std::vector<std::size_t> order(memory.entries());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
    return order;
}

}  // namespace

template <typename T>
Var<T> SegNet<T>::attention(const Var<T>& query_key, const MemoryBank<T>& memory) {
    if (memory.entries() == 0) throw std::invalid_argument("memory_read: empty memory");
    if (memory.keys.size() != memory.values.size()) throw std::invalid_argument("memory_read: key/value count mismatch");
    const auto& qs = query_key.shape();
    std::vector<Var<T>> keys;
    for (auto i : canonical_order(memory)) keys.push_back(memory.keys[i]);
    auto mem_keys = ad::concat(keys, 1);
    if (mem_keys.shape()[0] != qs[0]) {
        throw std::invalid_argument("memory_read: key channels " + to_string(mem_keys.shape()) + " vs query " +
                                    to_string(qs));
    }
    auto q = ad::transpose(ad::reshape(query_key, Shape{qs[0], qs[1] * qs[2]}));
    auto scores = ad::mul_scalar(ad::matmul(q, mem_keys), T{1} / std::sqrt(static_cast<T>(qs[0])));
    return ad::softmax(scores, 1);
}

template <typename T>
Var<T> SegNet<T>::read(const KeyValue<T>& query, const MemoryBank<T>& memory) {
    auto weights = attention(query.key, memory);
    std::vector<Var<T>> values;
    for (auto i : canonical_order(memory)) values.push_back(memory.values[i]);
    auto mem_values = ad::concat(values, 1);
    const auto& vs = query.value.shape();
    if (mem_values.shape()[0] != vs[0] || mem_values.shape()[1] != weights.shape()[1]) {
        throw std::invalid_argument("memory_read: value shape " + to_string(mem_values.shape()) +
                                    " inconsistent with query value " + to_string(vs));
    }
    auto readout = ad::matmul(mem_values, ad::transpose(weights));  // [Cv, P]
    auto qv = ad::reshape(query.value, Shape{vs[0], vs[1] * vs[2]});
    return ad::reshape(ad::concat(std::vector<Var<T>>{qv, readout}, 0), Shape{2 * vs[0], vs[1], vs[2]});
}

template <typename T>
Var<T> SegNet<T>::decode(Var<T> readout) {
    auto h = ad::relu(conv(readout, "decoder.conv1", 1));
    h = ad::upsample2x(h);
    h = ad::relu(conv(h, "decoder.conv2", 1));
    h = ad::upsample2x(h);
    h = ad::sigmoid(conv(h, "decoder.conv3", 1));
    return ad::reshape(h, Shape{h.shape()[1], h.shape()[2]});
}

template <typename T>
Var<T> SegNet<T>::segment_planes(const std::vector<Reference<T>>& refs, Var<T> target) {
    if (refs.empty()) throw std::invalid_argument("segment: empty reference set");
    const std::size_t objects = refs[0].mask.shape().empty() ? 0 : refs[0].mask.shape()[0];
    for (const auto& r : refs) {
        if (r.mask.shape().size() != 3 || r.mask.shape()[0] != objects) {
            throw std::invalid_argument("segment: object count mismatch across references (" +
                                        to_string(refs[0].mask.shape()) + " vs " + to_string(r.mask.shape()) + ")");
        }
    }
    if (objects == 0) throw std::invalid_argument("segment: references carry no objects");
    const KeyValue<T> query = encode_query(target);
    std::vector<Var<T>> planes;
    for (std::size_t i = 0; i < objects; ++i) {
        MemoryBank<T> memory;
        for (const auto& r : refs) memory.append(encode_memory(r.frame, ad::select(r.mask, i)));
        auto p = decode(read(query, memory));
        planes.push_back(ad::reshape(p, Shape{1, cfg_.height, cfg_.width}));
    }
    return planes.size() == 1 ? planes[0] : ad::concat(planes, 0);
}

template <typename T>
Var<T> SegNet<T>::segment(const std::vector<Reference<T>>& refs, Var<T> target) {
    return aggregate_objects(segment_planes(refs, target));
}

template <typename T>
Var<T> aggregate_objects(Var<T> planes) {
    const auto& s = planes.shape();
    if (s.size() != 3 || s[0] == 0) throw std::invalid_argument("aggregate_objects: expected [N,H,W], got " + to_string(s));
    std::vector<Var<T>> p;
    for (std::size_t i = 0; i < s[0]; ++i) p.push_back(ad::select(planes, i));
    Var<T> background = T{1} - p[0];
    Var<T> total = p[0];
    for (std::size_t i = 1; i < p.size(); ++i) {
        background = background * (T{1} - p[i]);
        total = total + p[i];
    }
    Var<T> denom = background + total;
    std::vector<Var<T>> out;
    for (auto& pi : p) out.push_back(ad::reshape(pi / denom, Shape{1, s[1], s[2]}));
    return out.size() == 1 ? out[0] : ad::concat(out, 0);
}

template <typename T>
std::vector<std::uint8_t> label_map(const Tensor<T>& scores) {
    if (scores.rank() != 3) throw std::invalid_argument("label_map: expected [N,H,W], got " + to_string(scores.shape));
    const std::size_t n = scores.dim(0), plane = scores.dim(1) * scores.dim(2);
    if (n > 255) throw std::invalid_argument("label_map: more than 255 objects");
    std::vector<std::uint8_t> labels(plane, 0);
    for (std::size_t u = 0; u < plane; ++u) {
        T total{0};
        for (std::size_t i = 0; i < n; ++i) total += scores[i * plane + u];
        T best = std::max(T{1} - total, T{0});
        for (std::size_t i = 0; i < n; ++i) {
            if (scores[i * plane + u] > best) {
                best = scores[i * plane + u];
                labels[u] = static_cast<std::uint8_t>(i + 1);
            }
        }
    }
    return labels;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

std::uint32_t need_u32(std::istream& is, const std::string& what) {
    std::uint32_t v = 0;
    if (!get_u32(is, v)) throw std::runtime_error("checkpoint: truncated while reading " + what);
    return v;
}

constexpr char kMagic[4] = {'C', 'V', 'O', 'S'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Weights<float>& w) {
    validate_weights(cfg, w);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    for (std::size_t v : {cfg.height, cfg.width, cfg.feature_channels, cfg.key_channels, cfg.value_channels,
                          ModelConfig::kDownsample})
        put_u32(os, static_cast<std::uint32_t>(v));
    for (const auto& [name, t] : w.entries()) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
        for (float f : t.data) put_u32(os, std::bit_cast<std::uint32_t>(f));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

std::pair<ModelConfig, Weights<float>> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const std::uint32_t version = need_u32(is, "version");
    if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    ModelConfig cfg;
    cfg.height = need_u32(is, "config");
    cfg.width = need_u32(is, "config");
    cfg.feature_channels = need_u32(is, "config");
    cfg.key_channels = need_u32(is, "config");
    cfg.value_channels = need_u32(is, "config");
    if (need_u32(is, "config") != ModelConfig::kDownsample)
        throw std::runtime_error("checkpoint: unsupported downsample factor");
    cfg.validate();
    Weights<float> w;
    std::uint32_t name_len = 0;
    while (get_u32(is, name_len)) {
        if (name_len > 4096) throw std::runtime_error("checkpoint: implausible name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated name");
        const std::uint32_t rank = need_u32(is, "rank of " + name);
        if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for " + name);
        Shape shape(rank);
        for (auto& d : shape) d = need_u32(is, "dims of " + name);
        Tensor<float> t(shape);
        for (auto& f : t.data) f = std::bit_cast<float>(need_u32(is, "values of " + name));
        w.add(std::move(name), std::move(t));
    }
    validate_weights(cfg, w);
    return {cfg, std::move(w)};
}

#define CVOS_INSTANTIATE_SEGNET(T)                                             \
    template class Weights<T>;                                                 \
    template Weights<T> init_weights<T>(const ModelConfig&, std::uint64_t);    \
    template Weights<T> zero_weights<T>(const ModelConfig&);                   \
    template void validate_weights<T>(const ModelConfig&, const Weights<T>&);  \
    template std::uint64_t fingerprint<T>(const Weights<T>&);                  \
    template struct MemoryBank<T>;                                             \
    template class SegNet<T>;                                                  \
    template Var<T> aggregate_objects<T>(Var<T>);                              \
    template std::vector<std::uint8_t> label_map<T>(const Tensor<T>&);

CVOS_INSTANTIATE_SEGNET(float)
CVOS_INSTANTIATE_SEGNET(double)

#undef CVOS_INSTANTIATE_SEGNET

}  // namespace cvos
