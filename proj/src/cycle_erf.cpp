#include "cvos/cycle_erf.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "cvos/image_io.hpp"

namespace cvos {

void ErfConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("ErfConfig: alpha must be >= 0");
}

namespace {

Tensor<float> plane_of(const Tensor<float>& planes, std::size_t i) {
    const std::size_t h = planes.dim(1), w = planes.dim(2);
    Tensor<float> out(Shape{1, h, w});
    std::copy_n(planes.data.begin() + static_cast<std::ptrdiff_t>(i * h * w), h * w, out.data.begin());
    return out;
}

void require_model_shape(const char* op, const Tensor<float>& t, std::size_t channels, const ModelConfig& model) {
    if (t.rank() != 3 || (channels != 0 && t.dim(0) != channels) || t.dim(0) == 0 || t.dim(1) != model.height ||
        t.dim(2) != model.width) {
        throw std::invalid_argument(std::string(op) + ": unexpected shape " + to_string(t.shape));
    }
}

}  // namespace

ErfResult compute_cycle_erf(const ModelConfig& model, const Weights<float>& weights,
                            const Tensor<float>& reference_frame, const Tensor<float>& target_frame,
                            const Tensor<float>& target_mask, const ErfConfig& cfg, const LossConfig& loss) {
    cfg.validate();
    require_model_shape("compute_cycle_erf", reference_frame, 3, model);
    require_model_shape("compute_cycle_erf", target_frame, 3, model);
    require_model_shape("compute_cycle_erf", target_mask, 0, model);
    const std::size_t n = target_mask.dim(0), plane = model.height * model.width;
    const float alpha = static_cast<float>(cfg.alpha);
    ErfResult r;
    r.heatmap = Tensor<float>(target_mask.shape);
    r.losses.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor<float> goal = plane_of(target_mask, i);
        Tensor<float> mask(Shape{1, model.height, model.width});
        for (std::size_t l = 0; l < cfg.iterations; ++l) {
            Tape<float> tape;
            SegNet<float> net(model, weights, tape);
            const Var<float> m = tape.variable(mask);
            const auto pred = net.segment({{tape.constant(reference_frame), m}}, tape.constant(target_frame));
            const auto value = seg_loss(pred, tape.constant(goal), loss);
            const double lv = value.value().item();
            if (!std::isfinite(lv)) {
                std::cerr << "warning: non-finite cycle-ERF loss for object " << i + 1 << ", stopping early\n";
                r.stopped_early = true;
                break;
            }
            const Tensor<float> g = tape.backward(value)[m];
            Tensor<float> next = mask;
            bool finite = true;
            for (std::size_t u = 0; u < plane; ++u) {
                next[u] = mask[u] - alpha * g[u];
                finite = finite && std::isfinite(next[u]);
            }
            if (!finite) {
                std::cerr << "warning: non-finite cycle-ERF update for object " << i + 1 << ", stopping early\n";
                r.stopped_early = true;
                break;
            }
            r.losses[i].push_back(lv);
            mask = std::move(next);
        }
        for (std::size_t u = 0; u < plane; ++u) r.heatmap[i * plane + u] = std::max(mask[u], 0.0f);
    }
    return r;
}

const char* partition_name(ErfPartition mode) { return mode == ErfPartition::In ? "in" : "ex"; }

Tensor<float> partition_erf(const Tensor<float>& erf, const Tensor<float>& reference_mask, ErfPartition mode) {
    if (erf.shape != reference_mask.shape) {
        throw std::invalid_argument("partition_erf: heatmap " + to_string(erf.shape) + " vs mask " +
                                    to_string(reference_mask.shape));
    }
    Tensor<float> out(erf.shape);
    for (std::size_t u = 0; u < erf.size(); ++u) {
        const float keep = mode == ErfPartition::In ? reference_mask[u] : 1.0f - reference_mask[u];
        out[u] = erf[u] * keep;
    }
    return out;
}

Tensor<float> partitioned_reconstruct(const ModelConfig& model, const Weights<float>& weights,
                                      const Tensor<float>& reference_frame, const Tensor<float>& erf,
                                      const Tensor<float>& reference_mask, ErfPartition mode,
                                      const Tensor<float>& first_frame) {
    require_model_shape("partitioned_reconstruct", reference_frame, 3, model);
    require_model_shape("partitioned_reconstruct", first_frame, 3, model);
    require_model_shape("partitioned_reconstruct", erf, 0, model);
    const Tensor<float> ref = partition_erf(erf, reference_mask, mode);
    Tape<float> tape;
    SegNet<float> net(model, weights, tape);
    return net.segment({{tape.constant(reference_frame), tape.constant(ref)}}, tape.constant(first_frame)).value();
}

void write_heatmap(const std::filesystem::path& stem, const Tensor<float>& plane) {
    if (plane.rank() < 2) throw std::invalid_argument("write_heatmap: expected a [H,W] or [1,H,W] plane");
    const std::size_t h = plane.dim(plane.rank() - 2), w = plane.dim(plane.rank() - 1);
    if (plane.size() != h * w) throw std::invalid_argument("write_heatmap: expected a single plane");
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
    float mx = 0.0f;
    for (float v : plane.data) mx = std::max(mx, v);
    GrayImage g(h, w);
    if (mx > 0.0f) {
        for (std::size_t u = 0; u < h * w; ++u) {
            g.data[u] = static_cast<std::uint8_t>(std::lround(255.0f * std::clamp(plane[u] / mx, 0.0f, 1.0f)));
        }
    }
    auto pgm = stem;
    pgm += ".pgm";
    write_pgm(pgm, g);
    auto raw = stem;
    raw += ".f32";
    std::ofstream out(raw, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + raw.string());
    out << "CVOSF32 " << w << " " << h << "\n";
    for (float v : plane.data) {
        const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
        const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                               static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
        out.write(bytes, 4);
    }
    if (!out) throw std::runtime_error("write failed: " + raw.string());
}

Tensor<float> read_heatmap_f32(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error(path.string() + ": missing header");
    std::istringstream hs(header);
    std::string magic;
    std::size_t w = 0, h = 0;
    if (!(hs >> magic >> w >> h) || magic != "CVOSF32" || w == 0 || h == 0) {
        throw std::runtime_error(path.string() + ": bad header '" + header + "'");
    }
    Tensor<float> t(Shape{h, w});
    for (auto& v : t.data) {
        unsigned char b[4];
        if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error(path.string() + ": truncated data");
        const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                   (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
        v = std::bit_cast<float>(bits);
    }
    return t;
}

}  // namespace cvos
