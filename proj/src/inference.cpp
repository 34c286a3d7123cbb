#include "cvos/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "cvos/image_io.hpp"
#include "cvos/kernels.hpp"
#include "json.hpp"

namespace cvos {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

void require_planes(const char* op, const Tensor<float>& planes, const ModelConfig& model) {
    if (planes.rank() != 3 || planes.dim(0) == 0 || planes.dim(1) != model.height || planes.dim(2) != model.width) {
        throw std::invalid_argument(std::string(op) + ": expected [N," + std::to_string(model.height) + "," +
                                    std::to_string(model.width) + "] mask, got " + to_string(planes.shape));
    }
}

void require_frame(const char* op, const Tensor<float>& frame, const ModelConfig& model) {
    if (frame.shape != Shape{3, model.height, model.width}) {
        throw std::invalid_argument(std::string(op) + ": frame shape " + to_string(frame.shape) +
                                    " does not match the model");
    }
}

Var<float> reconstruction(SegNet<float>& net, Var<float> mask, const Tensor<float>& frame_t,
                          const Tensor<float>& frame_1, const Tensor<float>& mask_1, const LossConfig& loss) {
    auto& tape = net.tape();
    const auto pred_1 = net.segment({{tape.constant(frame_t), mask}}, tape.constant(frame_1));
    return seg_loss(pred_1, tape.constant(mask_1), loss);
}

}  // namespace

const char* strategy_name(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::First: return "first";
        case StrategyKind::Prev: return "prev";
        case StrategyKind::FirstPrev: return "first+prev";
        case StrategyKind::Mem: return "mem";
    }
    return "?";
}

StrategyKind parse_strategy(const std::string& name) {
    std::string s = name;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "first") return StrategyKind::First;
    if (s == "prev") return StrategyKind::Prev;
    if (s == "first+prev" || s == "first-prev") return StrategyKind::FirstPrev;
    if (s == "mem") return StrategyKind::Mem;
    throw std::invalid_argument("unknown strategy '" + name + "' (expected first, prev, first+prev or mem)");
}

void Strategy::validate() const {
    if (mem_period == 0) throw std::invalid_argument("Strategy: mem period must be >= 1");
}

void CorrectionConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("CorrectionConfig: alpha must be >= 0");
    if (period == 0) throw std::invalid_argument("CorrectionConfig: period must be >= 1");
}

bool CorrectionConfig::applies_to(std::size_t frame_number) const {
    return enabled && frame_number >= 2 && (frame_number - 2) % period == 0;
}

CorrectionResult gradient_correct(const ModelConfig& model, const Weights<float>& weights,
                                  const Tensor<float>& pred_t, const Tensor<float>& frame_t,
                                  const Tensor<float>& frame_1, const Tensor<float>& mask_1,
                                  const CorrectionConfig& cfg, const LossConfig& loss) {
    cfg.validate();
    require_planes("gradient_correct", pred_t, model);
    require_planes("gradient_correct", mask_1, model);
    require_frame("gradient_correct", frame_t, model);
    require_frame("gradient_correct", frame_1, model);
    if (pred_t.shape != mask_1.shape) throw std::invalid_argument("gradient_correct: object count mismatch");
    CorrectionResult r;
    r.mask = pred_t;
    const float alpha = static_cast<float>(cfg.alpha);
    for (std::size_t l = 0; l < cfg.iterations; ++l) {
        Tape<float> tape;
        SegNet<float> net(model, weights, tape);
        const Var<float> m = tape.variable(r.mask);
        const Var<float> value = reconstruction(net, m, frame_t, frame_1, mask_1, loss);
        const double lv = value.value().item();
        if (!std::isfinite(lv)) {
            std::cerr << "warning: non-finite reconstruction loss at correction step " << l << ", stopping\n";
            r.stopped_early = true;
            break;
        }
        r.losses.push_back(lv);
        const Tensor<float> g = tape.backward(value)[m];
        if (!std::all_of(g.data.begin(), g.data.end(), [](float v) { return std::isfinite(v); })) {
            std::cerr << "warning: non-finite correction gradient at step " << l << ", stopping\n";
            r.stopped_early = true;
            break;
        }
        for (std::size_t i = 0; i < r.mask.size(); ++i) {
            float v = r.mask[i] - alpha * g[i];
            if (cfg.clamp) v = std::clamp(v, 0.0f, 1.0f);
            r.mask[i] = v;
        }
    }
    return r;
}

double reconstruction_loss(const ModelConfig& model, const Weights<float>& weights, const Tensor<float>& pred_t,
                           const Tensor<float>& frame_t, const Tensor<float>& frame_1, const Tensor<float>& mask_1,
                           const LossConfig& loss) {
    Tape<float> tape;
    SegNet<float> net(model, weights, tape);
    return reconstruction(net, tape.constant(pred_t), frame_t, frame_1, mask_1, loss).value().item();
}

PropagationResult propagate(const VideoSequence& video, const Tensor<float>& first_mask, const ModelConfig& model,
                            const Weights<float>& weights, const PropagationOptions& options) {
    options.strategy.validate();
    options.correction.validate();
    if (video.length() < 2) throw std::invalid_argument("propagate: '" + video.name + "' needs at least 2 frames");
    if (video.height() != model.height || video.width() != model.width) {
        throw std::invalid_argument("propagate: '" + video.name + "' does not match the model resolution");
    }
    require_planes("propagate", first_mask, model);
    const auto start = Clock::now();
    const std::size_t T = video.length();
    std::vector<Tensor<float>> frames;
    frames.reserve(T);
    for (const auto& f : video.frames) frames.push_back(frame_tensor<float>(f));

    PropagationResult r;
    r.name = video.name;
    r.scores.reserve(T);
    r.scores.push_back(first_mask);
    std::vector<std::size_t> memory{0};
    const auto kind = options.strategy.kind;
    for (std::size_t t = 1; t < T; ++t) {
        std::vector<std::size_t> refs;
        switch (kind) {
            case StrategyKind::First: refs = {0}; break;
            case StrategyKind::Prev: refs = {t - 1}; break;
            case StrategyKind::FirstPrev: refs = t == 1 ? std::vector<std::size_t>{0} : std::vector<std::size_t>{0, t - 1}; break;
            case StrategyKind::Mem: refs = memory; break;
        }
        FrameRecord rec;
        rec.frame = t + 1;
        std::uint64_t fp = 1469598103934665603ULL;
        for (std::size_t i : refs) {
            rec.memory_frames.push_back(i + 1);
            fp = fingerprint(r.scores[i], fingerprint(frames[i], fp ^ (i + 1)));
        }
        rec.memory_fingerprint = fp;

        Tensor<float> pred;
        {
            Tape<float> tape;
            SegNet<float> net(model, weights, tape);
            std::vector<Reference<float>> set;
            for (std::size_t i : refs) set.push_back({tape.constant(frames[i]), tape.constant(r.scores[i])});
            pred = net.segment(set, tape.constant(frames[t])).value();
        }
        if (options.correction.applies_to(t + 1)) {
            const auto c0 = Clock::now();
            auto c = gradient_correct(model, weights, pred, frames[t], frames[0], first_mask, options.correction,
                                      options.loss);
            r.correction_seconds += since(c0);
            pred = std::move(c.mask);
            rec.corrected = true;
            rec.correction_losses = std::move(c.losses);
            ++r.corrected_frames;
            if (options.record_final_loss) {
                rec.final_loss = reconstruction_loss(model, weights, pred, frames[t], frames[0], first_mask,
                                                     options.loss);
            }
        }
        r.scores.push_back(std::move(pred));
        if (kind == StrategyKind::Mem && (t - 1) % options.strategy.mem_period == 0) {
            memory.push_back(t);
            rec.appended = true;
        }
        r.frames.push_back(std::move(rec));
    }
    r.seconds = since(start);
    r.labels.reserve(T);
    for (const auto& s : r.scores) r.labels.push_back(to_label_map(label_map(s), model.height, model.width));
    return r;
}

PropagationResult propagate(const VideoSequence& video, const ModelConfig& model, const Weights<float>& weights,
                            const PropagationOptions& options) {
    if (video.masks.empty() || !video.masks[0]) {
        throw std::invalid_argument("propagate: '" + video.name + "' has no first-frame mask");
    }
    return propagate(video, object_planes<float>(*video.masks[0], video.object_count), model, weights, options);
}

const char* degrade_name(DegradeMode mode) {
    switch (mode) {
        case DegradeMode::None: return "none";
        case DegradeMode::BoundingBox: return "bbox";
        case DegradeMode::BaselinePredict: return "baseline";
    }
    return "?";
}

DegradeMode parse_degrade(const std::string& name) {
    if (name == "none") return DegradeMode::None;
    if (name == "bbox" || name == "bounding-box") return DegradeMode::BoundingBox;
    if (name == "baseline" || name == "baseline-predict") return DegradeMode::BaselinePredict;
    throw std::invalid_argument("unknown degradation '" + name + "' (expected none, bbox or baseline)");
}

Tensor<float> bounding_box_mask(const Tensor<float>& planes) {
    if (planes.rank() != 3) throw std::invalid_argument("bounding_box_mask: expected [N,H,W], got " + to_string(planes.shape));
    const std::size_t n = planes.dim(0), h = planes.dim(1), w = planes.dim(2);
    Tensor<float> out = planes;
    for (std::size_t i = 0; i < n; ++i) {
        const float* p = planes.data.data() + i * h * w;
        std::size_t y0 = h, y1 = 0, x0 = w, x1 = 0;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                if (p[y * w + x] > 0.5f) {
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                }
            }
        }
        if (y0 > y1) continue;
        float* q = out.data.data() + i * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) q[y * w + x] = (y >= y0 && y <= y1 && x >= x0 && x <= x1) ? 1.0f : 0.0f;
        }
    }
    return out;
}

Tensor<float> baseline_predict_mask(const Tensor<float>& frame_1, const Tensor<float>& planes,
                                    const ModelConfig& model, const Weights<float>& weights) {
    require_planes("baseline_predict_mask", planes, model);
    require_frame("baseline_predict_mask", frame_1, model);
    Tape<float> tape;
    SegNet<float> net(model, weights, tape);
    const auto frame = tape.constant(frame_1);
    const auto scores = net.segment({{frame, tape.constant(planes)}}, frame).value();
    const auto labels = label_map(scores);
    const std::size_t n = planes.dim(0), plane = model.height * model.width;
    Tensor<float> out(planes.shape);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t u = 0; u < plane; ++u) out[i * plane + u] = labels[u] == i + 1 ? 1.0f : 0.0f;
    }
    return out;
}

Tensor<float> degrade_mask(const Tensor<float>& planes, const Tensor<float>& frame_1, const Degradation& how) {
    switch (how.mode) {
        case DegradeMode::None: return planes;
        case DegradeMode::BoundingBox: return bounding_box_mask(planes);
        case DegradeMode::BaselinePredict:
            if (!how.model || !how.weights) throw std::invalid_argument("degrade_mask: baseline mode needs a model");
            return baseline_predict_mask(frame_1, planes, *how.model, *how.weights);
    }
    return planes;
}

void save_propagation(const PropagationResult& result, const std::filesystem::path& dir, bool soft_masks) {
    std::vector<std::optional<LabelMap>> labels(result.labels.begin(), result.labels.end());
    save_label_maps(labels, dir);
    if (!soft_masks) return;
    for (std::size_t t = 0; t < result.scores.size(); ++t) {
        const auto& s = result.scores[t];
        const std::size_t h = s.dim(1), w = s.dim(2);
        for (std::size_t i = 0; i < s.dim(0); ++i) {
            const auto sub = dir / "soft" / ("obj" + std::to_string(i + 1));
            std::filesystem::create_directories(sub);
            GrayImage g(h, w);
            for (std::size_t u = 0; u < h * w; ++u) {
                g.data[u] = static_cast<std::uint8_t>(std::lround(255.0f * std::clamp(s[i * h * w + u], 0.0f, 1.0f)));
            }
            write_pgm(sub / (frame_file_stem(t) + ".pgm"), g);
        }
    }
}

TimingEntry timing_of(const PropagationResult& result) {
    return {result.name, result.scores.size(), result.seconds, result.correction_seconds, result.corrected_frames};
}

void write_timing_json(const std::vector<TimingEntry>& entries, const PropagationOptions& options,
                       const std::filesystem::path& path) {
    nlohmann::json j;
    std::size_t frames = 0, corrected = 0;
    double seconds = 0.0, correction = 0.0;
    j["sequences"] = nlohmann::json::array();
    for (const auto& e : entries) {
        frames += e.frames;
        corrected += e.corrected_frames;
        seconds += e.seconds;
        correction += e.correction_seconds;
        j["sequences"].push_back({{"name", e.name},
                                  {"frames", e.frames},
                                  {"seconds", e.seconds},
                                  {"correction_seconds", e.correction_seconds},
                                  {"corrected_frames", e.corrected_frames},
                                  {"fps", e.seconds > 0.0 ? static_cast<double>(e.frames) / e.seconds : 0.0}});
    }
    const auto fps = [&](double s) { return s > 0.0 ? static_cast<double>(frames) / s : 0.0; };
    j["frames"] = frames;
    j["seconds"] = seconds;
    j["fps"] = fps(seconds);
    j["correction_seconds"] = correction;
    j["fps_without_correction"] = fps(seconds - correction);
    j["correction_overhead_per_frame"] = frames > 0 ? correction / static_cast<double>(frames) : 0.0;
    j["corrected_frames"] = corrected;
    j["strategy"] = {{"kind", strategy_name(options.strategy.kind)}, {"mem_period", options.strategy.mem_period}};
    j["correction"] = {{"enabled", options.correction.enabled},
                       {"alpha", options.correction.alpha},
                       {"iterations", options.correction.iterations},
                       {"period", options.correction.period},
                       {"clamp", options.correction.clamp}};
    j["threads"] = kernels::max_threads();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace cvos
