#include "cvos/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace cvos {

namespace {

void check_pair(const char* op, const LabelMap& pred, const LabelMap& gt, std::size_t object_id,
                std::size_t object_count) {
    if (pred.height != gt.height || pred.width != gt.width || pred.data.size() != gt.data.size()) {
        throw std::invalid_argument(std::string(op) + ": label maps differ in shape");
    }
    if (object_id == 0 || object_id > object_count || object_id > 255) {
        throw std::invalid_argument(std::string(op) + ": unknown object id " + std::to_string(object_id));
    }
}

// Disc dilation of a binary map.
std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& bin, std::size_t h, std::size_t w, double r) {
    const long reach = static_cast<long>(std::floor(r));
    const double r2 = r * r;
    std::vector<std::pair<long, long>> offsets;
    for (long dy = -reach; dy <= reach; ++dy) {
        for (long dx = -reach; dx <= reach; ++dx) {
            if (static_cast<double>(dx * dx + dy * dy) <= r2) offsets.emplace_back(dy, dx);
        }
    }
    std::vector<std::uint8_t> out(bin.size(), 0);
    const long H = static_cast<long>(h), W = static_cast<long>(w);
    for (long y = 0; y < H; ++y) {
        for (long x = 0; x < W; ++x) {
            if (!bin[static_cast<std::size_t>(y * W + x)]) continue;
            for (const auto& [dy, dx] : offsets) {
                const long yy = y + dy, xx = x + dx;
                if (yy >= 0 && yy < H && xx >= 0 && xx < W) out[static_cast<std::size_t>(yy * W + xx)] = 1;
            }
        }
    }
    return out;
}

}  // namespace

double jaccard(const LabelMap& pred, const LabelMap& gt, std::size_t object_id, std::size_t object_count) {
    check_pair("jaccard", pred, gt, object_id, object_count);
    std::size_t inter = 0, uni = 0;
    for (std::size_t u = 0; u < pred.data.size(); ++u) {
        const bool p = pred.data[u] == object_id, g = gt.data[u] == object_id;
        inter += p && g;
        uni += p || g;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::uint8_t> boundary_map(const LabelMap& labels, std::size_t object_id) {
    const std::size_t h = labels.height, w = labels.width;
    auto in = [&](long y, long x) {
        if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return false;
        return labels.data[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] == object_id;
    };
    std::vector<std::uint8_t> b(h * w, 0);
    for (long y = 0; y < static_cast<long>(h); ++y) {
        for (long x = 0; x < static_cast<long>(w); ++x) {
            if (!in(y, x)) continue;
            const bool interior = in(y - 1, x) && in(y + 1, x) && in(y, x - 1) && in(y, x + 1);
            b[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = interior ? 0 : 1;
        }
    }
    return b;
}

double boundary_f(const LabelMap& pred, const LabelMap& gt, std::size_t object_id, double tolerance,
                  std::size_t object_count) {
    check_pair("boundary_f", pred, gt, object_id, object_count);
    if (!(tolerance >= 0.0)) throw std::invalid_argument("boundary_f: tolerance must be >= 0");
    const auto pb = boundary_map(pred, object_id);
    const auto gb = boundary_map(gt, object_id);
    std::size_t np = 0, ng = 0;
    for (auto v : pb) np += v;
    for (auto v : gb) ng += v;
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    const auto gd = dilate(gb, gt.height, gt.width, tolerance);
    const auto pd = dilate(pb, pred.height, pred.width, tolerance);
    std::size_t mp = 0, mg = 0;
    for (std::size_t u = 0; u < pb.size(); ++u) {
        mp += pb[u] && gd[u];
        mg += gb[u] && pd[u];
    }
    const double precision = static_cast<double>(mp) / static_cast<double>(np);
    const double recall = static_cast<double>(mg) / static_cast<double>(ng);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

double default_boundary_tolerance(std::size_t height, std::size_t width) {
    const double diag = std::hypot(static_cast<double>(height), static_cast<double>(width));
    return std::max(1.0, std::round(0.0075 * diag));
}

SequenceScore evaluate_sequence(const PredictedSequence& pred, const VideoSequence& gt, double tolerance) {
    if (pred.labels.size() != gt.length()) {
        throw std::invalid_argument("evaluate: '" + gt.name + "' has " + std::to_string(gt.length()) +
                                    " frames but " + std::to_string(pred.labels.size()) + " predictions");
    }
    for (std::size_t t = 1; t < gt.length(); ++t) {
        if (!gt.masks[t]) throw std::invalid_argument("evaluate: '" + gt.name + "' lacks ground truth for frame " +
                                                      std::to_string(t + 1));
    }
    if (tolerance < 0.0) tolerance = default_boundary_tolerance(gt.height(), gt.width());
    SequenceScore s;
    s.name = gt.name;
    s.scored_frames = gt.length() - 1;
    for (std::size_t id = 1; id <= gt.object_count; ++id) {
        ObjectScore o;
        o.object_id = id;
        for (std::size_t t = 1; t < gt.length(); ++t) {
            o.j += jaccard(pred.labels[t], *gt.masks[t], id, gt.object_count);
            o.f += boundary_f(pred.labels[t], *gt.masks[t], id, tolerance, gt.object_count);
        }
        o.j /= static_cast<double>(s.scored_frames);
        o.f /= static_cast<double>(s.scored_frames);
        s.j += o.j;
        s.f += o.f;
        s.objects.push_back(o);
    }
    s.j /= static_cast<double>(gt.object_count);
    s.f /= static_cast<double>(gt.object_count);
    s.jf = (s.j + s.f) / 2.0;
    s.fps = pred.seconds > 0.0 ? static_cast<double>(gt.length()) / pred.seconds : 0.0;
    return s;
}

EvalReport evaluate(const std::vector<PredictedSequence>& preds, const std::vector<VideoSequence>& gts,
                    double tolerance) {
    std::map<std::string, const PredictedSequence*> by_name;
    for (const auto& p : preds) by_name[p.name] = &p;
    EvalReport r;
    double frames = 0.0, seconds = 0.0;
    for (const auto& gt : gts) {
        auto it = by_name.find(gt.name);
        if (it == by_name.end()) {
            std::cerr << "warning: no prediction for '" << gt.name << "', skipped\n";
            r.skipped.push_back(gt.name);
            continue;
        }
        bool complete = true;
        for (std::size_t t = 1; t < gt.length(); ++t) complete = complete && gt.masks[t].has_value();
        if (!complete) {
            std::cerr << "warning: '" << gt.name << "' lacks ground truth for scored frames, skipped\n";
            r.skipped.push_back(gt.name);
            continue;
        }
        r.sequences.push_back(evaluate_sequence(*it->second, gt, tolerance));
        frames += static_cast<double>(gt.length());
        seconds += it->second->seconds;
    }
    for (const auto& s : r.sequences) {
        r.j += s.j;
        r.f += s.f;
    }
    if (!r.sequences.empty()) {
        r.j /= static_cast<double>(r.sequences.size());
        r.f /= static_cast<double>(r.sequences.size());
    }
    r.jf = (r.j + r.f) / 2.0;
    r.fps = seconds > 0.0 ? frames / seconds : 0.0;
    return r;
}

void write_eval_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "sequence,object,J,F,J&F\n";
    for (const auto& s : report.sequences) {
        for (const auto& o : s.objects) {
            out << s.name << "," << o.object_id << "," << o.j << "," << o.f << "," << (o.j + o.f) / 2.0 << "\n";
        }
        out << s.name << ",mean," << s.j << "," << s.f << "," << s.jf << "\n";
    }
}

void write_eval_json(const EvalReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["J"] = report.j;
    j["F"] = report.f;
    j["J&F"] = report.jf;
    j["fps"] = report.fps;
    j["skipped"] = report.skipped;
    j["sequences"] = nlohmann::json::array();
    for (const auto& s : report.sequences) {
        nlohmann::json js{{"name", s.name}, {"J", s.j},        {"F", s.f},
                          {"J&F", s.jf},    {"fps", s.fps},    {"scored_frames", s.scored_frames}};
        js["objects"] = nlohmann::json::array();
        for (const auto& o : s.objects) js["objects"].push_back({{"id", o.object_id}, {"J", o.j}, {"F", o.f}});
        j["sequences"].push_back(js);
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace cvos
