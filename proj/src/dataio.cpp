#include "cvos/dataio.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <stdexcept>

#include "json.hpp"

namespace cvos {

namespace fs = std::filesystem;
using json = nlohmann::json;

bool VideoSequence::has_full_ground_truth() const {
    return !masks.empty() && std::all_of(masks.begin(), masks.end(), [](const auto& m) { return m.has_value(); });
}

void VideoSequence::validate() const {
    const std::string where = "sequence '" + name + "': ";
    if (frames.size() < 2) throw std::invalid_argument(where + "needs at least 2 frames");
    if (masks.size() != frames.size()) throw std::invalid_argument(where + "mask slots do not match frame count");
    if (!masks.front()) throw std::invalid_argument(where + "missing first-frame mask");
    if (object_count == 0 || object_count > 255) throw std::invalid_argument(where + "object count must be 1..255");
    const std::size_t h = height(), w = width();
    for (std::size_t t = 0; t < frames.size(); ++t) {
        const auto& f = frames[t];
        if (f.height != h || f.width != w || f.data.size() != h * w * 3) {
            throw std::invalid_argument(where + "frame " + std::to_string(t) + " dimension mismatch");
        }
        if (!masks[t]) continue;
        const auto& m = *masks[t];
        if (m.height != h || m.width != w || m.data.size() != h * w) {
            throw std::invalid_argument(where + "mask " + std::to_string(t) + " dimension mismatch");
        }
        for (std::uint8_t v : m.data) {
            if (v > object_count) {
                throw std::invalid_argument(where + "mask " + std::to_string(t) + " has object id " +
                                            std::to_string(v) + " > object count " + std::to_string(object_count));
            }
        }
    }
}

template <typename T>
Tensor<T> frame_tensor(const RgbImage& image) {
    const std::size_t plane = image.height * image.width;
    Tensor<T> t(Shape{3, image.height, image.width});
    for (std::size_t u = 0; u < plane; ++u) {
        for (std::size_t c = 0; c < 3; ++c) t[c * plane + u] = static_cast<T>(image.data[u * 3 + c]) / T{255};
    }
    return t;
}

template <typename T>
Tensor<T> object_plane(const LabelMap& labels, std::size_t object_id) {
    if (object_id == 0 || object_id > 255) throw std::invalid_argument("object_plane: object id must be 1..255");
    Tensor<T> t(Shape{labels.height, labels.width});
    for (std::size_t u = 0; u < labels.data.size(); ++u) t[u] = labels.data[u] == object_id ? T{1} : T{0};
    return t;
}

template <typename T>
Tensor<T> object_planes(const LabelMap& labels, std::size_t object_count) {
    const std::size_t plane = labels.height * labels.width;
    Tensor<T> t(Shape{object_count, labels.height, labels.width});
    for (std::size_t u = 0; u < plane; ++u) {
        const std::size_t id = labels.data[u];
        if (id >= 1 && id <= object_count) t[(id - 1) * plane + u] = T{1};
    }
    return t;
}

LabelMap to_label_map(const std::vector<std::uint8_t>& labels, std::size_t height, std::size_t width) {
    if (labels.size() != height * width) throw std::invalid_argument("to_label_map: size mismatch");
    LabelMap m(height, width);
    m.data = labels;
    return m;
}

std::string frame_file_stem(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05zu", index);
    return buf;
}

namespace {

// index -> path for files named NNNNN.<ext>
std::map<std::size_t, fs::path> numbered_files(const fs::path& dir, const std::regex& pattern) {
    std::map<std::size_t, fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string fname = entry.path().filename().string();
        std::smatch m;
        if (!std::regex_match(fname, m, pattern)) continue;
        const std::size_t idx = std::stoul(m[1].str());
        if (!out.emplace(idx, entry.path()).second) {
            throw std::runtime_error(dir.string() + ": duplicate files for index " + frame_file_stem(idx));
        }
    }
    return out;
}

}  // namespace

std::uint64_t sequence_checksum(const VideoSequence& seq) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const std::vector<std::uint8_t>& bytes) {
        for (std::uint8_t b : bytes) {
            h ^= b;
            h *= 1099511628211ULL;
        }
    };
    for (const auto& f : seq.frames) mix(f.data);
    for (const auto& m : seq.masks) {
        if (m) mix(m->data);
    }
    return h;
}

VideoSequence load_sequence(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("sequence directory not found: " + dir.string());
    VideoSequence seq;
    seq.name = dir.filename().string();
    if (seq.name.empty()) seq.name = dir.parent_path().filename().string();

    const auto frame_files = numbered_files(dir / "frames", std::regex(R"((\d{5})\.(png|ppm))"));
    if (frame_files.empty()) throw std::runtime_error(dir.string() + ": no frames in frames/");
    std::size_t expect = 0;
    for (const auto& [idx, path] : frame_files) {
        if (idx != expect) {
            throw std::runtime_error(dir.string() + ": non-contiguous frame numbering (expected " +
                                     frame_file_stem(expect) + ", found " + frame_file_stem(idx) + ")");
        }
        seq.frames.push_back(read_rgb(path));
        ++expect;
    }
    const auto mask_files = numbered_files(dir / "masks", std::regex(R"((\d{5})\.png)"));
    seq.masks.assign(seq.frames.size(), std::nullopt);
    for (const auto& [idx, path] : mask_files) {
        if (idx >= seq.frames.size()) {
            throw std::runtime_error(dir.string() + ": mask " + path.filename().string() + " has no matching frame");
        }
        seq.masks[idx] = read_label_png(path);
    }
    if (!seq.masks.front()) throw std::runtime_error(dir.string() + ": missing first-frame mask masks/00000.png");
    const auto& first = seq.masks.front()->data;
    seq.object_count = first.empty() ? 0 : *std::max_element(first.begin(), first.end());
    if (seq.object_count == 0) throw std::runtime_error(dir.string() + ": first-frame mask contains no objects");
    try {
        seq.validate();
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(e.what());
    }
    return seq;
}

void save_sequence(const VideoSequence& seq, const fs::path& dir, const std::string& frame_ext) {
    seq.validate();
    if (frame_ext != ".png" && frame_ext != ".ppm") throw std::invalid_argument("frame extension must be .png or .ppm");
    fs::create_directories(dir / "frames");
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        write_rgb(dir / "frames" / (frame_file_stem(t) + frame_ext), seq.frames[t]);
    }
    save_label_maps(seq.masks, dir);
}

void save_label_maps(const std::vector<std::optional<LabelMap>>& labels, const fs::path& dir) {
    fs::create_directories(dir / "masks");
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (labels[t]) write_label_png(dir / "masks" / (frame_file_stem(t) + ".png"), *labels[t]);
    }
}

void save_suite(const std::vector<SuiteEntry>& suite, const SuiteSpec& spec, const fs::path& root) {
    fs::create_directories(root);
    json manifest;
    manifest["format"] = "cyclevos-suite";
    manifest["version"] = 1;
    manifest["seed"] = spec.seed;
    manifest["height"] = spec.height;
    manifest["width"] = spec.width;
    manifest["length"] = spec.length;
    manifest["distractors"] = spec.distractors;
    manifest["allow_occlusion"] = spec.allow_occlusion;
    json splits = json::object();
    json seqs = json::array();
    for (const auto& e : suite) {
        save_sequence(e.sequence, root / e.sequence.name);
        char sum[24];
        std::snprintf(sum, sizeof(sum), "%016llx", static_cast<unsigned long long>(sequence_checksum(e.sequence)));
        seqs.push_back({{"name", e.sequence.name},
                        {"split", e.split},
                        {"objects", e.sequence.object_count},
                        {"frames", e.sequence.length()},
                        {"checksum", sum}});
        splits[e.split].push_back(e.sequence.name);
    }
    manifest["sequences"] = seqs;
    manifest["splits"] = splits;
    std::ofstream out(root / "suite.json");
    if (!out) throw std::runtime_error("cannot write " + (root / "suite.json").string());
    out << manifest.dump(2) << "\n";
}

std::vector<SuiteEntry> load_suite(const fs::path& root, const std::string& split) {
    std::ifstream in(root / "suite.json");
    if (!in) throw std::runtime_error("suite manifest not found: " + (root / "suite.json").string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error((root / "suite.json").string() + ": " + e.what());
    }
    std::vector<SuiteEntry> out;
    for (const auto& s : manifest.at("sequences")) {
        const std::string seq_split = s.at("split").get<std::string>();
        if (!split.empty() && seq_split != split) continue;
        out.push_back({seq_split, load_sequence(root / s.at("name").get<std::string>())});
    }
    if (!split.empty() && out.empty()) throw std::runtime_error("suite has no sequences in split '" + split + "'");
    return out;
}

#define CVOS_INSTANTIATE_DATAIO(T)                                           \
    template Tensor<T> frame_tensor<T>(const RgbImage&);                    \
    template Tensor<T> object_plane<T>(const LabelMap&, std::size_t);       \
    template Tensor<T> object_planes<T>(const LabelMap&, std::size_t);

CVOS_INSTANTIATE_DATAIO(float)
CVOS_INSTANTIATE_DATAIO(double)

#undef CVOS_INSTANTIATE_DATAIO

}  // namespace cvos
