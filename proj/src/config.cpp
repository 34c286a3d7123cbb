#include "cvos/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cvos {

namespace {

std::string normalize(std::string key) {
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

long long parse_int(const std::string& key, const std::string& text) {
    long long v = 0;
    const auto* end = text.data() + text.size();
    const auto [p, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || p != end) throw std::invalid_argument(key + ": expected an integer, got '" + text + "'");
    return v;
}

double parse_float(const std::string& key, const std::string& text) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != text.size() || !std::isfinite(v)) {
        throw std::invalid_argument(key + ": expected a number, got '" + text + "'");
    }
    return v;
}

void check_value(const ConfigKey& k, const std::string& v) {
    switch (k.kind) {
        case ValueKind::Bool:
            try {
                parse_bool(v);
            } catch (const std::invalid_argument&) {
                throw std::invalid_argument(k.name + ": expected a boolean, got '" + v + "'");
            }
            break;
        case ValueKind::Int: parse_int(k.name, v); break;
        case ValueKind::Float: parse_float(k.name, v); break;
        case ValueKind::Strategy: parse_strategy(v); break;
        case ValueKind::CycleMode: parse_cycle_mode(v); break;
        case ValueKind::Degrade: parse_degrade(v); break;
        case ValueKind::String:
        case ValueKind::Path: break;
    }
}

}  // namespace

bool parse_bool(const std::string& text) {
    const auto s = lower(trim(text));
    if (s == "true" || s == "on" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "off" || s == "no" || s == "0") return false;
    throw std::invalid_argument("expected a boolean, got '" + text + "'");
}

const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"seed", ValueKind::Int, "0", "random seed (suite generation, weight init, data order)"},
        {"suite", ValueKind::Path, "", "benchmark suite directory"},
        {"split", ValueKind::String, "", "suite split (train, val, eval)"},
        {"out", ValueKind::Path, "", "output directory"},
        {"checkpoint", ValueKind::Path, "", "model checkpoint"},
        {"pred", ValueKind::Path, "", "predictions directory (from infer)"},
        {"train-count", ValueKind::Int, "20", "training sequences"},
        {"val-count", ValueKind::Int, "5", "validation sequences"},
        {"eval-count", ValueKind::Int, "5", "evaluation sequences"},
        {"height", ValueKind::Int, "64", "frame height"},
        {"width", ValueKind::Int, "64", "frame width"},
        {"length", ValueKind::Int, "16", "frames per sequence"},
        {"min-targets", ValueKind::Int, "1", "fewest target objects per sequence"},
        {"max-targets", ValueKind::Int, "2", "most target objects per sequence"},
        {"distractors", ValueKind::Int, "1", "look-alike distractors per sequence"},
        {"occlusion", ValueKind::Bool, "false", "allow targets to overlap"},
        {"features", ValueKind::Int, "16", "encoder feature channels"},
        {"key-channels", ValueKind::Int, "8", "attention key channels"},
        {"value-channels", ValueKind::Int, "16", "attention value channels"},
        {"epochs", ValueKind::Int, "200", "training epochs"},
        {"batch-size", ValueKind::Int, "2", "clips per optimizer step"},
        {"lr", ValueKind::Float, "0.001", "Adam learning rate"},
        {"gamma", ValueKind::Float, "1", "soft IoU weight in the segmentation loss"},
        {"cycle-mode", ValueKind::CycleMode, "simple", "cyclic reference set: simple or full-history"},
        {"detach-cycle", ValueKind::Bool, "false", "stop gradients through predictions in the cyclic set"},
        {"cycle-weight", ValueKind::Float, "1", "weight of the cyclic loss term (0 = baseline)"},
        {"augment", ValueKind::Bool, "false", "random flips and time reversal of training clips"},
        {"curriculum-base", ValueKind::Int, "5", "initial maximum frame interval"},
        {"curriculum-step", ValueKind::Int, "5", "interval growth per curriculum period"},
        {"curriculum-period", ValueKind::Int, "20", "epochs per curriculum period"},
        {"strategy", ValueKind::Strategy, "mem", "reference set: first, prev, first+prev or mem"},
        {"mem-period", ValueKind::Int, "5", "MEM appends every this many frames"},
        {"correction", ValueKind::Bool, "false", "enable gradient correction"},
        {"alpha", ValueKind::Float, "2", "correction rate"},
        {"iters-n", ValueKind::Int, "10", "correction iterations"},
        {"period-k", ValueKind::Int, "5", "correct once every this many frames"},
        {"clamp", ValueKind::Bool, "true", "clamp corrected masks to [0,1]"},
        {"soft-masks", ValueKind::Bool, "false", "also write per-object soft masks"},
        {"degrade", ValueKind::Degrade, "none", "first-mask degradation: none, bbox or baseline"},
        {"degrade-checkpoint", ValueKind::Path, "", "alternate model for baseline degradation"},
        {"erf-m", ValueKind::Int, "50", "cycle-ERF iterations"},
        {"erf-alpha", ValueKind::Float, "2", "cycle-ERF update rate"},
        {"erf-target", ValueKind::Int, "1", "cycle-ERF target frame (1-based)"},
        {"erf-reference", ValueKind::Int, "0", "cycle-ERF reference frame (1-based, 0 = middle)"},
        {"seeds", ValueKind::String, "1,2,3", "ablation training seeds"},
        {"strategies", ValueKind::String, "first,prev,first+prev,mem", "ablation strategies"},
        {"degradations", ValueKind::String, "none,bbox", "ablation degradations"},
        {"reuse", ValueKind::Bool, "true", "ablation reuses existing checkpoints"},
    };
    return schema;
}

const ConfigKey* find_config_key(const std::string& name) {
    const auto key = normalize(name);
    for (const auto& k : config_schema()) {
        if (k.name == key) return &k;
    }
    return nullptr;
}

RunConfig::RunConfig() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto name = trim(key);
    const auto* k = find_config_key(name);
    if (!k) throw std::invalid_argument("unknown config key '" + name + "'");
    const auto v = trim(value);
    check_value(*k, v);
    values_[k->name] = v;
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(normalize(key));
    if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    return it->second;
}

bool RunConfig::is_default(const std::string& key) const { return get(key) == find_config_key(key)->default_value; }

bool RunConfig::get_bool(const std::string& key) const { return parse_bool(get(key)); }

long long RunConfig::get_int(const std::string& key) const { return parse_int(key, get(key)); }

std::size_t RunConfig::get_size(const std::string& key) const {
    const long long v = get_int(key);
    if (v < 0) throw std::invalid_argument(key + ": must be >= 0");
    return static_cast<std::size_t>(v);
}

double RunConfig::get_float(const std::string& key) const { return parse_float(key, get(key)); }

std::filesystem::path RunConfig::get_path(const std::string& key) const { return get(key); }

std::vector<std::string> RunConfig::get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    if (path.extension() == ".json") {
        const auto j = nlohmann::json::parse(in);
        const auto& cfg = j.contains("config") ? j.at("config") : j;
        for (const auto& [k, v] : cfg.items()) set(k, v.is_string() ? v.get<std::string>() : v.dump());
        return;
    }
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(path.string() + ":" + std::to_string(number) + ": expected key = value");
        }
        try {
            set(line.substr(0, eq), line.substr(eq + 1));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& k : config_schema()) j[k.name] = values_.at(k.name);
    return j;
}

ModelConfig RunConfig::model(std::size_t height, std::size_t width) const {
    ModelConfig m;
    m.height = height;
    m.width = width;
    m.feature_channels = get_size("features");
    m.key_channels = get_size("key-channels");
    m.value_channels = get_size("value-channels");
    m.validate();
    return m;
}

TrainConfig RunConfig::train() const {
    TrainConfig c;
    c.epochs = get_size("epochs");
    c.batch_size = get_size("batch-size");
    c.learning_rate = get_float("lr");
    c.gamma = get_float("gamma");
    c.seed = static_cast<std::uint64_t>(get_int("seed"));
    c.curriculum_base = get_size("curriculum-base");
    c.curriculum_step = get_size("curriculum-step");
    c.curriculum_period = get_size("curriculum-period");
    c.cycle_mode = parse_cycle_mode(get("cycle-mode"));
    c.detach_cycle = get_bool("detach-cycle");
    c.cycle_weight = get_float("cycle-weight");
    c.augment = get_bool("augment");
    c.validate();
    return c;
}

Strategy RunConfig::strategy() const {
    Strategy s;
    s.kind = parse_strategy(get("strategy"));
    s.mem_period = get_size("mem-period");
    s.validate();
    return s;
}

CorrectionConfig RunConfig::correction() const {
    CorrectionConfig c;
    c.enabled = get_bool("correction");
    c.alpha = get_float("alpha");
    c.iterations = get_size("iters-n");
    c.period = get_size("period-k");
    c.clamp = get_bool("clamp");
    c.validate();
    return c;
}

ErfConfig RunConfig::erf() const {
    ErfConfig c;
    c.iterations = get_size("erf-m");
    c.alpha = get_float("erf-alpha");
    c.validate();
    return c;
}

SuiteSpec RunConfig::suite() const {
    SuiteSpec s;
    s.train = get_size("train-count");
    s.val = get_size("val-count");
    s.eval = get_size("eval-count");
    s.height = get_size("height");
    s.width = get_size("width");
    s.length = get_size("length");
    s.min_targets = get_size("min-targets");
    s.max_targets = get_size("max-targets");
    s.distractors = get_size("distractors");
    s.allow_occlusion = get_bool("occlusion");
    s.seed = static_cast<std::uint64_t>(get_int("seed"));
    return s;
}

}  // namespace cvos
