// Flat run configuration: `key = value` lines, command-line overrides and a
// JSON snapshot. Every key belongs to a fixed schema.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cvos/cycle_erf.hpp"
#include "cvos/trainer.hpp"
#include "json.hpp"

namespace cvos {

enum class ValueKind { Bool, Int, Float, String, Path, Strategy, CycleMode, Degrade };

struct ConfigKey {
    std::string name;
    ValueKind kind;
    std::string default_value;
    std::string help;
};

const std::vector<ConfigKey>& config_schema();
const ConfigKey* find_config_key(const std::string& name);

bool parse_bool(const std::string& text);

class RunConfig {
public:
    RunConfig();

    // Names may use '_' or '-'. Throws on unknown keys or malformed values.
    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;
    bool is_default(const std::string& key) const;

    bool get_bool(const std::string& key) const;
    long long get_int(const std::string& key) const;
    std::size_t get_size(const std::string& key) const;
    double get_float(const std::string& key) const;
    std::filesystem::path get_path(const std::string& key) const;
    std::vector<std::string> get_list(const std::string& key) const;

    // `key = value` lines; '#' starts a comment. A .json file holding a
    // "config" object (as written by to_json) is also accepted.
    void load_file(const std::filesystem::path& path);

    nlohmann::json to_json() const;

    ModelConfig model(std::size_t height, std::size_t width) const;
    TrainConfig train() const;
    Strategy strategy() const;
    CorrectionConfig correction() const;
    ErfConfig erf() const;
    SuiteSpec suite() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace cvos
