#pragma once

#include "stainseg/generate.hpp"
#include "stainseg/introspection.hpp"
#include "stainseg/network.hpp"
#include "stainseg/training.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace stainseg::cli {

struct KeyInfo {
    std::string key; // "section.name", or "seed" for the one top-level key
    std::string default_value;
    std::string help;
};

// Settings merged from defaults, an INI file and command-line flags, in that
// order of precedence. Values stay strings until a typed view is requested;
// every typed view validates and throws std::invalid_argument.
class RunConfig {
public:
    RunConfig();

    static const std::vector<KeyInfo>& keys();

    // `key = value` lines under [data], [network], [train], [viz]; `seed` may
    // also appear before the first section. '#' and ';' start comments.
    void load_file(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;

    std::uint64_t seed() const;
    SynthConfig synth() const;
    NetworkConfig network() const;
    TrainConfig train() const;
    VizOptions viz() const;

    std::string get_string(const std::string& key) const { return get(key); }
    std::size_t get_size(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    // Canonical INI text of the current values.
    std::string to_ini() const;

private:
    std::map<std::string, std::string> values_;
};

} // namespace stainseg::cli
