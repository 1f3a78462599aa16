#include "run_config.hpp"

#include "stainseg/stain.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stainseg::cli {

namespace {

std::string fmt(double v)
{
    std::ostringstream s;
    s << v;
    return s.str();
}

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ','))
        if (auto t = trim(item); !t.empty())
            out.push_back(t);
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text)
{
    T v{};
    const auto* end = text.data() + text.size();
    const auto [p, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || p != end || text.empty())
        throw std::invalid_argument(key + ": '" + text + "' is not a valid number");
    return v;
}

} // namespace

const std::vector<KeyInfo>& RunConfig::keys()
{
    static const std::vector<KeyInfo> k = [] {
        const SynthConfig s;
        const NetworkConfig n;
        const TrainConfig t;
        const VizOptions v;
        std::string stains;
        for (const auto& p : s.profiles)
            stains += (stains.empty() ? "" : ",") + p;
        return std::vector<KeyInfo>{
            {"seed", "0", "seed for generation, initialization, shuffling and visualization"},
            {"data.dir", "data", "dataset directory"},
            {"data.slides", std::to_string(s.slides), "number of virtual slides"},
            {"data.stains", stains, "comma-separated stain profiles (built-in names or stain files)"},
            {"data.slide-size", std::to_string(s.slide_size), "slide side after 2x downsampling, pixels"},
            {"data.tile-size", std::to_string(s.tile_size), "tile side, pixels"},
            {"data.stride", std::to_string(s.stride), "tiling stride, pixels"},
            {"data.test-slides", std::to_string(s.test_slides), "slides reserved for the test split"},
            {"data.val-fraction", fmt(s.val_fraction), "share of training tiles moved to validation"},
            {"network.arch", arch_name(n.arch), "unet or cd-unet"},
            {"network.base-width", std::to_string(n.base_width), "filters in the first encoder stage"},
            {"network.depth", std::to_string(n.depth), "pooling steps"},
            {"train.base-lr", fmt(t.base_lr), "learning rate for one worker"},
            {"train.momentum", fmt(t.momentum), "SGD momentum"},
            {"train.workers", std::to_string(t.workers), "simulated synchronous workers"},
            {"train.batch", std::to_string(t.per_worker_batch), "tiles per worker per step"},
            {"train.epochs", std::to_string(t.epochs), "training epochs"},
            {"train.eval-every", std::to_string(t.eval_every), "epochs between validation passes"},
            {"train.class-weights", "", "four comma-separated loss weights; empty for median frequency balancing"},
            {"train.augment", t.augment ? "true" : "false", "apply training augmentation"},
            {"train.freeze-batchnorm", t.freeze_batchnorm ? "true" : "false", "batch norm in eval mode while training"},
            {"train.log-wall-time", t.log_wall_time ? "true" : "false", "record elapsed seconds in metrics.csv"},
            {"train.output", "run", "directory for checkpoints and metrics"},
            {"viz.steps", std::to_string(v.steps), "gradient-ascent iterations"},
            {"viz.step-size", fmt(v.step_size), "ascent step length"},
            {"viz.noise-samples", std::to_string(v.noise_samples), "SmoothGrad samples"},
            {"viz.noise-sigma", fmt(v.noise_sigma), "SmoothGrad noise, fraction of the input range"},
            {"viz.threshold", fmt(v.threshold), "attribution mask cut, fraction of the maximum"},
            {"viz.tile-size", std::to_string(v.tile_size), "canvas side for activation maximization"},
            {"viz.hue-margin", "10", "minimum pairwise hue distance of the filter images, degrees"},
            {"viz.row", "32", "target output row"},
            {"viz.col", "32", "target output column"},
            {"viz.category", "1", "target class: 0 background, 1 tumor, 2 tissue, 3 necrosis"},
            {"viz.output", "viz", "directory for visualization images"},
        };
    }();
    return k;
}

RunConfig::RunConfig()
{
    for (const auto& k : keys())
        values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value)
{
    auto it = values_.find(key);
    if (it == values_.end())
        throw std::invalid_argument("unknown setting '" + key + "'");
    it->second = trim(value);
}

const std::string& RunConfig::get(const std::string& key) const
{
    auto it = values_.find(key);
    if (it == values_.end())
        throw std::invalid_argument("unknown setting '" + key + "'");
    return it->second;
}

void RunConfig::load_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::invalid_argument("cannot open config file " + path.string());
    std::string line, section;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        const auto cut = line.find_first_of("#;");
        line = trim(cut == std::string::npos ? line : line.substr(0, cut));
        if (line.empty())
            continue;
        const std::string where = path.string() + ":" + std::to_string(n) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::invalid_argument(where + "malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "data" && section != "network" && section != "train" && section != "viz")
                throw std::invalid_argument(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(where + "expected 'key = value'");
        const std::string name = trim(line.substr(0, eq));
        const std::string key = section.empty() ? name : section + "." + name;
        if (!values_.count(key))
            throw std::invalid_argument(where + "unknown setting '" + key + "'");
        values_[key] = trim(line.substr(eq + 1));
    }
}

std::size_t RunConfig::get_size(const std::string& key) const
{
    return parse_number<std::size_t>(key, get(key));
}

double RunConfig::get_double(const std::string& key) const
{
    return parse_number<double>(key, get(key));
}

bool RunConfig::get_bool(const std::string& key) const
{
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on")
        return true;
    if (v == "false" || v == "0" || v == "no" || v == "off")
        return false;
    throw std::invalid_argument(key + ": '" + v + "' is not a boolean");
}

std::uint64_t RunConfig::seed() const
{
    return parse_number<std::uint64_t>("seed", get("seed"));
}

SynthConfig RunConfig::synth() const
{
    SynthConfig c;
    c.slides = get_size("data.slides");
    c.profiles = split_list(get("data.stains"));
    c.slide_size = get_size("data.slide-size");
    c.tile_size = get_size("data.tile-size");
    c.stride = get_size("data.stride");
    c.test_slides = get_size("data.test-slides");
    c.val_fraction = get_double("data.val-fraction");
    c.seed = seed();
    c.validate();
    for (const auto& p : c.profiles)
        resolve_profile(p);
    return c;
}

NetworkConfig RunConfig::network() const
{
    NetworkConfig c;
    c.arch = parse_arch(get("network.arch"));
    c.base_width = get_size("network.base-width");
    c.depth = get_size("network.depth");
    c.validate();
    return c;
}

TrainConfig RunConfig::train() const
{
    TrainConfig c;
    c.base_lr = get_double("train.base-lr");
    c.momentum = get_double("train.momentum");
    c.workers = get_size("train.workers");
    c.per_worker_batch = get_size("train.batch");
    c.epochs = get_size("train.epochs");
    c.eval_every = get_size("train.eval-every");
    c.seed = seed();
    c.augment = get_bool("train.augment");
    c.freeze_batchnorm = get_bool("train.freeze-batchnorm");
    c.log_wall_time = get_bool("train.log-wall-time");
    const auto weights = split_list(get("train.class-weights"));
    if (!weights.empty()) {
        if (weights.size() != kNumClasses)
            throw std::invalid_argument("train.class-weights: expected 4 values, got " + std::to_string(weights.size()));
        std::array<double, kNumClasses> w{};
        for (std::size_t i = 0; i < kNumClasses; ++i)
            w[i] = parse_number<double>("train.class-weights", weights[i]);
        c.class_weights = w;
    }
    c.validate();
    return c;
}

VizOptions RunConfig::viz() const
{
    VizOptions v;
    v.steps = get_size("viz.steps");
    v.step_size = get_double("viz.step-size");
    v.noise_samples = get_size("viz.noise-samples");
    v.noise_sigma = get_double("viz.noise-sigma");
    v.threshold = get_double("viz.threshold");
    v.tile_size = get_size("viz.tile-size");
    v.seed = seed();
    v.validate();
    if (get_size("viz.category") >= kNumClasses)
        throw std::invalid_argument("viz.category must lie in [0, 3]");
    if (!(get_double("viz.hue-margin") >= 0.0))
        throw std::invalid_argument("viz.hue-margin must be >= 0");
    get_size("viz.row");
    get_size("viz.col");
    return v;
}

std::string RunConfig::to_ini() const
{
    std::ostringstream out;
    out << "seed = " << get("seed") << "\n";
    std::string section;
    for (const auto& k : keys()) {
        const auto dot = k.key.find('.');
        if (dot == std::string::npos)
            continue;
        const auto s = k.key.substr(0, dot);
        if (s != section) {
            out << "\n[" << s << "]\n";
            section = s;
        }
        out << k.key.substr(dot + 1) << " = " << get(k.key) << "\n";
    }
    return out.str();
}

} // namespace stainseg::cli
