#include "stainseg/stain.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace stainseg {

StainVector::StainVector(std::string n, std::array<double, 3> eps) : name(std::move(n))
{
    double norm = 0.0;
    for (double v : eps) {
        if (!(v >= 0.0) || !std::isfinite(v))
            throw std::invalid_argument("stain '" + name + "': absorption coefficients must be finite and >= 0");
        norm += v * v;
    }
    if (norm <= 0.0)
        throw std::invalid_argument("stain '" + name + "': at least one absorption coefficient must be positive");
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < 3; ++k)
        epsilon[k] = eps[k] / norm;
}

StainProfile::StainProfile(std::string name, std::vector<StainVector> s)
    : display_name(std::move(name)), stains(std::move(s))
{
    if (stains.empty() || stains.size() > 3)
        throw std::invalid_argument("profile '" + display_name + "' must have 1 to 3 stains");
    std::set<std::string> seen;
    for (const auto& st : stains)
        if (!seen.insert(st.name).second)
            throw std::invalid_argument("profile '" + display_name + "' lists stain '" + st.name + "' twice");
}

double transmittance(double od)
{
    if (!(od >= 0.0))
        throw std::invalid_argument("optical density must be >= 0, got " + std::to_string(od));
    return std::pow(10.0, -od);
}

Image render(std::span<const Image> concentrations, const StainProfile& profile, double i0)
{
    if (concentrations.size() != profile.size())
        throw std::invalid_argument("render: " + std::to_string(concentrations.size()) +
                                    " concentration maps for profile '" + profile.display_name + "' with " +
                                    std::to_string(profile.size()) + " stains");
    const auto h = concentrations.front().height;
    const auto w = concentrations.front().width;
    for (const auto& c : concentrations)
        if (c.channels != 1 || c.height != h || c.width != w)
            throw std::invalid_argument("render: concentration maps must be single-channel and equally sized");

    Image out(3, h, w);
    for (std::size_t i = 0; i < h * w; ++i) {
        std::array<double, 3> od{};
        for (std::size_t s = 0; s < profile.size(); ++s) {
            const double conc = concentrations[s].data[i];
            if (!(conc >= 0.0))
                throw std::invalid_argument("render: concentrations must be >= 0");
            for (std::size_t k = 0; k < 3; ++k)
                od[k] += profile.stains[s].epsilon[k] * conc;
        }
        for (std::size_t k = 0; k < 3; ++k)
            out.data[k * h * w + i] = i0 * transmittance(od[k]);
    }
    return out;
}

std::vector<StainVector> read_stain_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot read stain file " + path.string());
    std::vector<StainVector> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        std::istringstream ls(line);
        std::string name;
        if (!(ls >> name))
            continue;
        std::array<double, 3> eps{};
        std::string extra;
        if (!(ls >> eps[0] >> eps[1] >> eps[2]) || (ls >> extra))
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 'name r g b'");
        out.emplace_back(name, eps);
    }
    return out;
}

void write_stain_file(const std::filesystem::path& path, std::span<const StainVector> stains)
{
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    for (const auto& s : stains)
        out << s.name << ' ' << s.epsilon[0] << ' ' << s.epsilon[1] << ' ' << s.epsilon[2] << '\n';
}

StainProfile load_profile(const std::filesystem::path& path)
{
    return StainProfile(path.stem().string(), read_stain_file(path));
}

const std::vector<StainVector>& builtin_stains()
{
    // Keep in sync with data/stains.txt.
    static const std::vector<StainVector> stains{
        {"hematoxylin", {0.650, 0.704, 0.286}}, // blue
        {"eosin", {0.072, 0.990, 0.105}},       // pink
        {"dab", {0.268, 0.570, 0.776}},         // brown
        {"fast_red", {0.214, 0.851, 0.478}},    // red
        {"purple", {0.450, 0.880, 0.160}},
        {"yellow", {0.100, 0.250, 0.960}},
        {"marker", {0.850, 0.250, 0.470}}, // green pen
    };
    return stains;
}

const StainVector& builtin_stain(const std::string& name)
{
    for (const auto& s : builtin_stains())
        if (s.name == name)
            return s;
    throw std::invalid_argument("unknown stain '" + name + "'");
}

const StainVector& marker_stain()
{
    return builtin_stain("marker");
}

std::vector<std::string> builtin_profile_names()
{
    return {"he", "ihc-brown", "ihc-brown-red", "ihc-purple-yellow"};
}

StainProfile builtin_profile(const std::string& name)
{
    const auto& h = builtin_stain("hematoxylin");
    if (name == "he")
        return {name, {h, builtin_stain("eosin")}};
    if (name == "ihc-brown")
        return {name, {h, builtin_stain("dab")}};
    if (name == "ihc-brown-red")
        return {name, {h, builtin_stain("dab"), builtin_stain("fast_red")}};
    if (name == "ihc-purple-yellow")
        return {name, {h, builtin_stain("yellow"), builtin_stain("purple")}};
    throw std::invalid_argument("unknown stain profile '" + name + "'");
}

StainProfile resolve_profile(const std::string& name_or_path)
{
    for (const auto& n : builtin_profile_names())
        if (n == name_or_path)
            return builtin_profile(n);
    if (std::filesystem::exists(name_or_path))
        return load_profile(name_or_path);
    throw std::invalid_argument("'" + name_or_path + "' is neither a built-in stain profile nor a readable file");
}

} // namespace stainseg
