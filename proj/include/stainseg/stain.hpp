#pragma once

#include "stainseg/image.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace stainseg {

// Absorption coefficients of one stain per R, G, B channel, normalized to
// unit length. Specimen thickness is folded into the concentration, so an
// optical density is simply epsilon[k] * C.
struct StainVector {
    std::string name;
    std::array<double, 3> epsilon{};

    StainVector() = default;
    StainVector(std::string n, std::array<double, 3> eps);
};

struct StainProfile {
    std::string display_name;
    std::vector<StainVector> stains;

    StainProfile() = default;
    StainProfile(std::string name, std::vector<StainVector> s);

    std::size_t size() const { return stains.size(); }
};

// It / I0 = 10^-od.
double transmittance(double od);

// Beer-Lambert rendering: channel k = I0 * 10^-(sum_s eps_s[k] * C_s).
// One single-channel concentration map per profile stain, all the same size.
Image render(std::span<const Image> concentrations, const StainProfile& profile, double i0 = 1.0);

// Stain file: one stain per line, "name r g b"; blank lines and '#' comments skipped.
std::vector<StainVector> read_stain_file(const std::filesystem::path& path);
void write_stain_file(const std::filesystem::path& path, std::span<const StainVector> stains);
StainProfile load_profile(const std::filesystem::path& path);

// Default vectors for the six chromogen colors plus the pen-marker color used
// for exclude artifacts. They are rendering configuration, not measured data.
const std::vector<StainVector>& builtin_stains();
const StainVector& builtin_stain(const std::string& name);
const StainVector& marker_stain();

// Built-in profiles: "he", "ihc-brown", "ihc-brown-red", "ihc-purple-yellow".
// The first stain of each is the nuclear counterstain.
std::vector<std::string> builtin_profile_names();
StainProfile builtin_profile(const std::string& name);

// Accepts a built-in profile name or a path to a stain file.
StainProfile resolve_profile(const std::string& name_or_path);

} // namespace stainseg
