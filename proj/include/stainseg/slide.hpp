#pragma once

#include "stainseg/image.hpp"
#include "stainseg/stain.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace stainseg {

// Placement and texture settings for one annotated class.
struct ClassLayout {
    std::size_t min_regions = 1;
    std::size_t max_regions = 2;
    double min_radius = 40.0; // region blob radius, pixels
    double max_radius = 80.0;

    double nucleus_spacing = 12.0; // mean distance between nucleus centers
    bool regular_spacing = false;  // jittered grid instead of uniform scatter
    double min_nucleus_radius = 3.0;
    double max_nucleus_radius = 5.0;
    double max_eccentricity = 0.3;
    double distortion = 0.05; // relative amplitude of the outline perturbation
    double nucleus_concentration = 1.0;
    double stroma_concentration = 0.3;
};

struct LayoutConfig {
    std::size_t height = 384;
    std::size_t width = 384;
    ClassLayout tumor;
    ClassLayout tissue;
    ClassLayout necrosis;
    double exclude_probability = 0.25; // chance of one pen-marker streak per slide
    double positive_fraction = 0.3;    // nuclei carrying the third (chromogen) stain
    double stain_jitter = 0.2;         // per-slide multiplicative stain strength spread
    std::size_t placement_retries = 200;

    // Tumor: dense, large, distorted nuclei. Tissue: small regular nuclei on a
    // jittered lattice. Necrosis: sparse small fragments over pale stroma.
    static LayoutConfig defaults(std::size_t height = 384, std::size_t width = 384);
    static LayoutConfig no_regions(std::size_t height, std::size_t width);

    void validate() const;
    const ClassLayout& for_class(std::size_t cls) const;
};

struct Nucleus {
    double cy = 0, cx = 0;
    double semi_major = 0, semi_minor = 0;
    double angle = 0;
    std::uint8_t cls = 0;

    double area() const;
};

struct VirtualSlide {
    Image image; // RGB, [3, H, W]
    LabelMap labels;
    StainProfile profile;
    std::uint64_t seed = 0;
    std::vector<Image> concentrations; // one map per profile stain; [0] is the nuclear counterstain
    Image marker;                      // pen-marker concentration
    std::vector<Nucleus> nuclei;
    std::vector<std::string> warnings;
};

// Deterministic in (profile, layout, seed).
VirtualSlide synth_slide(const StainProfile& profile, const LayoutConfig& layout, std::uint64_t seed);

} // namespace stainseg
