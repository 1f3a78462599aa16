#pragma once

#include "stainseg/dataset.hpp"

#include <cstdint>

namespace stainseg {

// Every range is a symmetric amplitude around the identity transform; zero
// disables that transform.
struct AugmentationConfig {
    double hue_degrees = 0.0;        // hue rotation in [-a, a]
    double brightness = 0.0;         // multiplicative factor in [1-a, 1+a]
    double scale = 0.0;              // zoom factor in [1-a, 1+a]
    double intensity_noise = 0.0;    // per-pixel uniform noise in [-a, a], same for all channels
    double occlusion_probability = 0.0;
    std::size_t occlusion_min = 4;   // box side range, pixels
    std::size_t occlusion_max = 12;
    double hflip_probability = 0.0;
    double vflip_probability = 0.0;
    double rotation_degrees = 0.0;
    double translation = 0.0;        // fraction of the tile size
    double shear = 0.0;

    static AugmentationConfig identity() { return {}; }
    static AugmentationConfig defaults();
    void validate() const;
};

// Geometric transforms move image (bilinear) and labels (nearest) together;
// pixels pulled from outside the tile get the ignore label. Photometric
// transforms leave labels alone. Occluded boxes become mid-gray / ignore.
TileSample augment(const TileSample& sample, const AugmentationConfig& config, std::uint64_t seed);

} // namespace stainseg
