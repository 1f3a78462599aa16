#pragma once

#include "stainseg/dataset.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace stainseg {

// Synthetic multistain dataset: slides are rendered at twice slide_size,
// downsampled, and tiled. Slide i uses profiles[i % profiles.size()] and seed
// mix(seed, i). The last test_slides slides form the test split; the rest are
// split into train/val by whole slides.
struct SynthConfig {
    std::size_t slides = 6;
    std::vector<std::string> profiles{"he", "ihc-brown-red", "ihc-purple-yellow"};
    std::size_t slide_size = 192;
    std::size_t tile_size = 64;
    std::size_t stride = 32;
    std::size_t test_slides = 3;
    double val_fraction = 0.10;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SynthOutput {
    Dataset dataset;
    std::vector<std::string> warnings; // prefixed with the slide id
};

SynthOutput generate_dataset(const SynthConfig& config);

} // namespace stainseg
