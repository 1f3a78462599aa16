#include "stainseg/generate.hpp"

#include "stainseg/random.hpp"
#include "stainseg/slide.hpp"

#include <cstdio>
#include <stdexcept>

namespace stainseg {

void SynthConfig::validate() const
{
    if (profiles.empty())
        throw std::invalid_argument("synth: at least one stain profile is required");
    if (test_slides >= slides || slides - test_slides < 2)
        throw std::invalid_argument("synth: need at least 2 non-test slides (slides " + std::to_string(slides) +
                                    ", test_slides " + std::to_string(test_slides) + ")");
    if (slide_size < 1 || tile_size < 1 || stride < 1 || stride > tile_size || tile_size > slide_size)
        throw std::invalid_argument("synth: need 1 <= stride <= tile_size <= slide_size");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw std::invalid_argument("synth: val_fraction must lie in (0, 1)");
}

SynthOutput generate_dataset(const SynthConfig& config)
{
    config.validate();
    std::vector<StainProfile> profiles;
    for (const auto& p : config.profiles)
        profiles.push_back(resolve_profile(p));
    const LayoutConfig layout = LayoutConfig::defaults(2 * config.slide_size, 2 * config.slide_size);

    SynthOutput out;
    for (std::size_t i = 0; i < config.slides; ++i) {
        const auto p = i % profiles.size();
        char id[32];
        std::snprintf(id, sizeof id, "slide-%03zu", i);
        const VirtualSlide slide = synth_slide(profiles[p], layout, Rng::mix(config.seed, i));
        for (const auto& w : slide.warnings)
            out.warnings.push_back(std::string(id) + ": " + w);
        const Downsampled half = downsample2x(slide.image, slide.labels);
        const Split split = i + config.test_slides >= config.slides ? Split::test : Split::train;
        for (auto& t : tile_slide(half.image, half.labels, config.tile_size, config.stride, id, config.profiles[p]))
            out.dataset.add(std::move(t), split);
    }
    out.dataset.manifest = split_train_val(out.dataset.manifest, config.val_fraction, config.seed);
    return out;
}

} // namespace stainseg
