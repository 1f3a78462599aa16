#include "stainseg/generate.hpp"
#include "stainseg/inference.hpp"
#include "stainseg/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace stainseg;

namespace {

SynthConfig small_synth()
{
    SynthConfig c;
    c.slides = 5;
    c.profiles = {"he", "ihc-brown"};
    c.slide_size = 96;
    c.tile_size = 32;
    c.stride = 16;
    c.test_slides = 2;
    c.seed = 4;
    return c;
}

Model tiny_model(std::uint64_t seed = 2)
{
    NetworkConfig c;
    c.arch = Arch::cd_unet;
    c.depth = 1;
    c.base_width = 2;
    return Model::build(c, seed);
}

Image random_rgb(std::size_t h, std::size_t w, std::uint64_t seed)
{
    Rng rng(seed);
    Image img(3, h, w);
    for (auto& v : img.data)
        v = rng.uniform();
    return img;
}

} // namespace

TEST(Generate, SplitsAndCounts)
{
    const auto out = generate_dataset(small_synth());
    const auto& d = out.dataset;
    // (96 - 32) / 16 + 1 = 5 offsets per axis.
    ASSERT_EQ(d.tiles.size(), 5u * 25u);
    EXPECT_EQ(d.manifest.count(Split::test), 2u * 25u);
    EXPECT_EQ(d.manifest.count(Split::val), 25u);
    EXPECT_EQ(d.manifest.count(Split::train), 2u * 25u);
    EXPECT_NO_THROW(d.manifest.validate());

    std::map<std::string, std::string> stain_of;
    for (std::size_t i = 0; i < d.tiles.size(); ++i) {
        const auto& r = d.manifest.records[i];
        EXPECT_EQ(r.slide_id, d.tiles[i].source_slide);
        if (r.slide_id == "slide-003" || r.slide_id == "slide-004")
            EXPECT_EQ(r.split, Split::test);
        stain_of[r.slide_id] = r.stain;
        EXPECT_EQ(d.tiles[i].image.height, 32u);
    }
    EXPECT_EQ(stain_of["slide-000"], "he");
    EXPECT_EQ(stain_of["slide-001"], "ihc-brown");
    EXPECT_EQ(stain_of["slide-004"], "he");
}

TEST(Generate, DeterministicPerSeed)
{
    const auto a = generate_dataset(small_synth());
    const auto b = generate_dataset(small_synth());
    ASSERT_EQ(a.dataset.tiles.size(), b.dataset.tiles.size());
    for (std::size_t i = 0; i < a.dataset.tiles.size(); ++i) {
        EXPECT_EQ(a.dataset.tiles[i].image, b.dataset.tiles[i].image);
        EXPECT_EQ(a.dataset.tiles[i].labels, b.dataset.tiles[i].labels);
        EXPECT_EQ(a.dataset.manifest.records[i].split, b.dataset.manifest.records[i].split);
    }
    auto other = small_synth();
    other.seed = 5;
    EXPECT_NE(generate_dataset(other).dataset.tiles[0].image, a.dataset.tiles[0].image);
}

TEST(Generate, RejectsBadConfig)
{
    auto c = small_synth();
    c.test_slides = 4;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = small_synth();
    c.stride = 40;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = small_synth();
    c.profiles.clear();
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Infer, OutputMatchesInputDimsAndSumsToOne)
{
    Model m = tiny_model();
    const Image img = random_rgb(38, 53, 1); // neither extent is on the stride grid
    const Image probs = infer_probabilities(m, img, 16, 10, 3);
    ASSERT_EQ(probs.channels, 4u);
    ASSERT_EQ(probs.height, 38u);
    ASSERT_EQ(probs.width, 53u);
    for (std::size_t i = 0; i < probs.plane(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k)
            s += probs.data[k * probs.plane() + i];
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    const LabelMap labels = argmax_labels(probs);
    EXPECT_EQ(labels.height, 38u);
    EXPECT_EQ(labels.width, 53u);
}

TEST(Infer, OverlapIsMeanOfContributingTiles)
{
    Model m = tiny_model(5);
    const Image img = random_rgb(24, 24, 2);
    const Image probs = infer_probabilities(m, img, 16, 8);
    // Oracle: offsets {0, 8} per axis; pixel (12, 12) lies in all four tiles.
    auto tile_probs = [&](std::size_t r0, std::size_t c0) {
        Tensor t({1, 3, 16, 16});
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 16; ++y)
                for (std::size_t x = 0; x < 16; ++x)
                    t.data()[(c * 16 + y) * 16 + x] = img.at(2 - c, r0 + y, c0 + x);
        return m.forward(nullptr, t, ops::Mode::eval);
    };
    for (std::size_t k = 0; k < 4; ++k) {
        double expect = 0.0;
        for (std::size_t r0 : {0, 8})
            for (std::size_t c0 : {0, 8})
                expect += tile_probs(r0, c0).data()[(k * 16 + 12 - r0) * 16 + 12 - c0];
        EXPECT_NEAR(probs.at(k, 12, 12), expect / 4.0, 1e-12);
        // Pixel (2, 2) is covered by the first tile only.
        EXPECT_NEAR(probs.at(k, 2, 2), tile_probs(0, 0).data()[(k * 16 + 2) * 16 + 2], 1e-12);
    }
}

TEST(Infer, RejectsSmallImages)
{
    Model m = tiny_model();
    EXPECT_THROW(infer_probabilities(m, random_rgb(12, 40, 3), 16, 8), std::invalid_argument);
    EXPECT_THROW(infer_probabilities(m, random_rgb(16, 16, 3), 16, 0), std::invalid_argument);
}

TEST(Infer, ArgmaxFirstMaximumWins)
{
    Image p(4, 1, 2);
    p.data = {0.25, 0.1, 0.25, 0.6, 0.25, 0.2, 0.25, 0.1};
    const LabelMap l = argmax_labels(p);
    EXPECT_EQ(l.data[0], 0);
    EXPECT_EQ(l.data[1], 1);
}
