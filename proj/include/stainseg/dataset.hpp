#pragma once

#include "stainseg/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace stainseg {

struct TileSample {
    Image image; // BGR, [3, T, T], values in [0, 1]
    LabelMap labels;
    std::string source_slide;
    std::string stain;
    std::size_t origin_row = 0;
    std::size_t origin_col = 0;
};

// Offsets 0, stride, 2*stride, ... plus a final offset flush with the far
// edge when the grid does not land on it.
std::vector<std::size_t> tile_offsets(std::size_t extent, std::size_t tile_size, std::size_t stride);

// Cuts congruent image/label tiles from an RGB slide; tile images come out BGR.
std::vector<TileSample> tile_slide(const Image& rgb, const LabelMap& labels, std::size_t tile_size,
                                   std::size_t stride, const std::string& slide_id = {},
                                   const std::string& stain = {});

struct Downsampled {
    Image image;
    LabelMap labels;
};

// 2x2 mean for the image, top-left sample of each block for the labels.
Downsampled downsample2x(const Image& image, const LabelMap& labels);

enum class Split { train, val, test };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct TileRecord {
    std::string path; // image file, relative to the manifest; labels live next to it as .pgm
    std::string slide_id;
    std::string stain;
    Split split = Split::train;
    std::size_t origin_row = 0;
    std::size_t origin_col = 0;

    std::string label_path() const;
};

struct DatasetManifest {
    static constexpr int kFormatVersion = 1;
    int version = kFormatVersion;
    std::vector<TileRecord> records;

    std::size_t count(Split s) const;
    // Throws if a slide is tagged with more than one split.
    void validate() const;
};

// In-memory dataset: records and their tiles, index-aligned.
struct Dataset {
    DatasetManifest manifest;
    std::vector<TileSample> tiles;

    void add(TileSample tile, Split split);
    std::vector<std::size_t> indices(Split s) const;
};

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

// Writes manifest.tsv plus one .ppm/.pgm pair per tile under `dir`.
void write_dataset(const std::filesystem::path& dir, Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

struct ClassStats {
    std::array<std::uint64_t, kNumClasses> counts{};
    std::array<double, kNumClasses> frequencies{};
    std::uint64_t total = 0;

    static ClassStats from_counts(const std::array<std::uint64_t, kNumClasses>& counts);
};

ClassStats class_frequencies(const Dataset& dataset, Split split);

// w_c = median(freq) / freq_c; the median of an even count is the mean of the middle two.
std::array<double, kNumClasses> mfb_weights(const ClassStats& stats);

// Moves whole slides from train to val until the val share of training tiles
// is as close to `fraction` as slide granularity allows. Deterministic per seed.
DatasetManifest split_train_val(const DatasetManifest& manifest, double fraction, std::uint64_t seed);

// Label palette: tissue green, tumor red, necrosis yellow, background black, exclude white.
Image colorize_labels(const LabelMap& labels);
LabelMap parse_label_image(const Image& rgb);

} // namespace stainseg
