#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace stainseg {

// Planar float image, values nominally in [0, 1]. Channel order is whatever
// the producer says it is: slides are RGB, network tiles are BGR.
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
        : channels(c), height(h), width(w), data(c * h * w, fill) {}

    double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
    std::size_t plane() const { return height * width; }

    bool operator==(const Image&) const = default;
};

inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr std::size_t kNumClasses = 4;

enum class TissueClass : std::uint8_t { background = 0, tumor = 1, tissue = 2, necrosis = 3, exclude = kIgnoreLabel };

const char* class_name(std::size_t cls);

struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

    bool operator==(const LabelMap&) const = default;
};

bool is_valid_label(std::uint8_t v);

// Swaps channels 0 and 2 (RGB <-> BGR) of a 3-channel image.
Image swap_red_blue(const Image& image);

// Binary netpbm I/O. Floats are quantized to round(clamp(v, 0, 1) * 255).
void write_ppm(const std::filesystem::path& path, const Image& rgb);
Image read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image& gray);
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_pgm_labels(const std::filesystem::path& path);

} // namespace stainseg
