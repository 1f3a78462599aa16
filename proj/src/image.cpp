#include "stainseg/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace stainseg {

namespace {

std::uint8_t quantize(double v)
{
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct NetpbmHeader {
    std::string magic;
    std::size_t width = 0, height = 0, maxval = 0;
};

std::size_t read_header_int(std::istream& in, const std::filesystem::path& path)
{
    in >> std::ws;
    while (in.peek() == '#') {
        std::string comment;
        std::getline(in, comment);
        in >> std::ws;
    }
    long long v = -1;
    if (!(in >> v) || v <= 0)
        throw std::runtime_error("malformed netpbm header in " + path.string());
    return static_cast<std::size_t>(v);
}

NetpbmHeader read_header(std::istream& in, const std::filesystem::path& path, const char* expected)
{
    NetpbmHeader h;
    in >> h.magic;
    if (h.magic != expected)
        throw std::runtime_error(path.string() + ": expected netpbm type " + expected + ", found '" + h.magic + "'");
    h.width = read_header_int(in, path);
    h.height = read_header_int(in, path);
    h.maxval = read_header_int(in, path);
    if (h.maxval != 255)
        throw std::runtime_error(path.string() + ": only 8-bit netpbm files are supported");
    in.get();
    return h;
}

std::ofstream open_out(const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot read " + path.string());
    return in;
}

} // namespace

const char* class_name(std::size_t cls)
{
    switch (cls) {
    case 0: return "background";
    case 1: return "tumor";
    case 2: return "tissue";
    case 3: return "necrosis";
    case kIgnoreLabel: return "exclude";
    default: return "unknown";
    }
}

bool is_valid_label(std::uint8_t v)
{
    return v < kNumClasses || v == kIgnoreLabel;
}

Image swap_red_blue(const Image& image)
{
    if (image.channels != 3)
        throw std::invalid_argument("swap_red_blue needs a 3-channel image");
    Image out = image;
    const auto p = image.plane();
    std::copy_n(image.data.begin() + 2 * static_cast<std::ptrdiff_t>(p), p, out.data.begin());
    std::copy_n(image.data.begin(), p, out.data.begin() + 2 * static_cast<std::ptrdiff_t>(p));
    return out;
}

void write_ppm(const std::filesystem::path& path, const Image& rgb)
{
    if (rgb.channels != 3)
        throw std::invalid_argument("write_ppm needs a 3-channel image");
    auto out = open_out(path);
    out << "P6\n" << rgb.width << ' ' << rgb.height << "\n255\n";
    std::vector<char> buf(rgb.plane() * 3);
    for (std::size_t y = 0; y < rgb.height; ++y)
        for (std::size_t x = 0; x < rgb.width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                buf[(y * rgb.width + x) * 3 + c] = static_cast<char>(quantize(rgb.at(c, y, x)));
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Image read_ppm(const std::filesystem::path& path)
{
    auto in = open_in(path);
    const auto h = read_header(in, path, "P6");
    std::vector<unsigned char> buf(h.width * h.height * 3);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw std::runtime_error(path.string() + ": truncated pixel data");
    Image img(3, h.height, h.width);
    for (std::size_t y = 0; y < h.height; ++y)
        for (std::size_t x = 0; x < h.width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.at(c, y, x) = buf[(y * h.width + x) * 3 + c] / 255.0;
    return img;
}

void write_pgm(const std::filesystem::path& path, const Image& gray)
{
    if (gray.channels != 1)
        throw std::invalid_argument("write_pgm needs a 1-channel image");
    auto out = open_out(path);
    out << "P5\n" << gray.width << ' ' << gray.height << "\n255\n";
    std::vector<char> buf(gray.plane());
    for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<char>(quantize(gray.data[i]));
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void write_pgm(const std::filesystem::path& path, const LabelMap& labels)
{
    auto out = open_out(path);
    out << "P5\n" << labels.width << ' ' << labels.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(labels.data.data()), static_cast<std::streamsize>(labels.data.size()));
}

LabelMap read_pgm_labels(const std::filesystem::path& path)
{
    auto in = open_in(path);
    const auto h = read_header(in, path, "P5");
    LabelMap labels(h.height, h.width);
    if (!in.read(reinterpret_cast<char*>(labels.data.data()), static_cast<std::streamsize>(labels.data.size())))
        throw std::runtime_error(path.string() + ": truncated pixel data");
    for (std::size_t i = 0; i < labels.data.size(); ++i)
        if (!is_valid_label(labels.data[i]))
            throw std::runtime_error(path.string() + ": invalid label " + std::to_string(labels.data[i]) +
                                     " at pixel (" + std::to_string(i / h.width) + ", " +
                                     std::to_string(i % h.width) + ")");
    return labels;
}

} // namespace stainseg
