#include "stainseg/dataset.hpp"

#include "stainseg/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace stainseg {

std::vector<std::size_t> tile_offsets(std::size_t extent, std::size_t tile_size, std::size_t stride)
{
    if (stride == 0 || tile_size == 0)
        throw std::invalid_argument("tile size and stride must be positive");
    if (stride > tile_size)
        throw std::invalid_argument("stride " + std::to_string(stride) + " exceeds tile size " +
                                    std::to_string(tile_size) + "; tiles would leave gaps");
    if (tile_size > extent)
        throw std::invalid_argument("tile size " + std::to_string(tile_size) + " exceeds slide dimension " +
                                    std::to_string(extent));
    std::vector<std::size_t> offs;
    for (std::size_t o = 0; o + tile_size <= extent; o += stride)
        offs.push_back(o);
    if (offs.back() + tile_size != extent)
        offs.push_back(extent - tile_size);
    return offs;
}

std::vector<TileSample> tile_slide(const Image& rgb, const LabelMap& labels, std::size_t tile_size,
                                   std::size_t stride, const std::string& slide_id, const std::string& stain)
{
    if (rgb.channels != 3)
        throw std::invalid_argument("tile_slide: slide image must have 3 channels");
    if (rgb.height != labels.height || rgb.width != labels.width)
        throw std::invalid_argument("tile_slide: image and label map sizes differ");
    const auto rows = tile_offsets(rgb.height, tile_size, stride);
    const auto cols = tile_offsets(rgb.width, tile_size, stride);

    std::vector<TileSample> tiles;
    tiles.reserve(rows.size() * cols.size());
    for (auto r : rows)
        for (auto c : cols) {
            TileSample t;
            t.image = Image(3, tile_size, tile_size);
            t.labels = LabelMap(tile_size, tile_size);
            for (std::size_t y = 0; y < tile_size; ++y)
                for (std::size_t x = 0; x < tile_size; ++x) {
                    for (std::size_t ch = 0; ch < 3; ++ch)
                        t.image.at(ch, y, x) = rgb.at(2 - ch, r + y, c + x);
                    t.labels.at(y, x) = labels.at(r + y, c + x);
                }
            t.source_slide = slide_id;
            t.stain = stain;
            t.origin_row = r;
            t.origin_col = c;
            tiles.push_back(std::move(t));
        }
    return tiles;
}

Downsampled downsample2x(const Image& image, const LabelMap& labels)
{
    if (image.height % 2 || image.width % 2)
        throw std::invalid_argument("downsample2x: dimensions must be even, got " + std::to_string(image.height) +
                                    "x" + std::to_string(image.width));
    if (image.height != labels.height || image.width != labels.width)
        throw std::invalid_argument("downsample2x: image and label map sizes differ");
    const auto h = image.height / 2, w = image.width / 2;
    Downsampled out{Image(image.channels, h, w), LabelMap(h, w)};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < image.channels; ++c)
                out.image.at(c, y, x) = 0.25 * (image.at(c, 2 * y, 2 * x) + image.at(c, 2 * y, 2 * x + 1) +
                                                 image.at(c, 2 * y + 1, 2 * x) + image.at(c, 2 * y + 1, 2 * x + 1));
            out.labels.at(y, x) = labels.at(2 * y, 2 * x);
        }
    return out;
}

const char* split_name(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& s)
{
    if (s == "train")
        return Split::train;
    if (s == "val")
        return Split::val;
    if (s == "test")
        return Split::test;
    throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

std::string TileRecord::label_path() const
{
    return std::filesystem::path(path).replace_extension(".pgm").string();
}

std::size_t DatasetManifest::count(Split s) const
{
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [s](const TileRecord& r) { return r.split == s; }));
}

void DatasetManifest::validate() const
{
    std::map<std::string, Split> by_slide;
    for (const auto& r : records) {
        auto [it, fresh] = by_slide.emplace(r.slide_id, r.split);
        if (!fresh && it->second != r.split)
            throw std::invalid_argument("slide '" + r.slide_id + "' has tiles in both " + split_name(it->second) +
                                        " and " + split_name(r.split));
    }
}

void Dataset::add(TileSample tile, Split split)
{
    TileRecord r;
    r.slide_id = tile.source_slide;
    r.stain = tile.stain;
    r.split = split;
    r.origin_row = tile.origin_row;
    r.origin_col = tile.origin_col;
    manifest.records.push_back(std::move(r));
    tiles.push_back(std::move(tile));
}

std::vector<std::size_t> Dataset::indices(Split s) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
        if (manifest.records[i].split == s)
            out.push_back(i);
    return out;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest)
{
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    out << "# stainseg manifest v" << manifest.version << '\n';
    out << "path\tslide_id\tstain\tsplit\torigin_row\torigin_col\n";
    for (const auto& r : manifest.records)
        out << r.path << '\t' << r.slide_id << '\t' << r.stain << '\t' << split_name(r.split) << '\t'
            << r.origin_row << '\t' << r.origin_col << '\n';
}

DatasetManifest read_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot read manifest " + path.string());
    DatasetManifest m;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        if (line.rfind("# stainseg manifest v", 0) == 0) {
            m.version = std::stoi(line.substr(21));
            if (m.version != DatasetManifest::kFormatVersion)
                throw std::runtime_error(path.string() + ": unsupported manifest version " +
                                         std::to_string(m.version));
            continue;
        }
        if (line[0] == '#')
            continue;
        if (!header_seen && line.rfind("path\t", 0) == 0) {
            header_seen = true;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, '\t'))
            f.push_back(cell);
        if (f.size() != 6)
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 6 tab-separated fields");
        TileRecord r;
        r.path = f[0];
        r.slide_id = f[1];
        r.stain = f[2];
        r.split = parse_split(f[3]);
        try {
            r.origin_row = std::stoul(f[4]);
            r.origin_col = std::stoul(f[5]);
        } catch (const std::exception&) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad tile origin");
        }
        m.records.push_back(std::move(r));
    }
    m.validate();
    return m;
}

void write_dataset(const std::filesystem::path& dir, Dataset& dataset)
{
    std::filesystem::create_directories(dir / "tiles");
    for (std::size_t i = 0; i < dataset.tiles.size(); ++i) {
        auto& rec = dataset.manifest.records[i];
        const auto& tile = dataset.tiles[i];
        if (rec.path.empty()) {
            std::ostringstream name;
            name << "tiles/" << rec.slide_id << "_r" << rec.origin_row << "_c" << rec.origin_col << ".ppm";
            rec.path = name.str();
        }
        write_ppm(dir / rec.path, swap_red_blue(tile.image));
        write_pgm(dir / rec.label_path(), tile.labels);
    }
    write_manifest(dir / "manifest.tsv", dataset.manifest);
}

Dataset read_dataset(const std::filesystem::path& dir)
{
    Dataset ds;
    ds.manifest = read_manifest(dir / "manifest.tsv");
    ds.tiles.reserve(ds.manifest.records.size());
    for (const auto& r : ds.manifest.records) {
        TileSample t;
        t.image = swap_red_blue(read_ppm(dir / r.path));
        t.labels = read_pgm_labels(dir / r.label_path());
        if (t.labels.height != t.image.height || t.labels.width != t.image.width)
            throw std::runtime_error(r.path + ": image and label sizes differ");
        t.source_slide = r.slide_id;
        t.stain = r.stain;
        t.origin_row = r.origin_row;
        t.origin_col = r.origin_col;
        ds.tiles.push_back(std::move(t));
    }
    return ds;
}

ClassStats ClassStats::from_counts(const std::array<std::uint64_t, kNumClasses>& counts)
{
    ClassStats s;
    s.counts = counts;
    for (auto c : counts)
        s.total += c;
    if (s.total == 0)
        throw std::invalid_argument("class statistics need at least one labeled pixel");
    for (std::size_t k = 0; k < kNumClasses; ++k)
        s.frequencies[k] = static_cast<double>(counts[k]) / static_cast<double>(s.total);
    return s;
}

ClassStats class_frequencies(const Dataset& dataset, Split split)
{
    const auto idx = dataset.indices(split);
    if (idx.empty())
        throw std::invalid_argument(std::string("split '") + split_name(split) + "' is empty");
    std::array<std::uint64_t, kNumClasses> counts{};
    for (auto i : idx)
        for (auto l : dataset.tiles[i].labels.data)
            if (l < kNumClasses)
                ++counts[l];
    return ClassStats::from_counts(counts);
}

std::array<double, kNumClasses> mfb_weights(const ClassStats& stats)
{
    for (std::size_t k = 0; k < kNumClasses; ++k)
        if (!(stats.frequencies[k] > 0.0))
            throw std::invalid_argument(std::string("class '") + class_name(k) +
                                        "' has zero frequency; regenerate the data with that class present or "
                                        "merge it into another class");
    auto sorted = stats.frequencies;
    std::sort(sorted.begin(), sorted.end());
    const double median = 0.5 * (sorted[kNumClasses / 2 - 1] + sorted[kNumClasses / 2]);
    std::array<double, kNumClasses> w{};
    for (std::size_t k = 0; k < kNumClasses; ++k)
        w[k] = median / stats.frequencies[k];
    return w;
}

DatasetManifest split_train_val(const DatasetManifest& manifest, double fraction, std::uint64_t seed)
{
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("validation fraction must lie in (0, 1)");
    std::vector<std::string> slides;
    std::map<std::string, std::size_t> tiles_per_slide;
    std::size_t total = 0;
    for (const auto& r : manifest.records) {
        if (r.split != Split::train)
            continue;
        if (tiles_per_slide[r.slide_id]++ == 0)
            slides.push_back(r.slide_id);
        ++total;
    }
    if (slides.size() < 2)
        throw std::invalid_argument("need at least 2 training slides to reserve a validation split, found " +
                                    std::to_string(slides.size()));

    Rng rng(Rng::mix(seed, 0x5a11));
    rng.shuffle(slides.begin(), slides.end());
    const double target = fraction * static_cast<double>(total);
    std::map<std::string, bool> to_val;
    double taken = 0.0;
    std::size_t chosen = 0;
    for (const auto& s : slides) {
        if (chosen + 1 == slides.size())
            break;
        const double n = static_cast<double>(tiles_per_slide[s]);
        if (chosen == 0 || std::abs(taken + n - target) < std::abs(taken - target)) {
            to_val[s] = true;
            taken += n;
            ++chosen;
        }
    }

    DatasetManifest out = manifest;
    for (auto& r : out.records)
        if (r.split == Split::train && to_val.count(r.slide_id))
            r.split = Split::val;
    return out;
}

namespace {

struct PaletteEntry {
    std::uint8_t label;
    std::array<double, 3> rgb;
};

constexpr std::array<PaletteEntry, 5> kPalette{{
    {0, {0, 0, 0}},
    {1, {1, 0, 0}},
    {2, {0, 1, 0}},
    {3, {1, 1, 0}},
    {kIgnoreLabel, {1, 1, 1}},
}};

} // namespace

Image colorize_labels(const LabelMap& labels)
{
    Image out(3, labels.height, labels.width);
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
        const auto l = labels.data[i];
        const auto it = std::find_if(kPalette.begin(), kPalette.end(), [l](const PaletteEntry& e) { return e.label == l; });
        if (it == kPalette.end())
            throw std::invalid_argument("colorize_labels: unknown label id " + std::to_string(l) + " at pixel (" +
                                        std::to_string(i / labels.width) + ", " + std::to_string(i % labels.width) +
                                        ")");
        for (std::size_t c = 0; c < 3; ++c)
            out.data[c * out.plane() + i] = it->rgb[c];
    }
    return out;
}

LabelMap parse_label_image(const Image& rgb)
{
    if (rgb.channels != 3)
        throw std::invalid_argument("parse_label_image: expected an RGB image");
    LabelMap out(rgb.height, rgb.width);
    for (std::size_t y = 0; y < rgb.height; ++y)
        for (std::size_t x = 0; x < rgb.width; ++x) {
            const std::array<double, 3> px{rgb.at(0, y, x), rgb.at(1, y, x), rgb.at(2, y, x)};
            const auto it = std::find_if(kPalette.begin(), kPalette.end(), [&](const PaletteEntry& e) { return e.rgb == px; });
            if (it == kPalette.end()) {
                std::ostringstream msg;
                msg << "parse_label_image: pixel (" << y << ", " << x << ") has off-palette color (" << px[0] << ", "
                    << px[1] << ", " << px[2] << ")";
                throw std::invalid_argument(msg.str());
            }
            out.at(y, x) = it->label;
        }
    return out;
}

} // namespace stainseg
