#include "stainseg/augment.hpp"

#include "stainseg/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace stainseg {

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v)
{
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0.0;
    if (d <= 0) {
        h = 0;
        return;
    }
    if (mx == r)
        h = 60.0 * std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = 60.0 * ((b - r) / d + 2.0);
    else
        h = 60.0 * ((r - g) / d + 4.0);
    if (h < 0)
        h += 360.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b)
{
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
    double r1 = 0, g1 = 0, b1 = 0;
    switch (static_cast<int>(hp) % 6) {
    case 0: r1 = c, g1 = x; break;
    case 1: r1 = x, g1 = c; break;
    case 2: g1 = c, b1 = x; break;
    case 3: g1 = x, b1 = c; break;
    case 4: r1 = x, b1 = c; break;
    default: r1 = c, b1 = x; break;
    }
    const double m = v - c;
    r = r1 + m, g = g1 + m, b = b1 + m;
}

} // namespace

AugmentationConfig AugmentationConfig::defaults()
{
    AugmentationConfig c;
    c.hue_degrees = 8.0;
    c.brightness = 0.1;
    c.scale = 0.1;
    c.intensity_noise = 0.03;
    c.occlusion_probability = 0.2;
    c.occlusion_min = 4;
    c.occlusion_max = 12;
    c.hflip_probability = 0.5;
    c.vflip_probability = 0.5;
    c.rotation_degrees = 10.0;
    c.translation = 0.05;
    c.shear = 0.05;
    return c;
}

void AugmentationConfig::validate() const
{
    for (double a : {hue_degrees, brightness, scale, intensity_noise, rotation_degrees, translation, shear})
        if (!(a >= 0.0) || !std::isfinite(a))
            throw std::invalid_argument("augmentation amplitudes must be finite and >= 0");
    if (brightness >= 1.0 || scale >= 1.0)
        throw std::invalid_argument("augmentation brightness/scale amplitudes must be < 1");
    for (double p : {occlusion_probability, hflip_probability, vflip_probability})
        if (p < 0.0 || p > 1.0)
            throw std::invalid_argument("augmentation probabilities must lie in [0, 1]");
    if (occlusion_min > occlusion_max)
        throw std::invalid_argument("augmentation occlusion size range is reversed");
}

TileSample augment(const TileSample& sample, const AugmentationConfig& config, std::uint64_t seed)
{
    config.validate();
    Rng rng(Rng::mix(seed, 0xa11));
    // Draw every parameter up front so one transform's setting never shifts another's sample.
    const bool hflip = rng.bernoulli(config.hflip_probability);
    const bool vflip = rng.bernoulli(config.vflip_probability);
    const double zoom = 1.0 + rng.uniform(-config.scale, config.scale);
    const double rot = rng.uniform(-config.rotation_degrees, config.rotation_degrees) * std::numbers::pi / 180.0;
    const double shear = rng.uniform(-config.shear, config.shear);
    const double ty = rng.uniform(-config.translation, config.translation);
    const double tx = rng.uniform(-config.translation, config.translation);
    const double hue = rng.uniform(-config.hue_degrees, config.hue_degrees);
    const double bright = 1.0 + rng.uniform(-config.brightness, config.brightness);
    const bool occlude = rng.bernoulli(config.occlusion_probability);
    const std::uint64_t noise_seed = rng.next();
    const std::uint64_t box_seed = rng.next();

    TileSample out = sample;
    Image& img = out.image;
    LabelMap& lab = out.labels;
    const auto H = img.height, W = img.width, C = img.channels;

    if (hflip || vflip) {
        const Image src = img;
        const LabelMap lsrc = lab;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const auto sy = vflip ? H - 1 - y : y;
                const auto sx = hflip ? W - 1 - x : x;
                for (std::size_t c = 0; c < C; ++c)
                    img.at(c, y, x) = src.at(c, sy, sx);
                lab.at(y, x) = lsrc.at(sy, sx);
            }
    }

    // Forward map: p' = A (p - center) + center + t, with A = R(rot) * Shear * zoom.
    const double a00 = zoom * std::cos(rot), a01 = zoom * (std::cos(rot) * shear - std::sin(rot));
    const double a10 = zoom * std::sin(rot), a11 = zoom * (std::sin(rot) * shear + std::cos(rot));
    const bool geometric = !(a00 == 1.0 && a01 == 0.0 && a10 == 0.0 && a11 == 1.0 && ty == 0.0 && tx == 0.0);
    if (geometric) {
        const double det = a00 * a11 - a01 * a10;
        const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
        const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
        const double oy = ty * static_cast<double>(H), ox = tx * static_cast<double>(W);
        const Image src = img;
        const LabelMap lsrc = lab;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                // A is applied to (x, y) in image convention: row 0 is x, row 1 is y.
                const double dx = static_cast<double>(x) - cx - ox, dy = static_cast<double>(y) - cy - oy;
                const double sx = i00 * dx + i01 * dy + cx;
                const double sy = i10 * dx + i11 * dy + cy;
                const long nx = std::lround(sx), ny = std::lround(sy);
                const bool inside = nx >= 0 && ny >= 0 && nx < static_cast<long>(W) && ny < static_cast<long>(H);
                lab.at(y, x) = inside ? lsrc.at(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)) : kIgnoreLabel;
                const double cyc = std::clamp(sy, 0.0, static_cast<double>(H - 1));
                const double cxc = std::clamp(sx, 0.0, static_cast<double>(W - 1));
                const auto y0 = static_cast<std::size_t>(cyc), x0 = static_cast<std::size_t>(cxc);
                const auto y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
                const double fy = cyc - static_cast<double>(y0), fx = cxc - static_cast<double>(x0);
                for (std::size_t c = 0; c < C; ++c)
                    img.at(c, y, x) = (1 - fy) * ((1 - fx) * src.at(c, y0, x0) + fx * src.at(c, y0, x1)) +
                                      fy * ((1 - fx) * src.at(c, y1, x0) + fx * src.at(c, y1, x1));
            }
    }

    if (hue != 0.0 && C == 3) {
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double h, s, v;
                rgb_to_hsv(img.at(2, y, x), img.at(1, y, x), img.at(0, y, x), h, s, v);
                h = std::fmod(h + hue + 360.0, 360.0);
                double r, g, b;
                hsv_to_rgb(h, s, v, r, g, b);
                img.at(2, y, x) = r, img.at(1, y, x) = g, img.at(0, y, x) = b;
            }
    }
    if (bright != 1.0)
        for (auto& v : img.data)
            v *= bright;
    if (config.intensity_noise > 0.0) {
        Rng noise(noise_seed);
        for (std::size_t i = 0; i < img.plane(); ++i) {
            const double n = noise.uniform(-config.intensity_noise, config.intensity_noise);
            for (std::size_t c = 0; c < C; ++c)
                img.data[c * img.plane() + i] += n;
        }
    }
    if (occlude && config.occlusion_max > 0) {
        Rng box(box_seed);
        const auto side_h = std::min<std::size_t>(H, config.occlusion_min + box.below(config.occlusion_max - config.occlusion_min + 1));
        const auto side_w = std::min<std::size_t>(W, config.occlusion_min + box.below(config.occlusion_max - config.occlusion_min + 1));
        const auto y0 = box.below(H - side_h + 1), x0 = box.below(W - side_w + 1);
        for (std::size_t y = y0; y < y0 + side_h; ++y)
            for (std::size_t x = x0; x < x0 + side_w; ++x) {
                for (std::size_t c = 0; c < C; ++c)
                    img.at(c, y, x) = 0.5;
                lab.at(y, x) = kIgnoreLabel;
            }
    }
    for (auto& v : img.data)
        v = std::clamp(v, 0.0, 1.0);
    return out;
}

} // namespace stainseg
