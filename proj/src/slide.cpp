#include "stainseg/slide.hpp"

#include "stainseg/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace stainseg {

namespace {

constexpr double kPi = std::numbers::pi;

// Closed star-shaped outline r(theta) = R * (1 + sum_h a_h cos(h*theta + phi_h)).
struct Blob {
    double cy, cx, radius;
    std::array<double, 3> amp;
    std::array<double, 3> phase;

    double radius_at(double theta) const
    {
        double r = 1.0;
        for (std::size_t h = 0; h < 3; ++h)
            r += amp[h] * std::cos(static_cast<double>(h + 2) * theta + phase[h]);
        return radius * r;
    }

    std::vector<std::array<double, 2>> polygon(std::size_t vertices = 48) const
    {
        std::vector<std::array<double, 2>> pts(vertices);
        for (std::size_t i = 0; i < vertices; ++i) {
            const double t = 2.0 * kPi * static_cast<double>(i) / static_cast<double>(vertices);
            const double r = radius_at(t);
            pts[i] = {cy + r * std::sin(t), cx + r * std::cos(t)};
        }
        return pts;
    }
};

bool inside_polygon(const std::vector<std::array<double, 2>>& poly, double y, double x)
{
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a[0] > y) != (b[0] > y)) {
            const double xc = a[1] + (y - a[0]) * (b[1] - a[1]) / (b[0] - a[0]);
            if (x < xc)
                in = !in;
        }
    }
    return in;
}

// Bilinear value noise in [0, 1] on a lattice with the given cell size.
Image smooth_noise(std::size_t h, std::size_t w, double cell, Rng& rng)
{
    const auto gh = static_cast<std::size_t>(static_cast<double>(h) / cell) + 2;
    const auto gw = static_cast<std::size_t>(static_cast<double>(w) / cell) + 2;
    std::vector<double> grid(gh * gw);
    for (auto& g : grid)
        g = rng.uniform();
    Image out(1, h, w);
    for (std::size_t y = 0; y < h; ++y) {
        const double fy = static_cast<double>(y) / cell;
        const auto y0 = static_cast<std::size_t>(fy);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < w; ++x) {
            const double fx = static_cast<double>(x) / cell;
            const auto x0 = static_cast<std::size_t>(fx);
            const double tx = fx - static_cast<double>(x0);
            const double a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
            const double c = grid[(y0 + 1) * gw + x0], d = grid[(y0 + 1) * gw + x0 + 1];
            out.data[y * w + x] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
        }
    }
    return out;
}

struct NucleusShape {
    Nucleus n;
    std::array<double, 3> amp{};
    std::array<double, 3> phase{};
};

// Concentration profile of a nucleus: flat core, Gaussian shoulder, cut at
// twice the outline radius.
double nucleus_density(double rho)
{
    if (rho <= 0.8)
        return 1.0;
    const double t = (rho - 0.8) / 0.2;
    return std::exp(-0.5 * t * t);
}

void stamp_nucleus(const NucleusShape& s, double peak, const LabelMap& labels, Image& target, Rng& rng,
                   double ring_inner = -1.0, double ring_outer = -1.0)
{
    const auto& n = s.n;
    const double reach = 2.0 * n.semi_major * (1.0 + s.amp[0] + s.amp[1] + s.amp[2]) + (ring_outer > 0 ? ring_outer : 0);
    const auto h = static_cast<long>(labels.height), w = static_cast<long>(labels.width);
    const long y0 = std::max(0L, static_cast<long>(std::floor(n.cy - reach)));
    const long y1 = std::min(h - 1, static_cast<long>(std::ceil(n.cy + reach)));
    const long x0 = std::max(0L, static_cast<long>(std::floor(n.cx - reach)));
    const long x1 = std::min(w - 1, static_cast<long>(std::ceil(n.cx + reach)));
    const double ca = std::cos(n.angle), sa = std::sin(n.angle);
    for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) {
            if (labels.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) != n.cls)
                continue;
            const double dy = static_cast<double>(y) - n.cy, dx = static_cast<double>(x) - n.cx;
            const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
            const double theta = std::atan2(v, u);
            double outline = 1.0;
            for (std::size_t k = 0; k < 3; ++k)
                outline += s.amp[k] * std::cos(static_cast<double>(k + 2) * theta + s.phase[k]);
            const double rho = std::sqrt((u / n.semi_major) * (u / n.semi_major) +
                                         (v / n.semi_minor) * (v / n.semi_minor)) / outline;
            double c = 0.0;
            if (ring_inner > 0) {
                if (rho >= ring_inner && rho <= ring_outer)
                    c = 1.0;
            } else if (rho < 2.0) {
                c = nucleus_density(rho) * (0.85 + 0.3 * rng.uniform());
            }
            if (c > 0.0)
                target.data[static_cast<std::size_t>(y) * labels.width + static_cast<std::size_t>(x)] += peak * c;
        }
}

} // namespace

double Nucleus::area() const
{
    return kPi * semi_major * semi_minor;
}

LayoutConfig LayoutConfig::defaults(std::size_t height, std::size_t width)
{
    LayoutConfig l;
    l.height = height;
    l.width = width;

    l.tumor.min_regions = 1;
    l.tumor.max_regions = 2;
    l.tumor.min_radius = 40;
    l.tumor.max_radius = 75;
    l.tumor.nucleus_spacing = 10.0;
    l.tumor.min_nucleus_radius = 4.5;
    l.tumor.max_nucleus_radius = 7.5;
    l.tumor.max_eccentricity = 0.75;
    l.tumor.distortion = 0.3;
    l.tumor.nucleus_concentration = 1.1;
    l.tumor.stroma_concentration = 0.25;

    l.tissue.min_regions = 1;
    l.tissue.max_regions = 3;
    l.tissue.min_radius = 40;
    l.tissue.max_radius = 75;
    l.tissue.nucleus_spacing = 13.0;
    l.tissue.regular_spacing = true;
    l.tissue.min_nucleus_radius = 2.5;
    l.tissue.max_nucleus_radius = 3.5;
    l.tissue.max_eccentricity = 0.3;
    l.tissue.distortion = 0.04;
    l.tissue.nucleus_concentration = 0.9;
    l.tissue.stroma_concentration = 0.35;

    l.necrosis.min_regions = 1;
    l.necrosis.max_regions = 2;
    l.necrosis.min_radius = 25;
    l.necrosis.max_radius = 50;
    l.necrosis.nucleus_spacing = 15.0;
    l.necrosis.min_nucleus_radius = 1.0;
    l.necrosis.max_nucleus_radius = 2.2;
    l.necrosis.max_eccentricity = 0.85;
    l.necrosis.distortion = 0.45;
    l.necrosis.nucleus_concentration = 0.6;
    l.necrosis.stroma_concentration = 0.45;
    return l;
}

LayoutConfig LayoutConfig::no_regions(std::size_t height, std::size_t width)
{
    LayoutConfig l = defaults(height, width);
    for (ClassLayout* c : {&l.tumor, &l.tissue, &l.necrosis})
        c->min_regions = c->max_regions = 0;
    l.exclude_probability = 0.0;
    return l;
}

const ClassLayout& LayoutConfig::for_class(std::size_t cls) const
{
    switch (cls) {
    case 1: return tumor;
    case 2: return tissue;
    case 3: return necrosis;
    default: throw std::invalid_argument("no layout for class " + std::to_string(cls));
    }
}

void LayoutConfig::validate() const
{
    if (height == 0 || width == 0)
        throw std::invalid_argument("layout: slide size must be positive");
    for (std::size_t cls = 1; cls <= 3; ++cls) {
        const auto& c = for_class(cls);
        const std::string who = std::string("layout.") + class_name(cls);
        if (c.min_regions > c.max_regions)
            throw std::invalid_argument(who + ": min_regions exceeds max_regions");
        if (!(c.min_radius > 0) || c.min_radius > c.max_radius)
            throw std::invalid_argument(who + ": region radius range must be positive and ordered");
        if (!(c.min_nucleus_radius > 0) || c.min_nucleus_radius > c.max_nucleus_radius)
            throw std::invalid_argument(who + ": nucleus radius range must be positive and ordered");
        if (!(c.nucleus_spacing > 0))
            throw std::invalid_argument(who + ": nucleus spacing must be positive");
        if (c.max_eccentricity < 0 || c.max_eccentricity >= 1)
            throw std::invalid_argument(who + ": eccentricity must lie in [0, 1)");
        if (c.distortion < 0 || c.distortion > 0.5)
            throw std::invalid_argument(who + ": distortion must lie in [0, 0.5]");
        if (c.nucleus_concentration < 0 || c.stroma_concentration < 0)
            throw std::invalid_argument(who + ": concentrations must be >= 0");
    }
    if (exclude_probability < 0 || exclude_probability > 1 || positive_fraction < 0 || positive_fraction > 1)
        throw std::invalid_argument("layout: probabilities must lie in [0, 1]");
    if (stain_jitter < 0 || stain_jitter >= 1)
        throw std::invalid_argument("layout: stain_jitter must lie in [0, 1)");
}

VirtualSlide synth_slide(const StainProfile& profile, const LayoutConfig& layout, std::uint64_t seed)
{
    layout.validate();
    const auto H = layout.height, W = layout.width;
    Rng rng(Rng::mix(seed, 0));

    VirtualSlide slide;
    slide.profile = profile;
    slide.seed = seed;
    slide.labels = LabelMap(H, W, 0);
    slide.concentrations.assign(profile.size(), Image(1, H, W, 0.0));
    slide.marker = Image(1, H, W, 0.0);

    // Regions: disjoint blobs with a small gap, placed class by class.
    std::vector<std::pair<Blob, std::uint8_t>> regions;
    for (std::uint8_t cls = 1; cls <= 3; ++cls) {
        const auto& cl = layout.for_class(cls);
        const auto want = cl.min_regions + rng.below(cl.max_regions - cl.min_regions + 1);
        for (std::size_t r = 0; r < want; ++r) {
            bool placed = false;
            for (std::size_t attempt = 0; attempt < layout.placement_retries && !placed; ++attempt) {
                Blob b{rng.uniform(0, static_cast<double>(H)), rng.uniform(0, static_cast<double>(W)),
                       rng.uniform(cl.min_radius, cl.max_radius), {}, {}};
                for (std::size_t k = 0; k < 3; ++k) {
                    b.amp[k] = rng.uniform(0.0, 0.1);
                    b.phase[k] = rng.uniform(0.0, 2 * kPi);
                }
                const auto poly = b.polygon();
                const double reach = b.radius * 1.3 + 4.0;
                const long y0 = std::max(0L, static_cast<long>(b.cy - reach));
                const long y1 = std::min(static_cast<long>(H) - 1, static_cast<long>(b.cy + reach));
                const long x0 = std::max(0L, static_cast<long>(b.cx - reach));
                const long x1 = std::min(static_cast<long>(W) - 1, static_cast<long>(b.cx + reach));
                std::vector<std::size_t> pixels;
                bool clash = false;
                for (long y = y0; y <= y1 && !clash; ++y)
                    for (long x = x0; x <= x1; ++x) {
                        if (!inside_polygon(poly, static_cast<double>(y), static_cast<double>(x)))
                            continue;
                        // 4-pixel gap to other regions
                        for (long dy = -4; dy <= 4 && !clash; dy += 4)
                            for (long dx = -4; dx <= 4 && !clash; dx += 4) {
                                const long yy = y + dy, xx = x + dx;
                                if (yy >= 0 && xx >= 0 && yy < static_cast<long>(H) && xx < static_cast<long>(W) &&
                                    slide.labels.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) != 0)
                                    clash = true;
                            }
                        if (clash)
                            break;
                        pixels.push_back(static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x));
                    }
                if (clash || pixels.size() < 16)
                    continue;
                for (auto p : pixels)
                    slide.labels.data[p] = cls;
                regions.emplace_back(b, cls);
                placed = true;
            }
            if (!placed)
                slide.warnings.push_back(std::string("could not place ") + class_name(cls) + " region " +
                                         std::to_string(r + 1) + " of " + std::to_string(want) + " after " +
                                         std::to_string(layout.placement_retries) + " attempts");
        }
    }

    // Per-slide staining strength.
    std::vector<double> strength(profile.size());
    for (auto& s : strength)
        s = rng.uniform(1.0 - layout.stain_jitter, 1.0 + layout.stain_jitter);

    // Diffuse stroma of the secondary stain (or the counterstain for single-stain profiles).
    const std::size_t stroma_stain = profile.size() > 1 ? 1 : 0;
    const Image blotch = smooth_noise(H, W, 24.0, rng);
    for (std::size_t i = 0; i < H * W; ++i) {
        const auto l = slide.labels.data[i];
        if (l == 0)
            continue;
        const double base = layout.for_class(l).stroma_concentration;
        slide.concentrations[stroma_stain].data[i] += strength[stroma_stain] * base * (0.6 + 0.8 * blotch.data[i]);
    }

    // Nuclei.
    for (const auto& [blob, cls] : regions) {
        const auto& cl = layout.for_class(cls);
        std::vector<std::array<double, 2>> centers;
        const double reach = blob.radius * 1.3;
        if (cl.regular_spacing) {
            const double s = cl.nucleus_spacing;
            for (double y = blob.cy - reach; y <= blob.cy + reach; y += s)
                for (double x = blob.cx - reach; x <= blob.cx + reach; x += s)
                    centers.push_back({y + rng.uniform(-0.15, 0.15) * s, x + rng.uniform(-0.15, 0.15) * s});
        } else {
            const double area = kPi * reach * reach;
            const auto count = static_cast<std::size_t>(area / (cl.nucleus_spacing * cl.nucleus_spacing));
            for (std::size_t k = 0; k < count; ++k)
                centers.push_back({blob.cy + rng.uniform(-reach, reach), blob.cx + rng.uniform(-reach, reach)});
        }
        for (const auto& c : centers) {
            const long py = std::lround(c[0]), px = std::lround(c[1]);
            if (py < 0 || px < 0 || py >= static_cast<long>(H) || px >= static_cast<long>(W) ||
                slide.labels.at(static_cast<std::size_t>(py), static_cast<std::size_t>(px)) != cls)
                continue;
            NucleusShape s;
            s.n.cy = c[0];
            s.n.cx = c[1];
            s.n.cls = cls;
            s.n.semi_major = rng.uniform(cl.min_nucleus_radius, cl.max_nucleus_radius);
            const double ecc = rng.uniform(0.0, cl.max_eccentricity);
            s.n.semi_minor = s.n.semi_major * std::sqrt(1.0 - ecc * ecc);
            s.n.angle = rng.uniform(0.0, kPi);
            for (std::size_t k = 0; k < 3; ++k) {
                s.amp[k] = rng.uniform(0.0, cl.distortion / 3.0);
                s.phase[k] = rng.uniform(0.0, 2 * kPi);
            }
            const double peak = strength[0] * cl.nucleus_concentration * rng.uniform(0.8, 1.2);
            stamp_nucleus(s, peak, slide.labels, slide.concentrations[0], rng);
            if (profile.size() > 2 && rng.bernoulli(layout.positive_fraction))
                stamp_nucleus(s, strength[2] * 0.7, slide.labels, slide.concentrations[2], rng, 1.0, 1.5);
            slide.nuclei.push_back(s.n);
        }
    }

    // Pen-marker streak: quadratic Bezier between two random border points.
    if (rng.bernoulli(layout.exclude_probability)) {
        const auto border_point = [&]() -> std::array<double, 2> {
            const double t = rng.uniform();
            switch (rng.below(4)) {
            case 0: return {0.0, t * static_cast<double>(W)};
            case 1: return {static_cast<double>(H - 1), t * static_cast<double>(W)};
            case 2: return {t * static_cast<double>(H), 0.0};
            default: return {t * static_cast<double>(H), static_cast<double>(W - 1)};
            }
        };
        const auto p0 = border_point();
        const auto p2 = border_point();
        const std::array<double, 2> p1{rng.uniform(0, static_cast<double>(H)), rng.uniform(0, static_cast<double>(W))};
        const double half = rng.uniform(2.0, 4.0);
        const std::size_t steps = 4 * (H + W);
        for (std::size_t k = 0; k <= steps; ++k) {
            const double t = static_cast<double>(k) / static_cast<double>(steps);
            const double cy = (1 - t) * (1 - t) * p0[0] + 2 * (1 - t) * t * p1[0] + t * t * p2[0];
            const double cx = (1 - t) * (1 - t) * p0[1] + 2 * (1 - t) * t * p1[1] + t * t * p2[1];
            const long r = static_cast<long>(std::ceil(half + 1));
            for (long dy = -r; dy <= r; ++dy)
                for (long dx = -r; dx <= r; ++dx) {
                    const long y = static_cast<long>(std::lround(cy)) + dy;
                    const long x = static_cast<long>(std::lround(cx)) + dx;
                    if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W))
                        continue;
                    const double d = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx);
                    const double v = 1.5 * std::clamp(half + 0.5 - d, 0.0, 1.0);
                    double& m = slide.marker.data[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
                    m = std::max(m, v);
                }
        }
        for (std::size_t i = 0; i < H * W; ++i)
            if (slide.marker.data[i] > 0.3)
                slide.labels.data[i] = kIgnoreLabel;
    }

    slide.image = render(slide.concentrations, profile);
    const auto& me = marker_stain().epsilon;
    for (std::size_t i = 0; i < H * W; ++i) {
        const double m = slide.marker.data[i];
        if (m > 0.0)
            for (std::size_t k = 0; k < 3; ++k)
                slide.image.data[k * H * W + i] *= transmittance(me[k] * m);
    }
    return slide;
}

} // namespace stainseg
