#include "stainseg/introspection.hpp"

#include "stainseg/random.hpp"
#include "stainseg/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stainseg {

namespace {

struct Probe {
    double objective;
    std::vector<double> gradient;
};

Probe probe(const ScoreFn& score, const Tensor& x)
{
    Tensor input = x.clone();
    input.drop_grad();
    input.set_requires_grad(true);
    Tape tape;
    const Tensor s = score(&tape, input);
    tape.backward(s);
    const auto g = std::as_const(input).grad();
    return {s.item(), std::vector<double>(g.begin(), g.end())};
}

AscentResult ascend(const ScoreFn& score, std::size_t channels, const VizOptions& options, const char* what)
{
    options.validate();
    const auto t = options.tile_size;
    Rng rng(options.seed);
    Tensor x({1, channels, t, t});
    for (auto& v : x.data())
        v = rng.uniform(0.4, 0.6);

    Probe current = probe(score, x);
    AscentResult r;
    r.initial_objective = current.objective;
    double step = options.step_size;
    for (std::size_t s = 0; s < options.steps; ++s) {
        double norm = 0.0;
        for (double g : current.gradient)
            norm += g * g;
        norm = std::sqrt(norm);
        if (norm == 0.0)
            break;
        Tensor candidate = x.clone();
        auto c = candidate.data();
        for (std::size_t i = 0; i < c.size(); ++i)
            c[i] = std::clamp(c[i] + step * current.gradient[i] / norm, 0.0, 1.0);
        Probe next = probe(score, candidate);
        if (next.objective > current.objective) {
            x = candidate;
            current = std::move(next);
            ++r.accepted_steps;
        } else {
            step *= 0.5;
        }
    }
    r.final_objective = current.objective;
    if (!(r.final_objective > r.initial_objective))
        throw std::runtime_error(std::string(what) + ": gradient ascent did not increase the objective (" +
                                 std::to_string(r.initial_objective) + " -> " + std::to_string(r.final_objective) + ")");
    r.image = batch_to_image(x);
    return r;
}

} // namespace

void VizOptions::validate() const
{
    if (steps < 1)
        throw std::invalid_argument("viz.steps must be >= 1");
    if (!(step_size > 0.0))
        throw std::invalid_argument("viz.step_size must be > 0");
    if (noise_samples < 1)
        throw std::invalid_argument("viz.noise_samples must be >= 1");
    if (!(noise_sigma >= 0.0))
        throw std::invalid_argument("viz.noise_sigma must be >= 0");
    if (!(threshold >= 0.0 && threshold <= 1.0))
        throw std::invalid_argument("viz.threshold must lie in [0, 1]");
    if (tile_size < 1)
        throw std::invalid_argument("viz.tile_size must be >= 1");
}

Tensor image_to_batch(const Image& image)
{
    return Tensor({1, image.channels, image.height, image.width}, image.data);
}

Image batch_to_image(const Tensor& batch, std::size_t index)
{
    if (batch.rank() != 4 || index >= batch.dim(0))
        throw std::invalid_argument("batch_to_image: bad batch " + shape_str(batch.shape()));
    Image img(batch.dim(1), batch.dim(2), batch.dim(3));
    const auto n = img.data.size();
    std::copy(batch.data().begin() + static_cast<long>(index * n), batch.data().begin() + static_cast<long>((index + 1) * n),
              img.data.begin());
    return img;
}

AscentResult maximize_filter_activation(Model& model, std::size_t filter, const VizOptions& options)
{
    if (!model.has_cd_segment())
        throw std::invalid_argument("filter visualization needs a cd-unet model (no colour-deconvolution segment in " +
                                    std::string(arch_name(model.config().arch)) + ")");
    if (filter >= model.config().cd_filters[0])
        throw std::invalid_argument("filter index " + std::to_string(filter) + " out of range [0, " +
                                    std::to_string(model.config().cd_filters[0]) + ")");
    const ScoreFn score = [&](Tape* tape, const Tensor& x) {
        return ops::channel_mean(tape, model.cd_first_conv(tape, x), filter);
    };
    return ascend(score, model.config().in_channels, options, "maximize_filter_activation");
}

AscentResult maximize_output_activation(Model& model, std::size_t row, std::size_t col, std::size_t category,
                                        const VizOptions& options)
{
    const auto t = options.tile_size;
    if (row >= t || col >= t)
        throw std::invalid_argument("target pixel (" + std::to_string(row) + ", " + std::to_string(col) +
                                    ") outside the " + std::to_string(t) + "x" + std::to_string(t) + " output");
    if (category >= model.config().num_classes)
        throw std::invalid_argument("category " + std::to_string(category) + " out of range");
    const ScoreFn score = [&](Tape* tape, const Tensor& x) {
        const Tensor logits = model.logits(tape, x, ops::Mode::eval);
        return ops::element(tape, logits, (category * t + row) * t + col);
    };
    return ascend(score, model.config().in_channels, options, "maximize_output_activation");
}

Image threshold_mask(const Image& gradient, double threshold)
{
    const double peak = gradient.data.empty() ? 0.0 : *std::max_element(gradient.data.begin(), gradient.data.end());
    Image mask(1, gradient.height, gradient.width);
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        const double g = gradient.data[i];
        mask.data[i] = g > 0.0 && g >= threshold * peak ? 1.0 : 0.0;
    }
    return mask;
}

Attribution smoothgrad(const ScoreFn& score, const Image& image, const VizOptions& options)
{
    options.validate();
    const auto [lo, hi] = std::minmax_element(image.data.begin(), image.data.end());
    const double sigma = options.noise_sigma * (*hi - *lo);
    Rng rng(options.seed);
    const Tensor clean = image_to_batch(image);
    const auto plane = image.plane();

    // Running mean: identical samples leave the mean bit-identical to each sample.
    std::vector<double> mean(image.data.size(), 0.0);
    for (std::size_t k = 0; k < options.noise_samples; ++k) {
        Tensor noisy = clean.clone();
        if (sigma > 0.0)
            for (auto& v : noisy.data())
                v += sigma * rng.normal();
        const auto g = probe(score, noisy).gradient;
        for (std::size_t i = 0; i < mean.size(); ++i)
            mean[i] += (g[i] - mean[i]) / static_cast<double>(k + 1);
    }

    Attribution a;
    a.gradient = Image(1, image.height, image.width);
    for (std::size_t i = 0; i < plane; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < image.channels; ++c)
            s += mean[c * plane + i];
        a.gradient.data[i] = std::max(s, 0.0);
    }
    a.mask = threshold_mask(a.gradient, options.threshold);
    a.overlay = image;
    for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            a.overlay.data[c * plane + i] *= a.mask.data[i];
    return a;
}

Attribution smoothgrad(Model& model, const Image& image, std::size_t row, std::size_t col, std::size_t category,
                       const VizOptions& options)
{
    if (row >= image.height || col >= image.width)
        throw std::invalid_argument("target pixel outside the image");
    if (category >= model.config().num_classes)
        throw std::invalid_argument("category " + std::to_string(category) + " out of range");
    const ScoreFn score = [&](Tape* tape, const Tensor& x) {
        const Tensor logits = model.logits(tape, x, ops::Mode::eval);
        return ops::element(tape, logits, (category * image.height + row) * image.width + col);
    };
    return smoothgrad(score, image, options);
}

CdOutputs cd_segment_outputs(Model& model, const Image& image)
{
    if (!model.has_cd_segment())
        throw std::invalid_argument("cd_segment_outputs needs a cd-unet model");
    const Tensor y = model.cd_segment(nullptr, image_to_batch(image), ops::Mode::eval);
    const auto plane = image.plane();
    CdOutputs out;
    for (std::size_t c = 0; c < 3; ++c) {
        out.raw[c] = Image(1, image.height, image.width);
        std::copy(y.data().begin() + static_cast<long>(c * plane), y.data().begin() + static_cast<long>((c + 1) * plane),
                  out.raw[c].data.begin());
        const auto [lo, hi] = std::minmax_element(out.raw[c].data.begin(), out.raw[c].data.end());
        const double min = *lo, range = *hi - *lo;
        out.normalized[c] = Image(1, image.height, image.width);
        if (range > 0.0)
            for (std::size_t i = 0; i < plane; ++i)
                out.normalized[c].data[i] = (out.raw[c].data[i] - min) / range;
    }
    return out;
}

HueSummary dominant_hue(const Image& rgb)
{
    if (rgb.channels != 3)
        throw std::invalid_argument("dominant_hue needs an RGB image");
    std::array<double, 3> m{};
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < rgb.plane(); ++i)
            m[c] += rgb.data[c * rgb.plane() + i];
        m[c] /= static_cast<double>(rgb.plane());
    }
    const double mx = std::max({m[0], m[1], m[2]}), mn = std::min({m[0], m[1], m[2]});
    const double d = mx - mn;
    HueSummary h;
    h.saturation = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0)
        return h;
    double hue;
    if (mx == m[0])
        hue = 60.0 * std::fmod((m[1] - m[2]) / d, 6.0);
    else if (mx == m[1])
        hue = 60.0 * ((m[2] - m[0]) / d + 2.0);
    else
        hue = 60.0 * ((m[0] - m[1]) / d + 4.0);
    h.hue = hue < 0.0 ? hue + 360.0 : hue;
    return h;
}

double hue_distance(double a, double b)
{
    const double d = std::fmod(std::abs(a - b), 360.0);
    return std::min(d, 360.0 - d);
}

} // namespace stainseg
