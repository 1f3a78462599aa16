#pragma once

#include "stainseg/image.hpp"
#include "stainseg/network.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

namespace stainseg {

struct VizOptions {
    std::size_t steps = 256;
    double step_size = 0.05;
    std::size_t noise_samples = 25;
    double noise_sigma = 0.10; // fraction of the input's value range
    double threshold = 0.15;   // mask cut as a fraction of the maximum attribution
    std::uint64_t seed = 0;
    std::size_t tile_size = 64; // canvas for the ascent procedures

    void validate() const;
};

// Gradient ascent on an input canvas. Each step moves the canvas by
// step_size along the L2-normalized gradient and clamps to [0, 1]; a step
// that lowers the objective is rejected and the step size halved.
struct AscentResult {
    Image image; // BGR, [3, T, T]
    double initial_objective = 0.0;
    double final_objective = 0.0;
    std::size_t accepted_steps = 0;
};

// Objective: mean response of one filter of the first colour-deconvolution
// convolution (before batch norm). Throws unless the final objective is
// strictly above the initial one.
AscentResult maximize_filter_activation(Model& model, std::size_t filter, const VizOptions& options);

// Objective: pre-softmax score of `category` at output pixel (row, col), eval mode.
AscentResult maximize_output_activation(Model& model, std::size_t row, std::size_t col, std::size_t category,
                                        const VizOptions& options);

// Scalar score of a [1, 3, T, T] input, recorded on the tape when one is given.
using ScoreFn = std::function<Tensor(Tape*, const Tensor&)>;

struct Attribution {
    Image gradient; // [1, T, T]: mean gradient summed over colour channels, negatives zeroed
    Image mask;     // [1, T, T]: 1 where gradient > 0 and >= threshold * max, else 0
    Image overlay;  // input with masked-out pixels set to 0
};

// Mean input gradient over noisy copies (Gaussian, sigma * (max - min) of the image).
Attribution smoothgrad(const ScoreFn& score, const Image& image, const VizOptions& options);
Attribution smoothgrad(Model& model, const Image& image, std::size_t row, std::size_t col, std::size_t category,
                       const VizOptions& options);

Image threshold_mask(const Image& gradient, double threshold);

struct CdOutputs {
    std::array<Image, 3> raw;        // [1, T, T] each
    std::array<Image, 3> normalized; // min-max scaled to [0, 1]; constant maps become 0
};

// Runs a BGR image through the colour-deconvolution segment only, eval mode.
CdOutputs cd_segment_outputs(Model& model, const Image& image);

// Hue in degrees [0, 360) and HSV saturation of the mean colour of an RGB image.
struct HueSummary {
    double hue = 0.0;
    double saturation = 0.0;
};
HueSummary dominant_hue(const Image& rgb);
double hue_distance(double a, double b);

Tensor image_to_batch(const Image& image);
Image batch_to_image(const Tensor& batch, std::size_t index = 0);

} // namespace stainseg
