#pragma once

#include "stainseg/tape.hpp"
#include "stainseg/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

// Differentiable layer primitives. Every op takes an optional tape: when it is
// non-null and any input requires a gradient, the op records its backward
// rule. Passing nullptr runs the op as plain inference.
namespace stainseg::ops {

enum class Mode { train, eval };

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double eps = 1e-5;
    double momentum = 0.1;

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// Cross-correlation, stride 1. Output spatial size is H + 2*padding - kh + 1.
Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding);

// 2x2 kernel, stride 2 up-convolution. weight is [Cin, Cout, 2, 2].
Tensor conv_transpose2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias);

// 2x2 max pooling. Ties resolve to the first element in row-major order.
Tensor maxpool2(Tape* tape, const Tensor& input);

Tensor relu(Tape* tape, const Tensor& input);

// Per-channel normalization over (N, H, W). Train mode uses batch statistics
// (biased variance) and updates the running averages in `state`; eval mode
// normalizes with the running averages.
Tensor batchnorm(Tape* tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, Mode mode);

Tensor softmax_channels(Tape* tape, const Tensor& input);

// Sum over non-ignored pixels of w[label] * -log p[label], divided by the
// number of non-ignored pixels. All-ignored input gives exactly 0.
Tensor weighted_cross_entropy(Tape* tape, const Tensor& probs, std::span<const std::uint8_t> labels,
                              std::span<const double> class_weights, std::uint8_t ignore_id);

Tensor concat_channels(Tape* tape, const Tensor& a, const Tensor& b);

Tensor sum(Tape* tape, const Tensor& input);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
// Mean of channel `channel` over (N, H, W).
Tensor channel_mean(Tape* tape, const Tensor& input, std::size_t channel);
// The single element at flat index `index`, as a scalar.
Tensor element(Tape* tape, const Tensor& input, std::size_t index);

} // namespace stainseg::ops
