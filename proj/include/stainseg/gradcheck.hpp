#pragma once

#include "stainseg/tape.hpp"
#include "stainseg/tensor.hpp"

#include <functional>
#include <span>
#include <string>

namespace stainseg {

struct GradCheckOptions {
    double relative_step = 1e-5;
    // Per-element absolute differences at or below this count as exact.
    double absolute_floor = 1e-8;
    // Elements with |x| below this are skipped (non-differentiable points such as relu kinks).
    double exclude_below = 0.0;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Builds a scalar from the tensors in `wrt`; called with a tape once for the
// analytic gradient and with nullptr for every finite-difference probe.
using LossFn = std::function<Tensor(Tape*)>;

// Compares reverse-mode gradients with central differences, step
// h = relative_step * max(1, |x|).
GradCheckResult grad_check(const LossFn& loss, std::span<Tensor> wrt, const GradCheckOptions& options = {});

} // namespace stainseg
