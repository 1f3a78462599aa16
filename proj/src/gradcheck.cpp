#include "stainseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace stainseg {

GradCheckResult grad_check(const LossFn& loss, std::span<Tensor> wrt, const GradCheckOptions& options)
{
    for (auto& t : wrt) {
        t.set_requires_grad(true);
        t.grad();
        t.zero_grad();
    }
    Tape tape;
    const Tensor value = loss(&tape);
    tape.backward(value);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(wrt.size());
    for (const auto& t : wrt)
        analytic.emplace_back(t.grad().begin(), t.grad().end());

    GradCheckResult result;
    for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
        Tensor& t = wrt[ti];
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double x0 = t[i];
            if (std::abs(x0) < options.exclude_below)
                continue;
            const double h = options.relative_step * std::max(1.0, std::abs(x0));
            t[i] = x0 + h;
            const double fp = loss(nullptr).item();
            t[i] = x0 - h;
            const double fm = loss(nullptr).item();
            t[i] = x0;

            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[ti][i];
            const double diff = std::abs(a - numeric);
            double err = 0.0;
            if (diff > options.absolute_floor)
                err = diff / std::max({std::abs(a), std::abs(numeric), options.absolute_floor});
            ++result.checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_tensor = ti;
                result.worst_index = i;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

} // namespace stainseg
