#include "stainseg/optim.hpp"

#include <stdexcept>
#include <utility>

namespace stainseg {

void sgd_momentum_step(std::span<Parameter> params, double lr, double mu)
{
    if (!(lr > 0.0))
        throw std::invalid_argument("sgd_momentum_step: learning rate must be positive");
    if (mu < 0.0 || mu >= 1.0)
        throw std::invalid_argument("sgd_momentum_step: momentum must lie in [0, 1)");
    for (const auto& p : params)
        if (!p.value.has_grad())
            throw std::invalid_argument("sgd_momentum_step: parameter '" + p.name + "' has no gradient");

    for (auto& p : params) {
        auto theta = p.value.data();
        const auto g = std::as_const(p.value).grad();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            p.velocity[i] = mu * p.velocity[i] + g[i];
            theta[i] -= lr * p.velocity[i];
        }
    }
}

void zero_grads(std::span<Parameter> params)
{
    for (auto& p : params) {
        p.value.grad();
        p.value.zero_grad();
    }
}

} // namespace stainseg
