#pragma once

#include "stainseg/tensor.hpp"

#include <span>

namespace stainseg {

// Heavy-ball momentum: v <- mu*v + g; theta <- theta - lr*v.
// Throws if a parameter has no gradient buffer.
void sgd_momentum_step(std::span<Parameter> params, double lr, double mu);

void zero_grads(std::span<Parameter> params);

} // namespace stainseg
