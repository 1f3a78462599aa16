#include "stainseg/tape.hpp"

#include <stdexcept>

namespace stainseg {

void Tape::record(std::vector<Tensor> inputs, Tensor output, Rule rule)
{
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(rule)});
}

void Tape::backward(const Tensor& loss)
{
    if (loss.numel() != 1)
        throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));

    for (auto& e : entries_) {
        e.output.grad();
        e.output.zero_grad();
    }
    Tensor seed = loss;
    seed.grad()[0] += 1.0;

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
        it->rule();
}

} // namespace stainseg
