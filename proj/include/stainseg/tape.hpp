#pragma once

#include "stainseg/tensor.hpp"

#include <functional>
#include <vector>

namespace stainseg {

// Records differentiable operations in execution order so that backward()
// can replay their gradient rules in reverse.
//
// Ops write into the gradient buffers of their inputs by accumulation. On
// every backward() call the gradients of recorded outputs (intermediates) are
// reset before the replay, while leaf gradients keep accumulating until the
// caller zeroes them. Two backward() calls therefore give exactly twice the
// leaf gradients of one.
class Tape {
public:
    using Rule = std::function<void()>;

    void record(std::vector<Tensor> inputs, Tensor output, Rule rule);
    void backward(const Tensor& loss);
    void clear() { entries_.clear(); }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

private:
    struct Entry {
        std::vector<Tensor> inputs;
        Tensor output;
        Rule rule;
    };
    std::vector<Entry> entries_;
};

} // namespace stainseg
