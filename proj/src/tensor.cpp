#include "stainseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stainseg {

std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<Impl>()) {}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) : impl_(std::make_shared<Impl>())
{
    for (auto d : shape)
        if (d == 0)
            throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) : impl_(std::make_shared<Impl>())
{
    for (auto d : shape)
        if (d == 0)
            throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad)
{
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

double Tensor::item() const
{
    if (numel() != 1)
        throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

void Tensor::set_requires_grad(bool on)
{
    impl_->requires_grad = on;
}

std::span<double> Tensor::grad()
{
    if (impl_->grad.size() != impl_->data.size())
        impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad()
{
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const
{
    Tensor t;
    *t.impl_ = *impl_;
    return t;
}

bool Tensor::all_finite() const
{
    return std::all_of(impl_->data.begin(), impl_->data.end(), [](double v) { return std::isfinite(v); });
}

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v))
{
    value.set_requires_grad(true);
    velocity.assign(value.numel(), 0.0);
}

Parameter Parameter::deep_copy() const
{
    Parameter p;
    p.name = name;
    p.value = value.clone();
    p.velocity = velocity;
    return p;
}

} // namespace stainseg
