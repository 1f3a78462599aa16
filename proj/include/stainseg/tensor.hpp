#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stainseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 array with an optional gradient buffer.
//
// Tensor is a handle: copies alias the same storage, which is what the tape
// relies on to route gradients back to the tensors an op consumed. Use
// clone() for an independent deep copy.
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    std::vector<double>& storage() { return impl_->data; }
    const std::vector<double>& storage() const { return impl_->data; }

    double& operator[](std::size_t i) { return impl_->data[i]; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on);

    bool has_grad() const { return !impl_->grad.empty(); }
    // Allocates a zeroed gradient buffer on first use.
    std::span<double> grad();
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad();
    void drop_grad() { impl_->grad.clear(); }

    Tensor clone() const;
    bool same(const Tensor& other) const { return impl_ == other.impl_; }
    bool all_finite() const;

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// Trainable tensor plus its momentum buffer.
struct Parameter {
    std::string name;
    Tensor value;
    std::vector<double> velocity;

    Parameter() = default;
    Parameter(std::string n, Tensor v);
    Parameter deep_copy() const;
};

} // namespace stainseg
