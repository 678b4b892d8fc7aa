#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pmts/rng.hpp"

namespace pmts {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until a backward pass needs it
    bool requires_grad = false;
};

} // namespace detail

// Dense row-major f64 tensor. Value semantics with shared storage: copies
// alias the same buffer, which is what the tape's backward closures rely on.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

    Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
        impl_->shape = std::move(shape);
        impl_->values = std::move(values);
    }

    static Tensor zeros(Shape shape) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(Shape shape, double v) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) x = rng.uniform(lo, hi);
        return Tensor(std::move(shape), std::move(v));
    }

    static Tensor normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) x = rng.normal(mean, stddev);
        return Tensor(std::move(shape), std::move(v));
    }

    // Kaiming-style fan-in scaled uniform init: bound = sqrt(6 / fan_in).
    static Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in ? fan_in : 1));
        return uniform(std::move(shape), rng, -bound, bound);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
    std::size_t numel() const { return impl_->values.size(); }

    std::vector<double>& values() { return impl_->values; }
    const std::vector<double>& values() const { return impl_->values; }

    double& operator[](std::size_t i) { return impl_->values[i]; }
    double operator[](std::size_t i) const { return impl_->values[i]; }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return impl_->values[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }

    std::vector<double>& grad() {
        ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        if (impl_->grad.empty()) throw NumericError("grad: no gradient buffer (run backward first)");
        return impl_->grad;
    }

    void ensure_grad() {
        if (impl_->grad.size() != impl_->values.size()) impl_->grad.assign(impl_->values.size(), 0.0);
    }

    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    // Deep copy; detaches from any tape history.
    Tensor clone() const {
        Tensor t(impl_->shape, impl_->values);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    bool all_finite() const {
        for (double v : impl_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

#ifdef PMTS_CHECK_FINITE
inline void debug_check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite values produced");
}
#else
inline void debug_check_finite(const Tensor&, const char*) {}
#endif

// Reverse-mode tape. Nodes are recorded in execution order; backward replays
// the local-gradient closures in exact reverse order. One tape per forward
// pass, single writer.
class GradTape {
public:
    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // Seeds d(output)/d(output) = 1 and propagates to every recorded input.
    void backward(Tensor& output) {
        if (output.numel() != 1) {
            throw ShapeError("backward: output " + shape_str(output.shape()) + " is not scalar");
        }
        output.ensure_grad();
        output.grad()[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

} // namespace pmts
