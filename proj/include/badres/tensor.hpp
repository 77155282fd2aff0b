#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "badres/errors.hpp"
#include "badres/rng.hpp"

namespace badres {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

enum class OpKind {
    matmul,
    add,
    subtract,
    multiply,
    scalar_multiply,
    layer_norm,
    softmax,
    gelu,
    reshape,
    transpose,
    concat,
    slice,
    repeat_leading,
    mean,
    sum,
    cross_entropy,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::subtract: return "subtract";
        case OpKind::multiply: return "multiply";
        case OpKind::scalar_multiply: return "scalar_multiply";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::softmax: return "softmax";
        case OpKind::gelu: return "gelu";
        case OpKind::reshape: return "reshape";
        case OpKind::transpose: return "transpose";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::repeat_leading: return "repeat_leading";
        case OpKind::mean: return "mean";
        case OpKind::sum: return "sum";
        case OpKind::cross_entropy: return "cross_entropy";
    }
    return "?";
}

class Tensor;

// One recorded op. Inputs are held by handle, so the graph reachable from a
// loss tensor stays alive until the loss handle is dropped.
struct GraphNode {
    OpKind kind;
    std::vector<Tensor> inputs;
    // Reads the output's grad and accumulates into the inputs' grads.
    std::function<void(const Tensor& output)> backprop;
};

// Flat row-major float32 array with an optional grad of the same shape.
// Handles share state: copying a Tensor aliases its data and grad.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false) {
        for (std::size_t d : shape)
            if (d == 0) throw usage_error("zero dimension in shape " + shape_str(shape));
        if (shape_numel(shape) != data.size())
            throw usage_error("tensor shape " + shape_str(shape) +
                              " does not match data length " +
                              std::to_string(data.size()));
        impl_ = std::make_shared<Impl>();
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
    }

    static Tensor full(Shape shape, float value, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
    }

    static Tensor scalar(float value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<float>{value}, requires_grad);
    }

    static Tensor uniform(Shape shape, float lo, float hi, std::mt19937& g,
                          bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        std::vector<float> d(n);
        for (std::size_t i = 0; i < n; ++i) d[i] = rng::uniform_float(g, lo, hi);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    bool valid() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    const std::vector<float>& data() const { return impl_->data; }
    // In-place mutation is reserved for leaf tensors between training steps
    // (optimizer updates); recorded ops never mutate their inputs.
    std::vector<float>& mutable_data() { return impl_->data; }

    float item() const {
        if (numel() != 1) throw usage_error("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return impl_->grad.has_value(); }
    const std::vector<float>& grad() const {
        if (!impl_->grad) throw usage_error("grad accessed before backward");
        return *impl_->grad;
    }
    void zero_grad() const { impl_->grad.reset(); }

    void accumulate_grad(const std::vector<float>& g) const {
        if (g.size() != numel())
            throw usage_error("gradient length " + std::to_string(g.size()) +
                              " does not match tensor " + shape_str(shape()));
        if (!impl_->grad) impl_->grad = std::vector<float>(numel(), 0.0f);
        std::vector<float>& acc = *impl_->grad;
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }

    void seed_grad_ones() const { impl_->grad = std::vector<float>(numel(), 1.0f); }

    const std::shared_ptr<GraphNode>& node() const { return impl_->node; }
    void set_node(std::shared_ptr<GraphNode> n) { impl_->node = std::move(n); }

    // Value copy detached from any graph; never requires grad.
    Tensor detached() const {
        Tensor t(impl_->shape, impl_->data, false);
        return t;
    }

    bool all_finite() const {
        for (float v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Stable identity of the shared state, for visited sets.
    const void* id() const { return impl_.get(); }

private:
    struct Impl {
        Shape shape;
        std::vector<float> data;
        bool requires_grad = false;
        std::optional<std::vector<float>> grad;
        std::shared_ptr<GraphNode> node;
    };
    std::shared_ptr<Impl> impl_;
};

}  // namespace badres
