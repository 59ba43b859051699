#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "m3tts/error.hpp"

namespace m3tts {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// One recorded value in the autodiff graph. `backward` reads this node's grad
// and accumulates into the grads of `parents`.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until something writes a gradient
    bool requires_grad = false;
    bool released = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(data.size(), T(0));
        }
        return grad;
    }
};

// Dense row-major tensor handle. Copies share the underlying node; values are
// immutable after creation apart from gradient accumulation and explicit
// parameter updates through mutable_data().
template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    BasicTensor() = default;
    explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static BasicTensor scalar(T value, bool requires_grad = false);
    static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    std::span<T> mutable_data() { return node_->data; }
    const std::vector<T>& vec() const { return node_->data; }
    T item() const;
    T at(std::size_t row, std::size_t col) const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    // Same values, no graph history, fresh node.
    BasicTensor detach(bool requires_grad = false) const;

    const char* op_name() const { return node_->op; }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across calls
// until zero_grad(); the recorded graph behind `loss` is released afterwards,
// so each forward pass can be backpropagated exactly once.
template <typename T>
void backward(const BasicTensor<T>& loss);

namespace detail {

// Creates an op output. Inputs that do not require grad are not recorded.
// Throws NumericError naming `op` if any output value is non-finite.
template <typename T>
BasicTensor<T> make_result(const char* op,
                           Shape shape,
                           std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(TensorNode<T>&)> backward_fn);

template <typename T>
BasicTensor<T> make_result(const char* op,
                           Shape shape,
                           std::vector<T> data,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(TensorNode<T>&)> backward_fn);

} // namespace detail

} // namespace m3tts
