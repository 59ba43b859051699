#include "m3tts/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "m3tts/rng.hpp"

namespace m3tts {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    for (auto v : data) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite value in tensor data");
        }
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
    return from_data(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) {
        v = static_cast<T>(rng.normal() * stddev);
    }
    return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return node_->shape[axis];
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::size_t row, std::size_t col) const {
    if (rank() != 2 || row >= dim(0) || col >= dim(1)) {
        throw ShapeError("at(" + std::to_string(row) + "," + std::to_string(col) + ") on shape " +
                         shape_str(shape()));
    }
    return node_->data[row * dim(1) + col];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach(bool requires_grad) const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
    if (!loss.defined()) {
        throw UsageError("backward() on an undefined tensor");
    }
    if (loss.numel() != 1 || loss.rank() != 0) {
        throw UsageError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    auto* root = loss.node();
    if (!root->requires_grad) {
        throw UsageError("backward() on a loss that does not depend on any parameter");
    }
    if (root->released) {
        throw UsageError("backward() called twice on the same graph; run the forward pass again");
    }

    // Iterative post-order DFS; `order` ends up topologically sorted with the
    // root last.
    using Node = TensorNode<T>;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) {
            node->backward(*node);
        }
    }

    for (Node* node : order) {
        if (!node->parents.empty() || node->backward) {
            node->backward = nullptr;
            node->parents.clear();
            node->grad.clear();
            node->released = true;
        }
    }
}

namespace detail {

template <typename T>
BasicTensor<T> make_result(const char* op,
                           Shape shape,
                           std::vector<T> data,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(TensorNode<T>&)> backward_fn) {
    for (auto v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value in output of ") + op);
        }
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool any = false;
    for (const auto& in : inputs) {
        if (in.defined() && in.requires_grad()) {
            any = true;
        }
    }
    if (any) {
        node->requires_grad = true;
        for (const auto& in : inputs) {
            node->parents.push_back(in.defined() ? in.node_ptr() : nullptr);
        }
        node->backward = std::move(backward_fn);
    }
    return BasicTensor<T>(std::move(node));
}

template <typename T>
BasicTensor<T> make_result(const char* op,
                           Shape shape,
                           std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(TensorNode<T>&)> backward_fn) {
    return make_result<T>(op, std::move(shape), std::move(data), std::vector<BasicTensor<T>>(inputs),
                          std::move(backward_fn));
}

template BasicTensor<float> make_result(const char*, Shape, std::vector<float>,
                                        std::initializer_list<BasicTensor<float>>,
                                        std::function<void(TensorNode<float>&)>);
template BasicTensor<double> make_result(const char*, Shape, std::vector<double>,
                                         std::initializer_list<BasicTensor<double>>,
                                         std::function<void(TensorNode<double>&)>);
template BasicTensor<float> make_result(const char*, Shape, std::vector<float>,
                                        const std::vector<BasicTensor<float>>&,
                                        std::function<void(TensorNode<float>&)>);
template BasicTensor<double> make_result(const char*, Shape, std::vector<double>,
                                         const std::vector<BasicTensor<double>>&,
                                         std::function<void(TensorNode<double>&)>);

} // namespace detail

template class BasicTensor<float>;
template class BasicTensor<double>;
template void backward(const BasicTensor<float>&);
template void backward(const BasicTensor<double>&);

} // namespace m3tts
