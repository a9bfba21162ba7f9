#pragma once

// Dense tensors with tape-free reverse-mode differentiation. Every op that
// sees an input with requires_grad records its parents and a backward
// closure on the result node; Tensor::backward() walks that DAG in reverse
// topological order. Parameters are leaf nodes whose gradient buffer
// persists across passes until zero_grad().

#include <algorithm>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mvheat/error.hpp"

namespace mvheat {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<T>& grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

/// Thread-local switch that suppresses graph recording (eval passes).
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool on = true;
        return on;
    }
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() : node_(std::make_shared<Node<T>>()) {}

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        if (numel(shape) != values.size())
            throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                                 std::to_string(numel(shape)) + " elements, got " +
                                 std::to_string(values.size()));
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    static Tensor from_node(std::shared_ptr<Node<T>> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const T> data() const { return node_->value; }
    /// Mutable access for construction and optimizer updates only.
    std::span<T> mutable_data() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }
    std::vector<T> to_vector() const { return node_->value; }

    std::span<const T> grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }

    T item() const {
        if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    T operator[](std::size_t i) const { return node_->value[i]; }

    const std::shared_ptr<Node<T>>& node() const { return node_; }
    const char* op_name() const { return node_->op; }

    /// Backpropagate from this tensor, seeding d(this)/d(this) = 1 per element.
    void backward() const {
        if (!node_->requires_grad) return;
        std::vector<T> seed(size(), T(1));
        backward(seed);
    }

    void backward(std::span<const T> seed) const {
        if (!node_->requires_grad) return;
        if (seed.size() != size()) throw DimensionError("backward: seed size mismatch");
        auto order = topo_order();
        auto& g = node_->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>& n = **it;
            if (n.backward_fn && n.grad.size() == n.value.size()) n.backward_fn(n);
        }
    }

private:
    std::vector<Node<T>*> topo_order() const {
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node<T>* p = n->parents[next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<Node<T>> node_;
};

/// A trainable leaf: value plus a gradient buffer of identical shape.
template <class T>
class Parameter {
public:
    Parameter() = default;
    Parameter(std::string name, Shape shape, std::vector<T> values)
        : name_(std::move(name)), tensor_(std::move(shape), std::move(values), true) {
        tensor_.node()->grad.assign(tensor_.size(), T(0));
    }
    Parameter(std::string name, Shape shape, T fill)
        : Parameter(std::move(name), shape, std::vector<T>(numel(shape), fill)) {}

    const std::string& name() const { return name_; }
    const Shape& shape() const { return tensor_.shape(); }
    std::size_t size() const { return tensor_.size(); }

    /// Graph handle; ops taking it accumulate into this parameter's gradient.
    const Tensor<T>& tensor() const { return tensor_; }
    operator const Tensor<T>&() const { return tensor_; }

    std::span<T> value() { return tensor_.mutable_data(); }
    std::span<const T> value() const { return tensor_.data(); }
    std::span<T> gradient() { return tensor_.node()->grad_buffer(); }
    std::span<const T> gradient() const { return tensor_.node()->grad; }

    void zero_grad() { std::fill(gradient().begin(), gradient().end(), T(0)); }

private:
    std::string name_;
    Tensor<T> tensor_;
};

namespace detail {

inline bool any_requires_grad() { return false; }
template <class T, class... Rest>
bool any_requires_grad(const Tensor<T>& t, const Rest&... rest) {
    return t.requires_grad() || any_requires_grad(rest...);
}

/// Gradient buffer of the i-th parent, or nullptr when it does not track gradients.
template <class T>
T* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = *self.parents[i];
    return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

}  // namespace detail

/// Build an op result; records the backward closure when any input tracks gradients.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      const char* op, Backward&& backward) {
    Tensor<T> out(std::move(shape), std::move(value));
    bool track = false;
    if (GradMode::enabled())
        for (const auto& in : inputs) track = track || in.requires_grad();
    if (track) {
        auto& n = *out.node();
        n.requires_grad = true;
        n.op = op;
        n.parents.reserve(inputs.size());
        for (const auto& in : inputs) n.parents.push_back(in.node());
        n.backward_fn = std::forward<Backward>(backward);
    }
    return out;
}

}  // namespace mvheat
