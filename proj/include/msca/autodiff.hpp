#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "msca/tensor.hpp"

namespace msca {

template <typename T>
class Tape;
template <typename T>
class GradSink;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    int64_t dim(int64_t i) const { return value().dim(i); }
    bool requires_grad() const;
    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Accumulates gradients during the backward sweep.
template <typename T>
class GradSink {
public:
    explicit GradSink(std::size_t n) : grads_(n) {}

    // Adds g into the gradient of v. No-op for values that do not require grad.
    void add(const Var<T>& v, Tensor<T> g);

    std::optional<Tensor<T>>& slot(std::size_t id) { return grads_[id]; }
    const std::optional<Tensor<T>>& slot(std::size_t id) const { return grads_[id]; }

private:
    std::vector<std::optional<Tensor<T>>> grads_;
};

/// Gradients of a scalar root w.r.t. every recorded value that requires grad.
template <typename T>
class Gradients {
public:
    explicit Gradients(GradSink<T> sink) : sink_(std::move(sink)) {}

    bool has(const Var<T>& v) const { return sink_.slot(v.id()).has_value(); }
    // Zero tensor of v's shape when no gradient reached v.
    Tensor<T> wrt(const Var<T>& v) const;

private:
    GradSink<T> sink_;
};

/// Reverse-mode tape. Primitives append nodes in execution order, so the
/// node list is already a topological order and backward walks it in reverse.
template <typename T>
class Tape {
public:
    using Backward = std::function<void(const Tensor<T>& grad_out, GradSink<T>& sink)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> parameter(Tensor<T> value);

    // Records an op output. The backward closure is dropped when no input
    // requires grad.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward);
    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward);

    // root must hold exactly one element.
    Gradients<T> backward(const Var<T>& root) const;

    std::size_t size() const { return nodes_.size(); }
    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

private:
    struct Node {
        Tensor<T> value;
        bool requires_grad = false;
        Backward backward;
    };
    std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape_->requires_grad(id_);
}

}  // namespace msca
