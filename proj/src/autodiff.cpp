#include "msca/autodiff.hpp"

namespace msca {

template <typename T>
void GradSink<T>::add(const Var<T>& v, Tensor<T> g) {
    if (!v.requires_grad()) return;
    require_shape(g.shape() == v.shape(), "gradient shape " + shape_str(g.shape()) +
                                               " does not match value shape " +
                                               shape_str(v.shape()));
    auto& slot = grads_[v.id()];
    if (slot) {
        *slot += g;
    } else {
        slot = std::move(g);
    }
}

template <typename T>
Tensor<T> Gradients<T>::wrt(const Var<T>& v) const {
    const auto& slot = sink_.slot(v.id());
    if (slot) return *slot;
    return Tensor<T>::zeros(v.shape());
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), false, {}});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), true, {}});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
        if (&in.tape() != this) throw std::logic_error("op mixes values from different tapes");
        needs = needs || in.requires_grad();
    }
    nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : Backward{}});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
        if (&in.tape() != this) throw std::logic_error("op mixes values from different tapes");
        needs = needs || in.requires_grad();
    }
    nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : Backward{}});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Gradients<T> Tape<T>::backward(const Var<T>& root) const {
    if (root.value().numel() != 1) {
        throw ShapeError("backward needs a scalar root, got " + shape_str(root.shape()));
    }
    GradSink<T> sink(nodes_.size());
    if (!root.requires_grad()) return Gradients<T>(std::move(sink));
    sink.slot(root.id()) = Tensor<T>::ones(root.shape());
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        auto& g = sink.slot(i);
        if (!g || !node.backward) continue;
        node.backward(*g, sink);
    }
    return Gradients<T>(std::move(sink));
}

template class GradSink<float>;
template class GradSink<double>;
template class Gradients<float>;
template class Gradients<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace msca
