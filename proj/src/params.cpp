#include "msca/params.hpp"

#include <cmath>

namespace msca {

template <typename T>
const Var<T>& BoundParams<T>::operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return it->second;
}

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ParamSet<T>& params, bool trainable) {
    BoundParams<T> bound;
    for (const auto& [name, t] : params) {
        bound.insert(name, trainable ? tape.parameter(t) : tape.constant(t));
    }
    return bound;
}

template <typename T>
ParamSet<T> collect_grads(const Gradients<T>& grads, const BoundParams<T>& bound) {
    ParamSet<T> out;
    for (const auto& [name, v] : bound.vars()) out.emplace(name, grads.wrt(v));
    return out;
}

template <typename T>
Tensor<T> init_normal(Shape shape, int64_t fan_in, double gain, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1))));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
ParamSet<T> cast_params(const ParamSet<double>& params) {
    ParamSet<T> out;
    for (const auto& [name, t] : params) out.emplace(name, t.template cast<T>());
    return out;
}

template <typename T>
ParamSet<T> merge_params(ParamSet<T> a, const ParamSet<T>& b) {
    for (const auto& [name, t] : b) a.insert_or_assign(name, t);
    return a;
}

template <typename T>
ParamSet<T> filter_prefix(const ParamSet<T>& params, const std::string& prefix) {
    ParamSet<T> out;
    for (const auto& [name, t] : params) {
        if (name.compare(0, prefix.size(), prefix) == 0) out.emplace(name, t);
    }
    return out;
}

template class BoundParams<float>;
template class BoundParams<double>;
template BoundParams<float> bind_params(Tape<float>&, const ParamSet<float>&, bool);
template BoundParams<double> bind_params(Tape<double>&, const ParamSet<double>&, bool);
template ParamSet<float> collect_grads(const Gradients<float>&, const BoundParams<float>&);
template ParamSet<double> collect_grads(const Gradients<double>&, const BoundParams<double>&);
template Tensor<float> init_normal(Shape, int64_t, double, std::mt19937_64&);
template Tensor<double> init_normal(Shape, int64_t, double, std::mt19937_64&);
template ParamSet<float> cast_params(const ParamSet<double>&);
template ParamSet<double> cast_params(const ParamSet<double>&);
template ParamSet<float> merge_params(ParamSet<float>, const ParamSet<float>&);
template ParamSet<double> merge_params(ParamSet<double>, const ParamSet<double>&);
template ParamSet<float> filter_prefix(const ParamSet<float>&, const std::string&);
template ParamSet<double> filter_prefix(const ParamSet<double>&, const std::string&);

}  // namespace msca
