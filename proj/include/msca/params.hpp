#pragma once

#include <map>
#include <random>
#include <string>

#include "msca/autodiff.hpp"

namespace msca {

/// Named parameter tensors. Ordered by name so serialization is canonical.
template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

/// Parameters placed on a tape, looked up by name.
template <typename T>
class BoundParams {
public:
    BoundParams() = default;

    const Var<T>& operator[](const std::string& name) const;
    bool contains(const std::string& name) const { return vars_.count(name) != 0; }
    void insert(const std::string& name, Var<T> v) { vars_[name] = v; }
    const std::map<std::string, Var<T>>& vars() const { return vars_; }

private:
    std::map<std::string, Var<T>> vars_;
};

// trainable = true records the tensors as gradient-carrying leaves.
template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ParamSet<T>& params, bool trainable);

// Gradients for every bound name, zero-filled where the root did not reach.
template <typename T>
ParamSet<T> collect_grads(const Gradients<T>& grads, const BoundParams<T>& bound);

// Gaussian init with std = gain / sqrt(fan_in).
template <typename T>
Tensor<T> init_normal(Shape shape, int64_t fan_in, double gain, std::mt19937_64& rng);

template <typename T>
ParamSet<T> cast_params(const ParamSet<double>& params);

template <typename T>
ParamSet<T> merge_params(ParamSet<T> a, const ParamSet<T>& b);

// Entries whose name starts with prefix.
template <typename T>
ParamSet<T> filter_prefix(const ParamSet<T>& params, const std::string& prefix);

}  // namespace msca
