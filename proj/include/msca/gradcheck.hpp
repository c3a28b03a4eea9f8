#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "msca/autodiff.hpp"

namespace msca {

struct GradCheckOptions {
    double eps = 1e-4;
    double tol = 1e-5;
    // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
    double floor = 1e-3;
    // Coordinates probed per tensor; <= 0 probes every coordinate.
    int64_t max_coords = 0;
    uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_error = 0;
    double max_abs_error = 0;
    int64_t coords_checked = 0;
    bool passed = false;
};

using ScalarFn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;
using MultiScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Compares reverse-mode gradients with central differences. f must return a
// one-element value; anything else throws ShapeError.
GradCheckReport grad_check(const ScalarFn& f, const Tensor<double>& theta,
                           const GradCheckOptions& opts = {});

GradCheckReport grad_check(const MultiScalarFn& f, const std::vector<Tensor<double>>& thetas,
                           const GradCheckOptions& opts = {});

}  // namespace msca
