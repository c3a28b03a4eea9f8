#include "msca/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace msca {
namespace {

double evaluate(const MultiScalarFn& f, const std::vector<Tensor<double>>& thetas) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(thetas.size());
    for (const auto& t : thetas) vars.push_back(tape.constant(t));
    const Var<double> out = f(tape, vars);
    if (out.value().numel() != 1) {
        throw ShapeError("grad_check: function output must be scalar, got " + shape_str(out.shape()));
    }
    return out.value()[0];
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const Tensor<double>& theta, const GradCheckOptions& opts) {
    MultiScalarFn wrapped = [&f](Tape<double>& tape, const std::vector<Var<double>>& vars) {
        return f(tape, vars[0]);
    };
    return grad_check(wrapped, std::vector<Tensor<double>>{theta}, opts);
}

GradCheckReport grad_check(const MultiScalarFn& f, const std::vector<Tensor<double>>& thetas,
                           const GradCheckOptions& opts) {
    for (const auto& t : thetas) {
        if (!t.all_finite()) throw std::domain_error("grad_check: non-finite parameter");
    }
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : thetas) vars.push_back(tape.parameter(t));
    const Var<double> out = f(tape, vars);
    if (out.value().numel() != 1) {
        throw ShapeError("grad_check: function output must be scalar, got " + shape_str(out.shape()));
    }
    const Gradients<double> grads = tape.backward(out);

    GradCheckReport report;
    std::mt19937_64 rng(opts.seed);
    std::vector<Tensor<double>> probe = thetas;
    for (std::size_t t = 0; t < thetas.size(); ++t) {
        const Tensor<double> analytic = grads.wrt(vars[t]);
        std::vector<int64_t> coords(static_cast<std::size_t>(thetas[t].numel()));
        std::iota(coords.begin(), coords.end(), int64_t{0});
        if (opts.max_coords > 0 && static_cast<int64_t>(coords.size()) > opts.max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(static_cast<std::size_t>(opts.max_coords));
        }
        for (const int64_t i : coords) {
            const double orig = thetas[t][i];
            probe[t][i] = orig + opts.eps;
            const double fp = evaluate(f, probe);
            probe[t][i] = orig - opts.eps;
            const double fm = evaluate(f, probe);
            probe[t][i] = orig;
            const double numeric = (fp - fm) / (2 * opts.eps);
            const double a = analytic[i];
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opts.floor});
            report.max_abs_error = std::max(report.max_abs_error, abs_err);
            report.max_rel_error = std::max(report.max_rel_error, rel);
            ++report.coords_checked;
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    return report;
}

}  // namespace msca
