#pragma once

#include <cstdint>
#include <vector>

#include "msca/selfsup.hpp"

namespace msca {

// Interpolation factors are clamped into [eps, 1 - eps] so the logit bias stays finite.
inline constexpr double kInterpEps = 1e-4;
double clamp_factor(double a);

template <typename T>
struct Exemplar {
    Tensor<T> image;  // [3,H,W]
    LabelMap labels;
};

template <typename T>
struct InterpResult {
    Tensor<T> image;
    std::vector<Tensor<T>> joint_alpha;  // per scale [K, Hs, 2 Ws]: exemplar 2 left, exemplar 3 right
    std::vector<Tensor<T>> gate;         // per scale [K], a g2 + (1 - a) g3
    std::vector<Tensor<T>> bank;         // per scale [N, K], before gating
};

// Both exemplars attended jointly: exemplar 2 logits get + log(a / (1 - a)),
// features and logits are laid side by side, one softmax over the doubled
// domain, gates mixed linearly. a -> 1 ignores exemplar 3.
template <typename T>
InterpResult<T> interpolate_styles(const GeneratorModel<T>& model, const LabelMap& c1, const Exemplar<T>& ex2,
                                   const Exemplar<T>& ex3, double a);

// Per target pixel: w * (V2~ beta) + (1 - w) * (V3~ beta). weight is [1,Ht,Wt]
// in [0,1] at the target extent and resized for coarser scales.
template <typename T>
Tensor<T> spatial_interpolate(const GeneratorModel<T>& model, const LabelMap& c1, const Exemplar<T>& ex2,
                              const Exemplar<T>& ex3, const Tensor<T>& weight);

// Horizontal 0 -> 1 ramp (left exemplar 3, right exemplar 2).
template <typename T>
Tensor<T> horizontal_ramp(int64_t height, int64_t width);

inline constexpr int kExtrapolationRandomSites = 10;

template <typename T>
struct ExtrapolationResult {
    Tensor<T> image;          // [3, 2P, 2P]
    Tensor<double> weight;    // accumulated blend weight, [1, 2P, 2P]
    std::vector<Rect> sites;  // 4 corners then the random sites
    Rect center;
};

// Separable Hann profile sin^2(pi (i + 0.5) / n); positive everywhere.
std::vector<double> hann_window(int64_t n);

// Grows a P x P exemplar to the 2P x 2P global label map: one patch per site
// synthesized with the exemplar, feathered, normalized, then the center crop
// pasted back verbatim.
template <typename T>
ExtrapolationResult<T> extrapolate(const GeneratorModel<T>& model, const Exemplar<T>& center,
                                   const LabelMap& global_label, uint64_t seed);

// Mean |finite difference| across patch and center borders divided by the
// mean over all other neighbouring pixel pairs.
template <typename T>
double seam_ratio(const ExtrapolationResult<T>& r);

// n x n cells; cell (r, c) renders scene r's labels in scene c's style.
template <typename T>
Tensor<T> style_swap_grid(const GeneratorModel<T>& model, const std::vector<Exemplar<T>>& scenes);

}  // namespace msca
