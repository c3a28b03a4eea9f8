#pragma once

#include <optional>
#include <type_traits>
#include <vector>

#include "msca/autodiff.hpp"

// Differentiable primitives. Feature maps are [C,H,W]; matrices are [m,n].
// Every op validates shapes up front and throws ShapeError on mismatch.
namespace msca {

inline constexpr double kLeakySlope = 0.1;

// Optional operand that does not take part in template deduction.
template <typename T>
using OptVar = std::optional<Var<std::type_identity_t<T>>>;

// out[c,h,w] = sum_k w[c,k] x[k,h,w] + b[c]
template <typename T>
Var<T> conv1x1(const Var<T>& x, const Var<T>& w, const OptVar<T>& b = std::nullopt);

// Zero-padded 3x3 cross-correlation, w is [Cout,Cin,3,3], stride 1 or 2.
template <typename T>
Var<T> conv3x3(const Var<T>& x, const Var<T>& w, const OptVar<T>& b = std::nullopt,
               int stride = 1);

// x2 bilinear upsampling with half-pixel centers (align_corners = false).
template <typename T>
Var<T> bilinear_up2(const Var<T>& x);

// Softmax over H*W for each of the K slices.
template <typename T>
Var<T> softmax_spatial(const Var<T>& x);

// Softmax over K at each (h, w).
template <typename T>
Var<T> softmax_channel(const Var<T>& x);

// Global average pooling, [C,H,W] -> [C].
template <typename T>
Var<T> gap(const Var<T>& x);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> transpose(const Var<T>& a);

// y = W x + b for a vector x of length in; W is [out,in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const OptVar<T>& b = std::nullopt);

// max(-0.1 x, x); derivative at 0 is taken as 1.
template <typename T>
Var<T> leaky_relu(const Var<T>& x);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> tanh(const Var<T>& x);

// log(1 + e^x), stable for large |x|.
template <typename T>
Var<T> softplus(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

// Elementwise product of equal shapes.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T s);

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s);

// [C,H,W] * [1,H,W] broadcast over channels.
template <typename T>
Var<T> mul_map(const Var<T>& x, const Var<T>& map);

// V[:,k] * g[k] for V [N,K], g [K].
template <typename T>
Var<T> scale_columns(const Var<T>& v, const Var<T>& g);

// Concatenate [C_i,H,W] along channels.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs);

// Concatenate [C,H,W_i] along width.
template <typename T>
Var<T> concat_width(const std::vector<Var<T>>& xs);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

// Per-channel spatial standardization with variance epsilon.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5));

template <typename T>
Var<T> sum(const Var<T>& x);

template <typename T>
Var<T> mean(const Var<T>& x);

// mean |a - b|
template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b);

}  // namespace msca
