#include "msca/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace msca {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
CMap<T> as_mat(const Tensor<T>& t, int64_t rows, int64_t cols) {
    return CMap<T>(t.ptr(), rows, cols);
}
template <typename T>
MMap<T> as_mat(Tensor<T>& t, int64_t rows, int64_t cols) {
    return MMap<T>(t.ptr(), rows, cols);
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
    require_shape(s.size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        " input, got " + shape_str(s));
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw std::domain_error(std::string(op) + ": non-finite input");
}

// ---- conv3x3 im2col helpers -------------------------------------------------

int64_t conv_out_extent(int64_t n, int stride) { return (n - 1) / stride + 1; }

template <typename T>
void im2col3x3(const T* x, int64_t cin, int64_t h, int64_t w, int stride, T* cols) {
    const int64_t ho = conv_out_extent(h, stride);
    const int64_t wo = conv_out_extent(w, stride);
    const int64_t plane = ho * wo;
    for (int64_t c = 0; c < cin; ++c) {
        const T* xc = x + c * h * w;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* row = cols + ((c * 9) + ky * 3 + kx) * plane;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * stride + ky - 1;
                    T* dst = row + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    const T* src = xc + iy * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * stride + kx - 1;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im3x3(const T* cols, int64_t cin, int64_t h, int64_t w, int stride, T* x) {
    const int64_t ho = conv_out_extent(h, stride);
    const int64_t wo = conv_out_extent(w, stride);
    const int64_t plane = ho * wo;
    for (int64_t c = 0; c < cin; ++c) {
        T* xc = x + c * h * w;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = cols + ((c * 9) + ky * 3 + kx) * plane;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const T* src = row + oy * wo;
                    T* dst = xc + iy * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// ---- bilinear x2 taps ---------------------------------------------------------

struct Tap {
    int64_t i0, i1;
    double w0, w1;
};

std::vector<Tap> up2_taps(int64_t n) {
    std::vector<Tap> taps(static_cast<std::size_t>(2 * n));
    for (int64_t o = 0; o < 2 * n; ++o) {
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<int64_t>(std::floor(src));
        if (i0 > n - 1) i0 = n - 1;
        const int64_t i1 = std::min(i0 + 1, n - 1);
        const double l1 = src - static_cast<double>(i0);
        taps[static_cast<std::size_t>(o)] = Tap{i0, i1, 1.0 - l1, l1};
    }
    return taps;
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = fwd(xv[i]);
    return x.tape().record(std::move(out), {x}, [x, deriv](const Tensor<T>& g, GradSink<T>& sink) {
        const Tensor<T>& xv = x.value();
        Tensor<T> gx(xv.shape());
        for (int64_t i = 0; i < xv.numel(); ++i) gx[i] = g[i] * deriv(xv[i]);
        sink.add(x, std::move(gx));
    });
}

}  // namespace

// Plain left-to-right sum: Eigen's vectorized reduction order depends on the
// buffer alignment, which breaks run-to-run bit reproducibility.
template <typename T>
T row_sum(const Tensor<T>& g, int64_t row, int64_t n) {
    const T* p = g.ptr() + row * n;
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += p[i];
    return acc;
}

template <typename T>
Var<T> conv1x1(const Var<T>& x, const Var<T>& w, const OptVar<T>& b) {
    require_rank(x.shape(), 3, "conv1x1");
    require_rank(w.shape(), 2, "conv1x1 kernel");
    const int64_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0);
    require_shape(w.dim(1) == cin, "conv1x1: kernel " + shape_str(w.shape()) +
                                       " expects " + std::to_string(w.dim(1)) +
                                       " input channels, got input " + shape_str(x.shape()));
    if (b) require_shape(b->shape() == Shape{cout}, "conv1x1: bias shape " + shape_str(b->shape()));
    const int64_t hw = h * wd;
    Tensor<T> out({cout, h, wd});
    auto om = as_mat(out, cout, hw);
    om.noalias() = as_mat(w.value(), cout, cin) * as_mat(x.value(), cin, hw);
    if (b) {
        for (int64_t c = 0; c < cout; ++c) om.row(c).array() += b->value()[c];
    }
    std::vector<Var<T>> inputs{x, w};
    if (b) inputs.push_back(*b);
    return x.tape().record(std::move(out), inputs, [x, w, b, cin, cout, hw](const Tensor<T>& g, GradSink<T>& sink) {
        auto gm = as_mat(g, cout, hw);
        if (x.requires_grad()) {
            Tensor<T> gx(x.shape());
            as_mat(gx, cin, hw).noalias() = as_mat(w.value(), cout, cin).transpose() * gm;
            sink.add(x, std::move(gx));
        }
        if (w.requires_grad()) {
            Tensor<T> gw(w.shape());
            as_mat(gw, cout, cin).noalias() = gm * as_mat(x.value(), cin, hw).transpose();
            sink.add(w, std::move(gw));
        }
        if (b && b->requires_grad()) {
            Tensor<T> gb({cout});
            for (int64_t c = 0; c < cout; ++c) gb[c] = row_sum(g, c, hw);
            sink.add(*b, std::move(gb));
        }
    });
}

template <typename T>
Var<T> conv3x3(const Var<T>& x, const Var<T>& w, const OptVar<T>& b, int stride) {
    require_rank(x.shape(), 3, "conv3x3");
    require_rank(w.shape(), 4, "conv3x3 kernel");
    require_shape(stride == 1 || stride == 2, "conv3x3: stride must be 1 or 2");
    const int64_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0);
    require_shape(w.dim(1) == cin && w.dim(2) == 3 && w.dim(3) == 3,
                  "conv3x3: kernel " + shape_str(w.shape()) + " incompatible with input " +
                      shape_str(x.shape()));
    if (b) require_shape(b->shape() == Shape{cout}, "conv3x3: bias shape " + shape_str(b->shape()));
    const int64_t ho = conv_out_extent(h, stride), wo = conv_out_extent(wd, stride);
    const int64_t plane = ho * wo, kdim = cin * 9;

    Tensor<T> cols({kdim, plane});
    im2col3x3(x.value().ptr(), cin, h, wd, stride, cols.ptr());
    Tensor<T> out({cout, ho, wo});
    auto om = as_mat(out, cout, plane);
    om.noalias() = as_mat(w.value(), cout, kdim) * as_mat(cols, kdim, plane);
    if (b) {
        for (int64_t c = 0; c < cout; ++c) om.row(c).array() += b->value()[c];
    }
    std::vector<Var<T>> inputs{x, w};
    if (b) inputs.push_back(*b);
    return x.tape().record(
        std::move(out), inputs,
        [x, w, b, cin, h, wd, cout, stride, plane, kdim](const Tensor<T>& g, GradSink<T>& sink) {
            auto gm = as_mat(g, cout, plane);
            if (w.requires_grad()) {
                Tensor<T> cols({kdim, plane});
                im2col3x3(x.value().ptr(), cin, h, wd, stride, cols.ptr());
                Tensor<T> gw(w.shape());
                as_mat(gw, cout, kdim).noalias() = gm * as_mat(cols, kdim, plane).transpose();
                sink.add(w, std::move(gw));
            }
            if (x.requires_grad()) {
                Tensor<T> gcols({kdim, plane});
                as_mat(gcols, kdim, plane).noalias() = as_mat(w.value(), cout, kdim).transpose() * gm;
                Tensor<T> gx(x.shape());
                col2im3x3(gcols.ptr(), cin, h, wd, stride, gx.ptr());
                sink.add(x, std::move(gx));
            }
            if (b && b->requires_grad()) {
                Tensor<T> gb({cout});
                for (int64_t c = 0; c < cout; ++c) gb[c] = row_sum(g, c, plane);
                sink.add(*b, std::move(gb));
            }
        });
}

template <typename T>
Var<T> bilinear_up2(const Var<T>& x) {
    require_rank(x.shape(), 3, "bilinear_up2");
    const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    require_shape(h >= 1 && w >= 1, "bilinear_up2: empty spatial extent");
    const auto ty = up2_taps(h), tx = up2_taps(w);
    const Tensor<T>& xv = x.value();
    Tensor<T> out({c, 2 * h, 2 * w});
    for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t oy = 0; oy < 2 * h; ++oy) {
            const Tap& a = ty[static_cast<std::size_t>(oy)];
            for (int64_t ox = 0; ox < 2 * w; ++ox) {
                const Tap& b = tx[static_cast<std::size_t>(ox)];
                const double v = a.w0 * (b.w0 * xv.at(ch, a.i0, b.i0) + b.w1 * xv.at(ch, a.i0, b.i1)) +
                                 a.w1 * (b.w0 * xv.at(ch, a.i1, b.i0) + b.w1 * xv.at(ch, a.i1, b.i1));
                out.at(ch, oy, ox) = static_cast<T>(v);
            }
        }
    }
    return x.tape().record(std::move(out), {x}, [x, c, h, w, ty, tx](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> gx(x.shape());
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t oy = 0; oy < 2 * h; ++oy) {
                const Tap& a = ty[static_cast<std::size_t>(oy)];
                for (int64_t ox = 0; ox < 2 * w; ++ox) {
                    const Tap& b = tx[static_cast<std::size_t>(ox)];
                    const T go = g.at(ch, oy, ox);
                    gx.at(ch, a.i0, b.i0) += static_cast<T>(a.w0 * b.w0) * go;
                    gx.at(ch, a.i0, b.i1) += static_cast<T>(a.w0 * b.w1) * go;
                    gx.at(ch, a.i1, b.i0) += static_cast<T>(a.w1 * b.w0) * go;
                    gx.at(ch, a.i1, b.i1) += static_cast<T>(a.w1 * b.w1) * go;
                }
            }
        }
        sink.add(x, std::move(gx));
    });
}

template <typename T>
Var<T> softmax_spatial(const Var<T>& x) {
    require_rank(x.shape(), 3, "softmax_spatial");
    require_finite(x.value(), "softmax_spatial");
    const int64_t k = x.dim(0), n = x.dim(1) * x.dim(2);
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (int64_t s = 0; s < k; ++s) {
        const T* src = xv.ptr() + s * n;
        T* dst = out.ptr() + s * n;
        const T m = *std::max_element(src, src + n);
        T total = 0;
        for (int64_t i = 0; i < n; ++i) total += (dst[i] = std::exp(src[i] - m));
        for (int64_t i = 0; i < n; ++i) dst[i] /= total;
    }
    Tape<T>& tape = x.tape();
    const std::size_t out_id = tape.size();
    return tape.record(std::move(out), {x}, [x, k, n, &tape, out_id](const Tensor<T>& g, GradSink<T>& sink) {
        const Tensor<T>& y = tape.value(out_id);
        Tensor<T> gx(x.shape());
        for (int64_t s = 0; s < k; ++s) {
            T dot = 0;
            for (int64_t i = 0; i < n; ++i) dot += g[s * n + i] * y[s * n + i];
            for (int64_t i = 0; i < n; ++i) gx[s * n + i] = y[s * n + i] * (g[s * n + i] - dot);
        }
        sink.add(x, std::move(gx));
    });
}

template <typename T>
Var<T> softmax_channel(const Var<T>& x) {
    require_rank(x.shape(), 3, "softmax_channel");
    require_finite(x.value(), "softmax_channel");
    const int64_t k = x.dim(0), n = x.dim(1) * x.dim(2);
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (int64_t p = 0; p < n; ++p) {
        T m = xv[p];
        for (int64_t s = 1; s < k; ++s) m = std::max(m, xv[s * n + p]);
        T total = 0;
        for (int64_t s = 0; s < k; ++s) total += (out[s * n + p] = std::exp(xv[s * n + p] - m));
        for (int64_t s = 0; s < k; ++s) out[s * n + p] /= total;
    }
    Tape<T>& tape = x.tape();
    const std::size_t out_id = tape.size();
    return tape.record(std::move(out), {x}, [x, k, n, &tape, out_id](const Tensor<T>& g, GradSink<T>& sink) {
        const Tensor<T>& y = tape.value(out_id);
        Tensor<T> gx(x.shape());
        for (int64_t p = 0; p < n; ++p) {
            T dot = 0;
            for (int64_t s = 0; s < k; ++s) dot += g[s * n + p] * y[s * n + p];
            for (int64_t s = 0; s < k; ++s) gx[s * n + p] = y[s * n + p] * (g[s * n + p] - dot);
        }
        sink.add(x, std::move(gx));
    });
}

template <typename T>
Var<T> gap(const Var<T>& x) {
    require_rank(x.shape(), 3, "gap");
    const int64_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    require_shape(n > 0, "gap: empty spatial extent");
    Tensor<T> out({c});
    for (int64_t ch = 0; ch < c; ++ch) {
        T s = 0;
        for (int64_t i = 0; i < n; ++i) s += x.value()[ch * n + i];
        out[ch] = s / static_cast<T>(n);
    }
    return x.tape().record(std::move(out), {x}, [x, c, n](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> gx(x.shape());
        for (int64_t ch = 0; ch < c; ++ch) {
            const T v = g[ch] / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i) gx[ch * n + i] = v;
        }
        sink.add(x, std::move(gx));
    });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_rank(a.shape(), 2, "matmul lhs");
    require_rank(b.shape(), 2, "matmul rhs");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require_shape(b.dim(0) == k, "matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                     shape_str(b.shape()));
    Tensor<T> out({m, n});
    as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
    return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor<T>& g, GradSink<T>& sink) {
        auto gm = as_mat(g, m, n);
        if (a.requires_grad()) {
            Tensor<T> ga(a.shape());
            as_mat(ga, m, k).noalias() = gm * as_mat(b.value(), k, n).transpose();
            sink.add(a, std::move(ga));
        }
        if (b.requires_grad()) {
            Tensor<T> gb(b.shape());
            as_mat(gb, k, n).noalias() = as_mat(a.value(), m, k).transpose() * gm;
            sink.add(b, std::move(gb));
        }
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    require_rank(a.shape(), 2, "transpose");
    const int64_t m = a.dim(0), n = a.dim(1);
    Tensor<T> out({n, m});
    as_mat(out, n, m) = as_mat(a.value(), m, n).transpose();
    return a.tape().record(std::move(out), {a}, [a, m, n](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> ga(a.shape());
        as_mat(ga, m, n) = as_mat(g, n, m).transpose();
        sink.add(a, std::move(ga));
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const OptVar<T>& b) {
    require_rank(x.shape(), 1, "linear input");
    require_rank(w.shape(), 2, "linear weight");
    const int64_t in = x.dim(0), outn = w.dim(0);
    require_shape(w.dim(1) == in, "linear: weight " + shape_str(w.shape()) + " vs input " +
                                      shape_str(x.shape()));
    if (b) require_shape(b->shape() == Shape{outn}, "linear: bias shape " + shape_str(b->shape()));
    Tensor<T> out({outn});
    for (int64_t o = 0; o < outn; ++o) {
        T s = b ? b->value()[o] : T(0);
        for (int64_t i = 0; i < in; ++i) s += w.value()[o * in + i] * x.value()[i];
        out[o] = s;
    }
    std::vector<Var<T>> inputs{x, w};
    if (b) inputs.push_back(*b);
    return x.tape().record(std::move(out), inputs, [x, w, b, in, outn](const Tensor<T>& g, GradSink<T>& sink) {
        if (x.requires_grad()) {
            Tensor<T> gx(x.shape());
            for (int64_t o = 0; o < outn; ++o)
                for (int64_t i = 0; i < in; ++i) gx[i] += w.value()[o * in + i] * g[o];
            sink.add(x, std::move(gx));
        }
        if (w.requires_grad()) {
            Tensor<T> gw(w.shape());
            for (int64_t o = 0; o < outn; ++o)
                for (int64_t i = 0; i < in; ++i) gw[o * in + i] = g[o] * x.value()[i];
            sink.add(w, std::move(gw));
        }
        if (b && b->requires_grad()) sink.add(*b, g);
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x) {
    const T slope = static_cast<T>(kLeakySlope);
    return unary(
        x, [slope](T v) { return std::max(-slope * v, v); },
        [slope](T v) { return v >= 0 ? T(1) : -slope; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return unary(
        x, [](T v) { return v > 0 ? v : T(0); }, [](T v) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    return unary(
        x, [](T v) { return stable_sigmoid(v); },
        [](T v) {
            const T s = stable_sigmoid(v);
            return s * (T(1) - s);
        });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    return unary(
        x, [](T v) { return std::tanh(v); },
        [](T v) {
            const T t = std::tanh(v);
            return T(1) - t * t;
        });
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
    return unary(
        x, [](T v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](T v) { return stable_sigmoid(v); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_shape(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    out += b.value();
    return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor<T>& g, GradSink<T>& sink) {
        sink.add(a, g);
        sink.add(b, g);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_shape(a.shape() == b.shape(), "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor<T>& g, GradSink<T>& sink) {
        sink.add(a, g);
        if (b.requires_grad()) {
            Tensor<T> gb = g;
            gb *= T(-1);
            sink.add(b, std::move(gb));
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_shape(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor<T>& g, GradSink<T>& sink) {
        if (a.requires_grad()) {
            Tensor<T> ga(a.shape());
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] = g[i] * b.value()[i];
            sink.add(a, std::move(ga));
        }
        if (b.requires_grad()) {
            Tensor<T> gb(b.shape());
            for (int64_t i = 0; i < gb.numel(); ++i) gb[i] = g[i] * a.value()[i];
            sink.add(b, std::move(gb));
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> out = x.value();
    out *= s;
    return x.tape().record(std::move(out), {x}, [x, s](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> gx = g;
        gx *= s;
        sink.add(x, std::move(gx));
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
    Tensor<T> out = x.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    return x.tape().record(std::move(out), {x}, [x](const Tensor<T>& g, GradSink<T>& sink) { sink.add(x, g); });
}

template <typename T>
Var<T> mul_map(const Var<T>& x, const Var<T>& map) {
    require_rank(x.shape(), 3, "mul_map");
    require_shape(map.shape() == Shape{1, x.dim(1), x.dim(2)},
                  "mul_map: map " + shape_str(map.shape()) + " vs features " + shape_str(x.shape()));
    const int64_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    Tensor<T> out(x.shape());
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < n; ++i) out[ch * n + i] = x.value()[ch * n + i] * map.value()[i];
    return x.tape().record(std::move(out), {x, map}, [x, map, c, n](const Tensor<T>& g, GradSink<T>& sink) {
        if (x.requires_grad()) {
            Tensor<T> gx(x.shape());
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t i = 0; i < n; ++i) gx[ch * n + i] = g[ch * n + i] * map.value()[i];
            sink.add(x, std::move(gx));
        }
        if (map.requires_grad()) {
            Tensor<T> gm(map.shape());
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t i = 0; i < n; ++i) gm[i] += g[ch * n + i] * x.value()[ch * n + i];
            sink.add(map, std::move(gm));
        }
    });
}

template <typename T>
Var<T> scale_columns(const Var<T>& v, const Var<T>& g) {
    require_rank(v.shape(), 2, "scale_columns");
    const int64_t n = v.dim(0), k = v.dim(1);
    require_shape(g.shape() == Shape{k}, "scale_columns: gate " + shape_str(g.shape()) +
                                             " vs bank " + shape_str(v.shape()));
    Tensor<T> out(v.shape());
    for (int64_t r = 0; r < n; ++r)
        for (int64_t s = 0; s < k; ++s) out[r * k + s] = v.value()[r * k + s] * g.value()[s];
    return v.tape().record(std::move(out), {v, g}, [v, g, n, k](const Tensor<T>& go, GradSink<T>& sink) {
        if (v.requires_grad()) {
            Tensor<T> gv(v.shape());
            for (int64_t r = 0; r < n; ++r)
                for (int64_t s = 0; s < k; ++s) gv[r * k + s] = go[r * k + s] * g.value()[s];
            sink.add(v, std::move(gv));
        }
        if (g.requires_grad()) {
            Tensor<T> gg(g.shape());
            for (int64_t r = 0; r < n; ++r)
                for (int64_t s = 0; s < k; ++s) gg[s] += go[r * k + s] * v.value()[r * k + s];
            sink.add(g, std::move(gg));
        }
    });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    require_shape(!xs.empty(), "concat_channels: no inputs");
    const int64_t h = xs[0].dim(1), w = xs[0].dim(2);
    int64_t c = 0;
    for (const auto& x : xs) {
        require_rank(x.shape(), 3, "concat_channels");
        require_shape(x.dim(1) == h && x.dim(2) == w,
                      "concat_channels: spatial mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(xs[0].shape()));
        c += x.dim(0);
    }
    Tensor<T> out({c, h, w});
    int64_t offset = 0;
    for (const auto& x : xs) {
        std::copy(x.value().ptr(), x.value().ptr() + x.value().numel(), out.ptr() + offset);
        offset += x.value().numel();
    }
    return xs[0].tape().record(std::move(out), xs, [xs](const Tensor<T>& g, GradSink<T>& sink) {
        int64_t offset = 0;
        for (const auto& x : xs) {
            const int64_t n = x.value().numel();
            if (x.requires_grad()) sink.add(x, Tensor<T>(x.shape(), std::span<const T>(g.ptr() + offset, n)));
            offset += n;
        }
    });
}

template <typename T>
Var<T> concat_width(const std::vector<Var<T>>& xs) {
    require_shape(!xs.empty(), "concat_width: no inputs");
    const int64_t c = xs[0].dim(0), h = xs[0].dim(1);
    int64_t w = 0;
    for (const auto& x : xs) {
        require_rank(x.shape(), 3, "concat_width");
        require_shape(x.dim(0) == c && x.dim(1) == h,
                      "concat_width: extent mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(xs[0].shape()));
        w += x.dim(2);
    }
    Tensor<T> out({c, h, w});
    int64_t col = 0;
    for (const auto& x : xs) {
        const int64_t wx = x.dim(2);
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t i = 0; i < wx; ++i) out.at(ch, y, col + i) = x.value().at(ch, y, i);
        col += wx;
    }
    return xs[0].tape().record(std::move(out), xs, [xs, c, h](const Tensor<T>& g, GradSink<T>& sink) {
        int64_t col = 0;
        for (const auto& x : xs) {
            const int64_t wx = x.dim(2);
            if (x.requires_grad()) {
                Tensor<T> gx(x.shape());
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t i = 0; i < wx; ++i) gx.at(ch, y, i) = g.at(ch, y, col + i);
                sink.add(x, std::move(gx));
            }
            col += wx;
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return x.tape().record(std::move(out), {x}, [x](const Tensor<T>& g, GradSink<T>& sink) {
        sink.add(x, g.reshaped(x.shape()));
    });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps) {
    require_rank(x.shape(), 3, "instance_norm");
    const int64_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    Tensor<T> out(x.shape());
    std::vector<T> inv_std(static_cast<std::size_t>(c));
    for (int64_t ch = 0; ch < c; ++ch) {
        const T* src = x.value().ptr() + ch * n;
        T mu = 0;
        for (int64_t i = 0; i < n; ++i) mu += src[i];
        mu /= static_cast<T>(n);
        T var = 0;
        for (int64_t i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
        var /= static_cast<T>(n);
        const T r = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(ch)] = r;
        for (int64_t i = 0; i < n; ++i) out[ch * n + i] = (src[i] - mu) * r;
    }
    Tape<T>& tape = x.tape();
    const std::size_t out_id = tape.size();
    return tape.record(std::move(out), {x}, [x, c, n, inv_std, &tape, out_id](const Tensor<T>& g, GradSink<T>& sink) {
        const Tensor<T>& y = tape.value(out_id);
        Tensor<T> gx(x.shape());
        for (int64_t ch = 0; ch < c; ++ch) {
            T mg = 0, mgy = 0;
            for (int64_t i = 0; i < n; ++i) {
                mg += g[ch * n + i];
                mgy += g[ch * n + i] * y[ch * n + i];
            }
            mg /= static_cast<T>(n);
            mgy /= static_cast<T>(n);
            const T r = inv_std[static_cast<std::size_t>(ch)];
            for (int64_t i = 0; i < n; ++i) gx[ch * n + i] = r * (g[ch * n + i] - mg - y[ch * n + i] * mgy);
        }
        sink.add(x, std::move(gx));
    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    return x.tape().record(Tensor<T>::scalar(x.value().sum()), {x}, [x](const Tensor<T>& g, GradSink<T>& sink) {
        sink.add(x, Tensor<T>(x.shape(), g[0]));
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    const auto n = static_cast<T>(x.value().numel());
    return x.tape().record(Tensor<T>::scalar(x.value().sum() / n), {x}, [x, n](const Tensor<T>& g, GradSink<T>& sink) {
        sink.add(x, Tensor<T>(x.shape(), g[0] / n));
    });
}

template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
    require_shape(a.shape() == b.shape(), "l1_loss: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t n = a.value().numel();
    T s = 0;
    for (int64_t i = 0; i < n; ++i) s += std::abs(a.value()[i] - b.value()[i]);
    return a.tape().record(Tensor<T>::scalar(s / static_cast<T>(n)), {a, b}, [a, b, n](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> ga(a.shape());
        const T scale = g[0] / static_cast<T>(n);
        for (int64_t i = 0; i < n; ++i) {
            const T d = a.value()[i] - b.value()[i];
            ga[i] = d > 0 ? scale : (d < 0 ? -scale : T(0));
        }
        if (b.requires_grad()) {
            Tensor<T> gb = ga;
            gb *= T(-1);
            sink.add(b, std::move(gb));
        }
        sink.add(a, std::move(ga));
    });
}

#define MSCA_INSTANTIATE_OPS(T)                                                                   \
    template Var<T> conv1x1(const Var<T>&, const Var<T>&, const OptVar<T>&);         \
    template Var<T> conv3x3(const Var<T>&, const Var<T>&, const OptVar<T>&, int);    \
    template Var<T> bilinear_up2(const Var<T>&);                                                  \
    template Var<T> softmax_spatial(const Var<T>&);                                               \
    template Var<T> softmax_channel(const Var<T>&);                                               \
    template Var<T> gap(const Var<T>&);                                                           \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                         \
    template Var<T> transpose(const Var<T>&);                                                     \
    template Var<T> linear(const Var<T>&, const Var<T>&, const OptVar<T>&);          \
    template Var<T> leaky_relu(const Var<T>&);                                                    \
    template Var<T> relu(const Var<T>&);                                                          \
    template Var<T> sigmoid(const Var<T>&);                                                       \
    template Var<T> tanh(const Var<T>&);                                                          \
    template Var<T> softplus(const Var<T>&);                                                      \
    template Var<T> add(const Var<T>&, const Var<T>&);                                            \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                            \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                            \
    template Var<T> scale(const Var<T>&, T);                                                      \
    template Var<T> add_scalar(const Var<T>&, T);                                                 \
    template Var<T> mul_map(const Var<T>&, const Var<T>&);                                        \
    template Var<T> scale_columns(const Var<T>&, const Var<T>&);                                  \
    template Var<T> concat_channels(const std::vector<Var<T>>&);                                  \
    template Var<T> concat_width(const std::vector<Var<T>>&);                                     \
    template Var<T> reshape(const Var<T>&, Shape);                                                \
    template Var<T> instance_norm(const Var<T>&, T);                                              \
    template Var<T> sum(const Var<T>&);                                                           \
    template Var<T> mean(const Var<T>&);                                                          \
    template Var<T> l1_loss(const Var<T>&, const Var<T>&);

MSCA_INSTANTIATE_OPS(float)
MSCA_INSTANTIATE_OPS(double)

}  // namespace msca
