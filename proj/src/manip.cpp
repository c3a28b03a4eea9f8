#include "msca/manip.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "msca/image_io.hpp"

namespace msca {

double clamp_factor(double a) {
    if (!std::isfinite(a)) throw std::invalid_argument("interpolation factor must be finite");
    return std::clamp(a, kInterpEps, 1.0 - kInterpEps);
}

namespace {

template <typename T>
struct ExemplarFeatures {
    FeaturePyramid<T> image;
    FeaturePyramid<T> labels;
};

template <typename T>
ExemplarFeatures<T> exemplar_features(Tape<T>& tape, const Exemplar<T>& ex, const BoundParams<T>& bound,
                                      const GeneratorModel<T>& model, const Backbone<T>& backbone) {
    require_shape(ex.image.rank() == 3 && ex.image.dim(0) == 3, "exemplar must be a [3,H,W] image");
    require_shape(ex.labels.height() == ex.image.dim(1) && ex.labels.width() == ex.image.dim(2),
                  "exemplar labels and image differ in extent");
    require_divisible(ex.labels.height(), ex.labels.width(), model.cfg.levels, "exemplar");
    return {extract_image_features(tape.constant(ex.image), backbone, bound, model.cfg),
            extract_label_features(tape, ex.labels, bound, model.cfg)};
}

template <typename T>
void require_same_extent(const Exemplar<T>& a, const Exemplar<T>& b) {
    require_shape(a.image.shape() == b.image.shape() && a.labels.height() == b.labels.height() &&
                      a.labels.width() == b.labels.width(),
                  "the two exemplars differ in extent: " + shape_str(a.image.shape()) + " vs " +
                      shape_str(b.image.shape()));
}

}  // namespace

template <typename T>
InterpResult<T> interpolate_styles(const GeneratorModel<T>& model, const LabelMap& c1, const Exemplar<T>& ex2,
                                   const Exemplar<T>& ex3, double a) {
    require_same_extent(ex2, ex3);
    require_divisible(c1.height(), c1.width(), model.cfg.levels, "target label map");
    a = clamp_factor(a);
    const T bias = static_cast<T>(std::log(a / (1 - a)));
    Tape<T> tape;
    const BoundParams<T> bound = bind_params(tape, model.params, false);
    const Backbone<T> backbone = model.encoder;
    const auto f2 = exemplar_features(tape, ex2, bound, model, backbone);
    const auto f3 = exemplar_features(tape, ex3, bound, model, backbone);
    const auto fc1 = extract_label_features(tape, c1, bound, model.cfg);
    InterpResult<T> out;
    FeaturePyramid<T> aligned;
    for (int s = 0; s < model.cfg.scales(); ++s) {
        const auto i = static_cast<std::size_t>(s);
        const MscaWeights<T> w = msca_weights(bound, s);
        const Var<T> l2 = add_scalar(spatial_attention_logits(f2.image[i], f2.labels[i], w.phi), bias);
        const Var<T> l3 = spatial_attention_logits(f3.image[i], f3.labels[i], w.phi);
        const Var<T> alpha = softmax_spatial(concat_width<T>({l2, l3}));
        const Var<T> bank = spatial_aggregate(concat_width<T>({f2.image[i], f3.image[i]}), alpha);
        const Var<T> g = add(scale(gate_scores(fc1[i], f2.labels[i], w), static_cast<T>(a)),
                             scale(gate_scores(fc1[i], f3.labels[i], w), static_cast<T>(1 - a)));
        const Var<T> beta = channel_attention(fc1[i], w.psi);
        aligned.levels.push_back(channel_aggregate(apply_gate(bank, g), beta));
        out.joint_alpha.push_back(alpha.value());
        out.gate.push_back(g.value());
        out.bank.push_back(bank.value());
    }
    out.image = decode(aligned, fc1, bound, model.cfg).value();
    return out;
}

template <typename T>
Tensor<T> spatial_interpolate(const GeneratorModel<T>& model, const LabelMap& c1, const Exemplar<T>& ex2,
                              const Exemplar<T>& ex3, const Tensor<T>& weight) {
    require_same_extent(ex2, ex3);
    require_divisible(c1.height(), c1.width(), model.cfg.levels, "target label map");
    require_shape(weight.rank() == 3 && weight.dim(0) == 1 && weight.dim(1) == c1.height() &&
                      weight.dim(2) == c1.width(),
                  "weight map " + shape_str(weight.shape()) + " must be [1," + std::to_string(c1.height()) + "," +
                      std::to_string(c1.width()) + "]");
    for (int64_t i = 0; i < weight.numel(); ++i) {
        if (!(weight[i] >= 0 && weight[i] <= 1)) {
            throw std::invalid_argument("weight map values must lie in [0, 1], found " +
                                        std::to_string(static_cast<double>(weight[i])));
        }
    }
    Tape<T> tape;
    const BoundParams<T> bound = bind_params(tape, model.params, false);
    const Backbone<T> backbone = model.encoder;
    const auto f2 = exemplar_features(tape, ex2, bound, model, backbone);
    const auto f3 = exemplar_features(tape, ex3, bound, model, backbone);
    const auto fc1 = extract_label_features(tape, c1, bound, model.cfg);
    FeaturePyramid<T> aligned;
    for (int s = 0; s < model.cfg.scales(); ++s) {
        const auto i = static_cast<std::size_t>(s);
        const MscaWeights<T> w = msca_weights(bound, s);
        const Var<T> beta = channel_attention(fc1[i], w.psi);
        auto side = [&](const ExemplarFeatures<T>& f) {
            const Var<T> bank = spatial_aggregate(f.image[i], spatial_attention(f.image[i], f.labels[i], w.phi));
            return channel_aggregate(feature_mask(bank, fc1[i], f.labels[i], w).masked, beta);
        };
        const int64_t h = fc1[i].dim(1), wd = fc1[i].dim(2);
        const Tensor<T> ws = (h == weight.dim(1) && wd == weight.dim(2)) ? weight : resize_bilinear(weight, h, wd);
        Tensor<T> rest(ws.shape());
        for (int64_t j = 0; j < ws.numel(); ++j) rest[j] = 1 - ws[j];
        aligned.levels.push_back(add(mul_map(side(f2), tape.constant(ws)), mul_map(side(f3), tape.constant(rest))));
    }
    return decode(aligned, fc1, bound, model.cfg).value();
}

template <typename T>
Tensor<T> horizontal_ramp(int64_t height, int64_t width) {
    Tensor<T> w({1, height, width});
    for (int64_t y = 0; y < height; ++y)
        for (int64_t x = 0; x < width; ++x)
            w.at(0, y, x) = width == 1 ? T(0.5) : static_cast<T>(static_cast<double>(x) / static_cast<double>(width - 1));
    return w;
}

std::vector<double> hann_window(int64_t n) {
    std::vector<double> w(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double s = std::sin(std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
        w[static_cast<std::size_t>(i)] = s * s;
    }
    return w;
}

template <typename T>
ExtrapolationResult<T> extrapolate(const GeneratorModel<T>& model, const Exemplar<T>& center,
                                   const LabelMap& global_label, uint64_t seed) {
    const int64_t p = center.labels.height();
    require_shape(center.labels.width() == p && center.image.rank() == 3 && center.image.dim(1) == p &&
                      center.image.dim(2) == p,
                  "extrapolation center must be a square image with matching labels");
    if (global_label.height() != 2 * p || global_label.width() != 2 * p) {
        throw std::invalid_argument("global label map is " + std::to_string(global_label.height()) + "x" +
                                    std::to_string(global_label.width()) + ", expected twice the center extent " +
                                    std::to_string(2 * p) + "x" + std::to_string(2 * p));
    }
    ExtrapolationResult<T> r;
    r.center = Rect{p / 2, p / 2, p, p};
    r.sites = {Rect{0, 0, p, p}, Rect{0, p, p, p}, Rect{p, 0, p, p}, Rect{p, p, p, p}};
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int64_t> pos(0, p);
    for (int i = 0; i < kExtrapolationRandomSites; ++i) {
        const int64_t y = pos(rng);
        r.sites.push_back(Rect{y, pos(rng), p, p});
    }
    const std::vector<double> win = hann_window(p);
    std::vector<double> acc(static_cast<std::size_t>(3 * 4 * p * p), 0.0);
    r.weight = Tensor<double>({1, 2 * p, 2 * p});
    for (const Rect& site : r.sites) {
        const Tensor<T> patch =
            synthesize(model, global_label.crop(site.y, site.x, p, p), center.image, center.labels);
        for (int64_t y = 0; y < p; ++y)
            for (int64_t x = 0; x < p; ++x) {
                const double wt = win[static_cast<std::size_t>(y)] * win[static_cast<std::size_t>(x)];
                const int64_t gy = site.y + y, gx = site.x + x;
                r.weight.at(0, gy, gx) += wt;
                for (int64_t c = 0; c < 3; ++c)
                    acc[static_cast<std::size_t>((c * 2 * p + gy) * 2 * p + gx)] +=
                        wt * static_cast<double>(patch.at(c, y, x));
            }
    }
    r.image = Tensor<T>({3, 2 * p, 2 * p});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < 2 * p; ++y)
            for (int64_t x = 0; x < 2 * p; ++x)
                r.image.at(c, y, x) = static_cast<T>(acc[static_cast<std::size_t>((c * 2 * p + y) * 2 * p + x)] /
                                                     r.weight.at(0, y, x));
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < p; ++y)
            for (int64_t x = 0; x < p; ++x) r.image.at(c, r.center.y + y, r.center.x + x) = center.image.at(c, y, x);
    return r;
}

template <typename T>
double seam_ratio(const ExtrapolationResult<T>& r) {
    const int64_t h = r.image.dim(1), w = r.image.dim(2);
    std::set<int64_t> rows, cols;
    auto edges = [&](const Rect& rc) {
        rows.insert(rc.y);
        rows.insert(rc.y + rc.height);
        cols.insert(rc.x);
        cols.insert(rc.x + rc.width);
    };
    for (const Rect& s : r.sites) edges(s);
    edges(r.center);
    double seam = 0, other = 0;
    int64_t ns = 0, no = 0;
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                if (x > 0) {
                    const double d = std::abs(static_cast<double>(r.image.at(c, y, x) - r.image.at(c, y, x - 1)));
                    if (cols.count(x)) seam += d, ++ns;
                    else other += d, ++no;
                }
                if (y > 0) {
                    const double d = std::abs(static_cast<double>(r.image.at(c, y, x) - r.image.at(c, y - 1, x)));
                    if (rows.count(y)) seam += d, ++ns;
                    else other += d, ++no;
                }
            }
    if (ns == 0 || no == 0 || other == 0) return 0.0;
    return (seam / static_cast<double>(ns)) / (other / static_cast<double>(no));
}

template <typename T>
Tensor<T> style_swap_grid(const GeneratorModel<T>& model, const std::vector<Exemplar<T>>& scenes) {
    if (scenes.size() < 2) throw std::invalid_argument("style swapping needs at least two scenes");
    const int64_t h = scenes[0].labels.height(), w = scenes[0].labels.width();
    for (const auto& s : scenes) require_same_extent(scenes[0], s);
    const auto n = static_cast<int64_t>(scenes.size());
    Tensor<T> grid({3, n * h, n * w});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < n; ++c) {
            const auto& tgt = scenes[static_cast<std::size_t>(r)];
            const auto& sty = scenes[static_cast<std::size_t>(c)];
            const Tensor<T> cell = synthesize(model, tgt.labels, sty.image, sty.labels);
            for (int64_t ch = 0; ch < 3; ++ch)
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < w; ++x) grid.at(ch, r * h + y, c * w + x) = cell.at(ch, y, x);
        }
    return grid;
}

#define MSCA_INSTANTIATE_MANIP(T)                                                                              \
    template InterpResult<T> interpolate_styles(const GeneratorModel<T>&, const LabelMap&, const Exemplar<T>&, \
                                                const Exemplar<T>&, double);                                   \
    template Tensor<T> spatial_interpolate(const GeneratorModel<T>&, const LabelMap&, const Exemplar<T>&,      \
                                           const Exemplar<T>&, const Tensor<T>&);                              \
    template Tensor<T> horizontal_ramp<T>(int64_t, int64_t);                                                   \
    template ExtrapolationResult<T> extrapolate(const GeneratorModel<T>&, const Exemplar<T>&, const LabelMap&, \
                                                uint64_t);                                                     \
    template double seam_ratio(const ExtrapolationResult<T>&);                                                 \
    template Tensor<T> style_swap_grid(const GeneratorModel<T>&, const std::vector<Exemplar<T>>&);

MSCA_INSTANTIATE_MANIP(float)
MSCA_INSTANTIATE_MANIP(double)

}  // namespace msca
