#include "msca/pyramid.hpp"

#include <stdexcept>

#include "msca/checkpoint.hpp"

namespace msca {

void ModelConfig::validate() const {
    const auto n = static_cast<std::size_t>(scales());
    if (levels < 0) throw std::invalid_argument("levels must be >= 0");
    if (classes < 1) throw std::invalid_argument("classes must be >= 1");
    if (backbone_channels.size() != n || attention_slots.size() != n || decoder_channels.size() != n) {
        throw std::invalid_argument("per-scale channel lists must have levels + 1 entries");
    }
    for (int k : attention_slots) {
        if (k < 1) throw std::invalid_argument("attention slot count K must be >= 1");
    }
    if (disc_channels.empty()) throw std::invalid_argument("discriminator needs at least one stage");
}

ModelConfig ModelConfig::tiny(int levels, int classes) {
    ModelConfig cfg;
    cfg.levels = levels;
    cfg.classes = classes;
    cfg.image_channels = 3;
    cfg.label_width = 3;
    const auto n = static_cast<std::size_t>(levels + 1);
    cfg.backbone_channels.assign(n, 3);
    cfg.attention_slots.assign(n, 2);
    cfg.decoder_channels.assign(n, 3);
    cfg.spade_hidden = 2;
    cfg.disc_channels = {3, 3};
    return cfg;
}

// ---- LabelMap -------------------------------------------------------------------

LabelMap::LabelMap(int classes, int64_t height, int64_t width, std::vector<int32_t> grid)
    : classes_(classes), height_(height), width_(width), grid_(std::move(grid)) {
    require_shape(classes_ >= 1, "label map needs at least one class");
    require_shape(static_cast<int64_t>(grid_.size()) == height_ * width_,
                  "label grid size does not match " + std::to_string(height_) + "x" + std::to_string(width_));
    for (int32_t v : grid_) {
        if (v < 0 || v >= classes_) {
            throw std::out_of_range("label index " + std::to_string(v) + " outside [0, " +
                                    std::to_string(classes_) + ")");
        }
    }
}

LabelMap LabelMap::uniform(int classes, int64_t height, int64_t width, int32_t label) {
    return LabelMap(classes, height, width, std::vector<int32_t>(static_cast<std::size_t>(height * width), label));
}

template <typename T>
Tensor<T> LabelMap::one_hot() const {
    Tensor<T> out({classes_, height_, width_});
    for (int64_t y = 0; y < height_; ++y)
        for (int64_t x = 0; x < width_; ++x) out.at(at(y, x), y, x) = T(1);
    return out;
}

LabelMap LabelMap::downsample(int64_t factor) const {
    require_shape(factor >= 1 && height_ % factor == 0 && width_ % factor == 0,
                  "label downsample factor " + std::to_string(factor) + " does not divide " +
                      std::to_string(height_) + "x" + std::to_string(width_));
    const int64_t h = height_ / factor, w = width_ / factor;
    std::vector<int32_t> g(static_cast<std::size_t>(h * w));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) g[static_cast<std::size_t>(y * w + x)] = at(y * factor, x * factor);
    return LabelMap(classes_, h, w, std::move(g));
}

LabelMap LabelMap::resized(int64_t height, int64_t width) const {
    std::vector<int32_t> g(static_cast<std::size_t>(height * width));
    for (int64_t y = 0; y < height; ++y) {
        const int64_t sy = std::min(height_ - 1, (y * height_) / height);
        for (int64_t x = 0; x < width; ++x) {
            const int64_t sx = std::min(width_ - 1, (x * width_) / width);
            g[static_cast<std::size_t>(y * width + x)] = at(sy, sx);
        }
    }
    return LabelMap(classes_, height, width, std::move(g));
}

LabelMap LabelMap::crop(int64_t y0, int64_t x0, int64_t height, int64_t width) const {
    require_shape(y0 >= 0 && x0 >= 0 && y0 + height <= height_ && x0 + width <= width_,
                  "label crop outside the map");
    std::vector<int32_t> g(static_cast<std::size_t>(height * width));
    for (int64_t y = 0; y < height; ++y)
        for (int64_t x = 0; x < width; ++x) g[static_cast<std::size_t>(y * width + x)] = at(y0 + y, x0 + x);
    return LabelMap(classes_, height, width, std::move(g));
}

LabelMap LabelMap::flipped_horizontal() const {
    std::vector<int32_t> g(grid_.size());
    for (int64_t y = 0; y < height_; ++y)
        for (int64_t x = 0; x < width_; ++x) g[static_cast<std::size_t>(y * width_ + x)] = at(y, width_ - 1 - x);
    return LabelMap(classes_, height_, width_, std::move(g));
}

LabelMap LabelMap::permuted(const std::vector<int32_t>& perm) const {
    require_shape(static_cast<int>(perm.size()) == classes_, "class permutation has wrong length");
    std::vector<int32_t> g(grid_.size());
    for (std::size_t i = 0; i < grid_.size(); ++i) g[i] = perm[static_cast<std::size_t>(grid_[i])];
    return LabelMap(classes_, height_, width_, std::move(g));
}

template Tensor<float> LabelMap::one_hot<float>() const;
template Tensor<double> LabelMap::one_hot<double>() const;

// ---- backbones ------------------------------------------------------------------

template <typename T>
ToyEncoder<T> ToyEncoder<T>::random(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    ParamSet<T> params;
    int cin = 3;
    for (int s = 0; s < cfg.scales(); ++s) {
        const int cout = cfg.backbone_channels[static_cast<std::size_t>(s)];
        const std::string p = "backbone.s" + std::to_string(s);
        params.emplace(p + ".w", init_normal<T>({cout, cin, 3, 3}, cin * 9, 1.4, rng));
        params.emplace(p + ".b", Tensor<T>::zeros({cout}));
        cin = cout;
    }
    return ToyEncoder(cfg, std::move(params));
}

template <typename T>
std::vector<Var<T>> ToyEncoder<T>::forward(const Var<T>& image) const {
    require_shape(image.shape().size() == 3 && image.dim(0) == 3,
                  "toy encoder expects a [3,H,W] image, got " + shape_str(image.shape()));
    Tape<T>& tape = image.tape();
    std::vector<Var<T>> levels;
    Var<T> h = image;
    for (int s = 0; s < cfg_.scales(); ++s) {
        const std::string p = "backbone.s" + std::to_string(s);
        const Var<T> w = tape.constant(params_.at(p + ".w"));
        const Var<T> b = tape.constant(params_.at(p + ".b"));
        h = leaky_relu(conv3x3(h, w, b, s == 0 ? 1 : 2));
        levels.push_back(h);
    }
    return levels;
}

template <typename T>
ExternalFeatures<T> ExternalFeatures<T>::load(const std::filesystem::path& dir, int levels) {
    std::vector<Tensor<T>> out;
    for (int s = 0; s <= levels; ++s) {
        out.push_back(load_tensor_file<T>(dir / ("scale" + std::to_string(s) + ".bin")));
        require_shape(out.back().rank() == 3, "external feature file for scale " + std::to_string(s) +
                                                  " must hold a [C,H,W] tensor");
    }
    return ExternalFeatures(std::move(out));
}

template <typename T>
std::vector<Var<T>> ExternalFeatures<T>::forward(const Var<T>& image) const {
    std::vector<Var<T>> out;
    for (std::size_t s = 0; s < levels_.size(); ++s) {
        const int64_t f = int64_t{1} << s;
        require_shape(levels_[s].dim(1) * f == image.dim(1) && levels_[s].dim(2) * f == image.dim(2),
                      "external features at scale " + std::to_string(s) + " have extent " +
                          shape_str(levels_[s].shape()) + ", image is " + shape_str(image.shape()));
        out.push_back(image.tape().constant(levels_[s]));
    }
    return out;
}

template <typename T>
std::vector<Var<T>> backbone_forward(const Backbone<T>& backbone, const Var<T>& image) {
    return std::visit([&](const auto& b) { return b.forward(image); }, backbone);
}

// ---- pyramids ------------------------------------------------------------------

void require_divisible(int64_t height, int64_t width, int levels, const char* what) {
    const int64_t d = int64_t{1} << levels;
    require_shape(height > 0 && width > 0 && height % d == 0 && width % d == 0,
                  std::string(what) + ": extent " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by 2^" + std::to_string(levels));
}

std::string wx_name(int scale) { return "pyr.wx." + std::to_string(scale); }
std::string wc_name(int scale) { return "pyr.wc." + std::to_string(scale); }

template <typename T>
ParamSet<T> init_pyramid_params(const ModelConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ParamSet<T> params;
    for (int s = 0; s < cfg.scales(); ++s) {
        const int bc = cfg.backbone_channels[static_cast<std::size_t>(s)];
        params.emplace(wx_name(s), init_normal<T>({cfg.image_channels, bc}, bc, 1.0, rng));
        const int cin = s == cfg.levels ? cfg.classes : cfg.label_width + cfg.classes;
        params.emplace(wc_name(s), init_normal<T>({cfg.label_width, cin}, cin, 1.4, rng));
    }
    return params;
}

template <typename T>
FeaturePyramid<T> extract_image_features(const Var<T>& image, const Backbone<T>& backbone,
                                         const BoundParams<T>& params, const ModelConfig& cfg) {
    require_shape(image.shape().size() == 3 && image.dim(0) == 3,
                  "image must be [3,H,W], got " + shape_str(image.shape()));
    require_divisible(image.dim(1), image.dim(2), cfg.levels, "image");
    const auto levels = backbone_forward(backbone, image);
    require_shape(static_cast<int>(levels.size()) == cfg.scales(),
                  "backbone emitted " + std::to_string(levels.size()) + " levels, expected " +
                      std::to_string(cfg.scales()));
    FeaturePyramid<T> out;
    for (int s = 0; s < cfg.scales(); ++s) {
        out.levels.push_back(conv1x1(levels[static_cast<std::size_t>(s)], params[wx_name(s)]));
    }
    return out;
}

template <typename T>
Tensor<T> resize_label(const LabelMap& c, int scale) {
    return c.downsample(int64_t{1} << scale).one_hot<T>();
}

template <typename T>
FeaturePyramid<T> extract_label_features(Tape<T>& tape, const LabelMap& c, const BoundParams<T>& params,
                                         const ModelConfig& cfg, std::vector<int>* trace) {
    require_divisible(c.height(), c.width(), cfg.levels, "label map");
    require_shape(c.classes() == cfg.classes, "label map has " + std::to_string(c.classes()) +
                                                  " classes, model expects " + std::to_string(cfg.classes));
    FeaturePyramid<T> out;
    out.levels.resize(static_cast<std::size_t>(cfg.scales()));
    for (int s = cfg.levels; s >= 0; --s) {
        const Var<T> onehot = tape.constant(resize_label<T>(c, s));
        const Var<T>& w = params[wc_name(s)];
        Var<T> input = onehot;
        if (s < cfg.levels) {
            input = concat_channels<T>({bilinear_up2(out.levels[static_cast<std::size_t>(s + 1)]), onehot});
        }
        require_shape(w.dim(1) == input.dim(0), "label kernel at scale " + std::to_string(s) + " expects " +
                                                    std::to_string(w.dim(1)) + " input channels, got " +
                                                    std::to_string(input.dim(0)));
        out.levels[static_cast<std::size_t>(s)] = leaky_relu(conv1x1(input, w));
        if (trace) trace->push_back(s);
    }
    return out;
}

template class ToyEncoder<float>;
template class ToyEncoder<double>;
template class ExternalFeatures<float>;
template class ExternalFeatures<double>;

#define MSCA_INSTANTIATE_PYRAMID(T)                                                                    \
    template std::vector<Var<T>> backbone_forward(const Backbone<T>&, const Var<T>&);                 \
    template ParamSet<T> init_pyramid_params<T>(const ModelConfig&, std::mt19937_64&);                \
    template FeaturePyramid<T> extract_image_features(const Var<T>&, const Backbone<T>&,              \
                                                      const BoundParams<T>&, const ModelConfig&);     \
    template Tensor<T> resize_label<T>(const LabelMap&, int);                                         \
    template FeaturePyramid<T> extract_label_features(Tape<T>&, const LabelMap&, const BoundParams<T>&, \
                                                      const ModelConfig&, std::vector<int>*);

MSCA_INSTANTIATE_PYRAMID(float)
MSCA_INSTANTIATE_PYRAMID(double)

}  // namespace msca
