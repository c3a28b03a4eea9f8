#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <variant>
#include <vector>

#include "msca/model_config.hpp"
#include "msca/ops.hpp"
#include "msca/params.hpp"

namespace msca {

/// Per-pixel class indices in [0, classes).
class LabelMap {
public:
    LabelMap() = default;
    LabelMap(int classes, int64_t height, int64_t width, std::vector<int32_t> grid);
    static LabelMap uniform(int classes, int64_t height, int64_t width, int32_t label);

    int classes() const { return classes_; }
    int64_t height() const { return height_; }
    int64_t width() const { return width_; }
    int32_t at(int64_t y, int64_t x) const { return grid_[static_cast<std::size_t>(y * width_ + x)]; }
    const std::vector<int32_t>& grid() const { return grid_; }

    template <typename T>
    Tensor<T> one_hot() const;

    // Nearest-neighbour downsampling that keeps the top-left pixel of each
    // factor x factor block.
    LabelMap downsample(int64_t factor) const;
    // Nearest-neighbour resampling to an arbitrary extent.
    LabelMap resized(int64_t height, int64_t width) const;
    LabelMap crop(int64_t y, int64_t x, int64_t height, int64_t width) const;
    LabelMap flipped_horizontal() const;
    // Relabels class c as perm[c].
    LabelMap permuted(const std::vector<int32_t>& perm) const;

    bool operator==(const LabelMap&) const = default;

private:
    int classes_ = 0;
    int64_t height_ = 0;
    int64_t width_ = 0;
    std::vector<int32_t> grid_;
};

template <typename T>
struct FeaturePyramid {
    std::vector<Var<T>> levels;

    std::size_t size() const { return levels.size(); }
    const Var<T>& operator[](std::size_t i) const { return levels[i]; }
};

/// Frozen stand-in image backbone: a stride-1 conv3x3 stage followed by
/// `levels` stride-2 conv3x3 stages, each with leaky ReLU.
template <typename T>
class ToyEncoder {
public:
    ToyEncoder() = default;
    ToyEncoder(ModelConfig cfg, ParamSet<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {}
    static ToyEncoder random(const ModelConfig& cfg, uint64_t seed);

    std::vector<Var<T>> forward(const Var<T>& image) const;
    const ParamSet<T>& params() const { return params_; }
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    ParamSet<T> params_;
};

/// Precomputed per-scale features, one checkpoint-format tensor file per scale.
template <typename T>
class ExternalFeatures {
public:
    explicit ExternalFeatures(std::vector<Tensor<T>> levels) : levels_(std::move(levels)) {}
    // Reads <dir>/scale0.bin .. scale<levels>.bin.
    static ExternalFeatures load(const std::filesystem::path& dir, int levels);

    std::vector<Var<T>> forward(const Var<T>& image) const;
    const std::vector<Tensor<T>>& levels() const { return levels_; }

private:
    std::vector<Tensor<T>> levels_;
};

template <typename T>
using Backbone = std::variant<ToyEncoder<T>, ExternalFeatures<T>>;

template <typename T>
std::vector<Var<T>> backbone_forward(const Backbone<T>& backbone, const Var<T>& image);

// Throws ShapeError unless both extents are divisible by 2^levels.
void require_divisible(int64_t height, int64_t width, int levels, const char* what);

// Parameter names used by the pyramid.
std::string wx_name(int scale);
std::string wc_name(int scale);

// Wx (image-feature compression) and Wc (label-feature) kernels.
template <typename T>
ParamSet<T> init_pyramid_params(const ModelConfig& cfg, std::mt19937_64& rng);

// Level i = conv1x1(backbone level i, Wx_i).
template <typename T>
FeaturePyramid<T> extract_image_features(const Var<T>& image, const Backbone<T>& backbone,
                                         const BoundParams<T>& params, const ModelConfig& cfg);

// One-hot of the label map at scale i (top-left nearest sampling).
template <typename T>
Tensor<T> resize_label(const LabelMap& c, int scale);

// Coarse-to-fine label features. When trace is given, each computed scale is
// appended in evaluation order.
template <typename T>
FeaturePyramid<T> extract_label_features(Tape<T>& tape, const LabelMap& c, const BoundParams<T>& params,
                                         const ModelConfig& cfg, std::vector<int>* trace = nullptr);

}  // namespace msca
