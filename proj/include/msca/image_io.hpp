#pragma once

#include <filesystem>

#include "msca/pyramid.hpp"

namespace msca {

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// 8-bit RGB PNG <-> [3,H,W] in [-1, 1]. Grayscale and alpha inputs are
// converted to RGB on read; out-of-range values are clamped on write.
template <typename T>
Tensor<T> read_image_png(const std::filesystem::path& path);

template <typename T>
void write_image_png(const std::filesystem::path& path, const Tensor<T>& image);

// 8-bit single-channel PNG whose pixel values are class indices.
LabelMap read_label_png(const std::filesystem::path& path, int classes);
void write_label_png(const std::filesystem::path& path, const LabelMap& labels);

// [H,W] or [1,H,W] values in [0,1] as 8-bit grayscale.
template <typename T>
void write_gray_png(const std::filesystem::path& path, const Tensor<T>& map);

// Image transforms on [3,H,W] tensors.
template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& image);

template <typename T>
Tensor<T> crop_image(const Tensor<T>& image, int64_t y, int64_t x, int64_t height, int64_t width);

// Bilinear resampling (half-pixel centres) of a [C,H,W] tensor.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, int64_t height, int64_t width);

}  // namespace msca
