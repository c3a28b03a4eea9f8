#include "msca/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace msca {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct RawImage {
    int64_t width = 0;
    int64_t height = 0;
    int channels = 0;  // 1 or 3
    std::vector<uint8_t> pixels;
};

RawImage read_png(const std::filesystem::path& path, bool want_gray) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ImageIoError("cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw ImageIoError(path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError("libpng init failed");
    }
    RawImage img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError("failed to decode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if ((color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) && depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    const bool gray_src = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
    if (want_gray && !gray_src) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError(path.string() + ": label maps must be single-channel PNGs");
    }
    if (!want_gray && gray_src) png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = want_gray ? 1 : 3;
    const auto rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != static_cast<std::size_t>(img.width * img.channels)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError(path.string() + ": unsupported PNG layout");
    }
    img.pixels.resize(static_cast<std::size_t>(img.width * img.height * img.channels));
    rows.resize(static_cast<std::size_t>(img.height));
    for (int64_t y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = img.pixels.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::filesystem::path& path, const RawImage& img) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw ImageIoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw ImageIoError("libpng init failed");
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ImageIoError("failed to encode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < img.height; ++y) {
        rows[static_cast<std::size_t>(y)] =
            const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

uint8_t quantize(double v01) {
    return static_cast<uint8_t>(std::lround(std::clamp(v01, 0.0, 1.0) * 255.0));
}

}  // namespace

template <typename T>
Tensor<T> read_image_png(const std::filesystem::path& path) {
    const RawImage raw = read_png(path, false);
    Tensor<T> out({3, raw.height, raw.width});
    for (int64_t y = 0; y < raw.height; ++y)
        for (int64_t x = 0; x < raw.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const uint8_t p = raw.pixels[static_cast<std::size_t>((y * raw.width + x) * 3 + c)];
                out.at(c, y, x) = static_cast<T>(p / 255.0 * 2.0 - 1.0);
            }
    return out;
}

template <typename T>
void write_image_png(const std::filesystem::path& path, const Tensor<T>& image) {
    require_shape(image.rank() == 3 && image.dim(0) == 3, "write_image_png expects [3,H,W], got " +
                                                              shape_str(image.shape()));
    RawImage raw;
    raw.height = image.dim(1);
    raw.width = image.dim(2);
    raw.channels = 3;
    raw.pixels.resize(static_cast<std::size_t>(raw.width * raw.height * 3));
    for (int64_t y = 0; y < raw.height; ++y)
        for (int64_t x = 0; x < raw.width; ++x)
            for (int c = 0; c < 3; ++c) {
                raw.pixels[static_cast<std::size_t>((y * raw.width + x) * 3 + c)] =
                    quantize((static_cast<double>(image.at(c, y, x)) + 1.0) / 2.0);
            }
    write_png(path, raw);
}

LabelMap read_label_png(const std::filesystem::path& path, int classes) {
    const RawImage raw = read_png(path, true);
    std::vector<int32_t> grid(raw.pixels.begin(), raw.pixels.end());
    return LabelMap(classes, raw.height, raw.width, std::move(grid));
}

void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
    RawImage raw;
    raw.height = labels.height();
    raw.width = labels.width();
    raw.channels = 1;
    raw.pixels.reserve(labels.grid().size());
    for (int32_t v : labels.grid()) {
        if (v > 255) throw ImageIoError("class index " + std::to_string(v) + " does not fit an 8-bit PNG");
        raw.pixels.push_back(static_cast<uint8_t>(v));
    }
    write_png(path, raw);
}

template <typename T>
void write_gray_png(const std::filesystem::path& path, const Tensor<T>& map) {
    require_shape(map.rank() == 2 || (map.rank() == 3 && map.dim(0) == 1),
                  "write_gray_png expects [H,W] or [1,H,W], got " + shape_str(map.shape()));
    RawImage raw;
    raw.height = map.dim(-2);
    raw.width = map.dim(-1);
    raw.channels = 1;
    raw.pixels.resize(static_cast<std::size_t>(map.numel()));
    for (int64_t i = 0; i < map.numel(); ++i) raw.pixels[static_cast<std::size_t>(i)] = quantize(map[i]);
    write_png(path, raw);
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& image) {
    require_shape(image.rank() == 3, "flip_horizontal expects [C,H,W]");
    Tensor<T> out(image.shape());
    const int64_t w = image.dim(2);
    for (int64_t c = 0; c < image.dim(0); ++c)
        for (int64_t y = 0; y < image.dim(1); ++y)
            for (int64_t x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y, w - 1 - x);
    return out;
}

template <typename T>
Tensor<T> crop_image(const Tensor<T>& image, int64_t y0, int64_t x0, int64_t height, int64_t width) {
    require_shape(image.rank() == 3 && y0 >= 0 && x0 >= 0 && y0 + height <= image.dim(1) &&
                      x0 + width <= image.dim(2),
                  "crop outside image " + shape_str(image.shape()));
    Tensor<T> out({image.dim(0), height, width});
    for (int64_t c = 0; c < image.dim(0); ++c)
        for (int64_t y = 0; y < height; ++y)
            for (int64_t x = 0; x < width; ++x) out.at(c, y, x) = image.at(c, y0 + y, x0 + x);
    return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, int64_t height, int64_t width) {
    require_shape(image.rank() == 3, "resize_bilinear expects [C,H,W]");
    const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h == height && w == width) return image;
    auto taps = [](int64_t in, int64_t out) {
        std::vector<std::pair<std::pair<int64_t, int64_t>, double>> t(static_cast<std::size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (int64_t o = 0; o < out; ++o) {
            double src = std::max(0.0, (static_cast<double>(o) + 0.5) * scale - 0.5);
            auto i0 = std::min(static_cast<int64_t>(std::floor(src)), in - 1);
            const int64_t i1 = std::min(i0 + 1, in - 1);
            t[static_cast<std::size_t>(o)] = {{i0, i1}, src - static_cast<double>(i0)};
        }
        return t;
    };
    const auto ty = taps(h, height), tx = taps(w, width);
    Tensor<T> out({c, height, width});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < height; ++y) {
            const auto& [yi, ly] = ty[static_cast<std::size_t>(y)];
            for (int64_t x = 0; x < width; ++x) {
                const auto& [xi, lx] = tx[static_cast<std::size_t>(x)];
                const double top = (1 - lx) * image.at(ch, yi.first, xi.first) + lx * image.at(ch, yi.first, xi.second);
                const double bot = (1 - lx) * image.at(ch, yi.second, xi.first) + lx * image.at(ch, yi.second, xi.second);
                out.at(ch, y, x) = static_cast<T>((1 - ly) * top + ly * bot);
            }
        }
    return out;
}

#define MSCA_INSTANTIATE_IMAGE_IO(T)                                                                \
    template Tensor<T> read_image_png<T>(const std::filesystem::path&);                            \
    template void write_image_png(const std::filesystem::path&, const Tensor<T>&);                 \
    template void write_gray_png(const std::filesystem::path&, const Tensor<T>&);                  \
    template Tensor<T> flip_horizontal(const Tensor<T>&);                                          \
    template Tensor<T> crop_image(const Tensor<T>&, int64_t, int64_t, int64_t, int64_t);           \
    template Tensor<T> resize_bilinear(const Tensor<T>&, int64_t, int64_t);

MSCA_INSTANTIATE_IMAGE_IO(float)
MSCA_INSTANTIATE_IMAGE_IO(double)

}  // namespace msca
