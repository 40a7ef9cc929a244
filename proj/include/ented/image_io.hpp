#pragma once

// 8-bit RGB PNG reading and writing through libpng. Pixel values map to
// [0, 1] as v/255 on read and round(255·v) on write.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ented/numerics/tensor.hpp"

namespace ented::image_io {

class ImageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

inline File open(const std::string& path, const char* mode) {
    File f(std::fopen(path.c_str(), mode));
    if (!f) throw ImageError("cannot open '" + path + "'");
    return f;
}

}  // namespace detail

template <class T>
Tensor<T> read_png(const std::string& path) {
    auto file = detail::open(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw ImageError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp* p;
        png_infop* i;
        ~Guard() { png_destroy_read_struct(p, i, nullptr); }
    } guard{&png, &info};
    if (setjmp(png_jmpbuf(png))) throw ImageError("'" + path + "' is not a readable PNG");

    png_init_io(png, file.get());
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (png_get_bit_depth(png, info) < 8) png_set_packing(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    if (png_get_channels(png, info) != 3) throw ImageError("'" + path + "': unsupported channel layout");

    std::vector<png_byte> buf(static_cast<std::size_t>(w) * h * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);

    Tensor<T> img({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<T>(buf[(y * w + x) * 3 + c] / 255.0);
    return img;
}

template <class T>
void write_png(const std::string& path, const Tensor<T>& img) {
    if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("write_png expects 3×H×W, got " + shape_str(img.shape()));
    const std::size_t h = img.dim(1), w = img.dim(2);
    std::vector<png_byte> buf(h * w * 3);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(static_cast<double>(img.at(c, y, x)), 0.0, 1.0);
                buf[(y * w + x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0));
            }

    auto file = detail::open(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw ImageError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp* p;
        png_infop* i;
        ~Guard() { png_destroy_write_struct(p, i); }
    } guard{&png, &info};
    if (setjmp(png_jmpbuf(png))) throw ImageError("failed writing '" + path + "'");

    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(h);
    for (std::size_t y = 0; y < h; ++y) rows[y] = buf.data() + y * w * 3;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
}

/// Quantises to the 8-bit grid that write_png/read_png round-trip exactly.
template <class T>
Tensor<T> quantize8(Tensor<T> img) {
    for (auto& v : img.data()) v = static_cast<T>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0) / 255.0);
    return img;
}

}  // namespace ented::image_io
