#pragma once

// Non-differentiable image helpers shared by the loss and degradation code.
// Images are Tensor[3×H×W] with values nominally in [0, 1].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <tuple>
#include <vector>

#include "ented/numerics/tensor.hpp"

namespace ented::imaging {

template <class T>
void require_image(const Tensor<T>& img, const char* what) {
    if (img.rank() != 3) throw DimensionError(std::string(what) + ": expected C×H×W, got " + shape_str(img.shape()));
}

/// Bilinear resampling with half-pixel centres and edge clamping (no
/// antialiasing), matching the usual align_corners=false convention.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& img, std::size_t out_h, std::size_t out_w) {
    require_image(img, "resize_bilinear");
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (out_h == h && out_w == w) return img;
    Tensor<T> out({c, out_h, out_w});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    auto taps = [](double src, std::size_t n) {
        src = std::max(src, 0.0);
        std::size_t i0 = std::min(static_cast<std::size_t>(src), n - 1);
        std::size_t i1 = std::min(i0 + 1, n - 1);
        double f = std::min(src - static_cast<double>(i0), 1.0);
        return std::tuple{i0, i1, f};
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        const auto [y0, y1, fy] = taps((static_cast<double>(y) + 0.5) * sy - 0.5, h);
        for (std::size_t x = 0; x < out_w; ++x) {
            const auto [x0, x1, fx] = taps((static_cast<double>(x) + 0.5) * sx - 0.5, w);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double top = (1 - fx) * img.at(ch, y0, x0) + fx * img.at(ch, y0, x1);
                const double bot = (1 - fx) * img.at(ch, y1, x0) + fx * img.at(ch, y1, x1);
                out.at(ch, y, x) = static_cast<T>((1 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

/// Downsample by an integer factor.
template <class T>
Tensor<T> downsample_bilinear(const Tensor<T>& img, std::size_t factor) {
    require_image(img, "downsample_bilinear");
    if (factor == 0 || img.dim(1) % factor || img.dim(2) % factor) {
        throw DimensionError("downsample factor " + std::to_string(factor) + " does not divide " +
                             shape_str(img.shape()));
    }
    return resize_bilinear(img, img.dim(1) / factor, img.dim(2) / factor);
}

/// Separable Gaussian blur, radius ceil(3σ), replicated borders.
template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma) {
    require_image(img, "gaussian_blur");
    if (sigma <= 0) return img;
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(2 * radius + 1);
    double s = 0;
    for (int i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= s;

    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor<T> tmp(img.shape()), out(img.shape());
    auto clampi = [](int v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0, static_cast<int>(n) - 1)); };
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img.at(ch, y, clampi(int(x) + i, w));
                tmp.at(ch, y, x) = static_cast<T>(acc);
            }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.at(ch, clampi(int(y) + i, h), x);
                out.at(ch, y, x) = static_cast<T>(acc);
            }
    return out;
}

template <class T>
Tensor<T> clamp01(Tensor<T> img) {
    for (auto& v : img.data()) v = std::clamp(v, T{0}, T{1});
    return img;
}

}  // namespace ented::imaging
