#pragma once

#include <cmath>
#include <stdexcept>

#include "ented/imaging.hpp"

namespace ented::metrics {

/// 10·log10(peak² / MSE); identical inputs give `cap`.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0, double cap = 99.0) {
    a.require_same_shape(b, "psnr");
    if (!(peak > 0)) throw std::invalid_argument("psnr: peak must be positive");
    double mse = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0) return cap;
    return std::min(cap, 10.0 * std::log10(peak * peak / mse));
}

/// Mean SSIM over every window×window placement (stride 1) and channel,
/// uniform weights, population statistics, c1 = (0.01·peak)², c2 = (0.03·peak)².
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, std::size_t window = 8, double peak = 1.0) {
    a.require_same_shape(b, "ssim");
    imaging::require_image(a, "ssim");
    const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
    if (window == 0 || window > h || window > w) {
        throw DimensionError("ssim: window " + std::to_string(window) + " does not fit " + shape_str(a.shape()));
    }
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    const double n = static_cast<double>(window * window);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y0 = 0; y0 + window <= h; ++y0)
            for (std::size_t x0 = 0; x0 + window <= w; ++x0) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (std::size_t y = y0; y < y0 + window; ++y)
                    for (std::size_t x = x0; x < x0 + window; ++x) {
                        const double va = a.at(ch, y, x), vb = b.at(ch, y, x);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                const double ma = sa / n, mb = sb / n;
                const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / static_cast<double>(count);
}

}  // namespace ented::metrics
