#pragma once

// Synthetic degradation producing (LQ, GT) pairs, and the photometric /
// geometric augmentation that stands in for a separately captured reference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ented/imaging.hpp"
#include "ented/numerics/rng.hpp"

namespace ented::degradation {

struct DegradationSpec {
    double blur_sigma_min = 0.5;
    double blur_sigma_max = 1.5;
    std::vector<std::size_t> factors{4};  // one is picked per sample
    double noise_min = 0.0;
    double noise_max = 0.03;
    bool block_quantize = true;
    std::size_t block = 4;
    double quant_step_min = 0.02;
    double quant_step_max = 0.08;

    /// Leaves the image untouched.
    static DegradationSpec null() {
        DegradationSpec s;
        s.blur_sigma_min = s.blur_sigma_max = 0;
        s.factors = {1};
        s.noise_min = s.noise_max = 0;
        s.block_quantize = false;
        return s;
    }

    void validate() const {
        if (blur_sigma_min < 0 || blur_sigma_max < blur_sigma_min) throw std::invalid_argument("invalid blur sigma range");
        if (noise_min < 0 || noise_max < noise_min) throw std::invalid_argument("invalid noise range");
        if (quant_step_min < 0 || quant_step_max < quant_step_min) throw std::invalid_argument("invalid quantisation range");
        if (factors.empty()) throw std::invalid_argument("degradation needs at least one downsample factor");
        for (auto f : factors) {
            if (f < 1) throw std::invalid_argument("downsample factor must be >= 1");
        }
        if (block == 0) throw std::invalid_argument("block size must be positive");
    }
};

/// Each block×block tile keeps its mean; deviations snap to multiples of `step`.
template <class T>
Tensor<T> block_quantize(Tensor<T> img, std::size_t block, double step) {
    if (step <= 0) return img;
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t by = 0; by < h; by += block)
            for (std::size_t bx = 0; bx < w; bx += block) {
                const std::size_t y1 = std::min(by + block, h), x1 = std::min(bx + block, w);
                double m = 0;
                for (std::size_t y = by; y < y1; ++y)
                    for (std::size_t x = bx; x < x1; ++x) m += img.at(ch, y, x);
                m /= static_cast<double>((y1 - by) * (x1 - bx));
                for (std::size_t y = by; y < y1; ++y)
                    for (std::size_t x = bx; x < x1; ++x) {
                        const double d = img.at(ch, y, x) - m;
                        img.at(ch, y, x) = static_cast<T>(m + std::round(d / step) * step);
                    }
            }
    return img;
}

/// blur → downsample → noise → block quantisation → upsample → clamp.
/// Deterministic for a given seed.
template <class T>
Tensor<T> degrade(const Tensor<T>& gt, const DegradationSpec& spec, std::uint64_t seed) {
    imaging::require_image(gt, "degrade");
    spec.validate();
    Rng rng(seed);
    const double sigma = rng.uniform(spec.blur_sigma_min, spec.blur_sigma_max);
    const std::size_t factor = spec.factors[rng.uniform_index(spec.factors.size())];
    const double noise = rng.uniform(spec.noise_min, spec.noise_max);
    const double step = rng.uniform(spec.quant_step_min, spec.quant_step_max);
    const std::size_t h = gt.dim(1), w = gt.dim(2);
    if (h % factor || w % factor) throw DimensionError("downsample factor does not divide the image size");

    Tensor<T> x = imaging::gaussian_blur(gt, sigma);
    x = imaging::resize_bilinear(x, h / factor, w / factor);
    if (noise > 0) {
        for (auto& v : x.data()) v = static_cast<T>(v + noise * rng.normal());
    }
    if (spec.block_quantize) x = block_quantize(std::move(x), spec.block, step);
    x = imaging::resize_bilinear(x, h, w);
    return imaging::clamp01(std::move(x));
}

struct ReferenceSpec {
    int max_shift = 2;
    double gain_jitter = 0.1;
    double offset_jitter = 0.05;
};

/// Same content, different appearance: integer shift with edge replication
/// plus a per-channel gain/offset change.
template <class T>
Tensor<T> make_reference(const Tensor<T>& gt, const ReferenceSpec& spec, std::uint64_t seed) {
    imaging::require_image(gt, "make_reference");
    Rng rng(seed);
    const int span = 2 * spec.max_shift + 1;
    const int dx = static_cast<int>(rng.uniform_index(span)) - spec.max_shift;
    const int dy = static_cast<int>(rng.uniform_index(span)) - spec.max_shift;
    const std::size_t c = gt.dim(0), h = gt.dim(1), w = gt.dim(2);
    Tensor<T> out(gt.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double gain = 1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter);
        const double offset = rng.uniform(-spec.offset_jitter, spec.offset_jitter);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const auto sy = static_cast<std::size_t>(std::clamp<int>(int(y) - dy, 0, int(h) - 1));
                const auto sx = static_cast<std::size_t>(std::clamp<int>(int(x) - dx, 0, int(w) - 1));
                out.at(ch, y, x) = static_cast<T>(std::clamp(gain * gt.at(ch, sy, sx) + offset, 0.0, 1.0));
            }
    }
    return out;
}

}  // namespace ented::degradation
