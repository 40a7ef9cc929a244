#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ented/degradation.hpp"
#include "ented/image_io.hpp"
#include "ented/metrics.hpp"
#include "test_util.hpp"

using namespace ented;

namespace {

Tensor<double> image(Rng& rng, std::size_t h = 32, std::size_t w = 32) {
    return imaging::gaussian_blur(rng.uniform_tensor<double>({3, h, w}, 0.0, 1.0), 1.0);
}

/// SSIM from the windowed formula, recomputing every window's statistics from scratch in long double.
long double ssim_oracle(const Tensor<double>& a, const Tensor<double>& b, std::size_t win) {
    const long double c1 = 0.01L * 0.01L, c2 = 0.03L * 0.03L;
    long double total = 0;
    std::size_t n = 0;
    for (std::size_t ch = 0; ch < a.dim(0); ++ch)
        for (std::size_t y0 = 0; y0 + win <= a.dim(1); ++y0)
            for (std::size_t x0 = 0; x0 + win <= a.dim(2); ++x0) {
                std::vector<long double> va, vb;
                for (std::size_t y = 0; y < win; ++y)
                    for (std::size_t x = 0; x < win; ++x) {
                        va.push_back(a.at(ch, y0 + y, x0 + x));
                        vb.push_back(b.at(ch, y0 + y, x0 + x));
                    }
                const long double m = static_cast<long double>(va.size());
                long double ma = 0, mb = 0;
                for (std::size_t i = 0; i < va.size(); ++i) {
                    ma += va[i] / m;
                    mb += vb[i] / m;
                }
                long double sa = 0, sb = 0, sab = 0;
                for (std::size_t i = 0; i < va.size(); ++i) {
                    sa += (va[i] - ma) * (va[i] - ma) / m;
                    sb += (vb[i] - mb) * (vb[i] - mb) / m;
                    sab += (va[i] - ma) * (vb[i] - mb) / m;
                }
                total += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
                ++n;
            }
    return total / n;
}

}  // namespace

TEST(Degrade, NullSpecIsBitwiseIdentity) {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        const auto gt = image(rng);
        EXPECT_EQ(degradation::degrade(gt, degradation::DegradationSpec::null(), trial), gt);
    }
}

TEST(Degrade, SameSeedIsBitIdentical) {
    Rng rng(2);
    const auto gt = image(rng);
    const degradation::DegradationSpec spec;
    EXPECT_EQ(degradation::degrade(gt, spec, 77), degradation::degrade(gt, spec, 77));
    EXPECT_FALSE(degradation::degrade(gt, spec, 77) == degradation::degrade(gt, spec, 78));
}

TEST(Degrade, PsnrFallsAsNoiseGrows) {
    Rng rng(3);
    const auto gt = image(rng);
    double prev = 1e9;
    for (double noise : {0.0, 0.02, 0.05, 0.1, 0.2}) {
        auto spec = degradation::DegradationSpec::null();
        spec.noise_min = spec.noise_max = noise;
        double mean = 0;
        for (std::uint64_t s = 0; s < 8; ++s) mean += metrics::psnr(gt, degradation::degrade(gt, spec, s)) / 8;
        EXPECT_LT(mean, prev) << noise;
        prev = mean;
    }
}

TEST(Degrade, OutputsStayInUnitRangeAndFinite) {
    Rng rng(4);
    degradation::DegradationSpec harsh;
    harsh.noise_min = 0.2;
    harsh.noise_max = 0.5;
    harsh.factors = {4, 8};
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto out = degradation::degrade(image(rng), harsh, s);
        for (double v : out.data()) {
            ASSERT_TRUE(std::isfinite(v));
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
        }
    }
}

TEST(Degrade, InvalidSpecRejected) {
    degradation::DegradationSpec spec;
    spec.noise_min = -0.1;
    EXPECT_THROW(spec.validate(), std::invalid_argument);
    spec = {};
    spec.factors = {0};
    EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(BlockQuantize, MovesEachPixelAtMostHalfAStep) {
    Rng rng(5);
    const auto img = image(rng, 8, 8);
    const auto q = degradation::block_quantize(img, 4, 0.1);
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t by = 0; by < 8; by += 4)
            for (std::size_t bx = 0; bx < 8; bx += 4) {
                for (std::size_t y = by; y < by + 4; ++y)
                    for (std::size_t x = bx; x < bx + 4; ++x) {
                        const double d = q.at(ch, y, x) - img.at(ch, y, x);
                        EXPECT_LE(std::abs(d), 0.05 + 1e-12);
                    }
            }
}

TEST(Reference, SameSeedDeterministicAndInRange) {
    Rng rng(6);
    const auto gt = image(rng);
    const auto a = degradation::make_reference(gt, {}, 3);
    EXPECT_EQ(a, degradation::make_reference(gt, {}, 3));
    for (double v : a.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    degradation::ReferenceSpec none{0, 0.0, 0.0};
    EXPECT_EQ(degradation::make_reference(gt, none, 9), gt);
}

TEST(Psnr, IdenticalImagesGiveCap) {
    Rng rng(7);
    const auto a = image(rng);
    EXPECT_EQ(metrics::psnr(a, a), 99.0);
    EXPECT_EQ(metrics::psnr(a, a, 1.0, 60.0), 60.0);
}

TEST(Psnr, KnownMse) {
    Tensor<double> a({3, 4, 4}, 0.5), b({3, 4, 4}, 0.6);  // MSE 0.01
    EXPECT_NEAR(metrics::psnr(a, b), 20.0, 1e-12);
}

TEST(Psnr, MatchesDirectDefinitionAndIsSymmetric) {
    Rng rng(8);
    const auto a = image(rng), b = image(rng);
    long double mse = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mse += (static_cast<long double>(a[i]) - b[i]) * (a[i] - b[i]);
    mse /= a.size();
    EXPECT_NEAR(metrics::psnr(a, b), static_cast<double>(10 * std::log10(1 / mse)), 1e-12);
    EXPECT_EQ(metrics::psnr(a, b), metrics::psnr(b, a));
}

TEST(Psnr, ShapeMismatchAndBadPeakThrow) {
    EXPECT_THROW(metrics::psnr(Tensor<double>({3, 4, 4}), Tensor<double>({3, 4, 5})), DimensionError);
    EXPECT_THROW(metrics::psnr(Tensor<double>({3, 4, 4}), Tensor<double>({3, 4, 4}), 0.0), std::invalid_argument);
}

TEST(Ssim, SelfSimilarityAndSymmetry) {
    Rng rng(9);
    const auto a = image(rng, 16, 16), b = image(rng, 16, 16);
    EXPECT_NEAR(metrics::ssim(a, a), 1.0, 1e-12);
    EXPECT_EQ(metrics::ssim(a, b), metrics::ssim(b, a));
}

TEST(Ssim, MatchesWindowedOracle) {
    Rng rng(10);
    const auto a = rng.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
    const auto b = rng.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
    EXPECT_NEAR(metrics::ssim(a, b), static_cast<double>(ssim_oracle(a, b, 8)), 1e-12);
    const auto c = image(rng, 12, 10), d = image(rng, 12, 10);
    EXPECT_NEAR(metrics::ssim(c, d), static_cast<double>(ssim_oracle(c, d, 8)), 1e-12);
}

TEST(Ssim, BoundedOnRandomPairs) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = rng.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
        auto b = a;
        for (auto& v : b.data()) v = 1.0 - v + 0.01 * rng.normal();  // anti-correlated
        const double s = metrics::ssim(a, b);
        EXPECT_GE(s, -1.0);
        EXPECT_LE(s, 1.0);
    }
}

TEST(Ssim, WindowLargerThanImageThrows) {
    EXPECT_THROW(metrics::ssim(Tensor<double>({3, 4, 4}), Tensor<double>({3, 4, 4})), DimensionError);
    EXPECT_THROW(metrics::ssim(Tensor<double>({3, 8, 8}), Tensor<double>({3, 8, 9})), DimensionError);
}

TEST(ImageIo, PngRoundTripOnTheEightBitGrid) {
    Rng rng(12);
    const auto img = image_io::quantize8(image(rng, 9, 13));
    const auto path = std::filesystem::temp_directory_path() / "ented_io_roundtrip.png";
    image_io::write_png(path.string(), img);
    const auto back = image_io::read_png<double>(path.string());
    EXPECT_LT(max_abs_diff(back, img), 1e-15);
    std::filesystem::remove(path);
    EXPECT_THROW(image_io::read_png<double>(path.string()), image_io::ImageError);
}
