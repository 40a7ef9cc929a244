#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "ented/numerics/tensor.hpp"

namespace ented {

/// Counter-based generator: the n-th draw is a pure function of (key, n), so
/// the whole state is two integers and independent streams come from split().
class Rng {
   public:
    Rng() = default;
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x5851F42D4C957F2DULL)) {}
    Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept { return mix(key_ + (counter_++) * kGamma); }

    /// Child stream identified by tag; does not advance this stream.
    Rng split(std::uint64_t tag) const noexcept {
        return Rng(mix(key_ ^ mix(tag * kGamma + 0xD1B54A32D192ED03ULL)), 0);
    }

    /// Uniform in [0, 1).
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    std::size_t uniform_index(std::size_t n) noexcept {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    /// Standard normal via Box-Muller; consumes two draws.
    double normal() noexcept {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <std::floating_point T>
    Tensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(stddev * normal());
        return t;
    }

    template <std::floating_point T>
    Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
        return t;
    }

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

   private:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
    std::uint64_t key_ = mix(0x5851F42D4C957F2DULL);
    std::uint64_t counter_ = 0;
};

}  // namespace ented
