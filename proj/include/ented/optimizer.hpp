#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "ented/numerics/tensor.hpp"

namespace ented {

/// Adam with per-tensor step counts, so one tensor's moments can be reset
/// (and its bias correction restarted) without touching the others.
template <class T>
class Adam {
   public:
    struct Slot {
        Tensor<T> m, v;
        std::uint64_t step = 0;
    };

    Adam() = default;
    Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(const std::string& name, Tensor<T>& param, const Tensor<T>& grad) {
        param.require_same_shape(grad, "Adam::step");
        Slot& s = slots_[name];
        if (s.m.empty()) {
            s.m = Tensor<T>(param.shape());
            s.v = Tensor<T>(param.shape());
        }
        ++s.step;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(s.step));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(s.step));
        const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_);
        const T step_size = static_cast<T>(lr_ / c1);
        const T inv_c2 = static_cast<T>(1.0 / c2);
        const T eps = static_cast<T>(eps_);
        for (std::size_t i = 0; i < param.size(); ++i) {
            const T g = grad[i];
            s.m[i] = b1 * s.m[i] + (T{1} - b1) * g;
            s.v[i] = b2 * s.v[i] + (T{1} - b2) * g * g;
            param[i] -= step_size * s.m[i] / (std::sqrt(s.v[i] * inv_c2) + eps);
        }
    }

    void reset(const std::string& name) { slots_.erase(name); }

    std::map<std::string, Slot>& slots() noexcept { return slots_; }
    const std::map<std::string, Slot>& slots() const noexcept { return slots_; }

   private:
    double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    std::map<std::string, Slot> slots_;
};

}  // namespace ented
