#pragma once

#include <functional>

#include "ented/numerics/ops.hpp"
#include "ented/numerics/rng.hpp"

namespace testutil {

using ented::Rng;
using ented::Tape;
using ented::Tensor;
using ented::Var;

inline Tensor<double> randn(Rng& rng, ented::Shape s, double sd = 1.0) {
    return rng.normal_tensor<double>(std::move(s), sd);
}

inline Tensor<double> eval(const std::function<Var(Tape<double>&)>& f) {
    Tape<double> t;
    return t.value(f(t));
}

}  // namespace testutil
