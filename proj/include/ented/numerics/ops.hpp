#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and
// records a closure that maps the output gradient to input gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ented/numerics/tape.hpp"
#include "ented/numerics/tensor.hpp"

namespace ented::ops {

namespace detail {

template <class T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* op) {
    if (t.rank() != r) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                             shape_str(t.shape()));
    }
}

/// C = A(m×n) · B(n×p)
template <class T>
Tensor<T> gemm_nn(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
    Tensor<T> c({m, p});
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = &c[i * p];
        for (std::size_t k = 0; k < n; ++k) {
            const T av = a[i * n + k];
            if (av == T{0}) continue;
            const T* brow = &b[k * p];
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

/// C = A(m×n) · B(p×n)ᵀ
template <class T>
Tensor<T> gemm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(0);
    Tensor<T> c({m, p});
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = &a[i * n];
        for (std::size_t j = 0; j < p; ++j) {
            const T* brow = &b[j * n];
            T s = 0;
            for (std::size_t k = 0; k < n; ++k) s += arow[k] * brow[k];
            c[i * p + j] = s;
        }
    }
    return c;
}

/// C = A(n×m)ᵀ · B(n×p)
template <class T>
Tensor<T> gemm_tn(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.dim(0), m = a.dim(1), p = b.dim(1);
    Tensor<T> c({m, p});
    for (std::size_t k = 0; k < n; ++k) {
        const T* arow = &a[k * m];
        const T* brow = &b[k * p];
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T{0}) continue;
            T* crow = &c[i * p];
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

/// Splits a shape around `axis` into (outer, length, inner) strides.
struct AxisView {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    }
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
    v.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) throw DimensionError("conv kernel larger than padded input");
    return (in + 2 * pad - k) / stride + 1;
}

// Output columns ox for which ox*stride + kx - pad lands in [0, in_w).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_w, std::size_t in_w, std::size_t k,
                                                       std::size_t stride, std::size_t pad) {
    const long lo_num = static_cast<long>(pad) - static_cast<long>(k);
    long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long hi_num = static_cast<long>(in_w) - 1 + static_cast<long>(pad) - static_cast<long>(k);
    long hi = hi_num < 0 ? -1 : hi_num / static_cast<long>(stride);
    hi = std::min<long>(hi, static_cast<long>(out_w) - 1);
    if (hi < lo) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi) + 1};
}

}  // namespace detail

// ---------------------------------------------------------------- structural

template <class T>
Var reshape(Tape<T>& t, Var x, Shape shape) {
    const Shape orig = t.value(x).shape();
    return t.record("reshape", t.value(x).reshaped(std::move(shape)), {x},
                    [x, orig](Tape<T>& tp, const Tensor<T>& g) { tp.accumulate(x, g.reshaped(orig)); });
}

template <class T>
Tensor<T> transpose_raw(const Tensor<T>& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

template <class T>
Var transpose(Tape<T>& t, Var x) {
    return t.record("transpose", transpose_raw(t.value(x)), {x},
                    [x](Tape<T>& tp, const Tensor<T>& g) { tp.accumulate(x, transpose_raw(g)); });
}

/// Concatenation along the leading axis.
template <class T>
Var concat0(Tape<T>& t, Var a, Var b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (av.rank() != bv.rank() || !std::equal(av.shape().begin() + 1, av.shape().end(), bv.shape().begin() + 1)) {
        throw DimensionError("concat0: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    }
    Shape s = av.shape();
    s[0] += bv.dim(0);
    std::vector<T> d(av.storage());
    d.insert(d.end(), bv.storage().begin(), bv.storage().end());
    const Shape sa = av.shape(), sb = bv.shape();
    const std::size_t na = av.size();
    return t.record("concat0", Tensor<T>(s, std::move(d)), {a, b},
                    [a, b, sa, sb, na](Tape<T>& tp, const Tensor<T>& g) {
                        std::vector<T> ga(g.storage().begin(), g.storage().begin() + na);
                        std::vector<T> gb(g.storage().begin() + na, g.storage().end());
                        tp.accumulate(a, Tensor<T>(sa, std::move(ga)));
                        tp.accumulate(b, Tensor<T>(sb, std::move(gb)));
                    });
}

/// Forward value unchanged; blocks gradient flow.
template <class T>
Var stop_gradient(Tape<T>& t, Var x) {
    return t.constant(t.value(x));
}

/// Forward value of `quantized`; the backward pass hands the incoming
/// gradient to `latent` untouched and nothing to `quantized`.
template <class T>
Var straight_through(Tape<T>& t, Var latent, Var quantized) {
    t.value(latent).require_same_shape(t.value(quantized), "straight_through");
    return t.record("straight_through", t.value(quantized), {latent},
                    [latent](Tape<T>& tp, const Tensor<T>& g) { tp.accumulate(latent, g); });
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
    t.value(a).require_same_shape(t.value(b), "add");
    Tensor<T> out = t.value(a);
    out += t.value(b);
    return t.record("add", std::move(out), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
    t.value(a).require_same_shape(t.value(b), "sub");
    Tensor<T> out = t.value(a);
    const auto& bv = t.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return t.record("sub", std::move(out), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
        tp.accumulate(a, g);
        Tensor<T> ng = g;
        for (auto& v : ng.data()) v = -v;
        tp.accumulate(b, ng);
    });
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
    t.value(a).require_same_shape(t.value(b), "mul");
    Tensor<T> out = t.value(a);
    const auto& bv = t.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return t.record("mul", std::move(out), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
        const auto& av = tp.value(a);
        const auto& bv = tp.value(b);
        Tensor<T> ga = g, gb = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] *= bv[i];
            gb[i] *= av[i];
        }
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
    });
}

/// Scalar-times-tensor, the only broadcast supported.
template <class T>
Var scale(Tape<T>& t, Var x, T s) {
    Tensor<T> out = t.value(x);
    for (auto& v : out.data()) v *= s;
    return t.record("scale", std::move(out), {x}, [x, s](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx = g;
        for (auto& v : gx.data()) v *= s;
        tp.accumulate(x, gx);
    });
}

template <class T>
Var leaky_relu(Tape<T>& t, Var x, T slope) {
    Tensor<T> out = t.value(x);
    for (auto& v : out.data()) v = v > T{0} ? v : slope * v;
    return t.record("leaky_relu", std::move(out), {x}, [x, slope](Tape<T>& tp, const Tensor<T>& g) {
        const auto& xv = tp.value(x);
        Tensor<T> gx = g;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] *= xv[i] > T{0} ? T{1} : slope;
        tp.accumulate(x, gx);
    });
}

/// Gradient passes where lo <= x <= hi.
template <class T>
Var clamp(Tape<T>& t, Var x, T lo, T hi) {
    Tensor<T> out = t.value(x);
    for (auto& v : out.data()) v = std::clamp(v, lo, hi);
    return t.record("clamp", std::move(out), {x}, [x, lo, hi](Tape<T>& tp, const Tensor<T>& g) {
        const auto& xv = tp.value(x);
        Tensor<T> gx = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] < lo || xv[i] > hi) gx[i] = 0;
        }
        tp.accumulate(x, gx);
    });
}

/// log(1 + exp(x)) without overflow.
template <class T>
T softplus_value(T x) {
    return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
}

template <class T>
Var softplus(Tape<T>& t, Var x) {
    Tensor<T> out = t.value(x);
    for (auto& v : out.data()) v = softplus_value(v);
    return t.record("softplus", std::move(out), {x}, [x](Tape<T>& tp, const Tensor<T>& g) {
        const auto& xv = tp.value(x);
        Tensor<T> gx = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T e = std::exp(-std::abs(xv[i]));
            const T sig = xv[i] >= 0 ? T{1} / (T{1} + e) : e / (T{1} + e);
            gx[i] *= sig;
        }
        tp.accumulate(x, gx);
    });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var sum(Tape<T>& t, Var x) {
    T s = 0;
    for (T v : t.value(x).data()) s += v;
    return t.record("sum", Tensor<T>::scalar(s), {x}, [x](Tape<T>& tp, const Tensor<T>& g) {
        tp.accumulate(x, Tensor<T>(tp.value(x).shape(), g[0]));
    });
}

template <class T>
Var mean(Tape<T>& t, Var x) {
    const T n = static_cast<T>(t.value(x).size());
    T s = 0;
    for (T v : t.value(x).data()) s += v;
    return t.record("mean", Tensor<T>::scalar(s / n), {x}, [x, n](Tape<T>& tp, const Tensor<T>& g) {
        tp.accumulate(x, Tensor<T>(tp.value(x).shape(), g[0] / n));
    });
}

/// mean |x|
template <class T>
Var abs_mean(Tape<T>& t, Var x) {
    const T n = static_cast<T>(t.value(x).size());
    T s = 0;
    for (T v : t.value(x).data()) s += std::abs(v);
    return t.record("abs_mean", Tensor<T>::scalar(s / n), {x}, [x, n](Tape<T>& tp, const Tensor<T>& g) {
        const auto& xv = tp.value(x);
        Tensor<T> gx(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            gx[i] = xv[i] > 0 ? g[0] / n : (xv[i] < 0 ? -g[0] / n : T{0});
        }
        tp.accumulate(x, gx);
    });
}

/// Σ x²
template <class T>
Var sum_squares(Tape<T>& t, Var x) {
    T s = 0;
    for (T v : t.value(x).data()) s += v * v;
    return t.record("sum_squares", Tensor<T>::scalar(s), {x}, [x](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx = tp.value(x);
        for (auto& v : gx.data()) v *= T{2} * g[0];
        tp.accumulate(x, gx);
    });
}

/// [C×H×W] -> [C], spatial mean per channel.
template <class T>
Var global_avg_pool(Tape<T>& t, Var x) {
    const auto& xv = t.value(x);
    detail::require_rank(xv, 3, "global_avg_pool");
    const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor<T> out({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        T s = 0;
        for (std::size_t p = 0; p < hw; ++p) s += xv[ch * hw + p];
        out[ch] = s / static_cast<T>(hw);
    }
    return t.record("global_avg_pool", std::move(out), {x}, [x, c, hw](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx(tp.value(x).shape());
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] = g[ch] / static_cast<T>(hw);
        tp.accumulate(x, gx);
    });
}

// ---------------------------------------------------------------- linear algebra

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw DimensionError("matmul: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                             " are incompatible");
    }
    return t.record("matmul", detail::gemm_nn(av, bv), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, detail::gemm_nt(g, tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, detail::gemm_tn(tp.value(a), g));
    });
}

/// y = W·x + b for W[o×i], x[i], b[o] (b optional).
template <class T>
Var linear(Tape<T>& t, Var w, Var x, Var b = {}) {
    const auto& wv = t.value(w);
    const auto& xv = t.value(x);
    if (wv.rank() != 2 || xv.size() != wv.dim(1)) {
        throw DimensionError("linear: weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
    }
    const std::size_t o = wv.dim(0), in = wv.dim(1);
    Tensor<T> out({o});
    for (std::size_t r = 0; r < o; ++r) {
        T s = b.valid() ? t.value(b)[r] : T{0};
        for (std::size_t j = 0; j < in; ++j) s += wv[r * in + j] * xv[j];
        out[r] = s;
    }
    if (b.valid() && t.value(b).size() != o) throw DimensionError("linear: bias size mismatch");
    return t.record("linear", std::move(out), {w, x, b}, [w, x, b, o, in](Tape<T>& tp, const Tensor<T>& g) {
        const auto& wv = tp.value(w);
        const auto& xv = tp.value(x);
        if (tp.requires_grad(w)) {
            Tensor<T> gw(wv.shape());
            for (std::size_t r = 0; r < o; ++r)
                for (std::size_t j = 0; j < in; ++j) gw[r * in + j] = g[r] * xv[j];
            tp.accumulate(w, gw);
        }
        if (tp.requires_grad(x)) {
            Tensor<T> gx(xv.shape());
            for (std::size_t r = 0; r < o; ++r)
                for (std::size_t j = 0; j < in; ++j) gx[j] += g[r] * wv[r * in + j];
            tp.accumulate(x, gx);
        }
        if (b.valid()) tp.accumulate(b, g);
    });
}

// ---------------------------------------------------------------- normalization

template <class T>
Tensor<T> softmax_raw(const Tensor<T>& x, std::size_t axis, bool stabilized = true) {
    const auto v = detail::axis_view(x.shape(), axis);
    Tensor<T> y(x.shape());
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            T m = 0;
            if (stabilized) {
                m = x[base];
                for (std::size_t k = 1; k < v.len; ++k) m = std::max(m, x[base + k * v.inner]);
            }
            T s = 0;
            for (std::size_t k = 0; k < v.len; ++k) {
                const T e = std::exp(x[base + k * v.inner] - m);
                y[base + k * v.inner] = e;
                s += e;
            }
            for (std::size_t k = 0; k < v.len; ++k) y[base + k * v.inner] /= s;
        }
    }
    return y;
}

/// Softmax along `axis`; stabilized mode subtracts the slice max first.
template <class T>
Var softmax(Tape<T>& t, Var x, std::size_t axis, bool stabilized = true) {
    Tensor<T> y = softmax_raw(t.value(x), axis, stabilized);
    return t.record("softmax", y, {x}, [x, axis, y](Tape<T>& tp, const Tensor<T>& g) {
        const auto v = detail::axis_view(y.shape(), axis);
        Tensor<T> gx(y.shape());
        for (std::size_t o = 0; o < v.outer; ++o) {
            for (std::size_t in = 0; in < v.inner; ++in) {
                const std::size_t base = o * v.len * v.inner + in;
                T dot = 0;
                for (std::size_t k = 0; k < v.len; ++k) dot += g[base + k * v.inner] * y[base + k * v.inner];
                for (std::size_t k = 0; k < v.len; ++k) {
                    const std::size_t i = base + k * v.inner;
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
        }
        tp.accumulate(x, gx);
    });
}

/// (x - mean(x)) / sqrt(Σ x² + eps) along `axis`. The denominator sums the
/// raw (uncentred) squares.
template <class T>
Var feature_normalize(Tape<T>& t, Var x, std::size_t axis, T eps = T(1e-8)) {
    if (!(eps > T{0})) throw std::invalid_argument("feature_normalize: eps must be positive");
    const auto& xv = t.value(x);
    const auto v = detail::axis_view(xv.shape(), axis);
    Tensor<T> y(xv.shape());
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            T m = 0, ss = 0;
            for (std::size_t k = 0; k < v.len; ++k) {
                const T xi = xv[base + k * v.inner];
                m += xi;
                ss += xi * xi;
            }
            m /= static_cast<T>(v.len);
            const T r = T{1} / std::sqrt(ss + eps);
            for (std::size_t k = 0; k < v.len; ++k) {
                const std::size_t i = base + k * v.inner;
                y[i] = (xv[i] - m) * r;
            }
        }
    }
    return t.record("feature_normalize", std::move(y), {x}, [x, axis, eps](Tape<T>& tp, const Tensor<T>& g) {
        const auto& xv = tp.value(x);
        const auto v = detail::axis_view(xv.shape(), axis);
        Tensor<T> gx(xv.shape());
        const T n = static_cast<T>(v.len);
        for (std::size_t o = 0; o < v.outer; ++o) {
            for (std::size_t in = 0; in < v.inner; ++in) {
                const std::size_t base = o * v.len * v.inner + in;
                T m = 0, ss = 0, gm = 0;
                for (std::size_t k = 0; k < v.len; ++k) {
                    const std::size_t i = base + k * v.inner;
                    m += xv[i];
                    ss += xv[i] * xv[i];
                    gm += g[i];
                }
                m /= n;
                gm /= n;
                const T r = T{1} / std::sqrt(ss + eps);
                T gu = 0;
                for (std::size_t k = 0; k < v.len; ++k) {
                    const std::size_t i = base + k * v.inner;
                    gu += g[i] * (xv[i] - m);
                }
                for (std::size_t k = 0; k < v.len; ++k) {
                    const std::size_t i = base + k * v.inner;
                    gx[i] = r * (g[i] - gm) - r * r * r * xv[i] * gu;
                }
            }
        }
        tp.accumulate(x, gx);
    });
}

// ---------------------------------------------------------------- convolution

/// 1×1 convolution: x[C_in×H×W], w[C_out×C_in], optional bias[C_out].
template <class T>
Var conv1x1(Tape<T>& t, Var x, Var w, Var b = {}) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    detail::require_rank(xv, 3, "conv1x1");
    if (wv.rank() != 2 || wv.dim(1) != xv.dim(0)) {
        throw DimensionError("conv1x1: weight " + shape_str(wv.shape()) + " does not match input " +
                             shape_str(xv.shape()));
    }
    const std::size_t co = wv.dim(0), h = xv.dim(1), wd = xv.dim(2), hw = h * wd;
    Tensor<T> y = detail::gemm_nn(wv, xv.reshaped({xv.dim(0), hw}));
    if (b.valid()) {
        const auto& bv = t.value(b);
        if (bv.size() != co) throw DimensionError("conv1x1: bias size mismatch");
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t p = 0; p < hw; ++p) y[o * hw + p] += bv[o];
    }
    return t.record("conv1x1", y.reshaped({co, h, wd}), {x, w, b},
                    [x, w, b, co, hw](Tape<T>& tp, const Tensor<T>& g) {
                        const auto& xv = tp.value(x);
                        const Tensor<T> g2 = g.reshaped({co, hw});
                        if (tp.requires_grad(x)) {
                            tp.accumulate(x, detail::gemm_tn(tp.value(w), g2).reshaped(xv.shape()));
                        }
                        if (tp.requires_grad(w)) {
                            tp.accumulate(w, detail::gemm_nt(g2, xv.reshaped({xv.dim(0), hw})));
                        }
                        if (b.valid()) {
                            Tensor<T> gb({co});
                            for (std::size_t o = 0; o < co; ++o)
                                for (std::size_t p = 0; p < hw; ++p) gb[o] += g2[o * hw + p];
                            tp.accumulate(b, gb);
                        }
                    });
}

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

template <class T>
Tensor<T> conv2d_raw(const Tensor<T>& x, const Tensor<T>& w, const T* bias, ConvGeometry geo) {
    const std::size_t ci = x.dim(0), ih = x.dim(1), iw = x.dim(2);
    const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t oh = detail::conv_out_size(ih, kh, geo.stride, geo.pad);
    const std::size_t ow = detail::conv_out_size(iw, kw, geo.stride, geo.pad);
    Tensor<T> y({co, oh, ow});
    for (std::size_t o = 0; o < co; ++o) {
        T* yo = &y[o * oh * ow];
        if (bias) std::fill(yo, yo + oh * ow, bias[o]);
        for (std::size_t c = 0; c < ci; ++c) {
            const T* xc = &x[c * ih * iw];
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const auto [oy0, oy1] = detail::valid_range(oh, ih, ky, geo.stride, geo.pad);
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const T wv = w[((o * ci + c) * kh + ky) * kw + kx];
                    const auto [ox0, ox1] = detail::valid_range(ow, iw, kx, geo.stride, geo.pad);
                    for (std::size_t oy = oy0; oy < oy1; ++oy) {
                        const T* xrow = xc + (oy * geo.stride + ky - geo.pad) * iw;
                        T* yrow = yo + oy * ow;
                        if (geo.stride == 1) {
                            for (std::size_t ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xrow[ox + kx - geo.pad];
                        } else {
                            for (std::size_t ox = ox0; ox < ox1; ++ox)
                                yrow[ox] += wv * xrow[ox * geo.stride + kx - geo.pad];
                        }
                    }
                }
            }
        }
    }
    return y;
}

/// Zero-padded 2-D convolution: x[C_in×H×W], w[C_out×C_in×kh×kw], optional bias.
template <class T>
Var conv2d(Tape<T>& t, Var x, Var w, Var b = {}, ConvGeometry geo = {}) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    detail::require_rank(xv, 3, "conv2d");
    if (wv.rank() != 4 || wv.dim(1) != xv.dim(0)) {
        throw DimensionError("conv2d: weight " + shape_str(wv.shape()) + " does not match input " +
                             shape_str(xv.shape()));
    }
    if (geo.stride == 0) throw DimensionError("conv2d: stride must be positive");
    const T* bias = nullptr;
    if (b.valid()) {
        if (t.value(b).size() != wv.dim(0)) throw DimensionError("conv2d: bias size mismatch");
        bias = t.value(b).data().data();
    }
    Tensor<T> y = conv2d_raw(xv, wv, bias, geo);
    return t.record("conv2d", std::move(y), {x, w, b}, [x, w, b, geo](Tape<T>& tp, const Tensor<T>& g) {
        const auto& xv = tp.value(x);
        const auto& wv = tp.value(w);
        const std::size_t ci = xv.dim(0), ih = xv.dim(1), iw = xv.dim(2);
        const std::size_t co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
        const std::size_t oh = g.dim(1), ow = g.dim(2);
        const bool need_x = tp.requires_grad(x), need_w = tp.requires_grad(w);
        Tensor<T> gx, gw;
        if (need_x) gx = Tensor<T>(xv.shape());
        if (need_w) gw = Tensor<T>(wv.shape());
        for (std::size_t o = 0; o < co; ++o) {
            const T* go = &g[o * oh * ow];
            for (std::size_t c = 0; c < ci; ++c) {
                const T* xc = &xv[c * ih * iw];
                T* gxc = need_x ? &gx[c * ih * iw] : nullptr;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const auto [oy0, oy1] = detail::valid_range(oh, ih, ky, geo.stride, geo.pad);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::size_t widx = ((o * ci + c) * kh + ky) * kw + kx;
                        const T wval = wv[widx];
                        const auto [ox0, ox1] = detail::valid_range(ow, iw, kx, geo.stride, geo.pad);
                        T acc = 0;
                        for (std::size_t oy = oy0; oy < oy1; ++oy) {
                            const std::size_t row = (oy * geo.stride + ky - geo.pad) * iw;
                            const T* grow = go + oy * ow;
                            // Separate loops so the scatter vectorises for stride 1.
                            if (need_w) {
                                for (std::size_t ox = ox0; ox < ox1; ++ox)
                                    acc += grow[ox] * xc[row + ox * geo.stride + kx - geo.pad];
                            }
                            if (gxc && geo.stride == 1) {
                                for (std::size_t ox = ox0; ox < ox1; ++ox) gxc[row + ox + kx - geo.pad] += wval * grow[ox];
                            } else if (gxc) {
                                for (std::size_t ox = ox0; ox < ox1; ++ox)
                                    gxc[row + ox * geo.stride + kx - geo.pad] += wval * grow[ox];
                            }
                        }
                        if (need_w) gw[widx] += acc;
                    }
                }
            }
        }
        if (need_x) tp.accumulate(x, gx);
        if (need_w) tp.accumulate(w, gw);
        if (b.valid()) {
            Tensor<T> gb({co});
            for (std::size_t o = 0; o < co; ++o)
                for (std::size_t p = 0; p < oh * ow; ++p) gb[o] += g[o * oh * ow + p];
            tp.accumulate(b, gb);
        }
    });
}

/// w[O×I×kh×kw] scaled per input channel by s[I].
template <class T>
Var modulate(Tape<T>& t, Var w, Var s) {
    const auto& wv = t.value(w);
    const auto& sv = t.value(s);
    if (wv.rank() != 4 || sv.size() != wv.dim(1)) {
        throw DimensionError("modulate: weight " + shape_str(wv.shape()) + " vs scales " + shape_str(sv.shape()));
    }
    const std::size_t co = wv.dim(0), ci = wv.dim(1), kk = wv.dim(2) * wv.dim(3);
    Tensor<T> out = wv;
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t k = 0; k < kk; ++k) out[(o * ci + c) * kk + k] *= sv[c];
    return t.record("modulate", std::move(out), {w, s}, [w, s, co, ci, kk](Tape<T>& tp, const Tensor<T>& g) {
        const auto& wv = tp.value(w);
        const auto& sv = tp.value(s);
        Tensor<T> gw(wv.shape()), gs(sv.shape());
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t c = 0; c < ci; ++c)
                for (std::size_t k = 0; k < kk; ++k) {
                    const std::size_t i = (o * ci + c) * kk + k;
                    gw[i] = g[i] * sv[c];
                    gs[c] += g[i] * wv[i];
                }
        tp.accumulate(w, gw);
        tp.accumulate(s, gs);
    });
}

/// Rescales each output channel of w[O×...] to unit L2 norm (up to eps).
template <class T>
Var demodulate(Tape<T>& t, Var w, T eps = T(1e-8)) {
    const auto& wv = t.value(w);
    const std::size_t co = wv.dim(0), per = wv.size() / co;
    Tensor<T> y = wv;
    std::vector<T> inv(co);
    for (std::size_t o = 0; o < co; ++o) {
        T ss = 0;
        for (std::size_t k = 0; k < per; ++k) ss += wv[o * per + k] * wv[o * per + k];
        inv[o] = T{1} / std::sqrt(ss + eps);
        for (std::size_t k = 0; k < per; ++k) y[o * per + k] *= inv[o];
    }
    return t.record("demodulate", y, {w}, [w, y, inv, co, per](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gw(y.shape());
        for (std::size_t o = 0; o < co; ++o) {
            T dot = 0;
            for (std::size_t k = 0; k < per; ++k) dot += g[o * per + k] * y[o * per + k];
            for (std::size_t k = 0; k < per; ++k) {
                const std::size_t i = o * per + k;
                gw[i] = (g[i] - y[i] * dot) * inv[o];
            }
        }
        tp.accumulate(w, gw);
    });
}

/// x[C×H×W] times g[C] per channel.
template <class T>
Var scale_channels(Tape<T>& t, Var x, Var gamma) {
    const auto& xv = t.value(x);
    const auto& gv = t.value(gamma);
    detail::require_rank(xv, 3, "scale_channels");
    if (gv.size() != xv.dim(0)) {
        throw DimensionError("scale_channels: scales " + shape_str(gv.shape()) + " vs map " + shape_str(xv.shape()));
    }
    const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor<T> y = xv;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) y[ch * hw + p] *= gv[ch];
    return t.record("scale_channels", std::move(y), {x, gamma}, [x, gamma, c, hw](Tape<T>& tp, const Tensor<T>& g) {
        const auto& xv = tp.value(x);
        const auto& gv = tp.value(gamma);
        Tensor<T> gx(xv.shape()), gg(gv.shape());
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
                gx[ch * hw + p] = g[ch * hw + p] * gv[ch];
                gg[ch] += g[ch * hw + p] * xv[ch * hw + p];
            }
        tp.accumulate(x, gx);
        tp.accumulate(gamma, gg);
    });
}

/// Nearest-neighbour upsampling of x[C×H×W] by an integer factor.
template <class T>
Var upsample_nearest(Tape<T>& t, Var x, std::size_t f) {
    const auto& xv = t.value(x);
    detail::require_rank(xv, 3, "upsample_nearest");
    const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor<T> y({c, h * f, w * f});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t yy = 0; yy < h * f; ++yy)
            for (std::size_t xx = 0; xx < w * f; ++xx) y.at(ch, yy, xx) = xv.at(ch, yy / f, xx / f);
    return t.record("upsample_nearest", std::move(y), {x}, [x, f, c, h, w](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx({c, h, w});
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t yy = 0; yy < h * f; ++yy)
                for (std::size_t xx = 0; xx < w * f; ++xx) gx.at(ch, yy / f, xx / f) += g.at(ch, yy, xx);
        tp.accumulate(x, gx);
    });
}

/// Rows of table[K×c] picked by index into a c×h×w map (position p = y*w + x).
template <class T>
Var gather_rows(Tape<T>& t, Var table, std::vector<std::size_t> indices, std::size_t h, std::size_t w) {
    const auto& tv = t.value(table);
    detail::require_rank(tv, 2, "gather_rows");
    const std::size_t k = tv.dim(0), c = tv.dim(1), hw = h * w;
    if (indices.size() != hw) throw DimensionError("gather_rows: index count does not match h*w");
    Tensor<T> y({c, h, w});
    for (std::size_t p = 0; p < hw; ++p) {
        if (indices[p] >= k) throw std::out_of_range("gather_rows: index out of range");
        for (std::size_t ch = 0; ch < c; ++ch) y[ch * hw + p] = tv[indices[p] * c + ch];
    }
    return t.record("gather_rows", std::move(y), {table},
                    [table, idx = std::move(indices), c, hw](Tape<T>& tp, const Tensor<T>& g) {
                        Tensor<T> gt(tp.value(table).shape());
                        for (std::size_t p = 0; p < hw; ++p)
                            for (std::size_t ch = 0; ch < c; ++ch) gt[idx[p] * c + ch] += g[ch * hw + p];
                        tp.accumulate(table, gt);
                    });
}

}  // namespace ented::ops
