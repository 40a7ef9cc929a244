#pragma once

// Reference evaluations used only by the tests. They are written straight
// from the defining formulas with long double accumulation, and share no
// code with the library kernels they check.

#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <algorithm>
#include <vector>

#include "ented/numerics/rng.hpp"
#include "ented/numerics/tensor.hpp"

namespace oracle {

using ented::Tensor;
using LD = long double;
using Mat = std::vector<std::vector<LD>>;

inline Mat to_mat(const Tensor<double>& t) {
    Mat m(t.dim(0), std::vector<LD>(t.dim(1)));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
    return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<LD>(b[0].size(), 0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b[0].size(); ++j)
            for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
}

inline Mat transpose(const Mat& a) {
    Mat t(a[0].size(), std::vector<LD>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
    return t;
}

/// exp(x_i) / Σ exp(x_j), no max subtraction.
inline std::vector<LD> softmax(const std::vector<LD>& x) {
    LD s = 0;
    for (LD v : x) s += std::exp(v);
    std::vector<LD> y;
    for (LD v : x) y.push_back(std::exp(v) / s);
    return y;
}

/// Row-wise softmax of a matrix.
inline Mat softmax_rows(const Mat& m) {
    Mat out;
    for (const auto& row : m) out.push_back(softmax(row));
    return out;
}

inline Mat softmax_cols(const Mat& m) { return transpose(softmax_rows(transpose(m))); }

/// (x − mean) / sqrt(Σ x² + eps)
inline std::vector<LD> feature_normalize(const std::vector<LD>& x, LD eps) {
    LD mean = 0, ss = 0;
    for (LD v : x) {
        mean += v;
        ss += v * v;
    }
    mean /= static_cast<LD>(x.size());
    std::vector<LD> y;
    for (LD v : x) y.push_back((v - mean) / std::sqrt(ss + eps));
    return y;
}

/// Direct per-output-pixel convolution with zero padding.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias,
                             std::size_t stride, std::size_t pad) {
    const long ci = x.dim(0), ih = x.dim(1), iw = x.dim(2);
    const long co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const long oh = (ih + 2 * long(pad) - kh) / long(stride) + 1;
    const long ow = (iw + 2 * long(pad) - kw) / long(stride) + 1;
    Tensor<double> y({std::size_t(co), std::size_t(oh), std::size_t(ow)});
    for (long o = 0; o < co; ++o)
        for (long oy = 0; oy < oh; ++oy)
            for (long ox = 0; ox < ow; ++ox) {
                LD s = bias ? (*bias)[o] : 0.0L;
                for (long c = 0; c < ci; ++c)
                    for (long ky = 0; ky < kh; ++ky)
                        for (long kx = 0; kx < kw; ++kx) {
                            const long iy = oy * long(stride) + ky - long(pad);
                            const long ix = ox * long(stride) + kx - long(pad);
                            if (iy < 0 || ix < 0 || iy >= ih || ix >= iw) continue;
                            s += static_cast<LD>(w[((o * ci + c) * kh + ky) * kw + kx]) * x.at(c, iy, ix);
                        }
                y.at(o, oy, ox) = static_cast<double>(s);
            }
    return y;
}

inline LD max_abs_diff(const Mat& a, const Tensor<double>& t) {
    LD m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[0].size(); ++j) m = std::max(m, std::abs(a[i][j] - t[i * a[0].size() + j]));
    return m;
}


/// Image [C×H×W] to matrix [C×HW].
inline Mat flatten(const Tensor<double>& x) {
    const std::size_t c = x.dim(0), hw = x.size() / c;
    Mat m(c, std::vector<LD>(hw));
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t p = 0; p < hw; ++p) m[i][p] = x[i * hw + p];
    return m;
}

struct TextureRef {
    Mat attention;  // k×hw
    Mat texture;    // k×c
};

/// Extraction, term by term: logits over space, softmax along space, then a
/// weighted sum of the projected reference features.
inline TextureRef extract(const Tensor<double>& f_ref, const Tensor<double>& we, const Tensor<double>& proj) {
    const Mat f = flatten(f_ref);
    const std::size_t c = f.size(), hw = f[0].size(), k = we.dim(0);
    Mat logits(k, std::vector<LD>(hw, 0));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) logits[i][p] += static_cast<LD>(we[i * c + ch]) * f[ch][p];
    TextureRef r;
    r.attention = softmax_rows(logits);
    Mat projected(c, std::vector<LD>(hw, 0));
    for (std::size_t o = 0; o < c; ++o)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) projected[o][p] += static_cast<LD>(proj[o * c + ch]) * f[ch][p];
    r.texture.assign(k, std::vector<LD>(c, 0));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t o = 0; o < c; ++o)
            for (std::size_t p = 0; p < hw; ++p) r.texture[i][o] += r.attention[i][p] * projected[o][p];
    return r;
}

struct DistributionRef {
    Mat attention;  // k×hw
    Mat features;   // c×hw
};

inline DistributionRef distribute(const Tensor<double>& f_d, const Tensor<double>& tex, const Tensor<double>& wd) {
    const Mat f = flatten(f_d);
    const std::size_t c = f.size(), hw = f[0].size(), k = wd.dim(0);
    Mat logits(k, std::vector<LD>(hw, 0));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) logits[i][p] += static_cast<LD>(wd[i * c + ch]) * f[ch][p];
    DistributionRef r;
    r.attention = softmax_cols(logits);
    r.features.assign(c, std::vector<LD>(hw, 0));
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t i = 0; i < k; ++i) r.features[ch][p] += static_cast<LD>(tex[i * c + ch]) * r.attention[i][p];
    return r;
}

/// Bilinear resampling by an integer factor with half-pixel centres, written
/// from the sampling formula src = (dst + 0.5)·s − 0.5 clamped to the image.
inline Tensor<double> downsample(const Tensor<double>& img, std::size_t s) {
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2), oh = h / s, ow = w / s;
    Tensor<double> out({c, oh, ow});
    auto coord = [&](std::size_t d, std::size_t n, long& i0, long& i1, LD& f) {
        LD src = (static_cast<LD>(d) + 0.5L) * static_cast<LD>(s) - 0.5L;
        if (src < 0) src = 0;
        i0 = static_cast<long>(std::floor(src));
        if (i0 > long(n) - 1) i0 = long(n) - 1;
        i1 = std::min<long>(i0 + 1, long(n) - 1);
        f = src - static_cast<LD>(i0);
        if (f > 1) f = 1;
    };
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                long y0, y1, x0, x1;
                LD fy, fx;
                coord(y, h, y0, y1, fy);
                coord(x, w, x0, x1, fx);
                const LD v = (1 - fy) * ((1 - fx) * img.at(ch, y0, x0) + fx * img.at(ch, y0, x1)) +
                             fy * ((1 - fx) * img.at(ch, y1, x0) + fx * img.at(ch, y1, x1));
                out.at(ch, y, x) = static_cast<double>(v);
            }
    return out;
}

/// Σ_l mean |gt↓ − ref↓ · C̃_eᵀ · C̃_d| evaluated with the hw×hw product formed explicitly.
inline LD attention_loss(const std::vector<Mat>& ce, const std::vector<Mat>& cd, const Tensor<double>& gt,
                         const Tensor<double>& ref, const std::vector<std::size_t>& factors) {
    LD total = 0;
    for (std::size_t l = 0; l < factors.size(); ++l) {
        const Mat g = flatten(downsample(gt, factors[l]));
        const Mat r = flatten(downsample(ref, factors[l]));
        const Mat transfer = matmul(transpose(ce[l]), cd[l]);  // hw×hw
        const Mat recon = matmul(r, transfer);
        LD s = 0;
        for (std::size_t i = 0; i < g.size(); ++i)
            for (std::size_t p = 0; p < g[0].size(); ++p) s += std::abs(g[i][p] - recon[i][p]);
        total += s / static_cast<LD>(g.size() * g[0].size());
    }
    return total;
}

/// softmax_rows(Q·Kᵀ/√d)·V
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, LD d, Mat* weights = nullptr) {
    Mat logits = matmul(q, transpose(k));
    for (auto& row : logits)
        for (auto& x : row) x /= std::sqrt(d);
    Mat a = softmax_rows(logits);
    if (weights) *weights = a;
    return matmul(a, v);
}

/// Normalise each spatial column of a c×hw matrix along channels.
inline Mat normalize_columns(const Mat& m, LD eps) {
    Mat out = m;
    for (std::size_t p = 0; p < m[0].size(); ++p) {
        std::vector<LD> col;
        for (const auto& row : m) col.push_back(row[p]);
        const auto n = feature_normalize(col, eps);
        for (std::size_t i = 0; i < m.size(); ++i) out[i][p] = n[i];
    }
    return out;
}

/// FN → 1×1 projection → attention over the other stream; returns c×hw maps.
inline std::pair<Mat, Mat> cross_refine(const Tensor<double>& zl, const Tensor<double>& zr, const Tensor<double>& pl,
                                        const Tensor<double>& pr, LD eps) {
    const Mat a = matmul(to_mat(pl), normalize_columns(flatten(zl), eps));
    const Mat b = matmul(to_mat(pr), normalize_columns(flatten(zr), eps));
    const LD d = static_cast<LD>(a.size());
    const Mat vl = attention(transpose(a), transpose(b), transpose(b), d);
    const Mat vr = attention(transpose(b), transpose(a), transpose(a), d);
    return {transpose(vl), transpose(vr)};
}

/// Ψ · mean_spatial(concat[γ_l·V_l + Z_l, γ_r·V_r + Z_r]) + bias
inline std::vector<LD> style_code(const Mat& vl, const Mat& vr, const Mat& zl, const Mat& zr,
                                  const Tensor<double>& gl, const Tensor<double>& gr, const Tensor<double>& psi,
                                  const Tensor<double>& bias) {
    const std::size_t c = vl.size(), hw = vl[0].size();
    std::vector<LD> pooled(2 * c, 0);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t p = 0; p < hw; ++p) {
            pooled[i] += (gl[i] * vl[i][p] + zl[i][p]) / static_cast<LD>(hw);
            pooled[c + i] += (gr[i] * vr[i][p] + zr[i][p]) / static_cast<LD>(hw);
        }
    std::vector<LD> out(psi.dim(0));
    for (std::size_t o = 0; o < out.size(); ++o) {
        out[o] = bias[o];
        for (std::size_t j = 0; j < 2 * c; ++j) out[o] += psi[o * 2 * c + j] * pooled[j];
    }
    return out;
}

}  // namespace oracle
