#pragma once

// Attention-based texture transfer: a set of extraction kernels summarises the
// reference features into k texture vectors, and distribution kernels spread
// those vectors back over a decoder feature map.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ented/imaging.hpp"
#include "ented/numerics/ops.hpp"
#include "ented/numerics/rng.hpp"

namespace ented::texture {

/// Kernels for one pyramid level.
template <class T>
struct LevelKernels {
    Tensor<T> extract;     // W_e [k×c]
    Tensor<T> distribute;  // W_d [k×c]
    Tensor<T> projection;  // 1×1 conv on reference features [c×c]
};

template <class T>
struct TextureKernels {
    std::size_t k = 0;
    std::vector<LevelKernels<T>> levels;

    /// Gaussian init with std 1/sqrt(c) keeps pre-softmax logits O(1).
    static TextureKernels init(Rng& rng, std::size_t k, std::span<const std::size_t> channels) {
        if (k == 0) throw std::invalid_argument("texture kernels need k >= 1");
        TextureKernels out;
        out.k = k;
        for (std::size_t c : channels) {
            const double sd = 1.0 / std::sqrt(static_cast<double>(c));
            out.levels.push_back({rng.normal_tensor<T>({k, c}, sd), rng.normal_tensor<T>({k, c}, sd),
                                  rng.normal_tensor<T>({c, c}, sd)});
        }
        return out;
    }
};

/// F_tex [k×c] and the extraction matrix [k×hw] whose rows sum to one.
struct Extraction {
    Var texture;
    Var attention;
};

/// Decoder-side output [c×h×w] and the distribution matrix [k×hw] whose
/// columns sum to one.
struct Distribution {
    Var features;
    Var attention;
};

template <class T>
Extraction extract_texture(Tape<T>& t, Var f_ref, Var w_extract, Var projection) {
    const auto& fv = t.value(f_ref);
    ops::detail::require_rank(fv, 3, "extract_texture");
    const std::size_t c = fv.dim(0), hw = fv.dim(1) * fv.dim(2);
    if (t.value(w_extract).rank() != 2 || t.value(w_extract).dim(1) != c) {
        throw DimensionError("extract_texture: kernels " + shape_str(t.value(w_extract).shape()) +
                             " do not match reference features " + shape_str(fv.shape()));
    }
    const Var flat = ops::reshape(t, f_ref, {c, hw});
    const Var logits = ops::matmul(t, w_extract, flat);
    const Var attention = ops::softmax(t, logits, 1);
    const Var projected = ops::reshape(t, ops::conv1x1(t, f_ref, projection), {c, hw});
    const Var texture = ops::matmul(t, attention, ops::transpose(t, projected));
    return {texture, attention};
}

template <class T>
Distribution distribute_texture(Tape<T>& t, Var f_d, Var texture, Var w_distribute) {
    const auto& fv = t.value(f_d);
    ops::detail::require_rank(fv, 3, "distribute_texture");
    const std::size_t c = fv.dim(0), h = fv.dim(1), w = fv.dim(2);
    const auto& tv = t.value(texture);
    const auto& wv = t.value(w_distribute);
    if (wv.rank() != 2 || wv.dim(1) != c || tv.rank() != 2 || tv.dim(0) != wv.dim(0) || tv.dim(1) != c) {
        throw DimensionError("distribute_texture: texture " + shape_str(tv.shape()) + ", kernels " +
                             shape_str(wv.shape()) + ", features " + shape_str(fv.shape()));
    }
    const Var logits = ops::matmul(t, w_distribute, ops::reshape(t, f_d, {c, h * w}));
    const Var attention = ops::softmax(t, logits, 0);
    const Var out = ops::matmul(t, ops::transpose(t, texture), attention);
    return {ops::reshape(t, out, {c, h, w}), attention};
}

/// Σ over levels of mean |gt↓ − ref↓ · C̃_eᵀ · C̃_d|, where level l compares
/// images bilinearly downsampled by factors[l].
template <class T>
Var attention_reconstruction_loss(Tape<T>& t, std::span<const Var> extraction, std::span<const Var> distribution,
                                  const Tensor<T>& gt, const Tensor<T>& ref, std::span<const std::size_t> factors) {
    if (extraction.size() != distribution.size() || extraction.size() != factors.size() || factors.empty()) {
        throw DimensionError("attention_reconstruction_loss: level count mismatch");
    }
    gt.require_same_shape(ref, "attention_reconstruction_loss");
    Var total;
    for (std::size_t l = 0; l < factors.size(); ++l) {
        const Tensor<T> g = imaging::downsample_bilinear(gt, factors[l]);
        const Tensor<T> r = imaging::downsample_bilinear(ref, factors[l]);
        const std::size_t ch = g.dim(0), hw = g.dim(1) * g.dim(2);
        const auto& ce = t.value(extraction[l]);
        const auto& cd = t.value(distribution[l]);
        if (ce.rank() != 2 || ce.shape() != cd.shape() || ce.dim(1) != hw) {
            throw DimensionError("attention_reconstruction_loss: level " + std::to_string(l) + " matrices " +
                                 shape_str(ce.shape()) + "/" + shape_str(cd.shape()) + " vs " +
                                 std::to_string(hw) + " pixels");
        }
        const Var gv = t.constant(g.reshaped({ch, hw}));
        const Var rv = t.constant(r.reshaped({ch, hw}));
        // (ref · C̃_eᵀ) is 3×k, so the reconstruction never forms the hw×hw product.
        const Var summary = ops::matmul(t, rv, ops::transpose(t, extraction[l]));
        const Var recon = ops::matmul(t, summary, distribution[l]);
        const Var term = ops::abs_mean(t, ops::sub(t, gv, recon));
        total = total.valid() ? ops::add(t, total, term) : term;
    }
    return total;
}

}  // namespace ented::texture
