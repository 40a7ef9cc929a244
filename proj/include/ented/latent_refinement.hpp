#pragma once

// Cross-attention between the degraded and reference latents, and the style
// code embedded from the fused result.

#include <cmath>
#include <cstddef>

#include "ented/numerics/ops.hpp"
#include "ented/numerics/rng.hpp"

namespace ented::refine {

template <class T>
struct RefinementParams {
    Tensor<T> proj_lq;   // 1×1 projection [c×c]
    Tensor<T> proj_ref;  // [c×c]
    Tensor<T> gamma_lq;  // [c]
    Tensor<T> gamma_ref; // [c]
    Tensor<T> psi;       // [c_out×2c]
    Tensor<T> psi_bias;  // [c_out]
    T eps = T(1e-8);

    /// Projections near identity, γ = 0 so refinement starts as a pure residual.
    static RefinementParams init(Rng& rng, std::size_t c, std::size_t c_out) {
        RefinementParams p;
        const double sd = 0.1 / std::sqrt(static_cast<double>(c));
        p.proj_lq = rng.normal_tensor<T>({c, c}, sd);
        p.proj_ref = rng.normal_tensor<T>({c, c}, sd);
        for (std::size_t i = 0; i < c; ++i) {
            p.proj_lq.at(i, i) += T{1};
            p.proj_ref.at(i, i) += T{1};
        }
        p.gamma_lq = Tensor<T>({c});
        p.gamma_ref = Tensor<T>({c});
        p.psi = rng.normal_tensor<T>({c_out, 2 * c}, 1.0 / std::sqrt(2.0 * static_cast<double>(c)));
        p.psi_bias = Tensor<T>({c_out});
        return p;
    }
};

/// Leaves for the parameters on a tape.
struct RefinementVars {
    Var proj_lq, proj_ref, gamma_lq, gamma_ref, psi, psi_bias;
};

/// softmax(Q·Kᵀ/√d)·V for Q[n_q×c], K[n_k×c], V[n_k×c_v]; the softmax runs
/// over keys, so every row of the attention matrix is a probability vector.
template <class T>
Var scaled_dot_attention(Tape<T>& t, Var q, Var k, Var v, T d, Var* attention_out = nullptr) {
    const auto& qv = t.value(q);
    const auto& kv = t.value(k);
    const auto& vv = t.value(v);
    if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 || qv.dim(1) != kv.dim(1) || kv.dim(0) != vv.dim(0)) {
        throw DimensionError("scaled_dot_attention: Q " + shape_str(qv.shape()) + ", K " + shape_str(kv.shape()) +
                             ", V " + shape_str(vv.shape()));
    }
    if (!(d > T{0})) throw std::invalid_argument("scaled_dot_attention: d must be positive");
    const Var logits = ops::scale(t, ops::matmul(t, q, ops::transpose(t, k)), T{1} / std::sqrt(d));
    const Var attn = ops::softmax(t, logits, 1);
    if (attention_out) *attention_out = attn;
    return ops::matmul(t, attn, v);
}

struct Refined {
    Var lq;   // V̂_LQ [c×h×w]
    Var ref;  // V̂_ref [c×h×w]
    Var attention_lq;   // [hw×hw], rows sum to one
    Var attention_ref;
};

/// Each stream is feature-normalised along channels, projected by a 1×1
/// convolution, then attends over the other stream's positions (d = c).
template <class T>
Refined cross_refine(Tape<T>& t, Var z_lq, Var z_ref, const RefinementVars& p, T eps = T(1e-8)) {
    const auto& a = t.value(z_lq);
    const auto& b = t.value(z_ref);
    ops::detail::require_rank(a, 3, "cross_refine");
    a.require_same_shape(b, "cross_refine");
    const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2), hw = h * w;

    auto prepare = [&](Var z, Var proj) {
        const Var n = ops::feature_normalize(t, z, 0, eps);
        const Var projected = ops::conv1x1(t, n, proj);
        return ops::transpose(t, ops::reshape(t, projected, {c, hw}));  // hw×c: one row per position
    };
    const Var tl = prepare(z_lq, p.proj_lq);
    const Var tr = prepare(z_ref, p.proj_ref);
    Refined r;
    const Var vl = scaled_dot_attention(t, tl, tr, tr, static_cast<T>(c), &r.attention_lq);
    const Var vr = scaled_dot_attention(t, tr, tl, tl, static_cast<T>(c), &r.attention_ref);
    r.lq = ops::reshape(t, ops::transpose(t, vl), {c, h, w});
    r.ref = ops::reshape(t, ops::transpose(t, vr), {c, h, w});
    return r;
}

/// ω = Ψ(pool(concat[γ_LQ·V̂_LQ + Ẑ_LQ, γ_ref·V̂_ref + Ẑ_ref])), with global
/// average pooling reducing the spatial grid before the linear embedding.
template <class T>
Var make_style_code(Tape<T>& t, Var v_lq, Var v_ref, Var z_lq, Var z_ref, const RefinementVars& p) {
    const Var fused_lq = ops::add(t, ops::scale_channels(t, v_lq, p.gamma_lq), z_lq);
    const Var fused_ref = ops::add(t, ops::scale_channels(t, v_ref, p.gamma_ref), z_ref);
    const Var pooled = ops::global_avg_pool(t, ops::concat0(t, fused_lq, fused_ref));
    return ops::linear(t, p.psi, pooled, p.psi_bias);
}

/// Style code without refinement: only the degraded stream feeds Ψ (the
/// reference half of the embedding sees zeros).
template <class T>
Var make_style_code_unrefined(Tape<T>& t, Var z_lq, const RefinementVars& p) {
    const std::size_t c = t.value(z_lq).dim(0);
    const Var pooled_lq = ops::global_avg_pool(t, z_lq);
    const Var zeros = t.constant(Tensor<T>({c}));
    return ops::linear(t, p.psi, ops::concat0(t, pooled_lq, zeros), p.psi_bias);
}

}  // namespace ented::refine
