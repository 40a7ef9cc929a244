#pragma once

// Registry of every differentiable operation with a finite-difference check,
// run over several seeds. Used by the `gradcheck` command and the tests.

#include <algorithm>
#include <chrono>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "ented/degradation.hpp"
#include "ented/generator.hpp"
#include "ented/latent_refinement.hpp"
#include "ented/losses.hpp"
#include "ented/numerics/gradcheck.hpp"
#include "ented/texture_transfer.hpp"
#include "ented/vq_dictionary.hpp"

namespace ented::gradsuite {

struct Case {
    std::string name;
    double tolerance = 1e-4;
    /// Runs one seed; `opt` carries the seed, tolerance and fault injection.
    std::function<GradcheckReport(const GradcheckOptions& opt)> run;
};

/// Every op name the op library records on a tape. A case run reports
/// which of these its backward sweep visited.
inline const std::vector<std::string>& recorded_ops() {
    static const std::vector<std::string> names{
        "abs_mean", "add", "clamp", "concat0", "conv1x1", "conv2d", "demodulate", "feature_normalize",
        "gather_rows", "global_avg_pool", "leaky_relu", "linear", "matmul", "mean", "modulate", "mul",
        "reshape", "scale", "scale_channels", "softmax", "softplus", "straight_through", "sub", "sum",
        "sum_squares", "transpose", "upsample_nearest"};
    return names;
}

struct CaseResult {
    std::string name;
    std::size_t seeds = 0;
    std::size_t seeds_passed = 0;
    double worst = 0;
    double seconds = 0;
    std::string diagnostic;
    std::set<std::string> ops_exercised;
    bool passed() const { return seeds_passed == seeds; }
};

namespace detail {

using Inputs = std::vector<NamedTensor>;

inline Tensor<double> randn(Rng& rng, Shape s, double sd = 1.0) { return rng.normal_tensor<double>(std::move(s), sd); }

/// A case built from a function of its leaves and a seeded input generator.
inline Case simple(std::string name, GradFn fn, std::function<Inputs(Rng&)> make, double tol = 1e-4) {
    return Case{name, tol, [fn, make](const GradcheckOptions& opt) {
                    Rng rng(Rng::mix(opt.seed) ^ 0xA5A5);
                    return gradcheck(fn, make(rng), opt);
                }};
}

/// Quantised output through the straight-through path. The analytic encoder
/// gradient must equal the finite-difference gradient of the downstream stub
/// evaluated at the quantised map.
inline GradcheckReport straight_through_check(const GradcheckOptions& opt) {
    Rng rng(Rng::mix(opt.seed) ^ 0x5757);
    auto dict = vq::Dictionary<double>::random(rng, 8, 3, {});
    const Tensor<double> z = randn(rng, {3, 2, 2});
    const Tensor<double> w = randn(rng, {4, 3});
    auto stub = [&w](Tape<double>& t, Var x) {
        return ops::sum_squares(t, ops::softplus(t, ops::conv1x1(t, x, t.constant(w))));
    };
    Tape<double> tape;
    tape.set_fault_scale(opt.fault_scale);
    const Var zv = tape.input(z);
    const auto applied = vq::maybe_apply(tape, dict, zv, tape.constant(dict.codewords()), 0);
    tape.backward(stub(tape, applied.output));
    const Tensor<double> zq = tape.value(applied.quantized);

    GradcheckReport rep;
    for (std::size_t id : tape.visit_order()) rep.ops_exercised.insert(tape.node(Var{id}).op);
    GradcheckReport::Entry entry{"latent"};
    auto f = [&](const Tensor<double>& x) {
        Tape<double> s;
        s.set_grad_enabled(false);
        return s.value(stub(s, s.constant(x))).item();
    };
    if (!ented::detail::probe_directions(entry, zq, tape.grad(zv), f, opt, rng)) {
        rep.passed = false;
        rep.diagnostic = "non-finite probe";
        return rep;
    }
    rep.passed = entry.max_rel_error <= opt.tolerance;
    if (!rep.passed) rep.diagnostic = "analytic and numeric gradients disagree";
    rep.entries.push_back(entry);
    return rep;
}

/// The loss is not the gradient of its own value: stop-gradient routes the
/// codebook term to the codewords and only β times the commitment term to the
/// latent. Each input is checked against the term that is meant to train it,
/// with the other operand frozen.
inline GradcheckReport quantization_loss_check(const GradcheckOptions& opt) {
    Rng rng(Rng::mix(opt.seed) ^ 0x9A0A);
    constexpr double beta = 0.25;
    const std::vector<std::size_t> idx{1, 3, 0, 1};
    const Tensor<double> z = randn(rng, {3, 2, 2});
    const Tensor<double> cb = randn(rng, {4, 3});
    Tape<double> tape;
    tape.set_fault_scale(opt.fault_scale);
    const Var zv = tape.input(z), cv = tape.input(cb);
    tape.backward(vq::quantization_loss(tape, zv, ops::gather_rows(tape, cv, idx, 2, 2), beta));
    const Tensor<double> zq = tape.value(ops::gather_rows(tape, tape.constant(cb), idx, 2, 2));

    GradcheckReport rep;
    for (std::size_t id : tape.visit_order()) rep.ops_exercised.insert(tape.node(Var{id}).op);
    auto frozen = [](auto build) {
        return [build](const Tensor<double>& x) {
            Tape<double> s;
            s.set_grad_enabled(false);
            return s.value(build(s, s.constant(x))).item();
        };
    };
    const auto commit = frozen([&](Tape<double>& s, Var x) {
        return ops::scale(s, ops::sum_squares(s, ops::sub(s, s.constant(zq), x)), beta);
    });
    const auto codebook = frozen([&](Tape<double>& s, Var c) {
        return ops::sum_squares(s, ops::sub(s, s.constant(z), ops::gather_rows(s, c, idx, 2, 2)));
    });
    GradcheckReport::Entry ez{"latent"}, ec{"codebook"};
    if (!ented::detail::probe_directions(ez, z, tape.grad(zv), commit, opt, rng) ||
        !ented::detail::probe_directions(ec, cb, tape.grad(cv), codebook, opt, rng)) {
        rep.passed = false;
        rep.diagnostic = "non-finite probe";
        return rep;
    }
    rep.passed = std::max(ez.max_rel_error, ec.max_rel_error) <= opt.tolerance;
    if (!rep.passed) rep.diagnostic = "analytic and numeric gradients disagree";
    rep.entries.push_back(ez);
    rep.entries.push_back(ec);
    return rep;
}

/// Generator, discriminator and every loss term on a two-image batch. A
/// sample of parameters spread over the network is bound to the probed leaves.
inline GradcheckReport end_to_end_check(GradcheckOptions opt) {
    const std::uint64_t seed = opt.seed;
    Rng rng(Rng::mix(seed) ^ 0xE2E);
    NetworkConfig cfg;
    cfg.vq = false;  // nearest-codeword substitution is piecewise constant
    auto gen = std::make_shared<Generator<double>>(Generator<double>::init(cfg, rng));
    auto disc = std::make_shared<Discriminator<double>>(Discriminator<double>::init(cfg, rng));
    auto net = std::make_shared<losses::PerceptualNet<double>>();

    // Nudge the zero-initialised gates so their paths carry signal.
    gen->params()["ref.gamma_lq"] = randn(rng, {cfg.code_length}, 0.5);
    gen->params()["ref.gamma_ref"] = randn(rng, {cfg.code_length}, 0.5);

    std::vector<Tensor<double>> gt, lq, ref;
    for (std::size_t b = 0; b < 2; ++b) {
        Tensor<double> img = imaging::gaussian_blur(rng.uniform_tensor<double>({3, 32, 32}, 0.1, 0.9), 1.0);
        lq.push_back(degradation::degrade(img, {}, Rng::mix(seed + b)));
        ref.push_back(degradation::make_reference(img, {}, Rng::mix(seed + 7 * b + 1)));
        gt.push_back(std::move(img));
    }
    const std::vector<std::string> names{"enc_c.latent.b", "ref.gamma_lq",       "tex0.distribute",
                                         "tex2.extract",   "dec.final.affine_w", "dec.rgb.w",
                                         "enc_r.down1.w",  "ref.psi"};
    Inputs inputs;
    for (const auto& n : names) inputs.push_back({n, gen->params().at(n)});

    const std::vector<std::size_t> factors{cfg.level_factor(0), cfg.level_factor(1), cfg.level_factor(2)};
    GradFn fn = [=](Tape<double>& t, std::span<const Var> in) {
        for (std::size_t i = 0; i < names.size(); ++i) t.bind(names[i], in[i]);
        Var total;
        for (std::size_t b = 0; b < gt.size(); ++b) {
            const auto out = gen->forward(t, lq[b], ref[b], 0);
            const Var adv = losses::adversarial_loss(t, disc->logit(t, out.image));
            const Var percep = losses::perceptual_loss(t, out.image, t.constant(gt[b]), *net);
            const Var att =
                texture::attention_reconstruction_loss(t, out.extraction, out.distribution, gt[b], ref[b], factors);
            const Var l = losses::total_loss(t, adv, percep, Var{}, att, losses::LossWeights{});
            total = total.valid() ? ops::add(t, total, l) : l;
        }
        return ops::scale(t, total, 0.5);
    };
    opt.max_coordinate_probes = 16;
    opt.random_directions = 3;
    return gradcheck(fn, inputs, opt);
}

}  // namespace detail

/// Every registered check. Names are stable; the composite is last.
inline std::vector<Case> registry() {
    using detail::randn;
    using detail::simple;
    using Inputs = detail::Inputs;
    using S = std::span<const Var>;
    using T = Tape<double>;
    std::vector<Case> r;

    r.push_back(simple("reshape", [](T& t, S in) { return ops::reshape(t, in[0], {3, 2}); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 3})}}; }));
    r.push_back(simple("transpose", [](T& t, S in) { return ops::transpose(t, in[0]); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 3})}}; }));
    r.push_back(simple("concat", [](T& t, S in) { return ops::concat0(t, in[0], in[1]); },
                       [](Rng& g) { return Inputs{{"a", randn(g, {2, 2, 2})}, {"b", randn(g, {3, 2, 2})}}; }));
    r.push_back(simple("add", [](T& t, S in) { return ops::add(t, in[0], in[1]); },
                       [](Rng& g) { return Inputs{{"a", randn(g, {2, 3})}, {"b", randn(g, {2, 3})}}; }));
    r.push_back(simple("sub", [](T& t, S in) { return ops::sub(t, in[0], in[1]); },
                       [](Rng& g) { return Inputs{{"a", randn(g, {2, 3})}, {"b", randn(g, {2, 3})}}; }));
    r.push_back(simple("mul", [](T& t, S in) { return ops::mul(t, in[0], in[1]); },
                       [](Rng& g) { return Inputs{{"a", randn(g, {2, 3})}, {"b", randn(g, {2, 3})}}; }));
    r.push_back(simple("scale", [](T& t, S in) { return ops::scale(t, in[0], -1.7); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {4})}}; }));
    r.push_back(simple("leaky_relu", [](T& t, S in) { return ops::leaky_relu(t, in[0], 0.2); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 5})}}; }));
    r.push_back(simple("clamp", [](T& t, S in) { return ops::clamp(t, in[0], -0.5, 0.5); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 5})}}; }));
    r.push_back(simple("softplus", [](T& t, S in) { return ops::softplus(t, in[0]); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {6}, 3.0)}}; }));
    r.push_back(simple("sum", [](T& t, S in) { return ops::sum(t, in[0]); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 3})}}; }));
    r.push_back(simple("mean", [](T& t, S in) { return ops::mean(t, in[0]); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 3})}}; }));
    r.push_back(simple("abs_mean", [](T& t, S in) { return ops::abs_mean(t, in[0]); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 3})}}; }));
    r.push_back(simple("sum_squares", [](T& t, S in) { return ops::sum_squares(t, in[0]); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 3})}}; }));
    r.push_back(simple("global_avg_pool", [](T& t, S in) { return ops::global_avg_pool(t, in[0]); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {3, 2, 3})}}; }));
    r.push_back(simple("matmul", [](T& t, S in) { return ops::matmul(t, in[0], in[1]); },
                       [](Rng& g) { return Inputs{{"a", randn(g, {3, 4})}, {"b", randn(g, {4, 2})}}; }));
    r.push_back(simple("linear", [](T& t, S in) { return ops::linear(t, in[0], in[1], in[2]); }, [](Rng& g) {
        return Inputs{{"w", randn(g, {3, 4})}, {"x", randn(g, {4})}, {"b", randn(g, {3})}};
    }));
    r.push_back(simple("softmax_rows", [](T& t, S in) { return ops::softmax(t, in[0], 1); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {3, 4}, 2.0)}}; }));
    r.push_back(simple("softmax_columns", [](T& t, S in) { return ops::softmax(t, in[0], 0); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {3, 4}, 2.0)}}; }));
    r.push_back(simple("feature_normalize", [](T& t, S in) { return ops::feature_normalize(t, in[0], 0); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {4, 2, 3})}}; }));
    r.push_back(simple("conv1x1", [](T& t, S in) { return ops::conv1x1(t, in[0], in[1], in[2]); }, [](Rng& g) {
        return Inputs{{"x", randn(g, {3, 2, 3})}, {"w", randn(g, {2, 3})}, {"b", randn(g, {2})}};
    }));
    r.push_back(simple(
        "conv3x3", [](T& t, S in) { return ops::conv2d(t, in[0], in[1], in[2], {1, 1}); },
        [](Rng& g) { return Inputs{{"x", randn(g, {2, 4, 5})}, {"w", randn(g, {3, 2, 3, 3})}, {"b", randn(g, {3})}}; }));
    r.push_back(simple(
        "conv3x3_stride2", [](T& t, S in) { return ops::conv2d(t, in[0], in[1], in[2], {2, 1}); },
        [](Rng& g) { return Inputs{{"x", randn(g, {2, 6, 5})}, {"w", randn(g, {3, 2, 3, 3})}, {"b", randn(g, {3})}}; }));
    r.push_back(simple("modulate", [](T& t, S in) { return ops::modulate(t, in[0], in[1]); },
                       [](Rng& g) { return Inputs{{"w", randn(g, {2, 3, 3, 3})}, {"s", randn(g, {3})}}; }));
    r.push_back(simple("demodulate", [](T& t, S in) { return ops::demodulate(t, in[0]); },
                       [](Rng& g) { return Inputs{{"w", randn(g, {2, 3, 3, 3})}}; }));
    r.push_back(simple("scale_channels", [](T& t, S in) { return ops::scale_channels(t, in[0], in[1]); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {3, 2, 2})}, {"gamma", randn(g, {3})}}; }));
    r.push_back(simple("upsample_nearest", [](T& t, S in) { return ops::upsample_nearest(t, in[0], 2); },
                       [](Rng& g) { return Inputs{{"x", randn(g, {2, 2, 3})}}; }));
    r.push_back(simple("gather_rows", [](T& t, S in) { return ops::gather_rows(t, in[0], {2, 0, 2, 1}, 2, 2); },
                       [](Rng& g) { return Inputs{{"table", randn(g, {3, 4})}}; }));

    for (bool demod : {false, true}) {
        r.push_back(simple(
            demod ? "modulated_conv_demodulated" : "modulated_conv",
            [demod](T& t, S in) { return modulated_conv(t, in[0], in[1], {in[2], in[3], in[4], in[5]}, demod); },
            [](Rng& g) {
                return Inputs{{"x", randn(g, {3, 4, 4})},        {"style", randn(g, {5})},
                              {"weight", randn(g, {2, 3, 3, 3})}, {"bias", randn(g, {2})},
                              {"affine_w", randn(g, {3, 5})},     {"affine_b", randn(g, {3}, 0.2)}};
            }));
    }

    r.push_back(simple(
        "texture_extraction",
        [](T& t, S in) {
            const auto e = texture::extract_texture(t, in[0], in[1], in[2]);
            return ops::concat0(t, ops::reshape(t, e.texture, {t.value(e.texture).size()}),
                                ops::reshape(t, e.attention, {t.value(e.attention).size()}));
        },
        [](Rng& g) {
            return Inputs{{"f_ref", randn(g, {3, 2, 3})}, {"w_extract", randn(g, {4, 3})}, {"projection", randn(g, {3, 3})}};
        }));
    r.push_back(simple(
        "texture_distribution",
        [](T& t, S in) {
            const auto d = texture::distribute_texture(t, in[0], in[1], in[2]);
            return ops::concat0(t, ops::reshape(t, d.features, {t.value(d.features).size()}),
                                ops::reshape(t, d.attention, {t.value(d.attention).size()}));
        },
        [](Rng& g) {
            return Inputs{{"f_d", randn(g, {3, 2, 3})}, {"texture", randn(g, {4, 3})}, {"w_distribute", randn(g, {4, 3})}};
        }));
    r.push_back(Case{"quantization_loss", 1e-4, detail::quantization_loss_check});
    r.push_back(Case{"straight_through", 1e-4, detail::straight_through_check});
    r.push_back(simple(
        "scaled_dot_attention",
        [](T& t, S in) {
            Var attn;
            const Var out = refine::scaled_dot_attention(t, in[0], in[1], in[2], 3.0, &attn);
            return ops::concat0(t, ops::reshape(t, out, {t.value(out).size()}),
                                ops::reshape(t, attn, {t.value(attn).size()}));
        },
        [](Rng& g) { return Inputs{{"q", randn(g, {2, 3})}, {"k", randn(g, {4, 3})}, {"v", randn(g, {4, 2})}}; }));
    r.push_back(simple(
        "cross_refine",
        [](T& t, S in) {
            const auto rf = refine::cross_refine(t, in[0], in[1], {in[2], in[3], {}, {}, {}, {}});
            return ops::concat0(t, rf.lq, rf.ref);
        },
        [](Rng& g) {
            return Inputs{{"z_lq", randn(g, {3, 2, 2})},
                          {"z_ref", randn(g, {3, 2, 2})},
                          {"proj_lq", randn(g, {3, 3})},
                          {"proj_ref", randn(g, {3, 3})}};
        }));
    r.push_back(simple(
        "style_code",
        [](T& t, S in) {
            return refine::make_style_code(t, in[0], in[1], in[2], in[3], {{}, {}, in[4], in[5], in[6], in[7]});
        },
        [](Rng& g) {
            return Inputs{{"v_lq", randn(g, {3, 2, 2})},  {"v_ref", randn(g, {3, 2, 2})}, {"z_lq", randn(g, {3, 2, 2})},
                          {"z_ref", randn(g, {3, 2, 2})}, {"gamma_lq", randn(g, {3})},   {"gamma_ref", randn(g, {3})},
                          {"psi", randn(g, {4, 6})},      {"psi_bias", randn(g, {4})}};
        }));
    r.push_back(simple("adversarial_loss", [](T& t, S in) { return losses::adversarial_loss(t, in[0]); },
                       [](Rng& g) { return Inputs{{"logit", randn(g, {1}, 2.0)}}; }));
    r.push_back(simple("discriminator_loss",
                       [](T& t, S in) { return losses::discriminator_loss(t, in[0], in[1]); },
                       [](Rng& g) { return Inputs{{"real", randn(g, {1}, 2.0)}, {"fake", randn(g, {1}, 2.0)}}; }));
    r.push_back(simple(
        "perceptual_loss",
        [net = std::make_shared<losses::PerceptualNet<double>>()](T& t, S in) {
            return losses::perceptual_loss(t, in[0], in[1], *net);
        },
        [](Rng& g) {
            return Inputs{{"restored", g.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0)},
                          {"target", g.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0)}};
        }));
    r.push_back(Case{"attention_reconstruction_loss", 1e-4, [](const GradcheckOptions& opt) {
                         Rng g(Rng::mix(opt.seed) ^ 0xA77);
                         const auto gt = g.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
                         const auto ref = g.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
                         GradFn fn = [gt, ref](T& t, S in) {
                             const std::vector<Var> ce{ops::softmax(t, in[0], 1), ops::softmax(t, in[2], 1)};
                             const std::vector<Var> cd{ops::softmax(t, in[1], 0), ops::softmax(t, in[3], 0)};
                             const std::vector<std::size_t> factors{2, 4};
                             return texture::attention_reconstruction_loss(t, ce, cd, gt, ref, factors);
                         };
                         return gradcheck(fn,
                                          {{"extract_logits_l0", randn(g, {3, 16})},
                                           {"distribute_logits_l0", randn(g, {3, 16})},
                                           {"extract_logits_l1", randn(g, {3, 4})},
                                           {"distribute_logits_l1", randn(g, {3, 4})}},
                                          opt);
                     }});
    r.push_back(simple(
        "total_loss",
        [](T& t, S in) { return losses::total_loss(t, in[0], in[1], in[2], in[3], losses::LossWeights{}); },
        [](Rng& g) {
            return Inputs{{"adv", randn(g, {1})}, {"percep", randn(g, {1})}, {"q", randn(g, {1})}, {"att", randn(g, {1})}};
        }));
    r.push_back(Case{"discriminator", 1e-4, [](const GradcheckOptions& opt) {
                         Rng g(Rng::mix(opt.seed) ^ 0xD15C);
                         NetworkConfig cfg;
                         cfg.resolution = 8;
                         auto d = std::make_shared<Discriminator<double>>(Discriminator<double>::init(cfg, g));
                         GradFn fn = [d](T& t, S in) { return losses::adversarial_loss(t, d->logit(t, in[0])); };
                         return gradcheck(fn, {{"image", g.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0)}}, opt);
                     }});
    r.push_back(Case{"end_to_end", 1e-3, detail::end_to_end_check});
    return r;
}

/// Runs each case over `seeds` seeds (0 .. seeds-1). A fault scale other
/// than 1 corrupts every backward pass, which every case should then report.
inline std::vector<CaseResult> run(const std::vector<Case>& cases, std::size_t seeds,
                                   const std::function<void(const CaseResult&)>& on_done = {},
                                   double fault_scale = 1.0) {
    std::vector<CaseResult> out;
    for (const auto& c : cases) {
        CaseResult res;
        res.name = c.name;
        res.seeds = seeds;
        const auto start = std::chrono::steady_clock::now();
        for (std::uint64_t s = 0; s < seeds; ++s) {
            GradcheckOptions opt;
            opt.seed = s;
            opt.tolerance = c.tolerance;
            opt.fault_scale = fault_scale;
            const auto rep = c.run(opt);
            res.worst = std::max(res.worst, rep.worst());
            res.ops_exercised.insert(rep.ops_exercised.begin(), rep.ops_exercised.end());
            if (rep.passed) {
                ++res.seeds_passed;
            } else if (res.diagnostic.empty()) {
                res.diagnostic = "seed " + std::to_string(s) + ": " + rep.diagnostic;
            }
        }
        res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (on_done) on_done(res);
        out.push_back(std::move(res));
    }
    return out;
}

}  // namespace ented::gradsuite
