#pragma once

// Restoration network: content and texture encoders, a decoder with optional
// skip connections and style-modulated convolutions, texture distribution at
// every pyramid level, and a small discriminator.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ented/latent_refinement.hpp"
#include "ented/numerics/ops.hpp"
#include "ented/numerics/rng.hpp"
#include "ented/texture_transfer.hpp"
#include "ented/vq_dictionary.hpp"

namespace ented {

/// Raised for inconsistent or incomplete configuration.
class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

struct NetworkConfig {
    std::size_t resolution = 32;
    std::vector<std::size_t> channels{16, 32, 64};  // one entry per pyramid level
    std::size_t code_length = 32;                   // c: latent / codeword / style length
    std::size_t codebook_size = 64;                 // K
    std::size_t texture_kernels = 32;               // k, shared by all levels
    std::size_t disc_channels_max = 64;
    double leaky_slope = 0.2;
    bool demodulate = true;
    bool quantize_reference = false;

    // Ablation toggles.
    bool skip = true;
    bool style = true;
    bool vq = true;
    bool refine = true;

    std::size_t levels() const noexcept { return channels.size(); }
    /// Total encoder downsampling: every level halves the resolution.
    std::size_t downsample() const noexcept { return std::size_t{1} << levels(); }
    std::size_t latent_size() const noexcept { return resolution / downsample(); }
    /// Downsampling factor of pyramid level i relative to the working resolution.
    std::size_t level_factor(std::size_t i) const noexcept { return std::size_t{2} << i; }

    void validate() const {
        if (channels.empty()) throw ConfigError("network.channels must not be empty");
        if (resolution == 0 || resolution % downsample() != 0) {
            throw ConfigError("network.resolution must be divisible by 2^levels = " + std::to_string(downsample()));
        }
        if (code_length == 0 || codebook_size == 0 || texture_kernels == 0) {
            throw ConfigError("network.code_length, codebook_size and texture_kernels must be positive");
        }
        for (auto c : channels) {
            if (c == 0) throw ConfigError("network.channels entries must be positive");
        }
    }
};

template <class T>
using ParamStore = std::map<std::string, Tensor<T>>;

namespace detail {

inline std::string lvl(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

template <class T>
void add_conv(ParamStore<T>& p, Rng& rng, const std::string& name, std::size_t co, std::size_t ci, std::size_t k,
              double gain) {
    const double sd = gain / std::sqrt(static_cast<double>(ci * k * k));
    p[name + ".w"] = rng.normal_tensor<T>({co, ci, k, k}, sd);
    p[name + ".b"] = Tensor<T>({co});
}

}  // namespace detail

/// Parameter leaves for one forward pass, created on first use.
template <class T>
class Bound {
   public:
    Bound(Tape<T>& t, const ParamStore<T>& store) : tape_(t), store_(store) {}
    Var operator()(const std::string& name) const {
        auto it = store_.find(name);
        if (it == store_.end()) throw ConfigError("missing parameter '" + name + "'");
        return tape_.param(name, it->second);
    }
    Tape<T>& tape() const { return tape_; }

   private:
    Tape<T>& tape_;
    const ParamStore<T>& store_;
};

/// Modulated convolution parameters on a tape.
struct ModConvVars {
    Var weight;    // [c_out×c_in×k×k]
    Var bias;      // [c_out]
    Var affine_w;  // [c_in×c_style]
    Var affine_b;  // [c_in]
};

/// Weights scaled per input channel by affine(ω), optionally demodulated to
/// unit norm per output channel, then a zero-padded stride-1 convolution.
template <class T>
Var modulated_conv(Tape<T>& t, Var x, Var style, const ModConvVars& p, bool demodulate) {
    const Var scales = ops::linear(t, p.affine_w, style, p.affine_b);
    Var w = ops::modulate(t, p.weight, scales);
    if (demodulate) w = ops::demodulate(t, w);
    const std::size_t k = t.value(p.weight).dim(2);
    return ops::conv2d(t, x, w, p.bias, {1, k / 2});
}

template <class T>
struct Encoded {
    Var stem;                 // full resolution features
    std::vector<Var> levels;  // level i at resolution / 2^(i+1)
    Var latent;               // c × (resolution / 2^L)², same grid as the deepest level
};

template <class T>
struct GeneratorOutput {
    Var image;     // 3×R×R in [0, 1]
    Var latent;    // content encoder latent Z_LQ
    vq::Applied quant;
    Var style;     // invalid when the style toggle is off
    std::vector<Var> extraction;    // per level, k×hw
    std::vector<Var> distribution;  // per level, k×hw
};

template <class T>
class Generator {
   public:
    Generator() = default;

    static Generator init(const NetworkConfig& cfg, Rng& rng, vq::Schedule schedule = {}) {
        cfg.validate();
        Generator g;
        g.cfg_ = cfg;
        auto& p = g.params_;
        const std::size_t L = cfg.levels(), c = cfg.code_length;
        const double lrelu_gain = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
        for (const std::string enc : {"enc_c", "enc_r"}) {
            detail::add_conv(p, rng, enc + ".stem", cfg.channels[0], 3, 3, lrelu_gain);
            std::size_t prev = cfg.channels[0];
            for (std::size_t i = 0; i < L; ++i) {
                detail::add_conv(p, rng, detail::lvl(enc + ".down", i), cfg.channels[i], prev, 3, lrelu_gain);
                prev = cfg.channels[i];
            }
            detail::add_conv(p, rng, enc + ".latent", c, prev, 3, 1.0);
        }
        auto kernels = texture::TextureKernels<T>::init(rng, cfg.texture_kernels, cfg.channels);
        for (std::size_t i = 0; i < L; ++i) {
            p[detail::lvl("tex", i) + ".extract"] = kernels.levels[i].extract;
            p[detail::lvl("tex", i) + ".distribute"] = kernels.levels[i].distribute;
            p[detail::lvl("tex", i) + ".proj"] = kernels.levels[i].projection;
        }
        auto rp = refine::RefinementParams<T>::init(rng, c, c);
        p["ref.proj_lq"] = rp.proj_lq;
        p["ref.proj_ref"] = rp.proj_ref;
        p["ref.gamma_lq"] = rp.gamma_lq;
        p["ref.gamma_ref"] = rp.gamma_ref;
        p["ref.psi"] = rp.psi;
        p["ref.psi_bias"] = rp.psi_bias;

        auto add_decoder_conv = [&](const std::string& name, std::size_t co, std::size_t ci) {
            detail::add_conv(p, rng, name, co, ci, 3, lrelu_gain);
            p[name + ".affine_w"] = rng.normal_tensor<T>({ci, c}, 0.1 / std::sqrt(static_cast<double>(c)));
            p[name + ".affine_b"] = Tensor<T>({ci}, T{1});
        };
        for (std::size_t i = L; i-- > 0;) {
            const std::size_t in = (i == L - 1) ? c : cfg.channels[i + 1];
            add_decoder_conv(detail::lvl("dec.level", i), cfg.channels[i], in);
        }
        add_decoder_conv("dec.final", cfg.channels[0], cfg.channels[0]);
        p["dec.rgb.w"] = rng.normal_tensor<T>({3, cfg.channels[0]}, 0.1 / std::sqrt(double(cfg.channels[0])));
        p["dec.rgb.b"] = Tensor<T>({3}, T(0.5));

        g.dict_ = vq::Dictionary<T>::random(rng, cfg.codebook_size, c, schedule);
        return g;
    }

    const NetworkConfig& config() const noexcept { return cfg_; }
    NetworkConfig& config() noexcept { return cfg_; }
    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }
    vq::Dictionary<T>& dictionary() noexcept { return dict_; }
    const vq::Dictionary<T>& dictionary() const noexcept { return dict_; }

    static constexpr const char* kCodebook = "vq.codebook";

    /// Every trainable tensor by name, codebook included.
    std::vector<std::pair<std::string, Tensor<T>*>> trainable() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto& [name, t] : params_) out.emplace_back(name, &t);
        out.emplace_back(kCodebook, &dict_.codewords());
        return out;
    }

    void require_image(const Tensor<T>& img) const {
        if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != cfg_.resolution || img.dim(2) != cfg_.resolution) {
            throw DimensionError("expected a 3x" + std::to_string(cfg_.resolution) + "x" +
                                 std::to_string(cfg_.resolution) + " image, got " + shape_str(img.shape()));
        }
    }

    Encoded<T> encode(Tape<T>& t, const std::string& prefix, Var image) const {
        require_image(t.value(image));
        Bound<T> P(t, params_);
        const T slope = static_cast<T>(cfg_.leaky_slope);
        Encoded<T> e;
        e.stem = ops::leaky_relu(t, ops::conv2d(t, image, P(prefix + ".stem.w"), P(prefix + ".stem.b"), {1, 1}), slope);
        Var x = e.stem;
        for (std::size_t i = 0; i < cfg_.levels(); ++i) {
            const std::string n = detail::lvl(prefix + ".down", i);
            x = ops::leaky_relu(t, ops::conv2d(t, x, P(n + ".w"), P(n + ".b"), {2, 1}), slope);
            e.levels.push_back(x);
        }
        const std::string n = prefix + ".latent";
        e.latent = ops::conv2d(t, x, P(n + ".w"), P(n + ".b"), {1, 1});
        return e;
    }

    Encoded<T> encode_content(Tape<T>& t, Var image) const { return encode(t, "enc_c", image); }
    Encoded<T> encode_texture(Tape<T>& t, Var image) const { return encode(t, "enc_r", image); }

    refine::RefinementVars refinement_vars(Tape<T>& t) const {
        Bound<T> P(t, params_);
        return {P("ref.proj_lq"), P("ref.proj_ref"), P("ref.gamma_lq"), P("ref.gamma_ref"), P("ref.psi"),
                P("ref.psi_bias")};
    }

    /// One decoder convolution: modulated when `style` is valid and the style
    /// toggle is on, plain otherwise.
    Var decoder_conv(Tape<T>& t, const std::string& name, Var x, Var style) const {
        Bound<T> P(t, params_);
        if (cfg_.style) {
            if (!style.valid()) throw ConfigError("style toggle is on but no style code was supplied");
            return modulated_conv(t, x, style, {P(name + ".w"), P(name + ".b"), P(name + ".affine_w"),
                                                P(name + ".affine_b")},
                                  cfg_.demodulate);
        }
        return ops::conv2d(t, x, P(name + ".w"), P(name + ".b"), {1, 1});
    }

    /// Decodes latent z. `skips` is required when the skip toggle is on;
    /// `textures` holds F_tex per level. Distribution matrices are appended
    /// to `distribution` when given.
    Var decode(Tape<T>& t, Var z, const Encoded<T>* skips, std::span<const Var> textures, Var style,
               std::vector<Var>* distribution = nullptr) const {
        if (cfg_.skip && !skips) throw ConfigError("skip toggle is on but no encoder features were supplied");
        if (textures.size() != cfg_.levels()) throw ConfigError("decode needs one texture per pyramid level");
        Bound<T> P(t, params_);
        const T slope = static_cast<T>(cfg_.leaky_slope);
        std::vector<Var> dist(cfg_.levels());
        Var x = z;
        for (std::size_t i = cfg_.levels(); i-- > 0;) {
            x = ops::leaky_relu(t, decoder_conv(t, detail::lvl("dec.level", i), x, style), slope);
            if (cfg_.skip) x = ops::add(t, x, skips->levels[i]);
            const auto d = texture::distribute_texture(t, x, textures[i], P(detail::lvl("tex", i) + ".distribute"));
            x = ops::add(t, x, d.features);
            dist[i] = d.attention;
            x = ops::upsample_nearest(t, x, 2);
        }
        x = ops::leaky_relu(t, decoder_conv(t, "dec.final", x, style), slope);
        if (cfg_.skip) x = ops::add(t, x, skips->stem);
        const Var rgb = ops::conv1x1(t, x, P("dec.rgb.w"), P("dec.rgb.b"));
        if (distribution) *distribution = std::move(dist);
        return ops::clamp(t, rgb, T{0}, T{1});
    }

    /// Full restoration pass for one (degraded, reference) pair.
    GeneratorOutput<T> forward(Tape<T>& t, const Tensor<T>& lq, const Tensor<T>& ref, std::size_t iteration) {
        require_image(lq);
        require_image(ref);
        GeneratorOutput<T> out;
        Bound<T> P(t, params_);
        const Var lq_v = t.constant(lq);
        const Var ref_v = t.constant(ref);
        const Encoded<T> content = encode_content(t, lq_v);
        const Encoded<T> tex = encode_texture(t, ref_v);
        out.latent = content.latent;

        Var z_lq = content.latent;
        Var z_ref = tex.latent;
        if (cfg_.vq) {
            const Var codebook = t.param(kCodebook, dict_.codewords());
            out.quant = vq::maybe_apply(t, dict_, content.latent, codebook, iteration);
            z_lq = out.quant.output;
            if (cfg_.quantize_reference) z_ref = vq::maybe_apply(t, dict_, tex.latent, codebook, iteration).output;
        } else {
            out.quant.output = content.latent;
        }

        std::vector<Var> textures;
        for (std::size_t i = 0; i < cfg_.levels(); ++i) {
            const std::string n = detail::lvl("tex", i);
            const auto e = texture::extract_texture(t, tex.levels[i], P(n + ".extract"), P(n + ".proj"));
            textures.push_back(e.texture);
            out.extraction.push_back(e.attention);
        }

        if (cfg_.style) {
            const auto rv = refinement_vars(t);
            if (cfg_.refine) {
                const auto r = refine::cross_refine(t, z_lq, z_ref, rv);
                out.style = refine::make_style_code(t, r.lq, r.ref, z_lq, z_ref, rv);
            } else {
                out.style = refine::make_style_code_unrefined(t, z_lq, rv);
            }
        }
        out.image = decode(t, z_lq, cfg_.skip ? &content : nullptr, textures, out.style, &out.distribution);
        return out;
    }

   private:
    NetworkConfig cfg_;
    ParamStore<T> params_;
    vq::Dictionary<T> dict_;
};

/// Strided conv stack to a single logit.
template <class T>
class Discriminator {
   public:
    static constexpr std::size_t kLevels = 3;

    static Discriminator init(const NetworkConfig& cfg, Rng& rng) {
        Discriminator d;
        d.resolution_ = cfg.resolution;
        d.slope_ = cfg.leaky_slope;
        if (cfg.resolution % (std::size_t{1} << kLevels) != 0) {
            throw ConfigError("discriminator needs resolution divisible by 8");
        }
        const double gain = std::sqrt(2.0 / (1.0 + d.slope_ * d.slope_));
        std::size_t prev = 3, ch = 16;
        for (std::size_t i = 0; i < kLevels; ++i) {
            detail::add_conv(d.params_, rng, detail::lvl("disc.l", i), ch, prev, 3, gain);
            prev = ch;
            ch = std::min(ch * 2, cfg.disc_channels_max);
        }
        const std::size_t side = cfg.resolution >> kLevels;
        const std::size_t flat = prev * side * side;
        d.params_["disc.fc.w"] = rng.normal_tensor<T>({1, flat}, 1.0 / std::sqrt(static_cast<double>(flat)));
        d.params_["disc.fc.b"] = Tensor<T>({1});
        return d;
    }

    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }

    std::vector<std::pair<std::string, Tensor<T>*>> trainable() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto& [name, t] : params_) out.emplace_back(name, &t);
        return out;
    }

    Var logit(Tape<T>& t, Var image) const {
        const auto& iv = t.value(image);
        if (iv.rank() != 3 || iv.dim(0) != 3 || iv.dim(1) != resolution_ || iv.dim(2) != resolution_) {
            throw DimensionError("discriminator input " + shape_str(iv.shape()));
        }
        Bound<T> P(t, params_);
        Var x = image;
        for (std::size_t i = 0; i < kLevels; ++i) {
            const std::string n = detail::lvl("disc.l", i);
            x = ops::leaky_relu(t, ops::conv2d(t, x, P(n + ".w"), P(n + ".b"), {2, 1}), static_cast<T>(slope_));
        }
        const std::size_t n = t.value(x).size();
        return ops::linear(t, P("disc.fc.w"), ops::reshape(t, x, {n}), P("disc.fc.b"));
    }

   private:
    std::size_t resolution_ = 0;
    double slope_ = 0.2;
    ParamStore<T> params_;
};

}  // namespace ented
