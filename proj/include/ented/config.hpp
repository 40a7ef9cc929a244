#pragma once

// Run configuration: JSON on disk, two presets, strict validation with the
// offending key path in every diagnostic.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ented/degradation.hpp"
#include "ented/generator.hpp"
#include "ented/losses.hpp"
#include "ented/vq_dictionary.hpp"
#include "json.hpp"

namespace ented::config {

using json = nlohmann::json;

struct OptimConfig {
    double lr_g = 2e-3;
    double lr_d = 1.882e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
};

struct VqConfig {
    double beta = 0.25;
    std::size_t warmup_iters = 100;
    std::size_t reinit_period = 50;
    std::size_t kmeans_iters = 10;
    std::size_t buffer_vectors = 1024;  // recent content latents kept for k-means
};

struct DataConfig {
    std::string dir;             // directory of ground-truth PNGs
    std::size_t synthetic = 0;  // >0: procedural faces instead of a directory
};

struct TrainConfig {
    std::size_t iterations = 2000;
    std::size_t batch_size = 4;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
};

struct RunConfig {
    std::string preset = "desk_scale";
    std::uint64_t seed = 1234;
    std::string precision = "f32";  // "f32" training, "f64" verification
    NetworkConfig network;
    // At 32x32 with four images the full adversarial weight swamps the
    // fidelity terms; the desk default keeps it small.
    losses::LossWeights loss{.adv = 0.01};
    OptimConfig optim;
    VqConfig vq;
    degradation::DegradationSpec degradation;
    degradation::ReferenceSpec reference;
    DataConfig data;
    TrainConfig train;
    std::string out_dir = "run";

    vq::Schedule schedule() const { return {vq.beta, vq.warmup_iters, vq.reinit_period}; }
};

class ConfigError : public ented::ConfigError {
   public:
    ConfigError(const std::string& path, const std::string& what) : ented::ConfigError(path + ": " + what) {}
};

inline RunConfig desk_scale() { return {}; }

/// Values from the full-resolution training protocol; channel widths are our own.
inline RunConfig paper_scale() {
    RunConfig c;
    c.preset = "paper_scale";
    c.network.resolution = 512;
    c.loss.adv = 1.5;
    c.network.channels = {32, 64, 128, 256, 256};
    c.network.code_length = 256;
    c.network.codebook_size = 1024;
    c.network.texture_kernels = 32;
    c.network.disc_channels_max = 256;
    c.vq.warmup_iters = 10000;
    c.vq.reinit_period = 2000;
    c.vq.buffer_vectors = 16384;
    c.degradation.factors = {4, 8, 16};
    c.train.iterations = 400000;
    return c;
}

inline RunConfig preset(const std::string& name) {
    if (name == "desk_scale") return desk_scale();
    if (name == "paper_scale") return paper_scale();
    throw ConfigError("preset", "unknown preset '" + name + "' (desk_scale, paper_scale)");
}

inline json to_json(const RunConfig& c) {
    const auto& n = c.network;
    const auto& d = c.degradation;
    return json{
        {"preset", c.preset},
        {"seed", c.seed},
        {"precision", c.precision},
        {"network",
         {{"resolution", n.resolution},
          {"channels", n.channels},
          {"code_length", n.code_length},
          {"codebook_size", n.codebook_size},
          {"texture_kernels", n.texture_kernels},
          {"disc_channels_max", n.disc_channels_max},
          {"leaky_slope", n.leaky_slope},
          {"demodulate", n.demodulate},
          {"quantize_reference", n.quantize_reference},
          {"skip", n.skip},
          {"style", n.style},
          {"vq", n.vq},
          {"refine", n.refine}}},
        {"loss", {{"adv", c.loss.adv}, {"percep", c.loss.percep}, {"q", c.loss.q}, {"att", c.loss.att}}},
        {"optim",
         {{"lr_g", c.optim.lr_g},
          {"lr_d", c.optim.lr_d},
          {"beta1", c.optim.beta1},
          {"beta2", c.optim.beta2},
          {"eps", c.optim.eps}}},
        {"vq",
         {{"beta", c.vq.beta},
          {"warmup_iters", c.vq.warmup_iters},
          {"reinit_period", c.vq.reinit_period},
          {"kmeans_iters", c.vq.kmeans_iters},
          {"buffer_vectors", c.vq.buffer_vectors}}},
        {"degradation",
         {{"blur_sigma_min", d.blur_sigma_min},
          {"blur_sigma_max", d.blur_sigma_max},
          {"factors", d.factors},
          {"noise_min", d.noise_min},
          {"noise_max", d.noise_max},
          {"block_quantize", d.block_quantize},
          {"block", d.block},
          {"quant_step_min", d.quant_step_min},
          {"quant_step_max", d.quant_step_max}}},
        {"reference",
         {{"max_shift", c.reference.max_shift},
          {"gain_jitter", c.reference.gain_jitter},
          {"offset_jitter", c.reference.offset_jitter}}},
        {"data", {{"dir", c.data.dir}, {"synthetic", c.data.synthetic}}},
        {"train",
         {{"iterations", c.train.iterations},
          {"batch_size", c.train.batch_size},
          {"checkpoint_every", c.train.checkpoint_every}}},
        {"out_dir", c.out_dir},
    };
}

namespace detail {

/// Reads one object level, rejecting keys the reader never asked for.
class Reader {
   public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }
    ~Reader() noexcept(false) {
        if (std::uncaught_exceptions()) return;
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError(key(k), "unknown key");
        }
    }

    template <class V>
    void get(const std::string& k, V& out) {
        seen_.insert(k);
        if (!j_.contains(k)) return;
        const json& v = j_.at(k);
        try {
            if constexpr (std::is_same_v<V, bool>) {
                if (!v.is_boolean()) throw ConfigError(key(k), "expected a boolean");
            } else if constexpr (std::is_unsigned_v<V>) {
                if (!non_negative_integer(v)) throw ConfigError(key(k), "expected a non-negative integer");
            } else if constexpr (std::is_integral_v<V>) {
                if (!v.is_number_integer()) throw ConfigError(key(k), "expected an integer");
            } else if constexpr (std::is_floating_point_v<V>) {
                if (!v.is_number()) throw ConfigError(key(k), "expected a number");
            } else if constexpr (std::is_same_v<V, std::string>) {
                if (!v.is_string()) throw ConfigError(key(k), "expected a string");
            } else {
                if (!v.is_array()) throw ConfigError(key(k), "expected an array");
                for (std::size_t i = 0; i < v.size(); ++i) {
                    if (!non_negative_integer(v[i])) {
                        throw ConfigError(key(k) + "[" + std::to_string(i) + "]", "expected a non-negative integer");
                    }
                }
            }
            out = v.get<V>();
        } catch (const json::exception& e) {
            throw ConfigError(key(k), e.what());
        }
    }

    Reader child(const std::string& k) {
        seen_.insert(k);
        static const json empty = json::object();
        return Reader(j_.contains(k) ? j_.at(k) : empty, key(k));
    }

    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

   private:
    static bool non_negative_integer(const json& v) {
        return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& path, const std::string& what) {
    if (!ok) throw ConfigError(path, what);
}

}  // namespace detail

inline void validate(const RunConfig& c) {
    using detail::require;
    require(c.precision == "f32" || c.precision == "f64", "precision", "must be \"f32\" or \"f64\"");
    const auto& n = c.network;
    require(!n.channels.empty(), "network.channels", "must not be empty");
    for (std::size_t i = 0; i < n.channels.size(); ++i) {
        require(n.channels[i] > 0, "network.channels[" + std::to_string(i) + "]", "must be positive");
    }
    require(n.resolution > 0 && n.resolution % n.downsample() == 0, "network.resolution",
            "must be divisible by 2^levels = " + std::to_string(n.downsample()));
    require(n.resolution % 8 == 0, "network.resolution", "must be divisible by 8 for the discriminator");
    require(n.code_length > 0, "network.code_length", "must be positive");
    require(n.codebook_size > 0, "network.codebook_size", "must be positive");
    require(n.texture_kernels > 0, "network.texture_kernels", "must be positive");
    require(n.disc_channels_max > 0, "network.disc_channels_max", "must be positive");
    require(n.leaky_slope >= 0 && n.leaky_slope < 1, "network.leaky_slope", "must be in [0, 1)");
    require(c.loss.adv >= 0, "loss.adv", "must be >= 0");
    require(c.loss.percep >= 0, "loss.percep", "must be >= 0");
    require(c.loss.q >= 0, "loss.q", "must be >= 0");
    require(c.loss.att >= 0, "loss.att", "must be >= 0");
    require(c.optim.lr_g > 0, "optim.lr_g", "must be positive");
    require(c.optim.lr_d > 0, "optim.lr_d", "must be positive");
    require(c.optim.beta1 >= 0 && c.optim.beta1 < 1, "optim.beta1", "must be in [0, 1)");
    require(c.optim.beta2 >= 0 && c.optim.beta2 < 1, "optim.beta2", "must be in [0, 1)");
    require(c.optim.eps > 0, "optim.eps", "must be positive");
    require(c.vq.beta >= 0, "vq.beta", "must be >= 0");
    require(c.vq.kmeans_iters > 0, "vq.kmeans_iters", "must be positive");
    require(c.vq.buffer_vectors >= n.codebook_size, "vq.buffer_vectors", "must hold at least codebook_size vectors");
    try {
        c.degradation.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("degradation", e.what());
    }
    for (std::size_t i = 0; i < c.degradation.factors.size(); ++i) {
        require(n.resolution % c.degradation.factors[i] == 0, "degradation.factors[" + std::to_string(i) + "]",
                "must divide network.resolution");
    }
    require(c.reference.max_shift >= 0, "reference.max_shift", "must be >= 0");
    require(c.reference.gain_jitter >= 0 && c.reference.gain_jitter < 1, "reference.gain_jitter", "must be in [0, 1)");
    require(c.reference.offset_jitter >= 0, "reference.offset_jitter", "must be >= 0");
    require(!c.data.dir.empty() || c.data.synthetic > 0, "data", "set data.dir or data.synthetic");
    require(c.train.batch_size > 0, "train.batch_size", "must be positive");
}

/// Preset named by "preset" (desk_scale when absent), overridden by every key present.
inline RunConfig from_json(const json& j) {
    detail::Reader root(j, "");
    std::string name = "desk_scale";
    root.get("preset", name);
    RunConfig c = preset(name);
    root.get("seed", c.seed);
    root.get("precision", c.precision);
    {
        auto r = root.child("network");
        auto& n = c.network;
        r.get("resolution", n.resolution);
        r.get("channels", n.channels);
        r.get("code_length", n.code_length);
        r.get("codebook_size", n.codebook_size);
        r.get("texture_kernels", n.texture_kernels);
        r.get("disc_channels_max", n.disc_channels_max);
        r.get("leaky_slope", n.leaky_slope);
        r.get("demodulate", n.demodulate);
        r.get("quantize_reference", n.quantize_reference);
        r.get("skip", n.skip);
        r.get("style", n.style);
        r.get("vq", n.vq);
        r.get("refine", n.refine);
    }
    {
        auto r = root.child("loss");
        r.get("adv", c.loss.adv);
        r.get("percep", c.loss.percep);
        r.get("q", c.loss.q);
        r.get("att", c.loss.att);
    }
    {
        auto r = root.child("optim");
        r.get("lr_g", c.optim.lr_g);
        r.get("lr_d", c.optim.lr_d);
        r.get("beta1", c.optim.beta1);
        r.get("beta2", c.optim.beta2);
        r.get("eps", c.optim.eps);
    }
    {
        auto r = root.child("vq");
        r.get("beta", c.vq.beta);
        r.get("warmup_iters", c.vq.warmup_iters);
        r.get("reinit_period", c.vq.reinit_period);
        r.get("kmeans_iters", c.vq.kmeans_iters);
        r.get("buffer_vectors", c.vq.buffer_vectors);
    }
    {
        auto r = root.child("degradation");
        auto& d = c.degradation;
        r.get("blur_sigma_min", d.blur_sigma_min);
        r.get("blur_sigma_max", d.blur_sigma_max);
        r.get("factors", d.factors);
        r.get("noise_min", d.noise_min);
        r.get("noise_max", d.noise_max);
        r.get("block_quantize", d.block_quantize);
        r.get("block", d.block);
        r.get("quant_step_min", d.quant_step_min);
        r.get("quant_step_max", d.quant_step_max);
    }
    {
        auto r = root.child("reference");
        r.get("max_shift", c.reference.max_shift);
        r.get("gain_jitter", c.reference.gain_jitter);
        r.get("offset_jitter", c.reference.offset_jitter);
    }
    {
        auto r = root.child("data");
        r.get("dir", c.data.dir);
        r.get("synthetic", c.data.synthetic);
    }
    {
        auto r = root.child("train");
        r.get("iterations", c.train.iterations);
        r.get("batch_size", c.train.batch_size);
        r.get("checkpoint_every", c.train.checkpoint_every);
    }
    root.get("out_dir", c.out_dir);
    return c;
}

/// ENTED_SEED, when set, replaces the configured seed.
inline void apply_env(RunConfig& c) {
    if (const char* s = std::getenv("ENTED_SEED"); s && *s) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(s, &end, 10);
        if (*end != '\0' || s[0] == '-') throw ConfigError("ENTED_SEED", "expected a non-negative integer");
        c.seed = v;
    }
}

inline RunConfig parse(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
    }
    RunConfig c = from_json(j);
    apply_env(c);
    validate(c);
    return c;
}

inline RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

/// Everything that shapes the training trajectory. Iteration count,
/// checkpoint cadence and paths are left out so a run can be extended or moved.
inline json trajectory(const RunConfig& c) {
    json j = to_json(c);
    j["train"].erase("iterations");
    j["train"].erase("checkpoint_every");
    j.erase("out_dir");
    j["data"].erase("dir");
    return j;
}

/// FNV-1a over the canonical trajectory JSON.
inline std::uint64_t hash(const RunConfig& c) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : trajectory(c).dump()) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace ented::config
