#pragma once

// Vector-quantised dictionary: nearest-codeword substitution for latent
// vectors, the commitment-weighted quantisation loss, straight-through
// gradients, the warm-up gate and periodic k-means re-estimation.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ented/numerics/ops.hpp"
#include "ented/numerics/rng.hpp"

namespace ented::vq {

struct Schedule {
    double beta = 0.25;
    std::size_t warmup_iters = 0;
    std::size_t reinit_period = 0;  // 0 disables re-initialisation
};

template <class T>
class Dictionary {
   public:
    Dictionary() = default;

    Dictionary(Tensor<T> codewords, Schedule schedule) : codewords_(std::move(codewords)), schedule_(schedule) {
        if (codewords_.rank() != 2) throw DimensionError("codebook must be K×c, got " + shape_str(codewords_.shape()));
        if (!codewords_.all_finite()) throw NumericError("codebook contains non-finite values");
        usage_.assign(codewords_.dim(0), 0);
    }

    static Dictionary random(Rng& rng, std::size_t k, std::size_t c, Schedule schedule, double stddev = 1.0) {
        return Dictionary(rng.normal_tensor<T>({k, c}, stddev), schedule);
    }

    std::size_t size() const { return codewords_.dim(0); }
    std::size_t code_length() const { return codewords_.dim(1); }
    const Schedule& schedule() const noexcept { return schedule_; }
    Schedule& schedule() noexcept { return schedule_; }

    const Tensor<T>& codewords() const noexcept { return codewords_; }
    Tensor<T>& codewords() noexcept { return codewords_; }

    const std::vector<std::uint64_t>& usage() const noexcept { return usage_; }
    void set_usage(std::vector<std::uint64_t> u) {
        if (u.size() != size()) throw DimensionError("usage vector length does not match codebook");
        usage_ = std::move(u);
    }
    void record_usage(std::span<const std::size_t> indices) {
        for (auto i : indices) ++usage_.at(i);
    }
    void reset_usage() { std::fill(usage_.begin(), usage_.end(), 0); }

    /// Number of nearest-codeword searches performed so far (a probe for tests).
    std::size_t assign_calls() const noexcept { return *assign_calls_; }

    bool active(std::size_t iteration) const noexcept { return iteration >= schedule_.warmup_iters; }

    bool reinit_due(std::size_t iteration) const noexcept {
        return schedule_.reinit_period > 0 && iteration > schedule_.warmup_iters &&
               iteration % schedule_.reinit_period == 0;
    }

    /// Index of the nearest codeword (squared L2); ties go to the lowest index.
    std::size_t nearest(std::span<const T> v) const {
        const std::size_t k = size(), c = code_length();
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            const T* z = &codewords_[j * c];
            double d = 0;
            for (std::size_t i = 0; i < c; ++i) {
                const double diff = static_cast<double>(v[i]) - static_cast<double>(z[i]);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        return best;
    }

    /// Nearest codeword for every spatial vector of latent[c×h×w], row-major over (h, w).
    std::vector<std::size_t> assign(const Tensor<T>& latent) const {
        ++*assign_calls_;
        if (latent.rank() != 3 || latent.dim(0) != code_length()) {
            throw DimensionError("quantize: latent " + shape_str(latent.shape()) + " does not match code length " +
                                 std::to_string(code_length()));
        }
        const std::size_t c = latent.dim(0), hw = latent.dim(1) * latent.dim(2);
        std::vector<std::size_t> idx(hw);
        std::vector<T> v(c);
        for (std::size_t p = 0; p < hw; ++p) {
            for (std::size_t ch = 0; ch < c; ++ch) v[ch] = latent[ch * hw + p];
            idx[p] = nearest(v);
        }
        return idx;
    }

   private:
    Tensor<T> codewords_;
    Schedule schedule_;
    std::vector<std::uint64_t> usage_;
    std::shared_ptr<std::size_t> assign_calls_ = std::make_shared<std::size_t>(0);
};

template <class T>
struct QuantizationResult {
    Tensor<T> quantized;               // c×h×w, every column a codeword
    std::vector<std::size_t> indices;  // h*w, row-major
    double loss = 0;                   // quantisation loss at the dictionary's beta
};

/// Rebuilds a c×h×w map from codeword indices.
template <class T>
Tensor<T> gather(const Dictionary<T>& dict, std::span<const std::size_t> indices, std::size_t h, std::size_t w) {
    const std::size_t c = dict.code_length(), hw = h * w;
    Tensor<T> out({c, h, w});
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + p] = dict.codewords()[indices[p] * c + ch];
    return out;
}

/// Squared distance summed over positions; forward value of the quantisation loss is (1+β) times this.
template <class T>
double squared_distance(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same_shape(b, "squared_distance");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s;
}

template <class T>
QuantizationResult<T> quantize(const Tensor<T>& latent, Dictionary<T>& dict) {
    QuantizationResult<T> r;
    r.indices = dict.assign(latent);
    dict.record_usage(r.indices);
    r.quantized = gather(dict, r.indices, latent.dim(1), latent.dim(2));
    r.loss = (1.0 + dict.schedule().beta) * squared_distance(latent, r.quantized);
    return r;
}

/// Σ‖sg[z] − z_q‖² + β‖sg[z_q] − z‖²: the first term trains the codebook,
/// the second commits the encoder.
template <class T>
Var quantization_loss(Tape<T>& t, Var latent, Var quantized, T beta) {
    t.value(latent).require_same_shape(t.value(quantized), "quantization_loss");
    const Var codebook_term = ops::sum_squares(t, ops::sub(t, ops::stop_gradient(t, latent), quantized));
    const Var commit_term = ops::sum_squares(t, ops::sub(t, ops::stop_gradient(t, quantized), latent));
    return ops::add(t, codebook_term, ops::scale(t, commit_term, beta));
}

/// Outcome of the warm-up-gated substitution on a tape.
struct Applied {
    Var output;     // what the decoder consumes
    Var quantized;  // codeword map tied to the codebook leaf (invalid when inactive)
    std::vector<std::size_t> indices;
    bool active = false;
};

/// Before warm-up ends the latent passes through untouched; afterwards each
/// vector is replaced by its codeword with straight-through gradients.
template <class T>
Applied maybe_apply(Tape<T>& t, Dictionary<T>& dict, Var latent, Var codebook, std::size_t iteration) {
    Applied a;
    if (!dict.active(iteration)) {
        a.output = latent;
        return a;
    }
    const auto& lv = t.value(latent);
    const std::size_t h = lv.dim(1), w = lv.dim(2);
    a.indices = dict.assign(lv);
    dict.record_usage(a.indices);
    a.quantized = ops::gather_rows(t, codebook, a.indices, h, w);
    a.output = ops::straight_through(t, latent, a.quantized);
    a.active = true;
    return a;
}

// ---------------------------------------------------------------- k-means

/// Σ_x min_j ‖x − z_j‖² over the rows of batch[N×c].
template <class T>
double distortion(const Tensor<T>& centroids, const Tensor<T>& batch) {
    const std::size_t k = centroids.dim(0), c = centroids.dim(1);
    double total = 0;
    for (std::size_t n = 0; n < batch.dim(0); ++n) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            double d = 0;
            for (std::size_t i = 0; i < c; ++i) {
                const double diff = static_cast<double>(batch[n * c + i]) - static_cast<double>(centroids[j * c + i]);
                d += diff * diff;
            }
            best = std::min(best, d);
        }
        total += best;
    }
    return total;
}

struct ReinitReport {
    double distortion_before = 0;
    double distortion_after = 0;
    /// Within-cluster sum of squares after each Lloyd iteration of the kept run;
    /// element 0 is the value at the seeding.
    std::vector<double> lloyd_wcss;
    std::size_t dead_reseeded = 0;
    std::string chosen;  // "warm", "kmeans++" or "kept"
};

namespace detail {

template <class T>
double sq_dist(const T* a, const T* b, std::size_t c) {
    double d = 0;
    for (std::size_t i = 0; i < c; ++i) {
        const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        d += diff * diff;
    }
    return d;
}

template <class T>
double data_scale(const Tensor<T>& batch) {
    double s = 0;
    for (T v : batch.data()) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s / static_cast<double>(batch.size())) + 1e-12;
}

/// A random batch row with a small Gaussian jitter.
template <class T>
void perturbed_sample(const Tensor<T>& batch, Rng& rng, T* dst) {
    const std::size_t c = batch.dim(1);
    const std::size_t n = rng.uniform_index(batch.dim(0));
    const double jitter = 1e-3 * data_scale(batch);
    for (std::size_t i = 0; i < c; ++i) dst[i] = static_cast<T>(batch[n * c + i] + jitter * rng.normal());
}

template <class T>
Tensor<T> kmeanspp_seed(const Tensor<T>& batch, std::size_t k, Rng& rng) {
    const std::size_t n = batch.dim(0), c = batch.dim(1);
    Tensor<T> cent({k, c});
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t first = rng.uniform_index(n);
    std::copy_n(&batch[first * c], c, &cent[0]);
    for (std::size_t j = 1; j < k; ++j) {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist(&batch[i * c], &cent[(j - 1) * c], c));
            total += d2[i];
        }
        if (total <= 0) {
            perturbed_sample(batch, rng, &cent[j * c]);
            continue;
        }
        double target = rng.uniform() * total;
        std::size_t pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            target -= d2[i];
            if (target < 0 && d2[i] > 0) {
                pick = i;
                break;
            }
        }
        std::copy_n(&batch[pick * c], c, &cent[j * c]);
    }
    return cent;
}

/// Lloyd iterations; empty clusters take the point farthest from its centroid
/// out of a cluster with at least two members, so WCSS never increases.
template <class T>
std::vector<double> lloyd(Tensor<T>& cent, const Tensor<T>& batch, std::size_t iters) {
    const std::size_t n = batch.dim(0), c = batch.dim(1), k = cent.dim(0);
    std::vector<std::size_t> assign(n);
    std::vector<double> dist(n);
    std::vector<double> history;

    auto assign_all = [&] {
        double wcss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
                const double d = sq_dist(&batch[i * c], &cent[j * c], c);
                if (d < bd) {
                    bd = d;
                    best = j;
                }
            }
            assign[i] = best;
            dist[i] = bd;
            wcss += bd;
        }
        return wcss;
    };
    history.push_back(assign_all());

    for (std::size_t it = 0; it < iters; ++it) {
        if (it > 0) assign_all();
        std::vector<std::size_t> count(k, 0);
        for (auto a : assign) ++count[a];
        for (std::size_t j = 0; j < k; ++j) {
            if (count[j] != 0) continue;
            std::size_t far = n;
            double fd = -1;
            for (std::size_t i = 0; i < n; ++i) {
                if (count[assign[i]] >= 2 && dist[i] > fd) {
                    fd = dist[i];
                    far = i;
                }
            }
            if (far == n || fd <= 0) break;
            --count[assign[far]];
            assign[far] = j;
            dist[far] = 0;
            count[j] = 1;
        }
        std::vector<double> acc(k * c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) acc[assign[i] * c + ch] += batch[i * c + ch];
        for (std::size_t j = 0; j < k; ++j) {
            if (count[j] == 0) continue;
            for (std::size_t ch = 0; ch < c; ++ch) cent[j * c + ch] = static_cast<T>(acc[j * c + ch] / count[j]);
        }
        double wcss = 0;
        for (std::size_t i = 0; i < n; ++i) wcss += sq_dist(&batch[i * c], &cent[assign[i] * c], c);
        history.push_back(wcss);
    }
    return history;
}

}  // namespace detail

/// Re-estimates the codebook from recent latents batch[N×c]. Two candidates
/// are fitted (Lloyd from the current codebook with dead entries re-seeded,
/// and Lloyd from a k-means++ seeding); the lower-distortion one is kept, and
/// the codebook is left as is if neither improves on it. Usage counters reset.
template <class T>
ReinitReport kmeans_reinit(Dictionary<T>& dict, const Tensor<T>& batch, std::size_t iters, Rng& rng) {
    if (batch.rank() != 2 || batch.dim(0) == 0) throw std::invalid_argument("kmeans_reinit: empty batch");
    if (batch.dim(1) != dict.code_length()) {
        throw DimensionError("kmeans_reinit: batch " + shape_str(batch.shape()) + " vs code length " +
                             std::to_string(dict.code_length()));
    }
    const std::size_t k = dict.size(), c = dict.code_length();
    ReinitReport rep;
    rep.distortion_before = distortion(dict.codewords(), batch);

    Tensor<T> warm = dict.codewords();
    for (std::size_t j = 0; j < k; ++j) {
        if (dict.usage()[j] == 0) {
            detail::perturbed_sample(batch, rng, &warm[j * c]);
            ++rep.dead_reseeded;
        }
    }
    auto warm_hist = detail::lloyd(warm, batch, iters);
    const double warm_d = distortion(warm, batch);

    Tensor<T> fresh = detail::kmeanspp_seed(batch, k, rng);
    auto fresh_hist = detail::lloyd(fresh, batch, iters);
    const double fresh_d = distortion(fresh, batch);

    rep.distortion_after = rep.distortion_before;
    rep.chosen = "kept";
    if (warm_d < rep.distortion_after) {
        rep.distortion_after = warm_d;
        rep.chosen = "warm";
        rep.lloyd_wcss = warm_hist;
    }
    if (fresh_d < rep.distortion_after) {
        rep.distortion_after = fresh_d;
        rep.chosen = "kmeans++";
        rep.lloyd_wcss = fresh_hist;
    }
    if (rep.chosen == "warm") dict.codewords() = std::move(warm);
    if (rep.chosen == "kmeans++") dict.codewords() = std::move(fresh);
    dict.reset_usage();
    return rep;
}

}  // namespace ented::vq
