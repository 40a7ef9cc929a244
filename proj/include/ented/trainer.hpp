#pragma once

// Alternating adversarial training: each iteration takes one discriminator
// step on detached restorations, then one generator step against the updated
// discriminator. The dictionary is fitted by k-means when the warm-up gate
// opens and re-estimated on its schedule from a buffer of recent latents.

#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include "ented/checkpoint.hpp"
#include "ented/config.hpp"
#include "ented/degradation.hpp"
#include "ented/generator.hpp"
#include "ented/losses.hpp"
#include "ented/metrics.hpp"
#include "ented/optimizer.hpp"
#include "ented/texture_transfer.hpp"

namespace ented::train {

struct StepLog {
    std::size_t iteration = 0;
    double adv = 0, percep = 0, att = 0, total = 0, disc = 0;
    double q = std::numeric_limits<double>::quiet_NaN();  // NaN while the gate is closed
    bool vq_active = false;
};

struct Event {
    std::size_t iteration = 0;
    std::string kind;  // "kmeans_init" when the gate opens, "reinit" on schedule
    vq::ReinitReport report;
};

/// Seeds derived from the run seed; pure functions of their indices.
namespace seeds {
inline std::uint64_t stream(std::uint64_t seed, std::uint64_t tag) { return Rng(seed).split(tag).next_u64(); }
inline std::uint64_t at(std::uint64_t seed, std::uint64_t tag, std::uint64_t i, std::uint64_t j = 0) {
    return Rng(stream(seed, tag)).split(i).split(j).next_u64();
}
enum : std::uint64_t { kGenerator = 1, kDiscriminator, kKmeans, kBatch, kDegrade, kReference, kEvalDegrade, kEvalRef };
}  // namespace seeds

/// The fixed (degraded, reference) pair used to score image i of a dataset.
template <class T>
std::pair<Tensor<T>, Tensor<T>> eval_pair(const config::RunConfig& cfg, const Tensor<T>& gt, std::size_t i) {
    return {degradation::degrade(gt, cfg.degradation, seeds::at(cfg.seed, seeds::kEvalDegrade, i)),
            degradation::make_reference(gt, cfg.reference, seeds::at(cfg.seed, seeds::kEvalRef, i))};
}

/// Forward-only restoration; the generator is copied so usage counters stay put.
template <class T>
Tensor<T> restore(Generator<T> gen, const Tensor<T>& lq, const Tensor<T>& ref, std::size_t iteration) {
    Tape<T> t;
    t.set_grad_enabled(false);
    return t.value(gen.forward(t, lq, ref, iteration).image);
}

struct Score {
    double psnr_input = 0, psnr_restored = 0, ssim_input = 0, ssim_restored = 0;
};

template <class T>
Score evaluate(const Generator<T>& gen, const config::RunConfig& cfg, const std::vector<Tensor<T>>& data,
               std::size_t iteration) {
    Score s;
    const double n = static_cast<double>(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto [lq, ref] = eval_pair(cfg, data[i], i);
        const Tensor<T> out = restore(gen, lq, ref, iteration);
        s.psnr_input += metrics::psnr(lq, data[i]) / n;
        s.psnr_restored += metrics::psnr(out, data[i]) / n;
        s.ssim_input += metrics::ssim(lq, data[i]) / n;
        s.ssim_restored += metrics::ssim(out, data[i]) / n;
    }
    return s;
}

template <class T>
class Trainer {
   public:
    Trainer(config::RunConfig cfg, std::vector<Tensor<T>> data) : cfg_(std::move(cfg)), data_(std::move(data)) {
        config::validate(cfg_);
        if (data_.empty()) throw std::invalid_argument("training set is empty");
        for (const auto& img : data_) {
            if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != cfg_.network.resolution ||
                img.dim(2) != cfg_.network.resolution) {
                throw DimensionError("training image " + shape_str(img.shape()) + " does not match resolution " +
                                     std::to_string(cfg_.network.resolution));
            }
        }
        Rng grng(seeds::stream(cfg_.seed, seeds::kGenerator));
        gen_ = Generator<T>::init(cfg_.network, grng, cfg_.schedule());
        Rng drng(seeds::stream(cfg_.seed, seeds::kDiscriminator));
        disc_ = Discriminator<T>::init(cfg_.network, drng);
        kmeans_rng_ = Rng(seeds::stream(cfg_.seed, seeds::kKmeans));
        adam_g_ = Adam<T>(cfg_.optim.lr_g, cfg_.optim.beta1, cfg_.optim.beta2, cfg_.optim.eps);
        adam_d_ = Adam<T>(cfg_.optim.lr_d, cfg_.optim.beta1, cfg_.optim.beta2, cfg_.optim.eps);
        for (std::size_t i = 0; i < cfg_.network.levels(); ++i) factors_.push_back(cfg_.network.level_factor(i));
    }

    const config::RunConfig& config() const noexcept { return cfg_; }
    std::size_t iteration() const noexcept { return iteration_; }
    const Generator<T>& generator() const noexcept { return gen_; }
    const Discriminator<T>& discriminator() const noexcept { return disc_; }
    const std::vector<Tensor<T>>& data() const noexcept { return data_; }

    /// Events raised by the last step().
    const std::vector<Event>& events() const noexcept { return events_; }

    /// Dataset indices of the batch at `iteration`: consecutive slices of a
    /// per-epoch shuffle.
    std::vector<std::size_t> batch_indices(std::size_t iteration) const {
        const std::size_t n = data_.size(), b = cfg_.train.batch_size;
        std::vector<std::size_t> out;
        std::size_t cached_epoch = std::numeric_limits<std::size_t>::max();
        std::vector<std::size_t> perm;
        for (std::size_t j = 0; j < b; ++j) {
            const std::size_t pos = iteration * b + j, epoch = pos / n;
            if (epoch != cached_epoch) {
                perm.resize(n);
                for (std::size_t i = 0; i < n; ++i) perm[i] = i;
                Rng r(seeds::at(cfg_.seed, seeds::kBatch, epoch));
                for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[r.uniform_index(i + 1)]);
                cached_epoch = epoch;
            }
            out.push_back(perm[pos % n]);
        }
        return out;
    }

    StepLog step() {
        const std::size_t it = iteration_;
        events_.clear();
        maybe_reestimate(it);

        const auto idx = batch_indices(it);
        const T inv_b = T{1} / static_cast<T>(idx.size());
        StepLog log;
        log.iteration = it;

        Tape<T> g;
        std::vector<Var> fakes;
        std::vector<const Tensor<T>*> reals;
        Var percep, att, q;
        auto acc = [&](Var& sum, Var term) { sum = sum.valid() ? ops::add(g, sum, term) : term; };
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const Tensor<T>& gt = data_[idx[j]];
            const Tensor<T> lq = degradation::degrade(gt, cfg_.degradation, seeds::at(cfg_.seed, seeds::kDegrade, it, j));
            const Tensor<T> ref =
                degradation::make_reference(gt, cfg_.reference, seeds::at(cfg_.seed, seeds::kReference, it, j));
            const auto out = gen_.forward(g, lq, ref, it);
            if (cfg_.network.vq) remember(g.value(out.latent));
            fakes.push_back(out.image);
            reals.push_back(&gt);
            acc(percep, losses::perceptual_loss(g, out.image, g.constant(gt), net_));
            acc(att, texture::attention_reconstruction_loss<T>(g, out.extraction, out.distribution, gt, ref, factors_));
            if (out.quant.active) {
                log.vq_active = true;
                acc(q, vq::quantization_loss(g, out.latent, out.quant.quantized, static_cast<T>(cfg_.vq.beta)));
            }
        }

        // Discriminator step on detached restorations.
        {
            Tape<T> d;
            Var loss;
            for (std::size_t j = 0; j < fakes.size(); ++j) {
                const Var real = disc_.logit(d, d.constant(*reals[j]));
                const Var fake = disc_.logit(d, d.constant(g.value(fakes[j])));
                const Var term = losses::discriminator_loss(d, real, fake);
                loss = loss.valid() ? ops::add(d, loss, term) : term;
            }
            loss = ops::scale(d, loss, inv_b);
            log.disc = static_cast<double>(d.value(loss).item());
            d.backward(loss);
            const auto grads = d.param_grads();
            for (auto& [name, p] : disc_.trainable()) {
                if (auto it_g = grads.find(name); it_g != grads.end()) adam_d_.step(name, *p, it_g->second);
            }
        }

        // Generator step against the updated discriminator, whose weights enter as constants.
        Var adv;
        g.set_grad_enabled(false);
        std::vector<Var> logits;
        for (Var f : fakes) logits.push_back(disc_.logit(g, f));
        g.set_grad_enabled(true);
        for (Var l : logits) acc(adv, losses::adversarial_loss(g, l));

        adv = ops::scale(g, adv, inv_b);
        percep = ops::scale(g, percep, inv_b);
        att = ops::scale(g, att, inv_b);
        if (q.valid()) q = ops::scale(g, q, inv_b);
        const Var total = losses::total_loss(g, adv, percep, q, att, cfg_.loss);
        log.adv = g.value(adv).item();
        log.percep = g.value(percep).item();
        log.att = g.value(att).item();
        if (q.valid()) log.q = g.value(q).item();
        log.total = g.value(total).item();
        if (!std::isfinite(log.total)) {
            throw NumericError("non-finite generator loss at iteration " + std::to_string(it));
        }
        g.backward(total);
        const auto grads = g.param_grads();
        for (auto& [name, p] : gen_.trainable()) {
            if (auto it_g = grads.find(name); it_g != grads.end()) adam_g_.step(name, *p, it_g->second);
        }
        ++iteration_;
        return log;
    }

    checkpoint::Checkpoint snapshot() const {
        checkpoint::Checkpoint ck;
        ck.put_string("meta/config", config::trajectory(cfg_).dump());
        ck.put_u64("meta/config_hash", config::hash(cfg_));
        ck.put_u64("meta/iteration", iteration_);
        ck.put_u64("rng/kmeans", std::vector<std::uint64_t>{kmeans_rng_.key(), kmeans_rng_.counter()});
        for (const auto& [name, t] : gen_.params()) ck.put("G/" + name, t);
        ck.put(std::string("G/") + Generator<T>::kCodebook, gen_.dictionary().codewords());
        ck.put_u64("vq/usage", gen_.dictionary().usage());
        for (const auto& [name, t] : disc_.params()) ck.put("D/" + name, t);
        put_adam(ck, "adam_g/", adam_g_);
        put_adam(ck, "adam_d/", adam_d_);
        ck.put_u64("vq/buffer_count", buffer_.size());
        if (!buffer_.empty()) ck.put("vq/buffer", buffer_tensor());
        return ck;
    }

    /// Resumes from a snapshot of a run with the same trajectory-defining config.
    void load(const checkpoint::Checkpoint& ck) {
        const std::uint64_t h = ck.u64("meta/config_hash");
        if (h != config::hash(cfg_)) {
            throw config::ConfigError("<resume>", "checkpoint was written by a different configuration (hash " +
                                                      std::to_string(h) + " vs " +
                                                      std::to_string(config::hash(cfg_)) + ")");
        }
        iteration_ = ck.u64("meta/iteration");
        const auto r = ck.u64s("rng/kmeans");
        if (r.size() != 2) throw checkpoint::FormatError("rng/kmeans must hold key and counter");
        kmeans_rng_ = Rng(r[0], r[1]);
        load_params(ck, "G/", gen_.params());
        auto cb = ck.tensor<T>(std::string("G/") + Generator<T>::kCodebook);
        cb.require_same_shape(gen_.dictionary().codewords(), "codebook");
        gen_.dictionary().codewords() = std::move(cb);
        gen_.dictionary().set_usage(ck.u64s("vq/usage"));
        load_params(ck, "D/", disc_.params());
        load_adam(ck, "adam_g/", adam_g_);
        load_adam(ck, "adam_d/", adam_d_);
        buffer_.clear();
        const std::size_t n = ck.u64("vq/buffer_count"), c = cfg_.network.code_length;
        if (n > 0) {
            const auto b = ck.tensor<T>("vq/buffer");
            if (b.size() != n * c) throw checkpoint::FormatError("vq/buffer size does not match vq/buffer_count");
            for (std::size_t i = 0; i < n; ++i) buffer_.emplace_back(&b[i * c], &b[i * c] + c);
        }
    }

   private:
    void maybe_reestimate(std::size_t it) {
        if (!cfg_.network.vq || buffer_.empty()) return;
        auto& dict = gen_.dictionary();
        const bool gate = it == dict.schedule().warmup_iters && it > 0;
        if (!gate && !dict.reinit_due(it)) return;
        Event e{it, gate ? "kmeans_init" : "reinit", {}};
        e.report = vq::kmeans_reinit(dict, buffer_tensor(), cfg_.vq.kmeans_iters, kmeans_rng_);
        // Moments of the old codewords say nothing about the new ones.
        adam_g_.reset(Generator<T>::kCodebook);
        events_.push_back(std::move(e));
    }

    void remember(const Tensor<T>& latent) {
        const std::size_t c = latent.dim(0), hw = latent.dim(1) * latent.dim(2);
        for (std::size_t p = 0; p < hw; ++p) {
            std::vector<T> v(c);
            for (std::size_t ch = 0; ch < c; ++ch) v[ch] = latent[ch * hw + p];
            buffer_.push_back(std::move(v));
            if (buffer_.size() > cfg_.vq.buffer_vectors) buffer_.pop_front();
        }
    }

    Tensor<T> buffer_tensor() const {
        const std::size_t c = cfg_.network.code_length;
        Tensor<T> b({buffer_.size(), c});
        for (std::size_t i = 0; i < buffer_.size(); ++i) std::copy(buffer_[i].begin(), buffer_[i].end(), &b[i * c]);
        return b;
    }

    static void put_adam(checkpoint::Checkpoint& ck, const std::string& prefix, const Adam<T>& a) {
        for (const auto& [name, s] : a.slots()) {
            ck.put(prefix + name + "/m", s.m);
            ck.put(prefix + name + "/v", s.v);
            ck.put_u64(prefix + name + "/step", s.step);
        }
    }

    static void load_adam(const checkpoint::Checkpoint& ck, const std::string& prefix, Adam<T>& a) {
        a.slots().clear();
        for (const auto& r : ck.records()) {
            if (r.name.rfind(prefix, 0) != 0 || !r.name.ends_with("/step")) continue;
            const std::string name = r.name.substr(prefix.size(), r.name.size() - prefix.size() - 5);
            auto& s = a.slots()[name];
            s.m = ck.tensor<T>(prefix + name + "/m");
            s.v = ck.tensor<T>(prefix + name + "/v");
            s.step = ck.u64(r.name);
        }
    }

    static void load_params(const checkpoint::Checkpoint& ck, const std::string& prefix, ParamStore<T>& store) {
        for (auto& [name, t] : store) {
            auto v = ck.tensor<T>(prefix + name);
            v.require_same_shape(t, name.c_str());
            t = std::move(v);
        }
    }

    config::RunConfig cfg_;
    std::vector<Tensor<T>> data_;
    Generator<T> gen_;
    Discriminator<T> disc_;
    losses::PerceptualNet<T> net_;
    Adam<T> adam_g_, adam_d_;
    Rng kmeans_rng_;
    std::deque<std::vector<T>> buffer_;
    std::vector<std::size_t> factors_;
    std::vector<Event> events_;
    std::size_t iteration_ = 0;
};

/// Rebuilds the generator stored in a checkpoint.
template <class T>
Generator<T> load_generator(const checkpoint::Checkpoint& ck, config::RunConfig* cfg_out = nullptr) {
    const auto cfg = config::from_json(config::json::parse(ck.string("meta/config")));
    Rng rng(0);
    auto gen = Generator<T>::init(cfg.network, rng, cfg.schedule());
    for (auto& [name, t] : gen.params()) {
        auto v = ck.tensor<T>("G/" + name);
        v.require_same_shape(t, name.c_str());
        t = std::move(v);
    }
    gen.dictionary().codewords() = ck.tensor<T>(std::string("G/") + Generator<T>::kCodebook);
    gen.dictionary().set_usage(ck.u64s("vq/usage"));
    if (cfg_out) *cfg_out = cfg;
    return gen;
}

}  // namespace ented::train
