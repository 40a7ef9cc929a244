#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ented/numerics/ops.hpp"
#include "ented/numerics/rng.hpp"

namespace ented::losses {

struct LossWeights {
    double adv = 1.5;
    double percep = 1.0;
    double q = 1.0;
    double att = 15.0;

    void validate() const {
        if (adv < 0 || percep < 0 || q < 0 || att < 0) throw std::invalid_argument("loss weights must be >= 0");
    }
};

struct LossParts {
    double adv = 0;
    double percep = 0;
    double q = 0;
    double att = 0;
};

/// λ_adv·adv + λ_percep·percep + λ_q·q + λ_att·att
inline double total_loss(const LossParts& p, const LossWeights& w) {
    return w.adv * p.adv + w.percep * p.percep + w.q * p.q + w.att * p.att;
}

/// Tape form of total_loss; invalid parts are skipped.
template <class T>
Var total_loss(Tape<T>& t, Var adv, Var percep, Var q, Var att, const LossWeights& w) {
    Var acc;
    auto push = [&](Var part, double weight) {
        if (!part.valid()) return;
        const Var term = ops::scale(t, part, static_cast<T>(weight));
        acc = acc.valid() ? ops::add(t, acc, term) : term;
    };
    push(adv, w.adv);
    push(percep, w.percep);
    push(q, w.q);
    push(att, w.att);
    if (!acc.valid()) acc = t.constant(Tensor<T>::scalar(0));
    return acc;
}

/// Non-saturating generator loss log(1 + exp(−logit)).
template <class T>
Var adversarial_loss(Tape<T>& t, Var logit) {
    return ops::sum(t, ops::softplus(t, ops::scale(t, logit, T{-1})));
}

inline double adversarial_loss(double logit) { return ops::softplus_value(-logit); }

/// Discriminator objective softplus(−D(real)) + softplus(D(fake)).
template <class T>
Var discriminator_loss(Tape<T>& t, Var real_logit, Var fake_logit) {
    return ops::add(t, ops::sum(t, ops::softplus(t, ops::scale(t, real_logit, T{-1}))),
                    ops::sum(t, ops::softplus(t, fake_logit)));
}

/// Fixed random conv stack whose activations after each layer serve as
/// perceptual taps. Weights never change after construction.
template <class T>
class PerceptualNet {
   public:
    struct Layer {
        Tensor<T> weight;
        Tensor<T> bias;
        std::size_t stride;
    };

    static constexpr std::array<std::size_t, 4> kChannels{16, 16, 32, 32};
    static constexpr std::array<std::size_t, 4> kStrides{1, 2, 2, 2};

    explicit PerceptualNet(std::uint64_t seed = 0x9E3779B9ULL, double slope = 0.2) : slope_(slope) {
        Rng rng(seed);
        std::size_t prev = 3;
        for (std::size_t i = 0; i < kChannels.size(); ++i) {
            const double sd = std::sqrt(2.0 / (1.0 + slope * slope)) / std::sqrt(static_cast<double>(prev * 9));
            layers_.push_back({rng.normal_tensor<T>({kChannels[i], prev, 3, 3}, sd),
                               rng.normal_tensor<T>({kChannels[i]}, 0.05), kStrides[i]});
            prev = kChannels[i];
        }
    }

    const std::vector<Layer>& layers() const noexcept { return layers_; }
    double slope() const noexcept { return slope_; }

    /// Activation after every layer.
    std::vector<Var> taps(Tape<T>& t, Var image) const {
        std::vector<Var> out;
        Var x = image;
        for (const auto& l : layers_) {
            const Var w = t.constant(l.weight);
            const Var b = t.constant(l.bias);
            x = ops::leaky_relu(t, ops::conv2d(t, x, w, b, {l.stride, 1}), static_cast<T>(slope_));
            out.push_back(x);
        }
        return out;
    }

   private:
    double slope_;
    std::vector<Layer> layers_;
};

/// Σ_j mean |φ_j(a) − φ_j(b)|.
template <class T>
Var perceptual_loss(Tape<T>& t, Var restored, Var target, const PerceptualNet<T>& net) {
    t.value(restored).require_same_shape(t.value(target), "perceptual_loss");
    const auto fa = net.taps(t, restored);
    const auto fb = net.taps(t, target);
    Var acc;
    for (std::size_t j = 0; j < fa.size(); ++j) {
        const Var term = ops::abs_mean(t, ops::sub(t, fa[j], fb[j]));
        acc = acc.valid() ? ops::add(t, acc, term) : term;
    }
    return acc;
}

}  // namespace ented::losses
