#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ented/numerics/rng.hpp"
#include "ented/numerics/tape.hpp"

namespace ented {

/// Differentiable function under test: builds its output from the given leaves.
using GradFn = std::function<Var(Tape<double>&, std::span<const Var>)>;

struct NamedTensor {
    std::string name;
    Tensor<double> value;
};

struct GradcheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Probes with both analytic and numeric magnitude below this count as agreeing.
    double abs_floor = 1e-6;
    /// Inputs up to this many elements are probed coordinate by coordinate.
    std::size_t max_coordinate_probes = 64;
    std::size_t random_directions = 6;
    std::uint64_t seed = 0;
    /// Multiplies every backward contribution; 1 means a clean run.
    double fault_scale = 1.0;
};

struct GradcheckReport {
    struct Entry {
        std::string input;
        double max_rel_error = 0;
        std::size_t probes = 0;
    };
    bool passed = true;
    std::vector<Entry> entries;
    std::string diagnostic;
    /// Names of the ops whose backward ran in the analytic pass.
    std::set<std::string> ops_exercised;

    double worst() const {
        double w = 0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_error);
        return w;
    }
};

namespace detail {

inline double project(const Tensor<double>& y, const Tensor<double>& r) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
}

inline double eval_projected(const GradFn& fn, const std::vector<NamedTensor>& inputs, const Tensor<double>& r) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(tape.constant(in.value));
    const Tensor<double>& y = tape.value(fn(tape, leaves));
    return project(y, r);
}

/// Probes `f` around `base` along coordinate axes (small inputs) and random
/// unit directions, comparing central differences with <analytic, d>.
/// Returns false if a probe produced a non-finite value.
inline bool probe_directions(GradcheckReport::Entry& entry, const Tensor<double>& base,
                             const Tensor<double>& analytic, const std::function<double(const Tensor<double>&)>& f,
                             const GradcheckOptions& opt, Rng& rng) {
    const std::size_t n = base.size();
    std::vector<Tensor<double>> dirs;
    if (n <= opt.max_coordinate_probes) {
        for (std::size_t i = 0; i < n; ++i) {
            Tensor<double> d(base.shape());
            d[i] = 1.0;
            dirs.push_back(std::move(d));
        }
    }
    for (std::size_t k = 0; k < opt.random_directions; ++k) {
        Tensor<double> d = rng.normal_tensor<double>(base.shape());
        double norm = 0;
        for (double v : d.data()) norm += v * v;
        norm = std::sqrt(norm);
        for (auto& v : d.data()) v /= norm;
        dirs.push_back(std::move(d));
    }
    for (const auto& d : dirs) {
        auto shifted = [&](double h) {
            Tensor<double> v = base;
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += h * d[i];
            return f(v);
        };
        const double fp = shifted(opt.step);
        const double fm = shifted(-opt.step);
        if (!std::isfinite(fp) || !std::isfinite(fm)) return false;
        const double numeric = (fp - fm) / (2 * opt.step);
        const double a = project(analytic, d);
        const double scale = std::max(std::abs(numeric), std::abs(a));
        const double err = scale < opt.abs_floor ? 0.0 : std::abs(numeric - a) / scale;
        entry.max_rel_error = std::max(entry.max_rel_error, err);
        ++entry.probes;
    }
    return true;
}

}  // namespace detail

/// Compares the recorded backward pass of `fn` against central differences.
/// The output is reduced to a scalar by a fixed random projection, so every
/// probe is a directional derivative of <r, fn(x)>.
inline GradcheckReport gradcheck(const GradFn& fn, std::vector<NamedTensor> inputs, GradcheckOptions opt = {}) {
    GradcheckReport report;
    Rng rng(opt.seed);

    Tape<double> tape;
    tape.set_fault_scale(opt.fault_scale);
    std::vector<Var> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.input(in.value));
    const Var out = fn(tape, leaves);
    const Tensor<double> y = tape.value(out);
    if (!y.all_finite()) {
        report.passed = false;
        report.diagnostic = "non-finite forward output";
        return report;
    }
    Tensor<double> r = rng.normal_tensor<double>(y.shape());
    tape.backward(out, r);
    for (std::size_t id : tape.visit_order()) report.ops_exercised.insert(tape.node(Var{id}).op);

    for (std::size_t j = 0; j < inputs.size(); ++j) {
        GradcheckReport::Entry entry{inputs[j].name};
        const Tensor<double> base = inputs[j].value;
        auto f = [&](const Tensor<double>& v) {
            inputs[j].value = v;
            const double val = detail::eval_projected(fn, inputs, r);
            inputs[j].value = base;
            return val;
        };
        if (!detail::probe_directions(entry, base, tape.grad(leaves[j]), f, opt, rng)) {
            report.passed = false;
            report.diagnostic = "non-finite value while probing input '" + inputs[j].name + "'";
            return report;
        }
        if (entry.max_rel_error > opt.tolerance) report.passed = false;
        report.entries.push_back(std::move(entry));
    }
    if (!report.passed) report.diagnostic = "analytic and numeric gradients disagree";
    return report;
}

}  // namespace ented
