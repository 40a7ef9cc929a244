#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ented/numerics/tensor.hpp"

namespace ented {

/// Handle to a value recorded on a Tape.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;
    bool valid() const noexcept { return id != npos; }
};

/// Linear record of forward values and the closures that push gradients back
/// through them. One tape per forward/backward pass; not shared across threads.
template <std::floating_point T>
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

    struct Node {
        std::string op;
        Tensor<T> value;
        Tensor<T> grad;  // empty until something flows in
        bool requires_grad = false;
        std::string param_name;  // non-empty for parameter leaves
        BackwardFn backward;
    };

    Var constant(Tensor<T> value) { return push("constant", std::move(value), false, {}); }

    /// Leaf that collects a gradient (unless gradients are disabled).
    Var input(Tensor<T> value) { return push("input", std::move(value), grad_enabled_, {}); }

    /// Parameter leaf; repeated requests for the same name reuse one node.
    Var param(const std::string& name, const Tensor<T>& value) {
        if (auto it = params_.find(name); it != params_.end()) return it->second;
        Var v = push("param", value, grad_enabled_, {});
        nodes_[v.id].param_name = name;
        params_.emplace(name, v);
        return v;
    }

    /// Makes later param(name) requests resolve to an existing node.
    void bind(const std::string& name, Var v) { params_[name] = v; }

    /// With gradients disabled, leaves are created as constants and no
    /// backward closures are kept (forward-only evaluation).
    void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }

    /// Records an op output. The backward closure is kept only when some
    /// input needs a gradient.
    Var record(std::string_view op, Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool rg = false;
        for (Var in : inputs) rg = rg || (in.valid() && nodes_.at(in.id).requires_grad);
        if (!rg) fn = nullptr;
        return push(op, std::move(value), rg, std::move(fn));
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    const Node& node(Var v) const { return nodes_.at(v.id); }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient of the last backward() w.r.t. v; zeros when nothing reached it.
    Tensor<T> grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
    }

    void accumulate(Var v, const Tensor<T>& g) {
        Node& n = nodes_.at(v.id);
        if (!n.requires_grad) return;
        if (n.grad.empty()) {
            n.grad = g;
            if (n.grad.shape() != n.value.shape()) {
                throw DimensionError("gradient shape " + shape_str(g.shape()) + " for node '" + n.op +
                                     "' of shape " + shape_str(n.value.shape()));
            }
        } else {
            n.grad += g;
        }
    }

    /// Reverse sweep from a scalar root seeded with 1.
    void backward(Var root) {
        if (value(root).size() != 1) throw DimensionError("backward() root must be a scalar");
        backward(root, Tensor<T>(value(root).shape(), T{1}));
    }

    void backward(Var root, Tensor<T> seed) {
        for (auto& n : nodes_) n.grad = Tensor<T>();
        visited_.clear();
        accumulate(root, seed);
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            visited_.push_back(i);
            Tensor<T> g = n.grad;
            if (fault_scale_ != T{1}) {
                for (auto& x : g.data()) x *= fault_scale_;
            }
            n.backward(*this, g);
        }
    }

    /// Node ids whose backward ran during the last sweep, in visiting order.
    const std::vector<std::size_t>& visit_order() const noexcept { return visited_; }

    std::map<std::string, Tensor<T>> param_grads() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, v] : params_) out.emplace(name, grad(v));
        return out;
    }

    /// Scales every propagated gradient; used only to self-test gradcheck.
    void set_fault_scale(T s) noexcept { fault_scale_ = s; }

   private:
    Var push(std::string_view op, Tensor<T> value, bool rg, BackwardFn fn) {
        nodes_.push_back(Node{std::string(op), std::move(value), {}, rg, {}, std::move(fn)});
        return Var{nodes_.size() - 1};
    }

    // A deque so that value() references survive later pushes.
    std::deque<Node> nodes_;
    std::map<std::string, Var> params_;
    std::vector<std::size_t> visited_;
    T fault_scale_ = T{1};
    bool grad_enabled_ = true;
};

}  // namespace ented
