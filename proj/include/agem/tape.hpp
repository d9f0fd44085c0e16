#pragma once

#include <agem/tensor.hpp>

#include <algorithm>
#include <array>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

namespace agem {

enum class OpKind {
    leaf,
    conv2d,
    batchnorm,
    relu,
    sigmoid,
    hadamard,
    add,
    scale,
    sum,
    dot,
    l2_normalize,
    select_row,
    gem_pool,
    spoc_pool,
    mac_pool,
    contrastive_loss,
};

/// Handle to a node on a Tape.
struct Var {
    std::size_t id = 0;
};

class Tape;

/// Gradient of a scalar loss w.r.t. every node of the tape it was computed on.
class Gradients {
public:
    explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

    const Tensor& operator[](Var v) const { return grads_.at(v.id); }
    std::size_t size() const { return grads_.size(); }

private:
    std::vector<Tensor> grads_;
};

/// Records differentiable operations in creation order (which is a topological
/// order by construction) and replays them in reverse for gradients.
class Tape {
public:
    /// Accumulates d(loss)/d(inputs) into `input_grads` given d(loss)/d(output).
    using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> input_grads)>;

    struct Record {
        OpKind kind = OpKind::leaf;
        std::vector<std::size_t> inputs;
        std::size_t output = 0;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var leaf(Tensor value) {
        check_finite(value.data(), "leaf");
        values_.push_back(std::move(value));
        records_.push_back(Record{OpKind::leaf, {}, values_.size() - 1, {}});
        return Var{values_.size() - 1};
    }

    Var record(OpKind kind, std::initializer_list<Var> inputs, Tensor out, BackwardFn backward) {
        check_finite(out.data(), op_name(kind));
        Record rec{kind, {}, values_.size(), std::move(backward)};
        for (Var in : inputs) {
            require_shape(in.id < values_.size(), "tape input refers to a future node");
            rec.inputs.push_back(in.id);
        }
        values_.push_back(std::move(out));
        records_.push_back(std::move(rec));
        return Var{values_.size() - 1};
    }

    const Tensor& value(Var v) const { return values_.at(v.id); }
    std::size_t size() const { return values_.size(); }
    const Record& record_of(Var v) const { return records_.at(v.id); }

    /// Reverse sweep from a single-element loss node. Nodes the loss does not
    /// depend on get zero gradients.
    Gradients backward(Var loss) const {
        require_shape(value(loss).size() == 1, "backward needs a scalar loss, got shape " + value(loss).shape().str());
        std::vector<Tensor> grads(values_.size());
        grads[loss.id] = Tensor(value(loss).shape(), real(1));
        std::vector<Tensor*> input_ptrs;
        for (std::size_t node = loss.id + 1; node-- > 0;) {
            const auto& rec = records_[node];
            if (grads[node].empty() || rec.kind == OpKind::leaf) continue;
            input_ptrs.clear();
            for (std::size_t in : rec.inputs) {
                if (grads[in].empty()) grads[in] = zeros_like(values_[in]);
                input_ptrs.push_back(&grads[in]);
            }
            rec.backward(grads[node], input_ptrs);
        }
        for (std::size_t i = 0; i < grads.size(); ++i) {
            if (grads[i].empty()) grads[i] = zeros_like(values_[i]);
        }
        return Gradients(std::move(grads));
    }

    static const char* op_name(OpKind kind) {
        switch (kind) {
            case OpKind::leaf: return "leaf";
            case OpKind::conv2d: return "conv2d";
            case OpKind::batchnorm: return "batchnorm";
            case OpKind::relu: return "relu";
            case OpKind::sigmoid: return "sigmoid";
            case OpKind::hadamard: return "hadamard";
            case OpKind::add: return "add";
            case OpKind::scale: return "scale";
            case OpKind::sum: return "sum";
            case OpKind::dot: return "dot";
            case OpKind::l2_normalize: return "l2_normalize";
            case OpKind::select_row: return "select_row";
            case OpKind::gem_pool: return "gem_pool";
            case OpKind::spoc_pool: return "spoc_pool";
            case OpKind::mac_pool: return "mac_pool";
            case OpKind::contrastive_loss: return "contrastive_loss";
        }
        return "unknown";
    }

private:
    std::vector<Tensor> values_;
    std::vector<Record> records_;
};

/// Builds a scalar loss from leaves bound to `inputs` (in order).
using GraphBuilder = std::function<Var(Tape&, std::span<const Var>)>;

/// Fourth-order central difference of f at the current value of `x`; `x` is
/// restored afterwards.
template <class F>
real five_point_derivative(F&& f, real& x, real step) {
    const real saved = x;
    auto at = [&](real offset) {
        x = saved + offset;
        return f();
    };
    const real d = (-at(2 * step) + 8 * at(step) - 8 * at(-step) + at(-2 * step)) / (12 * step);
    x = saved;
    return d;
}

/// Steps tried by gradient checks. Large steps keep cancellation error small
/// for near-zero gradients; small steps avoid straddling ReLU/clamp kinks
/// inside deep graphs. A correct gradient matches at one of them at least.
inline constexpr std::array<real, 3> kGradCheckSteps{real(1e-3), real(1e-4), real(1e-5)};
/// Gradients below this magnitude are compared on an absolute scale.
inline constexpr real kGradCheckFloor = real(1e-6);

inline real gradient_error(real analytic, real numeric, real floor = kGradCheckFloor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Smallest gradient_error of `analytic` against five-point differences of f
/// in `x` over kGradCheckSteps.
template <class F>
real sweep_gradient_error(real analytic, F&& f, real& x, real floor = kGradCheckFloor) {
    real best = std::numeric_limits<real>::infinity();
    for (real step : kGradCheckSteps) {
        best = std::min(best, gradient_error(analytic, five_point_derivative(f, x, step), floor));
        if (best < real(1e-6)) break;
    }
    return best;
}

/// Max over all input elements of sweep_gradient_error. Meaningful only in
/// 64-bit builds. A graph that fails to evaluate reports +inf instead of
/// throwing.
inline real grad_check(const GraphBuilder& build, std::vector<Tensor> inputs, real floor = kGradCheckFloor) noexcept try {
    auto evaluate = [&]() {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& x : inputs) vars.push_back(tape.leaf(x));
        return tape.value(build(tape, vars)).item();
    };

    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x));
    const Var loss = build(tape, vars);
    const Gradients grads = tape.backward(loss);

    real worst = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor analytic = grads[vars[k]];
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            worst = std::max(worst, sweep_gradient_error(analytic[i], evaluate, inputs[k][i], floor));
        }
    }
    return worst;
} catch (...) {
    return std::numeric_limits<real>::infinity();
}

} // namespace agem
