#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "stylebank/ops.hpp"
#include "stylebank/tensor.hpp"

namespace stylebank {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    DType dtype() const { return value().dtype(); }
    bool requires_grad() const;
    /// Gradient accumulated by the last backward pass, or nullptr if this node
    /// was unreachable from the loss (or does not require gradients).
    const Tensor* grad() const;
    /// Scalar value of a single-element node.
    double item() const;

    Tape& tape() const;
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode recording of a computation. Nodes are appended in execution
/// order, so the node list is already a topological order; backward() walks it
/// in reverse. Single-owner: one tape per forward/backward pass.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var parameter(Tensor value);

    /// Appends an operation result. `backward` is only kept when at least one
    /// input requires gradients.
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

    void backward(Var loss);
    /// Drops all gradients so backward() may run again.
    void reset_grads();

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    const Tensor* grad(std::size_t id) const;

    /// Adds `g` into the gradient of node `id` (no-op for nodes without grad).
    void accumulate(std::size_t id, const Tensor& g);
    void accumulate(std::size_t id, Tensor&& g);

    std::size_t size() const noexcept { return nodes_.size(); }

    /// When enabled (default in debug builds) every recorded value and every
    /// propagated gradient is checked for NaN/Inf.
    void set_check_finite(bool enabled) noexcept { check_finite_ = enabled; }

private:
    struct Node {
        Tensor value;
        std::optional<Tensor> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    std::deque<Node> nodes_;
    bool backward_done_ = false;
#ifdef NDEBUG
    bool check_finite_ = false;
#else
    bool check_finite_ = true;
#endif
};

// Differentiable operators. All inputs must live on the same tape.
namespace ad {

Var conv2d(Var input, Var kernel, std::size_t stride, Padding padding);
Var conv2d_transpose(Var input, Var kernel, std::size_t stride, Padding padding,
                     std::size_t out_h = 0, std::size_t out_w = 0);
Var instance_norm(Var input, Var scale, Var shift, double eps = ops::kInstanceNormEps);
Var relu(Var input);
Var gram(Var features);
/// Mean squared difference, returned as a [1,1,1,1] node.
Var mse(Var a, Var b);
Var tv_loss(Var image);
Var sum(Var x);
Var add(Var a, Var b);
Var scale(Var x, double factor);
/// Weighted sum of scalar nodes: sum_i weights[i] * terms[i].
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);
Var mul_mask(Var x, Var mask);
Var add_channel_bias(Var x, Var bias);
Var batch_slice(Var x, std::size_t index);
Var concat_batch(std::span<const Var> parts);

} // namespace ad
} // namespace stylebank
