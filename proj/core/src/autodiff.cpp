#include "stylebank/autodiff.hpp"

#include <memory>

namespace stylebank {

const Tensor& Var::value() const { return tape().value(id_); }
bool Var::requires_grad() const { return tape().requires_grad(id_); }
const Tensor* Var::grad() const { return tape().grad(id_); }

double Var::item() const {
    const Tensor& v = value();
    require(v.numel() == 1, ErrorCode::ShapeMismatch, "item() on non-scalar " + v.shape().str());
    return v.flat(0);
}

Tape& Var::tape() const {
    require(tape_ != nullptr, ErrorCode::State, "use of an unbound Var");
    return *tape_;
}

Var Tape::constant(Tensor value) {
    if (check_finite_)
        require(value.all_finite(), ErrorCode::Numeric, "non-finite constant on tape");
    nodes_.push_back(Node{std::move(value), std::nullopt, false, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
    if (check_finite_)
        require(value.all_finite(), ErrorCode::Numeric, "non-finite parameter on tape");
    nodes_.push_back(Node{std::move(value), std::nullopt, true, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& in : inputs) {
        require(&in.tape() == this, ErrorCode::State, "operands recorded on different tapes");
        needs = needs || nodes_.at(in.id()).requires_grad;
    }
    if (check_finite_)
        require(value.all_finite(), ErrorCode::Numeric, "operation produced non-finite values");
    nodes_.push_back(Node{std::move(value), std::nullopt, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
}

const Tensor* Tape::grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad ? &*n.grad : nullptr;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    require(g.shape() == n.value.shape(), ErrorCode::ShapeMismatch,
            "gradient shape " + g.shape().str() + " does not match node " + n.value.shape().str());
    if (n.grad)
        ops::axpy(*n.grad, 1.0, g);
    else
        n.grad = g;
}

void Tape::accumulate(std::size_t id, Tensor&& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    require(g.shape() == n.value.shape(), ErrorCode::ShapeMismatch,
            "gradient shape " + g.shape().str() + " does not match node " + n.value.shape().str());
    if (n.grad)
        ops::axpy(*n.grad, 1.0, g);
    else
        n.grad = std::move(g);
}

void Tape::backward(Var loss) {
    require(&loss.tape() == this, ErrorCode::State, "loss belongs to a different tape");
    require(!backward_done_, ErrorCode::State, "backward() called twice without reset_grads()");
    const Tensor& lv = value(loss.id());
    require(lv.numel() == 1, ErrorCode::ShapeMismatch,
            "backward() needs a scalar loss, got " + lv.shape().str());
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    accumulate(loss.id(), Tensor::full(lv.shape(), 1.0, lv.dtype()));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.grad || !n.backward) continue;
        if (check_finite_)
            require(n.grad->all_finite(), ErrorCode::Numeric, "non-finite gradient during backward");
        // Callbacks only touch gradients of earlier nodes, so n.grad stays put.
        n.backward(*this, *n.grad);
    }
}

void Tape::reset_grads() {
    for (auto& n : nodes_) n.grad.reset();
    backward_done_ = false;
}

namespace ad {
namespace {

Tape& common_tape(std::initializer_list<Var> vars) {
    Tape* t = nullptr;
    for (const Var& v : vars) {
        Tape& vt = v.tape();
        require(t == nullptr || t == &vt, ErrorCode::State, "operands recorded on different tapes");
        t = &vt;
    }
    return *t;
}

} // namespace

Var conv2d(Var input, Var kernel, std::size_t stride, Padding padding) {
    Tape& tape = common_tape({input, kernel});
    Tensor out = ops::conv2d(input.value(), kernel.value(), stride, padding);
    const std::size_t xi = input.id(), ki = kernel.id();
    const Var inputs[] = {input, kernel};
    return tape.record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
        const bool need_x = t.requires_grad(xi), need_k = t.requires_grad(ki);
        auto grads = ops::conv2d_backward(t.value(xi), t.value(ki), stride, padding, g, need_x, need_k);
        if (need_x) t.accumulate(xi, std::move(grads.input));
        if (need_k) t.accumulate(ki, std::move(grads.kernel));
    });
}

Var conv2d_transpose(Var input, Var kernel, std::size_t stride, Padding padding, std::size_t out_h,
                     std::size_t out_w) {
    Tape& tape = common_tape({input, kernel});
    Tensor out = ops::conv2d_transpose(input.value(), kernel.value(), stride, padding, out_h, out_w);
    const std::size_t xi = input.id(), ki = kernel.id();
    const Var inputs[] = {input, kernel};
    return tape.record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
        const bool need_x = t.requires_grad(xi), need_k = t.requires_grad(ki);
        auto grads = ops::conv2d_transpose_backward(t.value(xi), t.value(ki), stride, padding, g,
                                                    need_x, need_k);
        if (need_x) t.accumulate(xi, std::move(grads.input));
        if (need_k) t.accumulate(ki, std::move(grads.kernel));
    });
}

Var instance_norm(Var input, Var scale, Var shift, double eps) {
    Tape& tape = common_tape({input, scale, shift});
    auto fwd = std::make_shared<ops::InstanceNormResult>(
        ops::instance_norm(input.value(), scale.value(), shift.value(), eps));
    Tensor out = fwd->output;
    // The normalized activations are all backward needs; drop the duplicate output.
    fwd->output = Tensor();
    const std::size_t xi = input.id(), si = scale.id(), bi = shift.id();
    const Var inputs[] = {input, scale, shift};
    return tape.record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
        auto grads = ops::instance_norm_backward(*fwd, t.value(si), g);
        t.accumulate(xi, std::move(grads.input));
        t.accumulate(si, std::move(grads.scale));
        t.accumulate(bi, std::move(grads.shift));
    });
}

Var relu(Var input) {
    Tape& tape = input.tape();
    const std::size_t xi = input.id();
    const Var inputs[] = {input};
    return tape.record(ops::relu(input.value()), inputs, [=](Tape& t, const Tensor& g) {
        t.accumulate(xi, ops::relu_backward(t.value(xi), g));
    });
}

Var gram(Var features) {
    Tape& tape = features.tape();
    const std::size_t xi = features.id();
    const Var inputs[] = {features};
    return tape.record(ops::gram(features.value()), inputs, [=](Tape& t, const Tensor& g) {
        t.accumulate(xi, ops::gram_backward(t.value(xi), g));
    });
}

Var mse(Var a, Var b) {
    Tape& tape = common_tape({a, b});
    const double v = ops::mse(a.value(), b.value());
    const std::size_t ai = a.id(), bi = b.id();
    const Var inputs[] = {a, b};
    return tape.record(Tensor::full(Shape{1, 1, 1, 1}, v, a.dtype()), inputs,
                       [=](Tape& t, const Tensor& g) {
                           Tensor da = ops::mse_backward(t.value(ai), t.value(bi), g.flat(0));
                           if (t.requires_grad(bi)) t.accumulate(bi, ops::scale(da, -1.0));
                           t.accumulate(ai, std::move(da));
                       });
}

Var tv_loss(Var image) {
    Tape& tape = image.tape();
    const double v = ops::tv_loss(image.value());
    const std::size_t xi = image.id();
    const Var inputs[] = {image};
    return tape.record(Tensor::full(Shape{1, 1, 1, 1}, v, image.dtype()), inputs,
                       [=](Tape& t, const Tensor& g) {
                           t.accumulate(xi, ops::tv_loss_backward(t.value(xi), g.flat(0)));
                       });
}

Var sum(Var x) {
    Tape& tape = x.tape();
    const std::size_t xi = x.id();
    const Var inputs[] = {x};
    return tape.record(Tensor::full(Shape{1, 1, 1, 1}, ops::sum(x.value()), x.dtype()), inputs,
                       [=](Tape& t, const Tensor& g) {
                           const Tensor& xv = t.value(xi);
                           t.accumulate(xi, Tensor::full(xv.shape(), g.flat(0), xv.dtype()));
                       });
}

Var add(Var a, Var b) {
    Tape& tape = common_tape({a, b});
    const std::size_t ai = a.id(), bi = b.id();
    const Var inputs[] = {a, b};
    return tape.record(ops::add(a.value(), b.value()), inputs, [=](Tape& t, const Tensor& g) {
        t.accumulate(ai, g);
        t.accumulate(bi, g);
    });
}

Var scale(Var x, double factor) {
    Tape& tape = x.tape();
    const std::size_t xi = x.id();
    const Var inputs[] = {x};
    return tape.record(ops::scale(x.value(), factor), inputs, [=](Tape& t, const Tensor& g) {
        t.accumulate(xi, ops::scale(g, factor));
    });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
    require(!terms.empty() && terms.size() == weights.size(), ErrorCode::InvalidArgument,
            "weighted_sum: terms and weights must be non-empty and equal length");
    Tape& tape = terms.front().tape();
    double total = 0;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        total += weights[i] * terms[i].item();
        ids.push_back(terms[i].id());
    }
    std::vector<double> w(weights.begin(), weights.end());
    return tape.record(Tensor::full(Shape{1, 1, 1, 1}, total, terms.front().dtype()), terms,
                       [ids, w](Tape& t, const Tensor& g) {
                           for (std::size_t i = 0; i < ids.size(); ++i) {
                               const Tensor& v = t.value(ids[i]);
                               t.accumulate(ids[i], Tensor::full(v.shape(), w[i] * g.flat(0), v.dtype()));
                           }
                       });
}

Var mul_mask(Var x, Var mask) {
    Tape& tape = common_tape({x, mask});
    const std::size_t xi = x.id(), mi = mask.id();
    const Var inputs[] = {x, mask};
    return tape.record(ops::mul_mask(x.value(), mask.value()), inputs,
                       [=](Tape& t, const Tensor& g) {
                           if (t.requires_grad(xi)) t.accumulate(xi, ops::mul_mask(g, t.value(mi)));
                           if (t.requires_grad(mi))
                               t.accumulate(mi, ops::mul_mask_backward_mask(t.value(xi), t.value(mi), g));
                       });
}

Var add_channel_bias(Var x, Var bias) {
    Tape& tape = common_tape({x, bias});
    const std::size_t xi = x.id(), bi = bias.id();
    const Var inputs[] = {x, bias};
    return tape.record(ops::add_channel_bias(x.value(), bias.value()), inputs,
                       [=](Tape& t, const Tensor& g) {
                           t.accumulate(xi, g);
                           if (t.requires_grad(bi)) t.accumulate(bi, ops::channel_sum(g));
                       });
}

Var batch_slice(Var x, std::size_t index) {
    Tape& tape = x.tape();
    const std::size_t xi = x.id();
    const Var inputs[] = {x};
    return tape.record(x.value().sample(index), inputs, [=](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(xi);
        Tensor full(xv.shape(), xv.dtype());
        dispatch(xv.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto src = g.data<T>();
            auto dst = full.data<T>();
            std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(index * src.size()));
        });
        t.accumulate(xi, std::move(full));
    });
}

Var concat_batch(std::span<const Var> parts) {
    require(!parts.empty(), ErrorCode::InvalidArgument, "concat_batch: no parts");
    Tape& tape = parts.front().tape();
    std::vector<Tensor> values;
    std::vector<std::size_t> ids;
    for (const Var& p : parts) {
        values.push_back(p.value());
        ids.push_back(p.id());
    }
    Tensor out = stylebank::concat_batch(values);
    return tape.record(std::move(out), parts, [ids](Tape& t, const Tensor& g) {
        std::size_t offset = 0;
        for (std::size_t id : ids) {
            const Tensor& v = t.value(id);
            const std::size_t count = v.numel();
            if (t.requires_grad(id)) {
                Tensor part(v.shape(), v.dtype());
                dispatch(v.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto src = g.data<T>();
                    auto dst = part.data<T>();
                    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(offset), count, dst.begin());
                });
                t.accumulate(id, std::move(part));
            }
            offset += count;
        }
    });
}

} // namespace ad
} // namespace stylebank
