#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "stylebank/autodiff.hpp"
#include "stylebank/loss.hpp"
#include "stylebank/tensor.hpp"

namespace stylebank::testing {

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            DType dtype = DType::F64) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(s.numel());
    for (double& x : v) x = dist(rng);
    return Tensor::from_values(s, v, dtype);
}

// Values bounded away from zero, for ops with a kink there.
inline Tensor random_away_from_zero(Shape s, std::mt19937_64& rng, double margin = 0.05) {
    std::uniform_real_distribution<double> dist(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(s.numel());
    for (double& x : v) x = sign(rng) ? dist(rng) : -dist(rng);
    return Tensor::from_values(s, v, DType::F64);
}

inline long reflect_index(long i, long n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
}

// Direct nested-loop convolution in double.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad, bool reflect) {
    const Shape xs = x.shape(), ks = k.shape();
    const long h = static_cast<long>(xs.h), w = static_cast<long>(xs.w), p = static_cast<long>(pad);
    const std::size_t oh = (xs.h + 2 * pad - ks.h) / stride + 1, ow = (xs.w + 2 * pad - ks.w) / stride + 1;
    Tensor out(Shape{xs.n, ks.n, oh, ow}, DType::F64);
    for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t co = 0; co < ks.n; ++co)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = 0;
                    for (std::size_t ci = 0; ci < ks.c; ++ci)
                        for (std::size_t a = 0; a < ks.h; ++a)
                            for (std::size_t b = 0; b < ks.w; ++b) {
                                long y = static_cast<long>(i * stride + a) - p;
                                long xx = static_cast<long>(j * stride + b) - p;
                                if (reflect) {
                                    y = reflect_index(y, h);
                                    xx = reflect_index(xx, w);
                                } else if (y < 0 || y >= h || xx < 0 || xx >= w) {
                                    continue;
                                }
                                acc += x.at(n, ci, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) *
                                       k.at(co, ci, a, b);
                            }
                    out.set(n, co, i, j, acc);
                }
    return out;
}

// Scatter form of the transposed convolution; kernel is [c_in, c_out, k, k].
inline Tensor naive_conv2d_transpose(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad,
                                     std::size_t out_h, std::size_t out_w) {
    const Shape xs = x.shape(), ks = k.shape();
    Tensor out(Shape{xs.n, ks.c, out_h, out_w}, DType::F64);
    for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t ci = 0; ci < xs.c; ++ci)
            for (std::size_t i = 0; i < xs.h; ++i)
                for (std::size_t j = 0; j < xs.w; ++j)
                    for (std::size_t co = 0; co < ks.c; ++co)
                        for (std::size_t a = 0; a < ks.h; ++a)
                            for (std::size_t b = 0; b < ks.w; ++b) {
                                const long y = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                                const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                                if (y < 0 || xx < 0 || y >= static_cast<long>(out_h) || xx >= static_cast<long>(out_w))
                                    continue;
                                const auto yy = static_cast<std::size_t>(y), xs2 = static_cast<std::size_t>(xx);
                                out.set(n, co, yy, xs2, out.at(n, co, yy, xs2) + x.at(n, ci, i, j) * k.at(ci, co, a, b));
                            }
    return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.flat(i) - b.flat(i)));
    return m;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    double scale = 0;
    for (std::size_t i = 0; i < b.numel(); ++i) scale = std::max(scale, std::abs(b.flat(i)));
    return max_abs_diff(a, b) / std::max(scale, 1e-30);
}

inline double norm_rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::max(std::sqrt(na), std::sqrt(nb));
    return denom == 0 ? 0 : std::sqrt(diff) / denom;
}

/// Builds a scalar from the given inputs on a fresh tape.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
    double worst = 0;          ///< largest relative error over inputs
    std::vector<double> errors; ///< per input
};

/// Central finite differences (step h) against tape gradients, every input in f64.
inline GradCheck check_gradients(const ScalarFn& fn, const std::vector<Tensor>& inputs, double h = 1e-4) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.parameter(t));
    Var loss = fn(tape, vars);
    tape.backward(loss);

    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape t;
        std::vector<Var> vs;
        for (const auto& x : xs) vs.push_back(t.constant(x));
        return fn(t, vs).item();
    };

    GradCheck result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        std::vector<double> analytic(inputs[k].numel(), 0.0), numeric(inputs[k].numel());
        if (const Tensor* g = vars[k].grad())
            for (std::size_t i = 0; i < g->numel(); ++i) analytic[i] = g->flat(i);
        std::vector<Tensor> xs = inputs;
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            const double x0 = inputs[k].flat(i);
            xs[k].set_flat(i, x0 + h);
            const double up = eval(xs);
            xs[k].set_flat(i, x0 - h);
            const double down = eval(xs);
            xs[k].set_flat(i, x0);
            numeric[i] = (up - down) / (2 * h);
        }
        const double e = norm_rel_error(analytic, numeric);
        result.errors.push_back(e);
        result.worst = std::max(result.worst, e);
    }
    return result;
}

/// Signs of every extractor pre-activation for `image`.
inline std::vector<bool> relu_pattern(const FeatureExtractor& ex, const Tensor& image) {
    std::vector<bool> pattern;
    Tape tape;
    Var y = tape.constant(image);
    for (std::size_t i = 0; i < ex.kernels().size(); ++i) {
        const std::size_t stride = (i % 2 == 0 && i > 0) ? 2 : 1;
        Var z = ad::conv2d(y, tape.constant(ex.kernels()[i]), stride, Padding::zero(1));
        for (double v : z.value().values()) pattern.push_back(v > 0);
        y = ad::relu(z);
    }
    return pattern;
}

/// True if no coordinate perturbation of size h flips any extractor ReLU, so
/// the loss is smooth on the whole central-difference stencil.
inline bool relu_stable(const FeatureExtractor& ex, const Tensor& image, double h) {
    const auto base = relu_pattern(ex, image);
    Tensor x = image;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double x0 = x.flat(i);
        for (double d : {h, -h}) {
            x.set_flat(i, x0 + d);
            if (relu_pattern(ex, x) != base) return false;
        }
        x.set_flat(i, x0);
    }
    return true;
}

/// Smooth synthetic content image with a disc and a darker band.
inline Tensor synthetic_content(std::size_t size = 64) {
    Tensor t(Shape{1, 3, size, size});
    const double s = static_cast<double>(size - 1);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            double r = 0.2 + 0.6 * x / s, g = 0.3 + 0.4 * y / s, b = 0.5;
            const double dx = x - size / 2.0, dy = y - size * 0.44;
            if (dx * dx + dy * dy < 150.0 * (size / 64.0) * (size / 64.0)) r = 0.9, g = 0.8, b = 0.2;
            if (y > size * 3 / 4) r *= 0.5, g = 0.6, b *= 0.4;
            t.set(0, 0, y, x, r);
            t.set(0, 1, y, x, g);
            t.set(0, 2, y, x, b);
        }
    return t;
}

inline Tensor stripes_style(std::size_t size = 128) {
    Tensor t(Shape{1, 3, size, size});
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double s = 0.5 + 0.5 * std::sin((x + y) * 0.6);
            t.set(0, 0, y, x, 0.1 + 0.8 * s);
            t.set(0, 1, y, x, 0.2 * s);
            t.set(0, 2, y, x, 0.9 - 0.7 * s);
        }
    return t;
}

inline Tensor checks_style(std::size_t size = 128) {
    Tensor t(Shape{1, 3, size, size});
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const bool c = ((x / 8) + (y / 8)) % 2;
            t.set(0, 0, y, x, c ? 0.95 : 0.05);
            t.set(0, 1, y, x, c ? 0.9 : 0.3);
            t.set(0, 2, y, x, c ? 0.1 : 0.6);
        }
    return t;
}

inline Tensor dots_style(std::size_t size = 128) {
    Tensor t(Shape{1, 3, size, size});
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double dx = (x % 16) - 8.0, dy = (y % 16) - 8.0;
            const bool in = dx * dx + dy * dy < 20;
            t.set(0, 0, y, x, in ? 0.9 : 0.2);
            t.set(0, 1, y, x, in ? 0.1 : 0.7);
            t.set(0, 2, y, x, in ? 0.3 : 0.8);
        }
    return t;
}

inline Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return random_tensor(Shape{1, 3, h, w}, rng, 0.0, 1.0, DType::F32);
}

} // namespace stylebank::testing
