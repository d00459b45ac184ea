#pragma once

#include <cstddef>
#include <utility>

#include "stylebank/tensor.hpp"

// Forward and backward kernels for every operator the network uses. These are
// pure functions over Tensor; stylebank/autodiff.hpp records them on a tape.

namespace stylebank {

enum class PadMode : std::uint8_t { Zero, Reflect };

struct Padding {
    PadMode mode = PadMode::Zero;
    std::size_t margin = 0;

    static Padding zero(std::size_t margin) { return {PadMode::Zero, margin}; }
    static Padding reflect(std::size_t margin) { return {PadMode::Reflect, margin}; }
};

namespace ops {

inline constexpr double kInstanceNormEps = 1e-5;

Tensor pad(const Tensor& x, Padding padding);
/// Adjoint of `pad`: folds a gradient on the padded tensor back onto the
/// original `h` x `w` grid (reflected margins accumulate onto their sources).
Tensor pad_adjoint(const Tensor& grad_padded, Padding padding);

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, Padding padding);

struct ConvGrads {
    Tensor input;
    Tensor kernel;
};

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, std::size_t stride,
                          Padding padding, const Tensor& grad_out, bool need_input,
                          bool need_kernel);

/// Spatial size produced by a transposed convolution when no explicit output
/// size is requested: (h - 1) * stride - 2 * margin + k.
std::pair<std::size_t, std::size_t> transpose_output_size(const Shape& input, std::size_t k,
                                                          std::size_t stride,
                                                          std::size_t margin);

/// Transposed convolution with kernel laid out [c_in, c_out, k, k], i.e. the
/// same tensor a conv2d from c_out to c_in channels would use. Exactly the
/// adjoint of that conv2d for zero padding. `out_h`/`out_w` of 0 select the
/// default output size.
Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, std::size_t stride,
                        Padding padding, std::size_t out_h = 0, std::size_t out_w = 0);

ConvGrads conv2d_transpose_backward(const Tensor& input, const Tensor& kernel,
                                    std::size_t stride, Padding padding, const Tensor& grad_out,
                                    bool need_input, bool need_kernel);

struct InstanceNormResult {
    Tensor output;
    Tensor normalized; // (x - mean) / sqrt(var + eps)
    std::vector<double> inv_std; // one per (sample, channel)
};

/// scale and shift are [1, c, 1, 1].
InstanceNormResult instance_norm(const Tensor& input, const Tensor& scale, const Tensor& shift,
                                 double eps = kInstanceNormEps);

struct InstanceNormGrads {
    Tensor input;
    Tensor scale;
    Tensor shift;
};

InstanceNormGrads instance_norm_backward(const InstanceNormResult& forward, const Tensor& scale,
                                         const Tensor& grad_out);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

/// [n, c, h, w] -> [n, 1, c, c], normalized by c * h * w.
Tensor gram(const Tensor& features);
Tensor gram_backward(const Tensor& features, const Tensor& grad_out);

double mse(const Tensor& a, const Tensor& b);
/// Gradient of mse w.r.t. `a` scaled by `upstream`; the gradient w.r.t. `b` is its negation.
Tensor mse_backward(const Tensor& a, const Tensor& b, double upstream);

double tv_loss(const Tensor& image);
Tensor tv_loss_backward(const Tensor& image, double upstream);

double sum(const Tensor& x);
double dot(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
void axpy(Tensor& y, double alpha, const Tensor& x);

/// x * mask where mask is [1 or n, 1, h, w], broadcast over channels.
Tensor mul_mask(const Tensor& x, const Tensor& mask);
/// Gradient w.r.t. the mask (reduced over channels, and over batch if mask.n == 1).
Tensor mul_mask_backward_mask(const Tensor& x, const Tensor& mask, const Tensor& grad_out);

/// x + bias where bias is [1, c, 1, 1].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
Tensor channel_sum(const Tensor& grad_out);

double l2_norm(const Tensor& x);

} // namespace ops
} // namespace stylebank
