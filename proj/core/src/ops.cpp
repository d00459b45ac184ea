#include "stylebank/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace stylebank::ops {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    require(a.dtype() == b.dtype(), ErrorCode::InvalidArgument,
            std::string(op) + ": dtype mismatch between operands");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
            std::string(op) + ": shapes " + a.shape().str() + " and " + b.shape().str() +
                " differ");
    require_same_dtype(a, b, op);
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t size) {
    const auto n = static_cast<std::ptrdiff_t>(size);
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
    return static_cast<std::size_t>(i);
}

std::size_t source_index(std::ptrdiff_t i, std::size_t size, PadMode mode, bool& inside) {
    const auto n = static_cast<std::ptrdiff_t>(size);
    if (i >= 0 && i < n) {
        inside = true;
        return static_cast<std::size_t>(i);
    }
    if (mode == PadMode::Zero) {
        inside = false;
        return 0;
    }
    inside = true;
    return reflect_index(i, size);
}

void check_padding(const Shape& s, Padding padding) {
    if (padding.mode == PadMode::Reflect && padding.margin > 0) {
        require(padding.margin < s.h && padding.margin < s.w, ErrorCode::InvalidArgument,
                "reflection margin " + std::to_string(padding.margin) +
                    " must be smaller than spatial size " + s.str());
    }
}

// cols is [c * k * k, oh * ow]
template <class T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t oh, std::size_t ow, T* cols) {
    const std::size_t plane = oh * ow;
    for (std::size_t ci = 0; ci < c; ++ci) {
        const T* xc = x + ci * h * w;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* row = cols + ((ci * k + ki) * k + kj) * plane;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const T* src = xc + (oy * stride + ki) * w + kj;
                    T* dst = row + oy * ow;
                    if (stride == 1) {
                        std::memcpy(dst, src, ow * sizeof(T));
                    } else {
                        for (std::size_t ox = 0; ox < ow; ++ox) dst[ox] = src[ox * stride];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t oh, std::size_t ow, T* x) {
    const std::size_t plane = oh * ow;
    for (std::size_t ci = 0; ci < c; ++ci) {
        T* xc = x + ci * h * w;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const T* row = cols + ((ci * k + ki) * k + kj) * plane;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    T* dst = xc + (oy * stride + ki) * w + kj;
                    const T* src = row + oy * ow;
                    for (std::size_t ox = 0; ox < ow; ++ox) dst[ox * stride] += src[ox];
                }
            }
        }
    }
}

struct ConvGeometry {
    std::size_t c_in, c_out, k, hp, wp, oh, ow;
};

ConvGeometry conv_geometry(const Shape& in, const Shape& kernel, std::size_t stride,
                           Padding padding) {
    require(stride == 1 || stride == 2, ErrorCode::InvalidArgument, "stride must be 1 or 2");
    require(kernel.h == kernel.w && kernel.h >= 1, ErrorCode::InvalidArgument,
            "convolution kernels must be square");
    require(in.c == kernel.c, ErrorCode::ShapeMismatch,
            "conv2d: input has " + std::to_string(in.c) + " channels, kernel expects " +
                std::to_string(kernel.c));
    check_padding(in, padding);
    ConvGeometry g{};
    g.c_in = kernel.c;
    g.c_out = kernel.n;
    g.k = kernel.h;
    g.hp = in.h + 2 * padding.margin;
    g.wp = in.w + 2 * padding.margin;
    require(g.hp >= g.k && g.wp >= g.k, ErrorCode::ShapeMismatch,
            "conv2d: kernel larger than padded input");
    g.oh = (g.hp - g.k) / stride + 1;
    g.ow = (g.wp - g.k) / stride + 1;
    return g;
}

template <class T>
Tensor conv2d_impl(const Tensor& input, const Tensor& kernel, std::size_t stride,
                   Padding padding) {
    const auto g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
    const Tensor padded = padding.margin > 0 ? pad(input, padding) : input;
    const std::size_t n = input.shape().n;
    const std::size_t rows = g.c_in * g.k * g.k;
    const std::size_t plane = g.oh * g.ow;
    Tensor out(Shape{n, g.c_out, g.oh, g.ow}, dtype_of<T>());
    ConstMapMat<T> kmat(kernel.data<T>().data(), static_cast<Eigen::Index>(g.c_out),
                        static_cast<Eigen::Index>(rows));
    std::vector<T> cols(rows * plane);
    const T* xp = padded.data<T>().data();
    T* op = out.data<T>().data();
    for (std::size_t b = 0; b < n; ++b) {
        im2col(xp + b * g.c_in * g.hp * g.wp, g.c_in, g.hp, g.wp, g.k, stride, g.oh, g.ow,
               cols.data());
        ConstMapMat<T> cmat(cols.data(), static_cast<Eigen::Index>(rows),
                            static_cast<Eigen::Index>(plane));
        MapMat<T> omat(op + b * g.c_out * plane, static_cast<Eigen::Index>(g.c_out),
                       static_cast<Eigen::Index>(plane));
        omat.noalias() = kmat * cmat;
    }
    return out;
}

template <class T>
ConvGrads conv2d_backward_impl(const Tensor& input, const Tensor& kernel, std::size_t stride,
                               Padding padding, const Tensor& grad_out, bool need_input,
                               bool need_kernel) {
    const auto g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
    require(grad_out.shape() == Shape{input.shape().n, g.c_out, g.oh, g.ow},
            ErrorCode::ShapeMismatch, "conv2d_backward: gradient shape mismatch");
    const Tensor padded = padding.margin > 0 ? pad(input, padding) : input;
    const std::size_t n = input.shape().n;
    const std::size_t rows = g.c_in * g.k * g.k;
    const std::size_t plane = g.oh * g.ow;
    ConvGrads grads;
    Tensor grad_padded;
    if (need_input) grad_padded = Tensor(padded.shape(), dtype_of<T>());
    if (need_kernel) grads.kernel = Tensor(kernel.shape(), dtype_of<T>());
    ConstMapMat<T> kmat(kernel.data<T>().data(), static_cast<Eigen::Index>(g.c_out),
                        static_cast<Eigen::Index>(rows));
    std::vector<T> cols(rows * plane);
    const T* xp = padded.data<T>().data();
    const T* gp = grad_out.data<T>().data();
    for (std::size_t b = 0; b < n; ++b) {
        ConstMapMat<T> gmat(gp + b * g.c_out * plane, static_cast<Eigen::Index>(g.c_out),
                            static_cast<Eigen::Index>(plane));
        if (need_kernel) {
            im2col(xp + b * g.c_in * g.hp * g.wp, g.c_in, g.hp, g.wp, g.k, stride, g.oh, g.ow,
                   cols.data());
            ConstMapMat<T> cmat(cols.data(), static_cast<Eigen::Index>(rows),
                                static_cast<Eigen::Index>(plane));
            MapMat<T> dk(grads.kernel.data<T>().data(), static_cast<Eigen::Index>(g.c_out),
                         static_cast<Eigen::Index>(rows));
            dk.noalias() += gmat * cmat.transpose();
        }
        if (need_input) {
            MapMat<T> dcols(cols.data(), static_cast<Eigen::Index>(rows),
                            static_cast<Eigen::Index>(plane));
            dcols.noalias() = kmat.transpose() * gmat;
            col2im(cols.data(), g.c_in, g.hp, g.wp, g.k, stride, g.oh, g.ow,
                   grad_padded.data<T>().data() + b * g.c_in * g.hp * g.wp);
        }
    }
    if (need_input)
        grads.input = padding.margin > 0 ? pad_adjoint(grad_padded, padding) : grad_padded;
    return grads;
}

struct TransposeGeometry {
    std::size_t c_in, c_out, k, out_h, out_w, hp, wp;
};

TransposeGeometry transpose_geometry(const Shape& in, const Shape& kernel, std::size_t stride,
                                     Padding padding, std::size_t out_h, std::size_t out_w) {
    require(stride == 1 || stride == 2, ErrorCode::InvalidArgument, "stride must be 1 or 2");
    require(kernel.h == kernel.w && kernel.h >= 1, ErrorCode::InvalidArgument,
            "convolution kernels must be square");
    require(padding.mode == PadMode::Zero || padding.margin == 0, ErrorCode::InvalidArgument,
            "conv2d_transpose supports zero padding only");
    require(in.c == kernel.n, ErrorCode::ShapeMismatch,
            "conv2d_transpose: input has " + std::to_string(in.c) + " channels, kernel expects " +
                std::to_string(kernel.n));
    TransposeGeometry g{};
    g.c_in = kernel.n;
    g.c_out = kernel.c;
    g.k = kernel.h;
    if (out_h == 0 || out_w == 0) {
        auto [dh, dw] = transpose_output_size(in, g.k, stride, padding.margin);
        out_h = out_h == 0 ? dh : out_h;
        out_w = out_w == 0 ? dw : out_w;
    }
    g.out_h = out_h;
    g.out_w = out_w;
    g.hp = out_h + 2 * padding.margin;
    g.wp = out_w + 2 * padding.margin;
    const bool ok = g.hp >= g.k && g.wp >= g.k && (g.hp - g.k) / stride + 1 == in.h &&
                    (g.wp - g.k) / stride + 1 == in.w;
    require(ok, ErrorCode::ShapeMismatch,
            "conv2d_transpose: declared output " + std::to_string(out_h) + "x" +
                std::to_string(out_w) + " is inconsistent with input " + in.str());
    return g;
}

template <class T>
Tensor conv2d_transpose_impl(const Tensor& input, const Tensor& kernel, std::size_t stride,
                             Padding padding, std::size_t out_h, std::size_t out_w) {
    const auto g = transpose_geometry(input.shape(), kernel.shape(), stride, padding, out_h, out_w);
    const std::size_t n = input.shape().n;
    const std::size_t rows = g.c_out * g.k * g.k;
    const std::size_t plane = input.shape().plane();
    Tensor padded(Shape{n, g.c_out, g.hp, g.wp}, dtype_of<T>());
    ConstMapMat<T> kmat(kernel.data<T>().data(), static_cast<Eigen::Index>(g.c_in),
                        static_cast<Eigen::Index>(rows));
    std::vector<T> cols(rows * plane);
    const T* yp = input.data<T>().data();
    T* xp = padded.data<T>().data();
    for (std::size_t b = 0; b < n; ++b) {
        ConstMapMat<T> ymat(yp + b * g.c_in * plane, static_cast<Eigen::Index>(g.c_in),
                            static_cast<Eigen::Index>(plane));
        MapMat<T> cmat(cols.data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(plane));
        cmat.noalias() = kmat.transpose() * ymat;
        col2im(cols.data(), g.c_out, g.hp, g.wp, g.k, stride, input.shape().h, input.shape().w,
               xp + b * g.c_out * g.hp * g.wp);
    }
    if (padding.margin == 0) return padded;
    return pad_adjoint(padded, padding); // zero-padding adjoint is a crop
}

template <class T>
ConvGrads conv2d_transpose_backward_impl(const Tensor& input, const Tensor& kernel,
                                         std::size_t stride, Padding padding,
                                         const Tensor& grad_out, bool need_input,
                                         bool need_kernel) {
    const auto& gs = grad_out.shape();
    const auto g = transpose_geometry(input.shape(), kernel.shape(), stride, padding, gs.h, gs.w);
    require(gs.n == input.shape().n && gs.c == g.c_out, ErrorCode::ShapeMismatch,
            "conv2d_transpose_backward: gradient shape mismatch");
    const Tensor gpad = padding.margin > 0 ? pad(grad_out, padding) : grad_out;
    const std::size_t n = input.shape().n;
    const std::size_t rows = g.c_out * g.k * g.k;
    const std::size_t plane = input.shape().plane();
    ConvGrads grads;
    if (need_input) grads.input = Tensor(input.shape(), dtype_of<T>());
    if (need_kernel) grads.kernel = Tensor(kernel.shape(), dtype_of<T>());
    ConstMapMat<T> kmat(kernel.data<T>().data(), static_cast<Eigen::Index>(g.c_in),
                        static_cast<Eigen::Index>(rows));
    std::vector<T> cols(rows * plane);
    const T* gp = gpad.data<T>().data();
    const T* yp = input.data<T>().data();
    for (std::size_t b = 0; b < n; ++b) {
        im2col(gp + b * g.c_out * g.hp * g.wp, g.c_out, g.hp, g.wp, g.k, stride,
               input.shape().h, input.shape().w, cols.data());
        ConstMapMat<T> cmat(cols.data(), static_cast<Eigen::Index>(rows),
                            static_cast<Eigen::Index>(plane));
        if (need_input) {
            MapMat<T> dy(grads.input.data<T>().data() + b * g.c_in * plane,
                         static_cast<Eigen::Index>(g.c_in), static_cast<Eigen::Index>(plane));
            dy.noalias() = kmat * cmat;
        }
        if (need_kernel) {
            ConstMapMat<T> ymat(yp + b * g.c_in * plane, static_cast<Eigen::Index>(g.c_in),
                                static_cast<Eigen::Index>(plane));
            MapMat<T> dk(grads.kernel.data<T>().data(), static_cast<Eigen::Index>(g.c_in),
                         static_cast<Eigen::Index>(rows));
            dk.noalias() += ymat * cmat.transpose();
        }
    }
    return grads;
}

} // namespace

Tensor pad(const Tensor& x, Padding padding) {
    if (padding.margin == 0) return x;
    const auto& s = x.shape();
    check_padding(s, padding);
    const std::size_t p = padding.margin;
    Shape ps{s.n, s.c, s.h + 2 * p, s.w + 2 * p};
    Tensor out(ps, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = x.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
            const T* sp = src + plane * s.h * s.w;
            T* dp = dst + plane * ps.h * ps.w;
            for (std::size_t i = 0; i < ps.h; ++i) {
                bool in_row = false;
                const std::size_t si = source_index(static_cast<std::ptrdiff_t>(i) -
                                                        static_cast<std::ptrdiff_t>(p),
                                                    s.h, padding.mode, in_row);
                if (!in_row) continue;
                for (std::size_t j = 0; j < ps.w; ++j) {
                    bool in_col = false;
                    const std::size_t sj = source_index(static_cast<std::ptrdiff_t>(j) -
                                                            static_cast<std::ptrdiff_t>(p),
                                                        s.w, padding.mode, in_col);
                    if (in_col) dp[i * ps.w + j] = sp[si * s.w + sj];
                }
            }
        }
    });
    return out;
}

Tensor pad_adjoint(const Tensor& grad_padded, Padding padding) {
    if (padding.margin == 0) return grad_padded;
    const auto& ps = grad_padded.shape();
    const std::size_t p = padding.margin;
    require(ps.h > 2 * p && ps.w > 2 * p, ErrorCode::ShapeMismatch,
            "pad_adjoint: padded tensor too small");
    Shape s{ps.n, ps.c, ps.h - 2 * p, ps.w - 2 * p};
    check_padding(s, padding);
    Tensor out(s, grad_padded.dtype());
    dispatch(grad_padded.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = grad_padded.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
            const T* sp = src + plane * ps.h * ps.w;
            T* dp = dst + plane * s.h * s.w;
            for (std::size_t i = 0; i < ps.h; ++i) {
                bool in_row = false;
                const std::size_t di = source_index(static_cast<std::ptrdiff_t>(i) -
                                                        static_cast<std::ptrdiff_t>(p),
                                                    s.h, padding.mode, in_row);
                if (!in_row) continue;
                for (std::size_t j = 0; j < ps.w; ++j) {
                    bool in_col = false;
                    const std::size_t dj = source_index(static_cast<std::ptrdiff_t>(j) -
                                                            static_cast<std::ptrdiff_t>(p),
                                                        s.w, padding.mode, in_col);
                    if (in_col) dp[di * s.w + dj] += sp[i * ps.w + j];
                }
            }
        }
    });
    return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, Padding padding) {
    require_same_dtype(input, kernel, "conv2d");
    return dispatch(input.dtype(), [&](auto tag) {
        return conv2d_impl<decltype(tag)>(input, kernel, stride, padding);
    });
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, std::size_t stride,
                          Padding padding, const Tensor& grad_out, bool need_input,
                          bool need_kernel) {
    require_same_dtype(input, kernel, "conv2d_backward");
    require_same_dtype(input, grad_out, "conv2d_backward");
    return dispatch(input.dtype(), [&](auto tag) {
        return conv2d_backward_impl<decltype(tag)>(input, kernel, stride, padding, grad_out,
                                                   need_input, need_kernel);
    });
}

std::pair<std::size_t, std::size_t> transpose_output_size(const Shape& input, std::size_t k,
                                                          std::size_t stride,
                                                          std::size_t margin) {
    const auto size = [&](std::size_t x) -> std::size_t {
        const auto full = static_cast<std::ptrdiff_t>((x - 1) * stride + k);
        const auto v = full - static_cast<std::ptrdiff_t>(2 * margin);
        require(x >= 1 && v >= 1, ErrorCode::ShapeMismatch,
                "conv2d_transpose: padding consumes the whole output");
        return static_cast<std::size_t>(v);
    };
    return {size(input.h), size(input.w)};
}

Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, std::size_t stride,
                        Padding padding, std::size_t out_h, std::size_t out_w) {
    require_same_dtype(input, kernel, "conv2d_transpose");
    return dispatch(input.dtype(), [&](auto tag) {
        return conv2d_transpose_impl<decltype(tag)>(input, kernel, stride, padding, out_h, out_w);
    });
}

ConvGrads conv2d_transpose_backward(const Tensor& input, const Tensor& kernel,
                                    std::size_t stride, Padding padding, const Tensor& grad_out,
                                    bool need_input, bool need_kernel) {
    require_same_dtype(input, kernel, "conv2d_transpose_backward");
    require_same_dtype(input, grad_out, "conv2d_transpose_backward");
    return dispatch(input.dtype(), [&](auto tag) {
        return conv2d_transpose_backward_impl<decltype(tag)>(input, kernel, stride, padding,
                                                             grad_out, need_input, need_kernel);
    });
}

InstanceNormResult instance_norm(const Tensor& input, const Tensor& scale, const Tensor& shift,
                                 double eps) {
    require(eps > 0, ErrorCode::InvalidArgument, "instance_norm: eps must be positive");
    const auto& s = input.shape();
    const Shape ps{1, s.c, 1, 1};
    require(scale.shape() == ps && shift.shape() == ps, ErrorCode::ShapeMismatch,
            "instance_norm: scale/shift must be " + ps.str());
    require_same_dtype(input, scale, "instance_norm");
    require_same_dtype(input, shift, "instance_norm");
    require(s.plane() >= 1, ErrorCode::ShapeMismatch, "instance_norm: empty spatial plane");
    InstanceNormResult r{Tensor(s, input.dtype()), Tensor(s, input.dtype()), {}};
    r.inv_std.resize(s.n * s.c);
    dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = input.data<T>().data();
        const T* g = scale.data<T>().data();
        const T* b = shift.data<T>().data();
        T* y = r.output.data<T>().data();
        T* xh = r.normalized.data<T>().data();
        const std::size_t plane = s.plane();
        for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
            const std::size_t c = nc % s.c;
            const T* xp = x + nc * plane;
            double mean = 0;
            for (std::size_t i = 0; i < plane; ++i) mean += xp[i];
            mean /= static_cast<double>(plane);
            double var = 0;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = xp[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(plane);
            const double inv = 1.0 / std::sqrt(var + eps);
            r.inv_std[nc] = inv;
            for (std::size_t i = 0; i < plane; ++i) {
                const double n = (xp[i] - mean) * inv;
                xh[nc * plane + i] = static_cast<T>(n);
                y[nc * plane + i] = static_cast<T>(g[c] * n + b[c]);
            }
        }
    });
    return r;
}

InstanceNormGrads instance_norm_backward(const InstanceNormResult& forward, const Tensor& scale,
                                         const Tensor& grad_out) {
    const auto& s = forward.normalized.shape();
    require(grad_out.shape() == s, ErrorCode::ShapeMismatch,
            "instance_norm_backward: gradient shape mismatch");
    InstanceNormGrads grads{Tensor(s, grad_out.dtype()), Tensor(scale.shape(), grad_out.dtype()),
                            Tensor(scale.shape(), grad_out.dtype())};
    dispatch(grad_out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xh = forward.normalized.data<T>().data();
        const T* dy = grad_out.data<T>().data();
        const T* g = scale.data<T>().data();
        T* dx = grads.input.data<T>().data();
        std::vector<double> dg(s.c, 0.0), db(s.c, 0.0);
        const std::size_t plane = s.plane();
        const double inv_plane = 1.0 / static_cast<double>(plane);
        for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
            const std::size_t c = nc % s.c;
            double sum_dy = 0, sum_dy_xh = 0;
            for (std::size_t i = 0; i < plane; ++i) {
                sum_dy += dy[nc * plane + i];
                sum_dy_xh += static_cast<double>(dy[nc * plane + i]) * xh[nc * plane + i];
            }
            dg[c] += sum_dy_xh;
            db[c] += sum_dy;
            const double mean_dy = sum_dy * inv_plane;
            const double mean_dy_xh = sum_dy_xh * inv_plane;
            const double k = g[c] * forward.inv_std[nc];
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t j = nc * plane + i;
                dx[j] = static_cast<T>(k * (dy[j] - mean_dy - xh[j] * mean_dy_xh));
            }
        }
        auto gs = grads.scale.data<T>();
        auto bs = grads.shift.data<T>();
        for (std::size_t c = 0; c < s.c; ++c) {
            gs[c] = static_cast<T>(dg[c]);
            bs[c] = static_cast<T>(db[c]);
        }
    });
    return grads;
}

Tensor relu(const Tensor& input) {
    Tensor out(input.shape(), input.dtype());
    dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = input.data<T>();
        auto y = out.data<T>();
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    });
    return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
    require_same_shape(input, grad_out, "relu_backward");
    Tensor out(input.shape(), input.dtype());
    dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = input.data<T>();
        auto g = grad_out.data<T>();
        auto d = out.data<T>();
        for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] > T(0) ? g[i] : T(0);
    });
    return out;
}

Tensor gram(const Tensor& features) {
    const auto& s = features.shape();
    require(s.plane() >= 1 && s.c >= 1, ErrorCode::ShapeMismatch, "gram: empty features");
    Tensor out(Shape{s.n, 1, s.c, s.c}, features.dtype());
    dispatch(features.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto norm = static_cast<T>(1.0 / static_cast<double>(s.c * s.plane()));
        for (std::size_t b = 0; b < s.n; ++b) {
            ConstMapMat<T> f(features.data<T>().data() + b * s.c * s.plane(),
                             static_cast<Eigen::Index>(s.c), static_cast<Eigen::Index>(s.plane()));
            MapMat<T> g(out.data<T>().data() + b * s.c * s.c, static_cast<Eigen::Index>(s.c),
                        static_cast<Eigen::Index>(s.c));
            g.noalias() = f * f.transpose();
            g *= norm;
            // Exact symmetry regardless of GEMM blocking.
            for (Eigen::Index i = 0; i < g.rows(); ++i)
                for (Eigen::Index j = i + 1; j < g.cols(); ++j) g(j, i) = g(i, j);
        }
    });
    return out;
}

Tensor gram_backward(const Tensor& features, const Tensor& grad_out) {
    const auto& s = features.shape();
    require(grad_out.shape() == Shape{s.n, 1, s.c, s.c}, ErrorCode::ShapeMismatch,
            "gram_backward: gradient shape mismatch");
    Tensor out(s, features.dtype());
    dispatch(features.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto norm = static_cast<T>(1.0 / static_cast<double>(s.c * s.plane()));
        for (std::size_t b = 0; b < s.n; ++b) {
            ConstMapMat<T> f(features.data<T>().data() + b * s.c * s.plane(),
                             static_cast<Eigen::Index>(s.c), static_cast<Eigen::Index>(s.plane()));
            ConstMapMat<T> dg(grad_out.data<T>().data() + b * s.c * s.c,
                              static_cast<Eigen::Index>(s.c), static_cast<Eigen::Index>(s.c));
            MapMat<T> df(out.data<T>().data() + b * s.c * s.plane(),
                         static_cast<Eigen::Index>(s.c), static_cast<Eigen::Index>(s.plane()));
            RowMat<T> sym = (dg + dg.transpose()) * norm;
            df.noalias() = sym * f;
        }
    });
    return out;
}

double mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    require(a.numel() > 0, ErrorCode::ShapeMismatch, "mse: empty tensors");
    return dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto y = b.data<T>();
        double acc = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
            acc += d * d;
        }
        return acc / static_cast<double>(x.size());
    });
}

Tensor mse_backward(const Tensor& a, const Tensor& b, double upstream) {
    require_same_shape(a, b, "mse_backward");
    Tensor out(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto y = b.data<T>();
        auto d = out.data<T>();
        const double k = 2.0 * upstream / static_cast<double>(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            d[i] = static_cast<T>(k * (static_cast<double>(x[i]) - static_cast<double>(y[i])));
    });
    return out;
}

double tv_loss(const Tensor& image) {
    const auto& s = image.shape();
    require(s.h >= 2 && s.w >= 2, ErrorCode::ShapeMismatch,
            "tv_loss: spatial dims must be at least 2x2, got " + s.str());
    return dispatch(image.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = image.data<T>().data();
        double acc = 0;
        for (std::size_t p = 0; p < s.n * s.c; ++p) {
            const T* xp = x + p * s.plane();
            for (std::size_t i = 0; i < s.h; ++i) {
                for (std::size_t j = 0; j < s.w; ++j) {
                    const double v = xp[i * s.w + j];
                    if (j + 1 < s.w) {
                        const double d = xp[i * s.w + j + 1] - v;
                        acc += d * d;
                    }
                    if (i + 1 < s.h) {
                        const double d = xp[(i + 1) * s.w + j] - v;
                        acc += d * d;
                    }
                }
            }
        }
        return acc / static_cast<double>(s.numel());
    });
}

Tensor tv_loss_backward(const Tensor& image, double upstream) {
    const auto& s = image.shape();
    require(s.h >= 2 && s.w >= 2, ErrorCode::ShapeMismatch, "tv_loss: degenerate spatial dims");
    Tensor out(s, image.dtype());
    dispatch(image.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = image.data<T>().data();
        T* g = out.data<T>().data();
        const double k = 2.0 * upstream / static_cast<double>(s.numel());
        std::vector<double> acc(s.plane());
        for (std::size_t p = 0; p < s.n * s.c; ++p) {
            const T* xp = x + p * s.plane();
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t i = 0; i < s.h; ++i) {
                for (std::size_t j = 0; j < s.w; ++j) {
                    const std::size_t at = i * s.w + j;
                    if (j + 1 < s.w) {
                        const double d = static_cast<double>(xp[at + 1]) - xp[at];
                        acc[at + 1] += d;
                        acc[at] -= d;
                    }
                    if (i + 1 < s.h) {
                        const double d = static_cast<double>(xp[at + s.w]) - xp[at];
                        acc[at + s.w] += d;
                        acc[at] -= d;
                    }
                }
            }
            for (std::size_t i = 0; i < s.plane(); ++i)
                g[p * s.plane() + i] = static_cast<T>(k * acc[i]);
        }
    });
    return out;
}

double sum(const Tensor& x) {
    return dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        double acc = 0;
        for (T v : x.data<T>()) acc += v;
        return acc;
    });
}

double dot(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), ErrorCode::ShapeMismatch, "dot: size mismatch");
    require_same_dtype(a, b, "dot");
    return dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto y = b.data<T>();
        double acc = 0;
        for (std::size_t i = 0; i < x.size(); ++i)
            acc += static_cast<double>(x[i]) * static_cast<double>(y[i]);
        return acc;
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    axpy(out, 1.0, b);
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto y = b.data<T>();
        auto d = out.data<T>();
        for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
    });
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    Tensor out(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto d = out.data<T>();
        const auto f = static_cast<T>(factor);
        for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] * f;
    });
    return out;
}

void axpy(Tensor& y, double alpha, const Tensor& x) {
    require_same_shape(y, x, "axpy");
    dispatch(y.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto dst = y.data<T>();
        auto src = x.data<T>();
        if (alpha == 1.0) {
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        } else {
            const auto a = static_cast<T>(alpha);
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
        }
    });
}

Tensor mul_mask(const Tensor& x, const Tensor& mask) {
    const auto& s = x.shape();
    const auto& m = mask.shape();
    require(m.c == 1 && m.h == s.h && m.w == s.w && (m.n == 1 || m.n == s.n),
            ErrorCode::ShapeMismatch,
            "mul_mask: mask " + m.str() + " does not broadcast over " + s.str());
    require_same_dtype(x, mask, "mul_mask");
    Tensor out(s, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xp = x.data<T>().data();
        const T* mp = mask.data<T>().data();
        T* d = out.data<T>().data();
        for (std::size_t b = 0; b < s.n; ++b) {
            const T* mb = mp + (m.n == 1 ? 0 : b * s.plane());
            for (std::size_t c = 0; c < s.c; ++c) {
                const std::size_t base = (b * s.c + c) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i) d[base + i] = xp[base + i] * mb[i];
            }
        }
    });
    return out;
}

Tensor mul_mask_backward_mask(const Tensor& x, const Tensor& mask, const Tensor& grad_out) {
    const auto& s = x.shape();
    const auto& m = mask.shape();
    Tensor out(m, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xp = x.data<T>().data();
        const T* gp = grad_out.data<T>().data();
        std::vector<double> acc(m.numel(), 0.0);
        for (std::size_t b = 0; b < s.n; ++b) {
            const std::size_t mb = m.n == 1 ? 0 : b * s.plane();
            for (std::size_t c = 0; c < s.c; ++c) {
                const std::size_t base = (b * s.c + c) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i)
                    acc[mb + i] += static_cast<double>(xp[base + i]) * gp[base + i];
            }
        }
        auto d = out.data<T>();
        for (std::size_t i = 0; i < acc.size(); ++i) d[i] = static_cast<T>(acc[i]);
    });
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    const auto& s = x.shape();
    require(bias.shape() == Shape{1, s.c, 1, 1}, ErrorCode::ShapeMismatch,
            "add_channel_bias: bias must be [1,c,1,1]");
    require_same_dtype(x, bias, "add_channel_bias");
    Tensor out(s, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xp = x.data<T>().data();
        const T* bp = bias.data<T>().data();
        T* d = out.data<T>().data();
        for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
            const T b = bp[nc % s.c];
            for (std::size_t i = 0; i < s.plane(); ++i)
                d[nc * s.plane() + i] = xp[nc * s.plane() + i] + b;
        }
    });
    return out;
}

Tensor channel_sum(const Tensor& grad_out) {
    const auto& s = grad_out.shape();
    Tensor out(Shape{1, s.c, 1, 1}, grad_out.dtype());
    dispatch(grad_out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* g = grad_out.data<T>().data();
        std::vector<double> acc(s.c, 0.0);
        for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
            for (std::size_t i = 0; i < s.plane(); ++i) acc[nc % s.c] += g[nc * s.plane() + i];
        auto d = out.data<T>();
        for (std::size_t c = 0; c < s.c; ++c) d[c] = static_cast<T>(acc[c]);
    });
    return out;
}

double l2_norm(const Tensor& x) { return std::sqrt(dot(x, x)); }

} // namespace stylebank::ops
