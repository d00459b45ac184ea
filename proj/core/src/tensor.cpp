#include "stylebank/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace stylebank {

const char* to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::UnknownStyle: return "unknown style";
    case ErrorCode::DuplicateStyle: return "duplicate style";
    case ErrorCode::InvalidMask: return "invalid mask";
    case ErrorCode::Numeric: return "numeric error";
    case ErrorCode::State: return "invalid state";
    case ErrorCode::Format: return "format error";
    case ErrorCode::Io: return "i/o error";
    }
    return "error";
}

std::string Shape::str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
}

std::size_t dtype_size(DType dtype) noexcept { return dtype == DType::F64 ? 8 : 4; }

Tensor::Tensor(Shape shape, DType dtype) : shape_(shape), dtype_(dtype) {
    if (dtype == DType::F64)
        storage_ = std::vector<double>(shape.numel(), 0.0);
    else
        storage_ = std::vector<float>(shape.numel(), 0.0f);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t(shape, dtype);
    t.fill(value);
    return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
    require(values.size() == shape.numel(), ErrorCode::ShapeMismatch,
            "value count " + std::to_string(values.size()) + " does not match " + shape.str());
    Tensor t(shape, dtype);
    dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.data<T>();
        for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
    });
    return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
    return from_values(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

std::span<const std::byte> Tensor::bytes() const {
    return std::visit(
        [](const auto& v) { return std::as_bytes(std::span(v.data(), v.size())); }, storage_);
}

double Tensor::flat(std::size_t i) const {
    return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, storage_);
}

void Tensor::set_flat(std::size_t i, double value) {
    std::visit(
        [&](auto& v) { v.at(i) = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); },
        storage_);
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return flat(((n * shape_.c + c) * shape_.h + h) * shape_.w + w);
}

void Tensor::set(std::size_t n, std::size_t c, std::size_t h, std::size_t w, double value) {
    set_flat(((n * shape_.c + c) * shape_.h + h) * shape_.w + w, value);
}

std::vector<double> Tensor::values() const {
    return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                      storage_);
}

Tensor Tensor::to(DType dtype) const {
    if (dtype == dtype_) return *this;
    Tensor out(shape_, dtype);
    std::visit(
        [&](const auto& src) {
            dispatch(dtype, [&](auto tag) {
                using T = decltype(tag);
                auto dst = out.data<T>();
                std::transform(src.begin(), src.end(), dst.begin(),
                               [](auto x) { return static_cast<T>(x); });
            });
        },
        storage_);
    return out;
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape.numel() == numel(), ErrorCode::ShapeMismatch,
            "cannot reshape " + shape_.str() + " to " + shape.str());
    Tensor out = *this;
    out.shape_ = shape;
    return out;
}

Tensor Tensor::sample(std::size_t i) const {
    require(i < shape_.n, ErrorCode::InvalidArgument, "batch index out of range");
    Shape s{1, shape_.c, shape_.h, shape_.w};
    Tensor out(s, dtype_);
    const std::size_t per = s.numel();
    std::visit(
        [&](const auto& src) {
            using T = typename std::decay_t<decltype(src)>::value_type;
            auto dst = out.data<T>();
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * per), per, dst.begin());
        },
        storage_);
    return out;
}

bool Tensor::all_finite() const {
    return std::visit(
        [](const auto& v) {
            return std::all_of(v.begin(), v.end(), [](auto x) { return std::isfinite(x); });
        },
        storage_);
}

bool Tensor::identical(const Tensor& other) const {
    if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
    auto a = bytes();
    auto b = other.bytes();
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size()) == 0;
}

void Tensor::fill(double value) {
    std::visit(
        [&](auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            std::fill(v.begin(), v.end(), static_cast<T>(value));
        },
        storage_);
}

Tensor concat_batch(std::span<const Tensor> parts) {
    require(!parts.empty(), ErrorCode::InvalidArgument, "concat_batch needs at least one tensor");
    Shape s = parts.front().shape();
    const DType dtype = parts.front().dtype();
    std::size_t n = 0;
    for (const auto& p : parts) {
        const auto& ps = p.shape();
        require(ps.c == s.c && ps.h == s.h && ps.w == s.w && p.dtype() == dtype,
                ErrorCode::ShapeMismatch, "concat_batch: inconsistent parts");
        n += ps.n;
    }
    s.n = n;
    Tensor out(s, dtype);
    dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto dst = out.data<T>();
        std::size_t offset = 0;
        for (const auto& p : parts) {
            auto src = p.data<T>();
            std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
            offset += src.size();
        }
    });
    return out;
}

} // namespace stylebank
