#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "stylebank/error.hpp"

namespace stylebank {

enum class DType : std::uint8_t { F32, F64 };

/// Dimensions of a rank-4 tensor in (batch, channel, height, width) order.
struct Shape {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t numel() const noexcept { return n * c * h * w; }
    std::size_t plane() const noexcept { return h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

/// Dense row-major rank-4 array of f32 (default) or f64 values.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, DType dtype = DType::F32);

    static Tensor zeros(Shape shape, DType dtype = DType::F32) { return Tensor(shape, dtype); }
    static Tensor full(Shape shape, double value, DType dtype = DType::F32);
    static Tensor from_values(Shape shape, std::span<const double> values,
                              DType dtype = DType::F32);
    static Tensor from_values(Shape shape, std::initializer_list<double> values,
                              DType dtype = DType::F32);

    const Shape& shape() const noexcept { return shape_; }
    DType dtype() const noexcept { return dtype_; }
    std::size_t numel() const noexcept { return shape_.numel(); }
    bool empty() const noexcept { return numel() == 0; }

    template <class T>
    std::span<T> data();
    template <class T>
    std::span<const T> data() const;

    /// Raw little-endian payload view (platform byte order is assumed little-endian).
    std::span<const std::byte> bytes() const;

    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;
    void set(std::size_t n, std::size_t c, std::size_t h, std::size_t w, double value);
    double flat(std::size_t i) const;
    void set_flat(std::size_t i, double value);

    std::vector<double> values() const;
    Tensor to(DType dtype) const;
    Tensor reshaped(Shape shape) const;

    /// Sample `i` of the batch as a [1, c, h, w] tensor.
    Tensor sample(std::size_t i) const;

    bool all_finite() const;
    /// Bitwise equality of shape, dtype and payload.
    bool identical(const Tensor& other) const;

    void fill(double value);

private:
    using Storage = std::variant<std::vector<float>, std::vector<double>>;

    Shape shape_{};
    DType dtype_ = DType::F32;
    Storage storage_ = std::vector<float>{};
};

/// Concatenate [1,c,h,w] (or [n_i,c,h,w]) tensors along the batch axis.
Tensor concat_batch(std::span<const Tensor> parts);

std::size_t dtype_size(DType dtype) noexcept;

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
    if (dtype == DType::F64) return fn(double{});
    return fn(float{});
}

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

template <class T>
std::span<T> Tensor::data() {
    require(dtype_ == dtype_of<T>(), ErrorCode::InvalidArgument, "tensor dtype mismatch");
    auto& v = std::get<std::vector<T>>(storage_);
    return {v.data(), v.size()};
}

template <class T>
std::span<const T> Tensor::data() const {
    require(dtype_ == dtype_of<T>(), ErrorCode::InvalidArgument, "tensor dtype mismatch");
    const auto& v = std::get<std::vector<T>>(storage_);
    return {v.data(), v.size()};
}

} // namespace stylebank
