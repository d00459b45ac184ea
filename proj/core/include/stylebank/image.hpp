#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stylebank/tensor.hpp"

namespace stylebank {

/// 8-bit interleaved RGB raster.
struct ImageBuffer {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> rgb; // height * width * 3

    /// [1, 3, h, w] tensor with values v / 255.
    Tensor to_tensor() const;
    /// Clamps to [0, 1] and rounds to the nearest 8-bit level. Uses sample 0.
    static ImageBuffer from_tensor(const Tensor& image);
};

ImageBuffer decode_png(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const ImageBuffer& image);

ImageBuffer load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const ImageBuffer& image);

/// Single-channel 8-bit label map (row-major).
struct LabelMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<int> labels;
};

std::vector<std::uint8_t> encode_label_png(const LabelMap& labels);
/// Reads an 8-bit grayscale PNG; RGB input uses the red channel.
LabelMap decode_label_png(std::span<const std::uint8_t> bytes);

/// Nearest-neighbour upsampling by an integer factor.
LabelMap upsample_labels(const LabelMap& labels, std::size_t factor);

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);
/// Rescales so the longer side equals `long_side`; both sides are rounded to a
/// multiple of `multiple` (at least `multiple`).
Tensor rescale_long_side(const Tensor& image, std::size_t long_side, std::size_t multiple = 8);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

} // namespace stylebank
