#include "stylebank/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace stylebank {
namespace {

struct ReadCursor {
    std::span<const std::uint8_t> bytes;
    std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep out, png_size_t count) {
    auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cursor->offset + count > cursor->bytes.size()) png_error(png, "truncated PNG stream");
    std::memcpy(out, cursor->bytes.data() + cursor->offset, count);
    cursor->offset += count;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t count) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + count);
}

void png_flush_noop(png_structp) {}

[[noreturn]] void png_error_throw(png_structp, png_const_charp message) {
    throw Error(ErrorCode::Format, std::string("png: ") + message);
}

void png_warning_ignore(png_structp, png_const_charp) {}

// Decodes to 8-bit with `channels` = 3 (RGB) or 1 (gray).
std::vector<std::uint8_t> decode_raw(std::span<const std::uint8_t> bytes, int channels,
                                     std::size_t& width, std::size_t& height) {
    require(bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0, ErrorCode::Format,
            "not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw,
                                             png_warning_ignore);
    require(png != nullptr, ErrorCode::Format, "png: cannot create read struct");
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp& p;
        png_infop& i;
        ~Guard() { png_destroy_read_struct(&p, &i, nullptr); }
    } guard{png, info};

    ReadCursor cursor{bytes, 0};
    png_set_read_fn(png, &cursor, png_read_from_span);
    png_read_info(png, info);
    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if ((color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) && depth < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
    if (channels == 3 && is_gray) png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int got = png_get_channels(png, info);
    require(got == 1 || got == 3, ErrorCode::Format, "png: unsupported channel layout");

    std::vector<std::uint8_t> raw(height * width * static_cast<std::size_t>(got));
    std::vector<png_bytep> rows(height);
    for (std::size_t y = 0; y < height; ++y) rows[y] = raw.data() + y * width * static_cast<std::size_t>(got);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);

    if (got == channels) return raw;
    // RGB -> label map: take the red channel.
    std::vector<std::uint8_t> out(height * width);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = raw[i * 3];
    return out;
}

std::vector<std::uint8_t> encode_raw(std::span<const std::uint8_t> pixels, std::size_t width,
                                     std::size_t height, int channels) {
    require(width > 0 && height > 0 && pixels.size() == width * height * static_cast<std::size_t>(channels),
            ErrorCode::InvalidArgument, "png: pixel buffer does not match dimensions");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw,
                                              png_warning_ignore);
    require(png != nullptr, ErrorCode::Format, "png: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp& p;
        png_infop& i;
        ~Guard() { png_destroy_write_struct(&p, &i); }
    } guard{png, info};

    std::vector<std::uint8_t> out;
    png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    for (std::size_t y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(pixels.data() + y * width * static_cast<std::size_t>(channels)));
    png_write_end(png, nullptr);
    return out;
}

} // namespace

Tensor ImageBuffer::to_tensor() const {
    require(rgb.size() == width * height * 3, ErrorCode::InvalidArgument, "image buffer size mismatch");
    Tensor t(Shape{1, 3, height, width});
    auto d = t.data<float>();
    const std::size_t plane = width * height;
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) d[c * plane + i] = static_cast<float>(rgb[i * 3 + c]) / 255.0f;
    return t;
}

ImageBuffer ImageBuffer::from_tensor(const Tensor& image) {
    const auto& s = image.shape();
    require(s.c == 3 && s.n >= 1, ErrorCode::ShapeMismatch, "image tensor must be [n,3,h,w], got " + s.str());
    ImageBuffer out{s.w, s.h, std::vector<std::uint8_t>(s.plane() * 3)};
    const Tensor t = image.to(DType::F32);
    auto d = t.data<float>();
    const std::size_t plane = s.plane();
    for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            float v = d[c * plane + i];
            v = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, 1.0f);
            out.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    }
    return out;
}

ImageBuffer decode_png(std::span<const std::uint8_t> bytes) {
    ImageBuffer img;
    img.rgb = decode_raw(bytes, 3, img.width, img.height);
    return img;
}

std::vector<std::uint8_t> encode_png(const ImageBuffer& image) {
    return encode_raw(image.rgb, image.width, image.height, 3);
}

ImageBuffer load_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

void save_png(const std::filesystem::path& path, const ImageBuffer& image) {
    write_file_atomic(path, encode_png(image));
}

std::vector<std::uint8_t> encode_label_png(const LabelMap& labels) {
    std::vector<std::uint8_t> raw(labels.labels.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        require(labels.labels[i] >= 0 && labels.labels[i] <= 255, ErrorCode::InvalidArgument,
                "label values must fit in 8 bits");
        raw[i] = static_cast<std::uint8_t>(labels.labels[i]);
    }
    return encode_raw(raw, labels.width, labels.height, 1);
}

LabelMap decode_label_png(std::span<const std::uint8_t> bytes) {
    LabelMap map;
    auto raw = decode_raw(bytes, 1, map.width, map.height);
    map.labels.assign(raw.begin(), raw.end());
    return map;
}

LabelMap upsample_labels(const LabelMap& labels, std::size_t factor) {
    LabelMap out{labels.width * factor, labels.height * factor, {}};
    out.labels.resize(out.width * out.height);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            out.labels[y * out.width + x] = labels.labels[(y / factor) * labels.width + x / factor];
    return out;
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    const auto& s = image.shape();
    require(out_h > 0 && out_w > 0 && s.plane() > 0, ErrorCode::InvalidArgument, "resize: empty dims");
    if (s.h == out_h && s.w == out_w) return image;
    Tensor out(Shape{s.n, s.c, out_h, out_w}, image.dtype());
    const double sy = static_cast<double>(s.h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(s.w) / static_cast<double>(out_w);
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
        for (std::size_t y = 0; y < out_h; ++y) {
            const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(s.h - 1));
            const auto y0 = static_cast<std::size_t>(fy);
            const std::size_t y1 = std::min(y0 + 1, s.h - 1);
            const double wy = fy - static_cast<double>(y0);
            for (std::size_t x = 0; x < out_w; ++x) {
                const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(s.w - 1));
                const auto x0 = static_cast<std::size_t>(fx);
                const std::size_t x1 = std::min(x0 + 1, s.w - 1);
                const double wx = fx - static_cast<double>(x0);
                const std::size_t base = p * s.plane();
                const double v = (1 - wy) * ((1 - wx) * image.flat(base + y0 * s.w + x0) + wx * image.flat(base + y0 * s.w + x1)) +
                                 wy * ((1 - wx) * image.flat(base + y1 * s.w + x0) + wx * image.flat(base + y1 * s.w + x1));
                out.set_flat(p * out_h * out_w + y * out_w + x, v);
            }
        }
    }
    return out;
}

Tensor rescale_long_side(const Tensor& image, std::size_t long_side, std::size_t multiple) {
    const auto& s = image.shape();
    require(long_side >= multiple && multiple > 0, ErrorCode::InvalidArgument, "rescale: bad target size");
    const double f = static_cast<double>(long_side) / static_cast<double>(std::max(s.h, s.w));
    auto round_to = [&](double v) {
        const auto m = static_cast<double>(multiple);
        return std::max(multiple, static_cast<std::size_t>(std::lround(v / m)) * multiple);
    };
    return resize_bilinear(image, round_to(static_cast<double>(s.h) * f), round_to(static_cast<double>(s.w) * f));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorCode::Io, "cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        require(static_cast<bool>(out), ErrorCode::Io, "write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    require(!ec, ErrorCode::Io, "cannot rename '" + tmp.string() + "': " + ec.message());
}

} // namespace stylebank
