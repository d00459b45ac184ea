#include "stylebank/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

namespace stylebank {
namespace {

constexpr std::size_t kOuterKernel = 9;
constexpr std::size_t kInnerKernel = 3;

Shape norm_shape(std::size_t c) { return Shape{1, c, 1, 1}; }

ConvNormLayer make_layer(Shape kernel_shape, std::size_t norm_channels, std::mt19937_64& rng) {
    return ConvNormLayer{fan_in_uniform(kernel_shape, rng),
                         Tensor::full(norm_shape(norm_channels), 1.0),
                         Tensor::zeros(norm_shape(norm_channels))};
}

void expect_shape(const Tensor& t, Shape s, const std::string& what) {
    require(t.shape() == s, ErrorCode::ShapeMismatch,
            what + " has dims " + t.shape().str() + ", expected " + s.str());
    require(t.dtype() == DType::F32, ErrorCode::ShapeMismatch, what + " must be f32");
}

void expect_layer(const ConvNormLayer& l, Shape kernel, std::size_t c, const std::string& prefix) {
    expect_shape(l.kernel, kernel, prefix + "/kernel");
    expect_shape(l.scale, norm_shape(c), prefix + "/scale");
    expect_shape(l.shift, norm_shape(c), prefix + "/shift");
}

ConvNormVars bind_layer(Tape& tape, const ConvNormLayer& l, bool trainable) {
    auto put = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    return ConvNormVars{put(l.kernel), put(l.scale), put(l.shift)};
}

Var conv_norm_relu(Var x, const ConvNormVars& l, std::size_t stride) {
    const std::size_t k = l.kernel.shape().h;
    Var y = ad::conv2d(x, l.kernel, stride, Padding::reflect(k / 2));
    return ad::relu(ad::instance_norm(y, l.scale, l.shift));
}

Var deconv_norm_relu(Var x, const ConvNormVars& l) {
    const std::size_t k = l.kernel.shape().h;
    const auto& s = x.shape();
    Var y = ad::conv2d_transpose(x, l.kernel, 2, Padding::zero(k / 2), 2 * s.h, 2 * s.w);
    return ad::relu(ad::instance_norm(y, l.scale, l.shift));
}

void fnv1a(std::uint64_t& h, std::span<const std::byte> bytes) {
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
}

} // namespace

void ModelConfig::validate() const {
    require(channels >= 4 && channels % 4 == 0, ErrorCode::InvalidArgument,
            "channels must be a positive multiple of 4");
    require(bank_kernel % 2 == 1, ErrorCode::InvalidArgument, "bank kernel size must be odd");
}

Tensor fan_in_uniform(Shape kernel_shape, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(kernel_shape.c * kernel_shape.h *
                                                             kernel_shape.w));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(kernel_shape);
    for (float& v : t.data<float>()) v = static_cast<float>(dist(rng));
    return t;
}

StyleBankModel StyleBankModel::create(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t c = config.channels, c2 = c / 2, c4 = c / 4;
    StyleBankModel m;
    m.config_ = config;
    m.encoder_.conv1 = make_layer(Shape{c4, 3, kOuterKernel, kOuterKernel}, c4, rng);
    m.encoder_.conv2 = make_layer(Shape{c2, c4, kInnerKernel, kInnerKernel}, c2, rng);
    m.encoder_.conv3 = make_layer(Shape{c, c2, kInnerKernel, kInnerKernel}, c, rng);
    // Transposed kernels are [c_in, c_out, k, k]; fan-in counts the input side.
    m.decoder_.deconv1 = make_layer(Shape{c, c2, kInnerKernel, kInnerKernel}, c2, rng);
    m.decoder_.deconv2 = make_layer(Shape{c2, c4, kInnerKernel, kInnerKernel}, c4, rng);
    // Stored at 1/gain scale so the initial map is the plain fan-in rule.
    m.decoder_.out_kernel =
        ops::scale(fan_in_uniform(Shape{3, c4, kOuterKernel, kOuterKernel}, rng), 1.0 / kDecoderOutputGain);
    m.decoder_.out_bias = Tensor::full(norm_shape(3), 0.5);
    return m;
}

std::vector<std::string> StyleBankModel::style_names() const {
    std::vector<std::string> names;
    for (const auto& b : banks_) names.push_back(b.name);
    return names;
}

bool StyleBankModel::has_style(const std::string& name) const {
    return std::any_of(banks_.begin(), banks_.end(), [&](const auto& b) { return b.name == name; });
}

std::size_t StyleBankModel::style_index(const std::string& name) const {
    for (std::size_t i = 0; i < banks_.size(); ++i)
        if (banks_[i].name == name) return i;
    fail(ErrorCode::UnknownStyle, "unknown style '" + name + "'");
}

const FilterBank& StyleBankModel::bank(const std::string& name) const {
    return banks_[style_index(name)];
}

FilterBank& StyleBankModel::bank(const std::string& name) { return banks_[style_index(name)]; }

FilterBank& StyleBankModel::bank_at(std::size_t index) {
    require(index < banks_.size(), ErrorCode::UnknownStyle,
            "style index " + std::to_string(index) + " out of range");
    return banks_[index];
}

const FilterBank& StyleBankModel::bank_at(std::size_t index) const {
    require(index < banks_.size(), ErrorCode::UnknownStyle,
            "style index " + std::to_string(index) + " out of range");
    return banks_[index];
}

FilterBank& StyleBankModel::add_bank(const std::string& name, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t c = config_.channels, k = config_.bank_kernel;
    return add_bank(FilterBank{name, fan_in_uniform(Shape{c, c, k, k}, rng)});
}

FilterBank& StyleBankModel::add_bank(FilterBank bank) {
    require(!bank.name.empty(), ErrorCode::InvalidArgument, "style name must not be empty");
    require(!has_style(bank.name), ErrorCode::DuplicateStyle,
            "style '" + bank.name + "' already exists");
    const std::size_t c = config_.channels, k = config_.bank_kernel;
    expect_shape(bank.kernel, Shape{c, c, k, k}, "bank/" + bank.name + "/kernel");
    banks_.push_back(std::move(bank));
    return banks_.back();
}

void StyleBankModel::for_each_autoencoder_param(const ParamVisitor& visit) {
    auto layer = [&](const std::string& prefix, ConvNormLayer& l) {
        visit(prefix + "/kernel", l.kernel);
        visit(prefix + "/scale", l.scale);
        visit(prefix + "/shift", l.shift);
    };
    layer("encoder/conv1", encoder_.conv1);
    layer("encoder/conv2", encoder_.conv2);
    layer("encoder/conv3", encoder_.conv3);
    layer("decoder/deconv1", decoder_.deconv1);
    layer("decoder/deconv2", decoder_.deconv2);
    visit("decoder/out/kernel", decoder_.out_kernel);
    visit("decoder/out/bias", decoder_.out_bias);
}

void StyleBankModel::for_each_autoencoder_param(const ConstParamVisitor& visit) const {
    const_cast<StyleBankModel*>(this)->for_each_autoencoder_param(
        ParamVisitor([&](const std::string& name, Tensor& t) { visit(name, t); }));
}

std::uint64_t StyleBankModel::autoencoder_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each_autoencoder_param(ConstParamVisitor([&](const std::string& name, const Tensor& t) {
        fnv1a(h, std::as_bytes(std::span(name.data(), name.size())));
        fnv1a(h, t.bytes());
    }));
    return h;
}

void StyleBankModel::validate() const {
    config_.validate();
    const std::size_t c = config_.channels, c2 = c / 2, c4 = c / 4, k = config_.bank_kernel;
    expect_layer(encoder_.conv1, Shape{c4, 3, kOuterKernel, kOuterKernel}, c4, "encoder/conv1");
    expect_layer(encoder_.conv2, Shape{c2, c4, kInnerKernel, kInnerKernel}, c2, "encoder/conv2");
    expect_layer(encoder_.conv3, Shape{c, c2, kInnerKernel, kInnerKernel}, c, "encoder/conv3");
    expect_layer(decoder_.deconv1, Shape{c, c2, kInnerKernel, kInnerKernel}, c2, "decoder/deconv1");
    expect_layer(decoder_.deconv2, Shape{c2, c4, kInnerKernel, kInnerKernel}, c4, "decoder/deconv2");
    expect_shape(decoder_.out_kernel, Shape{3, c4, kOuterKernel, kOuterKernel}, "decoder/out/kernel");
    expect_shape(decoder_.out_bias, norm_shape(3), "decoder/out/bias");
    std::set<std::string> names;
    for (const auto& b : banks_) {
        require(names.insert(b.name).second, ErrorCode::DuplicateStyle,
                "duplicate style '" + b.name + "'");
        expect_shape(b.kernel, Shape{c, c, k, k}, "bank/" + b.name + "/kernel");
    }
}

StyleBankModel StyleBankModel::assemble(const ModelConfig& config, EncoderParams encoder,
                                        DecoderParams decoder, std::vector<FilterBank> banks) {
    StyleBankModel m;
    m.config_ = config;
    m.encoder_ = std::move(encoder);
    m.decoder_ = std::move(decoder);
    m.banks_ = std::move(banks);
    m.validate();
    return m;
}

EncoderVars bind(Tape& tape, const EncoderParams& p, bool trainable) {
    return EncoderVars{bind_layer(tape, p.conv1, trainable), bind_layer(tape, p.conv2, trainable),
                       bind_layer(tape, p.conv3, trainable)};
}

DecoderVars bind(Tape& tape, const DecoderParams& p, bool trainable) {
    auto put = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    return DecoderVars{bind_layer(tape, p.deconv1, trainable), bind_layer(tape, p.deconv2, trainable),
                       put(p.out_kernel), put(p.out_bias)};
}

std::vector<std::pair<std::string, Var>> named_vars(const EncoderVars& enc, const DecoderVars& dec) {
    std::vector<std::pair<std::string, Var>> out;
    auto layer = [&](const std::string& prefix, const ConvNormVars& l) {
        out.emplace_back(prefix + "/kernel", l.kernel);
        out.emplace_back(prefix + "/scale", l.scale);
        out.emplace_back(prefix + "/shift", l.shift);
    };
    layer("encoder/conv1", enc.conv1);
    layer("encoder/conv2", enc.conv2);
    layer("encoder/conv3", enc.conv3);
    layer("decoder/deconv1", dec.deconv1);
    layer("decoder/deconv2", dec.deconv2);
    out.emplace_back("decoder/out/kernel", dec.out_kernel);
    out.emplace_back("decoder/out/bias", dec.out_bias);
    return out;
}

Var encode(const EncoderVars& enc, Var image) {
    const auto& s = image.shape();
    require(s.c == 3, ErrorCode::ShapeMismatch, "encode: image must have 3 channels, got " + s.str());
    require(s.h % 4 == 0 && s.w % 4 == 0 && s.h >= 8 && s.w >= 8, ErrorCode::InvalidArgument,
            "encode: image dims must be divisible by 4 (and at least 8), got " + s.str());
    Var x = conv_norm_relu(image, enc.conv1, 1);
    x = conv_norm_relu(x, enc.conv2, 2);
    return conv_norm_relu(x, enc.conv3, 2);
}

Var decode(const DecoderVars& dec, Var features) {
    const auto& s = features.shape();
    require(s.c == dec.deconv1.kernel.shape().n, ErrorCode::ShapeMismatch,
            "decode: features have " + std::to_string(s.c) + " channels, decoder expects " +
                std::to_string(dec.deconv1.kernel.shape().n));
    Var x = deconv_norm_relu(features, dec.deconv1);
    x = deconv_norm_relu(x, dec.deconv2);
    const std::size_t k = dec.out_kernel.shape().h;
    x = ad::scale(ad::conv2d(x, dec.out_kernel, 1, Padding::reflect(k / 2)), kDecoderOutputGain);
    return ad::add_channel_bias(x, dec.out_bias);
}

Var apply_bank(Var kernel, Var features) {
    const auto& ks = kernel.shape();
    require(ks.h == ks.w && ks.h % 2 == 1, ErrorCode::InvalidArgument,
            "bank kernel size must be odd and square, got " + ks.str());
    return ad::conv2d(features, kernel, 1, Padding::zero(ks.h / 2));
}

namespace {

void check_image(const Tensor& image) {
    require(image.dtype() == DType::F32, ErrorCode::InvalidArgument, "images must be f32");
    for (float v : image.data<float>())
        require(v >= 0.0f && v <= 1.0f, ErrorCode::InvalidArgument,
                "encode: pixel values must lie in [0, 1]");
}

} // namespace

Tensor encode(const StyleBankModel& model, const Tensor& image) {
    check_image(image);
    Tape tape;
    return encode(bind(tape, model.encoder(), false), tape.constant(image)).value();
}

Tensor decode(const StyleBankModel& model, const Tensor& features) {
    Tape tape;
    return decode(bind(tape, model.decoder(), false), tape.constant(features)).value();
}

Tensor apply_bank(const FilterBank& bank, const Tensor& features) {
    Tape tape;
    return apply_bank(tape.constant(bank.kernel), tape.constant(features)).value();
}

Tensor autoencode(const StyleBankModel& model, const Tensor& image) {
    check_image(image);
    Tape tape;
    Var f = encode(bind(tape, model.encoder(), false), tape.constant(image));
    return decode(bind(tape, model.decoder(), false), f).value();
}

Tensor stylize_with(const StyleBankModel& model, const Tensor& image, const FilterBank& bank) {
    check_image(image);
    Tape tape;
    Var f = encode(bind(tape, model.encoder(), false), tape.constant(image));
    Var g = apply_bank(tape.constant(bank.kernel), f);
    return decode(bind(tape, model.decoder(), false), g).value();
}

Tensor stylize(const StyleBankModel& model, const Tensor& image, const std::string& style) {
    return stylize_with(model, image, model.bank(style));
}

LinearFusion fuse_linear(std::span<const FilterBank> banks, std::span<const double> weights) {
    require(!banks.empty(), ErrorCode::InvalidArgument, "fuse_linear: no banks given");
    require(banks.size() == weights.size(), ErrorCode::InvalidArgument,
            "fuse_linear: bank and weight counts differ");
    double total = 0;
    for (double w : weights) {
        require(std::isfinite(w) && w >= 0.0, ErrorCode::InvalidArgument,
                "fuse_linear: weights must be finite and non-negative");
        total += w;
    }
    require(total > 0.0, ErrorCode::InvalidArgument, "fuse_linear: all weights are zero");
    const Shape s = banks.front().kernel.shape();
    for (const auto& b : banks)
        require(b.kernel.shape() == s && b.kernel.dtype() == DType::F32, ErrorCode::ShapeMismatch,
                "fuse_linear: bank '" + b.name + "' has dims " + b.kernel.shape().str() +
                    ", expected " + s.str());
    LinearFusion out;
    out.renormalized = total != 1.0;
    for (double w : weights) out.weights.push_back(w / total);

    std::vector<double> acc(s.numel(), 0.0);
    std::string name = "fused";
    for (std::size_t i = 0; i < banks.size(); ++i) {
        auto k = banks[i].kernel.data<float>();
        const double w = out.weights[i];
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * static_cast<double>(k[j]);
        name += (i == 0 ? ":" : ",") + banks[i].name;
    }
    out.bank = FilterBank{name, Tensor::from_values(s, acc)};
    return out;
}

void RegionMaskSet::validate() const {
    require(!masks.empty(), ErrorCode::InvalidMask, "region mask set is empty");
    require(masks.size() == styles.size(), ErrorCode::InvalidMask,
            "region mask set needs one style per mask");
    const Shape s = masks.front().shape();
    require(s.n == 1 && s.c == 1 && s.plane() > 0, ErrorCode::InvalidMask,
            "masks must be [1,1,h,w], got " + s.str());
    std::vector<double> coverage(s.plane(), 0.0);
    for (const auto& m : masks) {
        require(m.shape() == s, ErrorCode::InvalidMask, "masks differ in shape");
        for (std::size_t i = 0; i < s.plane(); ++i) {
            const double v = m.flat(i);
            require(v == 0.0 || v == 1.0, ErrorCode::InvalidMask, "masks must be binary");
            require(!(v == 1.0 && coverage[i] == 1.0), ErrorCode::InvalidMask,
                    "masks overlap at position " + std::to_string(i));
            coverage[i] += v;
        }
    }
    for (std::size_t i = 0; i < coverage.size(); ++i)
        require(coverage[i] == 1.0, ErrorCode::InvalidMask,
                "masks leave position " + std::to_string(i) + " uncovered");
}

std::size_t RegionMaskSet::height() const { return masks.empty() ? 0 : masks.front().shape().h; }
std::size_t RegionMaskSet::width() const { return masks.empty() ? 0 : masks.front().shape().w; }

RegionMaskSet RegionMaskSet::from_labels(const std::vector<int>& labels, std::size_t h,
                                         std::size_t w, const std::map<int, std::string>& assignment) {
    require(labels.size() == h * w && h > 0 && w > 0, ErrorCode::InvalidMask,
            "label map size does not match " + std::to_string(h) + "x" + std::to_string(w));
    std::set<int> present(labels.begin(), labels.end());
    RegionMaskSet set;
    for (int label : present) {
        auto it = assignment.find(label);
        require(it != assignment.end(), ErrorCode::InvalidMask,
                "label " + std::to_string(label) + " has no style assigned");
        Tensor mask(Shape{1, 1, h, w});
        auto d = mask.data<float>();
        for (std::size_t i = 0; i < labels.size(); ++i) d[i] = labels[i] == label ? 1.0f : 0.0f;
        set.masks.push_back(std::move(mask));
        set.styles.push_back(it->second);
    }
    set.validate();
    return set;
}

std::vector<int> reduce_labels(const std::vector<int>& labels, std::size_t h, std::size_t w,
                               std::size_t factor) {
    require(factor >= 1 && h % factor == 0 && w % factor == 0 && labels.size() == h * w,
            ErrorCode::InvalidMask, "label map dims must be divisible by the reduction factor");
    const std::size_t oh = h / factor, ow = w / factor;
    std::vector<int> out(oh * ow);
    std::map<int, int> counts;
    for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
            counts.clear();
            for (std::size_t di = 0; di < factor; ++di)
                for (std::size_t dj = 0; dj < factor; ++dj)
                    ++counts[labels[(i * factor + di) * w + j * factor + dj]];
            // std::map iterates labels in ascending order, so strict > keeps the lowest on ties.
            int best = 0, best_count = -1;
            for (auto [label, count] : counts)
                if (count > best_count) best = label, best_count = count;
            out[i * ow + j] = best;
        }
    }
    return out;
}

Var fuse_regions(const std::vector<Var>& bank_kernels, Var features, const std::vector<Var>& masks) {
    require(!masks.empty() && masks.size() == bank_kernels.size(), ErrorCode::InvalidMask,
            "fuse_regions: need one bank per mask");
    Var total;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        Var term = apply_bank(bank_kernels[i], ad::mul_mask(features, masks[i]));
        total = i == 0 ? term : ad::add(total, term);
    }
    return total;
}

Tensor fuse_regions(const StyleBankModel& model, const Tensor& features, const RegionMaskSet& masks) {
    masks.validate();
    const auto& s = features.shape();
    require(masks.height() == s.h && masks.width() == s.w, ErrorCode::InvalidMask,
            "masks are " + std::to_string(masks.height()) + "x" + std::to_string(masks.width()) +
                " but features are " + s.str());
    Tape tape;
    std::vector<Var> kernels, mvars;
    for (std::size_t i = 0; i < masks.masks.size(); ++i) {
        kernels.push_back(tape.constant(model.bank(masks.styles[i]).kernel));
        mvars.push_back(tape.constant(masks.masks[i]));
    }
    return fuse_regions(kernels, tape.constant(features), mvars).value();
}

} // namespace stylebank
