#include "stylebank/loss.hpp"

#include <cmath>
#include <random>

#include "stylebank/ops.hpp"

namespace stylebank {
namespace {

constexpr std::array<std::size_t, 4> kStageChannels{16, 32, 64, 128};

std::string kernel_name(std::size_t i) { return "extractor/conv" + std::to_string(i + 1) + "/kernel"; }

void check_extract_input(const Shape& s) {
    require(s.c == 3, ErrorCode::ShapeMismatch, "extract: image must have 3 channels, got " + s.str());
    require(s.h % 8 == 0 && s.w % 8 == 0 && s.h > 0 && s.w > 0, ErrorCode::InvalidArgument,
            "extract: image dims must be divisible by 8, got " + s.str());
}

void check_taps(const FeaturePyramid& a, const FeaturePyramid& b, const char* what) {
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        require(it != b.end(), ErrorCode::InvalidArgument,
                std::string(what) + ": tap '" + name + "' missing from reference");
        require(it->second.shape().c == t.shape().c, ErrorCode::ShapeMismatch,
                std::string(what) + ": tap '" + name + "' channel mismatch");
    }
}

} // namespace

FeatureExtractor::FeatureExtractor(std::vector<Tensor> kernels) : kernels_(std::move(kernels)) {
    require(kernels_.size() == 8, ErrorCode::Format, "extractor needs exactly 8 conv kernels");
    std::size_t c_in = 3;
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
        const auto& s = kernels_[i].shape();
        require(s.c == c_in && s.h == 3 && s.w == 3 && s.n > 0, ErrorCode::ShapeMismatch,
                kernel_name(i) + " has inconsistent dims " + s.str());
        require(kernels_[i].dtype() == kernels_.front().dtype(), ErrorCode::Format,
                "extractor kernels must share one dtype");
        c_in = s.n;
    }
}

FeatureExtractor FeatureExtractor::random(std::uint64_t seed, DType dtype) {
    std::mt19937_64 rng(seed);
    std::vector<Tensor> kernels;
    std::size_t c_in = 3;
    for (std::size_t stage = 0; stage < kStageChannels.size(); ++stage) {
        for (int j = 0; j < 2; ++j) {
            const std::size_t c_out = kStageChannels[stage];
            Shape s{c_out, c_in, 3, 3};
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(c_in * 9)));
            std::vector<double> values(s.numel());
            for (double& v : values) v = dist(rng);
            kernels.push_back(Tensor::from_values(s, values, dtype));
            c_in = c_out;
        }
    }
    return FeatureExtractor(std::move(kernels));
}

FeatureExtractor FeatureExtractor::from_tensors(const std::map<std::string, Tensor>& tensors) {
    std::vector<Tensor> kernels;
    for (std::size_t i = 0; i < 8; ++i) {
        auto it = tensors.find(kernel_name(i));
        require(it != tensors.end(), ErrorCode::Format, "extractor weights lack " + kernel_name(i));
        kernels.push_back(it->second);
    }
    return FeatureExtractor(std::move(kernels));
}

FeatureExtractor FeatureExtractor::to(DType dtype) const {
    std::vector<Tensor> kernels;
    for (const auto& k : kernels_) kernels.push_back(k.to(dtype));
    return FeatureExtractor(std::move(kernels));
}

std::map<std::string, Tensor> FeatureExtractor::named_tensors() const {
    std::map<std::string, Tensor> out;
    for (std::size_t i = 0; i < kernels_.size(); ++i) out.emplace(kernel_name(i), kernels_[i]);
    return out;
}

VarPyramid FeatureExtractor::extract(Tape& tape, Var image) const {
    check_extract_input(image.shape());
    require(image.dtype() == kernels_.front().dtype(), ErrorCode::InvalidArgument,
            "extract: image dtype differs from extractor weights");
    VarPyramid taps;
    Var x = image;
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
        const std::size_t stride = (i % 2 == 0 && i > 0) ? 2 : 1;
        x = ad::relu(ad::conv2d(x, tape.constant(kernels_[i]), stride, Padding::zero(1)));
        if (i % 2 == 1) taps.emplace(kStyleTaps[i / 2], x);
    }
    return taps;
}

FeaturePyramid FeatureExtractor::extract(const Tensor& image) const {
    Tape tape;
    FeaturePyramid out;
    for (auto& [name, v] : extract(tape, tape.constant(image))) out.emplace(name, v.value());
    return out;
}

void LossWeights::validate() const {
    require(content >= 0 && style >= 0 && tv >= 0, ErrorCode::InvalidArgument,
            "loss weights must be non-negative");
    require(content > 0 || style > 0 || tv > 0, ErrorCode::InvalidArgument,
            "loss weights must not all be zero");
}

StyleTarget make_style_target(const FeatureExtractor& extractor, const Tensor& style_image) {
    require(style_image.shape().n == 1, ErrorCode::InvalidArgument,
            "style target needs a single image");
    StyleTarget target;
    for (const auto& [name, f] : extractor.extract(style_image)) target.grams.emplace(name, ops::gram(f));
    return target;
}

double content_loss(const FeaturePyramid& out, const FeaturePyramid& ref) {
    double total = 0;
    for (const char* tap : FeatureExtractor::kContentTaps) {
        auto a = out.find(tap), b = ref.find(tap);
        require(a != out.end() && b != ref.end(), ErrorCode::InvalidArgument,
                std::string("content_loss: missing tap ") + tap);
        total += ops::mse(a->second, b->second);
    }
    return total;
}

double style_loss(const FeaturePyramid& out, const StyleTarget& target) {
    double total = 0;
    for (const char* tap : FeatureExtractor::kStyleTaps) {
        auto a = out.find(tap);
        auto b = target.grams.find(tap);
        require(a != out.end() && b != target.grams.end(), ErrorCode::InvalidArgument,
                std::string("style_loss: missing tap ") + tap);
        const Tensor g = ops::gram(a->second);
        require(g.shape().n == 1 && g.shape() == b->second.shape(), ErrorCode::ShapeMismatch,
                std::string("style_loss: gram mismatch at tap ") + tap);
        total += ops::mse(g, b->second);
    }
    return total;
}

double style_loss(const FeaturePyramid& out, const FeaturePyramid& style) {
    check_taps(out, style, "style_loss");
    StyleTarget target;
    for (const auto& [name, f] : style) target.grams.emplace(name, ops::gram(f));
    return style_loss(out, target);
}

double identity_loss(const Tensor& input, const Tensor& output) { return ops::mse(output, input); }

Var content_loss(const VarPyramid& out, const FeaturePyramid& ref) {
    std::vector<Var> terms;
    std::vector<double> ones;
    for (const char* tap : FeatureExtractor::kContentTaps) {
        auto a = out.find(tap);
        auto b = ref.find(tap);
        require(a != out.end() && b != ref.end(), ErrorCode::InvalidArgument,
                std::string("content_loss: missing tap ") + tap);
        Tape& tape = a->second.tape();
        terms.push_back(ad::mse(a->second, tape.constant(b->second)));
        ones.push_back(1.0);
    }
    return ad::weighted_sum(terms, ones);
}

Var style_loss(const VarPyramid& out, const std::vector<const StyleTarget*>& targets) {
    std::vector<Var> terms;
    std::vector<double> ones;
    for (const char* tap : FeatureExtractor::kStyleTaps) {
        auto a = out.find(tap);
        require(a != out.end(), ErrorCode::InvalidArgument, std::string("style_loss: missing tap ") + tap);
        const std::size_t n = a->second.shape().n;
        require(targets.size() == n, ErrorCode::InvalidArgument,
                "style_loss: need one style target per batch sample");
        std::vector<Tensor> grams;
        for (const StyleTarget* t : targets) {
            auto g = t->grams.find(tap);
            require(g != t->grams.end(), ErrorCode::InvalidArgument,
                    std::string("style_loss: target lacks tap ") + tap);
            grams.push_back(g->second.to(a->second.dtype()));
        }
        Tape& tape = a->second.tape();
        Var g = ad::gram(a->second);
        Var target = tape.constant(concat_batch(grams));
        require(g.shape() == target.shape(), ErrorCode::ShapeMismatch,
                std::string("style_loss: gram mismatch at tap ") + tap);
        terms.push_back(ad::mse(g, target));
        ones.push_back(1.0);
    }
    return ad::weighted_sum(terms, ones);
}

Var identity_loss(Var input, Var output) { return ad::mse(output, input); }

PerceptualTerms perceptual_loss(const FeatureExtractor& extractor, const Tensor& content_images,
                                const std::vector<const StyleTarget*>& targets, Var output,
                                const LossWeights& weights) {
    weights.validate();
    require(content_images.shape() == output.shape(), ErrorCode::ShapeMismatch,
            "perceptual_loss: output and content images differ in shape");
    Tape& tape = output.tape();
    const FeaturePyramid ref = extractor.extract(content_images);
    const VarPyramid out = extractor.extract(tape, output);
    PerceptualTerms terms;
    terms.content = content_loss(out, ref);
    terms.style = style_loss(out, targets);
    terms.tv = ad::tv_loss(output);
    const Var parts[] = {terms.content, terms.style, terms.tv};
    const double w[] = {weights.content, weights.style, weights.tv};
    terms.total = ad::weighted_sum(parts, w);
    return terms;
}

} // namespace stylebank
