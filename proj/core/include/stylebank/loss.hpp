#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stylebank/autodiff.hpp"
#include "stylebank/tensor.hpp"

namespace stylebank {

inline constexpr std::uint64_t kDefaultExtractorSeed = 0x5EED;

/// Activations at the extractor's named taps.
using FeaturePyramid = std::map<std::string, Tensor>;
using VarPyramid = std::map<std::string, Var>;

/// Fixed convolutional stack standing in for a pretrained classifier: four
/// stages of two 3x3 convolutions with ReLU, stride 2 on the first conv of
/// stages 2-4. Taps L1..L4 are the output of each stage.
class FeatureExtractor {
public:
    static constexpr std::array<const char*, 4> kStyleTaps{"L1", "L2", "L3", "L4"};
    static constexpr std::array<const char*, 1> kContentTaps{"L4"};

    /// Deterministic pseudo-random weights (He-normal), channels 16/32/64/128.
    static FeatureExtractor random(std::uint64_t seed = kDefaultExtractorSeed, DType dtype = DType::F32);
    /// Weights from named tensors "extractor/conv{1..8}/kernel".
    static FeatureExtractor from_tensors(const std::map<std::string, Tensor>& tensors);

    FeaturePyramid extract(const Tensor& image) const;
    VarPyramid extract(Tape& tape, Var image) const;

    /// Same weights converted to another dtype (64-bit gradient checks).
    FeatureExtractor to(DType dtype) const;

    const std::vector<Tensor>& kernels() const noexcept { return kernels_; }
    std::map<std::string, Tensor> named_tensors() const;

private:
    explicit FeatureExtractor(std::vector<Tensor> kernels);

    std::vector<Tensor> kernels_; // 8 kernels, [c_out, c_in, 3, 3]
};

struct LossWeights {
    double content = 1.0;
    double style = 50.0;
    double tv = 1e-5;

    void validate() const;
};

/// Gram matrices of a style image at every style tap, computed once per style.
struct StyleTarget {
    std::map<std::string, Tensor> grams; // [1, 1, c, c]
};

StyleTarget make_style_target(const FeatureExtractor& extractor, const Tensor& style_image);

// Pure evaluations.
double content_loss(const FeaturePyramid& out, const FeaturePyramid& ref);
double style_loss(const FeaturePyramid& out, const FeaturePyramid& style);
double style_loss(const FeaturePyramid& out, const StyleTarget& target);
double identity_loss(const Tensor& input, const Tensor& output);

// Tape-level versions.
Var content_loss(const VarPyramid& out, const FeaturePyramid& ref);
/// `targets[i]` is the style for batch sample i.
Var style_loss(const VarPyramid& out, const std::vector<const StyleTarget*>& targets);
Var identity_loss(Var input, Var output);

struct PerceptualTerms {
    Var total;
    Var content;
    Var style;
    Var tv;
};

/// alpha * L_c + beta * L_s + gamma * L_tv for a batch of outputs.
PerceptualTerms perceptual_loss(const FeatureExtractor& extractor, const Tensor& content_images,
                                const std::vector<const StyleTarget*>& targets, Var output,
                                const LossWeights& weights);

} // namespace stylebank
