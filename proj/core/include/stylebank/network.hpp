#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "stylebank/autodiff.hpp"
#include "stylebank/tensor.hpp"

namespace stylebank {

struct ModelConfig {
    std::size_t channels = 128;   ///< C_max: width of the encoder output / bank features.
    std::size_t bank_kernel = 3;  ///< Square StyleBank kernel size (3 or 7).

    void validate() const;
};

/// Convolution followed by instance normalization.
struct ConvNormLayer {
    Tensor kernel;
    Tensor scale; // [1, c_out, 1, 1]
    Tensor shift; // [1, c_out, 1, 1]
};

/// 9x9/s1 (3 -> C/4), 3x3/s2 (C/4 -> C/2), 3x3/s2 (C/2 -> C); each followed by
/// instance norm and ReLU.
struct EncoderParams {
    ConvNormLayer conv1;
    ConvNormLayer conv2;
    ConvNormLayer conv3;
};

/// Two 3x3 stride-2 transposed convolutions (C -> C/2 -> C/4) with instance
/// norm and ReLU, then a 9x9 stride-1 convolution to RGB with a bias and no
/// nonlinearity. The output conv is multiplied by kDecoderOutputGain.
/// Fixed multiplier on the decoder's output conv. The only layer not followed
/// by instance norm otherwise takes Adam steps far larger than its weights.
inline constexpr double kDecoderOutputGain = 0.1;

struct DecoderParams {
    ConvNormLayer deconv1;
    ConvNormLayer deconv2;
    Tensor out_kernel;
    Tensor out_bias; // [1, 3, 1, 1]
};

struct FilterBank {
    std::string name;
    Tensor kernel; // [C, C, k, k]

    std::size_t kernel_size() const { return kernel.shape().h; }
};

/// Named parameter visitor; names follow the checkpoint layout
/// ("encoder/conv1/kernel", "decoder/out/bias", ...).
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor& param)>;

class StyleBankModel {
public:
    StyleBankModel() = default;

    /// Fresh model with fan-in uniform initialization and unit/zero norms.
    static StyleBankModel create(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    EncoderParams& encoder() noexcept { return encoder_; }
    const EncoderParams& encoder() const noexcept { return encoder_; }
    DecoderParams& decoder() noexcept { return decoder_; }
    const DecoderParams& decoder() const noexcept { return decoder_; }

    const std::vector<FilterBank>& banks() const noexcept { return banks_; }
    std::vector<std::string> style_names() const;
    bool has_style(const std::string& name) const;
    std::size_t style_index(const std::string& name) const;
    const FilterBank& bank(const std::string& name) const;
    FilterBank& bank(const std::string& name);
    FilterBank& bank_at(std::size_t index);
    const FilterBank& bank_at(std::size_t index) const;

    /// Appends a randomly initialized bank (fan-in uniform).
    FilterBank& add_bank(const std::string& name, std::uint64_t seed);
    /// Appends an existing kernel; validates dims and name uniqueness.
    FilterBank& add_bank(FilterBank bank);

    void for_each_autoencoder_param(const ParamVisitor& visit);
    void for_each_autoencoder_param(const ConstParamVisitor& visit) const;

    /// FNV-1a over names and payloads of all encoder/decoder parameters.
    std::uint64_t autoencoder_hash() const;

    /// Checks every shape invariant; throws Error(ShapeMismatch) on violation.
    void validate() const;

    /// Assembles a model from already-shaped parts (used by checkpoint loading).
    static StyleBankModel assemble(const ModelConfig& config, EncoderParams encoder,
                                   DecoderParams decoder, std::vector<FilterBank> banks);

private:
    ModelConfig config_;
    EncoderParams encoder_;
    DecoderParams decoder_;
    std::vector<FilterBank> banks_;
};

/// Fan-in uniform kernel: U[-s, s] with s = 1 / sqrt(c_in * k * k).
Tensor fan_in_uniform(Shape kernel_shape, std::mt19937_64& rng);

// ---- Tape-level forward passes ------------------------------------------

struct ConvNormVars {
    Var kernel, scale, shift;
};
struct EncoderVars {
    ConvNormVars conv1, conv2, conv3;
};
struct DecoderVars {
    ConvNormVars deconv1, deconv2;
    Var out_kernel, out_bias;
};

/// Places parameters on the tape, as trainable parameters or as constants.
EncoderVars bind(Tape& tape, const EncoderParams& params, bool trainable);
DecoderVars bind(Tape& tape, const DecoderParams& params, bool trainable);

/// Named (name, Var) pairs in the same order as for_each_autoencoder_param.
std::vector<std::pair<std::string, Var>> named_vars(const EncoderVars& enc, const DecoderVars& dec);

Var encode(const EncoderVars& encoder, Var image);
Var decode(const DecoderVars& decoder, Var features);
/// Stride-1 convolution with zero padding (k-1)/2: shape preserving and linear.
Var apply_bank(Var kernel, Var features);

// ---- Inference-level operations -----------------------------------------

Tensor encode(const StyleBankModel& model, const Tensor& image);
Tensor decode(const StyleBankModel& model, const Tensor& features);
Tensor apply_bank(const FilterBank& bank, const Tensor& features);
Tensor autoencode(const StyleBankModel& model, const Tensor& image);
Tensor stylize(const StyleBankModel& model, const Tensor& image, const std::string& style);
/// Stylize with an explicit bank that need not be part of the model.
Tensor stylize_with(const StyleBankModel& model, const Tensor& image, const FilterBank& bank);

struct LinearFusion {
    FilterBank bank;
    std::vector<double> weights; ///< Normalized weights actually applied.
    bool renormalized = false;   ///< True when the supplied weights did not sum to 1.
};

/// Weighted sum of kernels. Weights must be non-negative with a positive sum;
/// they are normalized to sum to 1.
LinearFusion fuse_linear(std::span<const FilterBank> banks, std::span<const double> weights);

/// Disjoint binary masks at feature resolution, one style per mask.
struct RegionMaskSet {
    std::vector<Tensor> masks; // each [1, 1, h, w]
    std::vector<std::string> styles;

    /// Throws Error(InvalidMask) unless masks are binary, equally shaped and sum to 1 everywhere.
    void validate() const;
    std::size_t height() const;
    std::size_t width() const;

    /// Masks from a label map at feature resolution (values are region ids).
    static RegionMaskSet from_labels(const std::vector<int>& labels, std::size_t h, std::size_t w,
                                     const std::map<int, std::string>& assignment);
};

/// Reduces a label map at image resolution to feature resolution by 4x4
/// majority vote; ties go to the lowest label.
std::vector<int> reduce_labels(const std::vector<int>& labels, std::size_t h, std::size_t w,
                               std::size_t factor = 4);

Var fuse_regions(const std::vector<Var>& bank_kernels, Var features, const std::vector<Var>& masks);
Tensor fuse_regions(const StyleBankModel& model, const Tensor& features, const RegionMaskSet& masks);

} // namespace stylebank
