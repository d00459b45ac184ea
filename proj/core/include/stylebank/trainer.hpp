#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "stylebank/adam.hpp"
#include "stylebank/loss.hpp"
#include "stylebank/network.hpp"

namespace stylebank {

/// Step-decayed learning rate: initial * decay^floor(iteration / interval).
struct LrSchedule {
    double initial = 0.01;
    double decay = 0.8;
    std::int64_t interval = 30000;
};

double lr_at(const LrSchedule& schedule, std::int64_t iteration);

struct TrainConfig {
    std::size_t stylizing_steps = 2;  ///< T: stylizing iterations per cycle.
    double branch_tradeoff = 1.0;     ///< lambda: identity/stylizing gradient ratio.
    std::size_t batch_size = 4;       ///< m
    std::size_t iterations = 300;
    LrSchedule lr;
    std::size_t crop = 64;
    std::uint64_t seed = 1;
    LossWeights weights;
    std::size_t style_long_side = 128;
    /// Where to write the model if training hits a non-finite loss (empty: no dump).
    std::filesystem::path dump_path;

    void validate() const;
};

enum class Branch { Stylizing, Identity };
const char* to_string(Branch branch) noexcept;

/// Branch taken at 1-based iteration `iteration`: the last of every T+1 is identity.
Branch branch_for_iteration(std::size_t iteration, std::size_t stylizing_steps);

struct Batch {
    Tensor images;                 ///< [m, 3, crop, crop]
    std::vector<std::size_t> styles; ///< indices into the trainer's style list
};

struct GradientSnapshot {
    std::map<std::string, Tensor> autoencoder; ///< encoder/decoder gradients
    std::map<std::string, Tensor> banks;       ///< touched bank gradients, keyed by style name
    double autoencoder_norm = 0;               ///< ||grad_{E,D}||, global L2
    double bank_norm = 0;
};

struct MetricsRow {
    std::size_t iteration = 0;
    Branch branch = Branch::Stylizing;
    std::vector<std::size_t> style_ids;
    double content = 0;
    double style = 0;
    double tv = 0;
    double identity = 0;
    double total = 0;
    double lr = 0;
    double grad_norm_k = 0;
    double grad_norm_i = 0;
    bool skipped = false;
};

class MetricsLog {
public:
    static constexpr const char* kHeader =
        "iter,branch,style_ids,L_c,L_s,L_tv,L_I,total,lr,grad_norm_K,grad_norm_I";

    void append(const MetricsRow& row) { rows_.push_back(row); }
    const std::vector<MetricsRow>& rows() const noexcept { return rows_; }

    static std::string format_row(const MetricsRow& row);
    void write_csv(std::ostream& out) const;
    std::string to_csv() const;

private:
    std::vector<MetricsRow> rows_;
};

struct StyleSource {
    std::string name;
    Tensor image; ///< [1, 3, h, w] in [0, 1]; rescaled to the configured long side
};

struct IdentityStepResult {
    double loss = 0;
    double raw_norm = 0;     ///< ||grad^I|| before rescaling
    double applied_norm = 0; ///< norm of the gradient handed to the optimizer
    bool skipped = false;    ///< raw gradient was zero
};

/// Mean perceptual-loss components over every (content image, style) pair.
struct StylizingEval {
    double content = 0;
    double style = 0;
    double tv = 0;
    double total = 0;
};

/// Two-branch alternating training. The trainer holds exclusive mutation
/// rights over the model while it lives.
class Trainer {
public:
    Trainer(StyleBankModel& model, const FeatureExtractor& extractor, TrainConfig config,
            std::vector<Tensor> content_images, std::vector<StyleSource> styles);

    /// With a frozen auto-encoder only bank parameters are updated and the
    /// identity branch never runs.
    void freeze_autoencoder(bool frozen) noexcept { frozen_ = frozen; }

    Batch sample_batch();

    GradientSnapshot train_step_stylizing(const Batch& batch, std::size_t iteration,
                                          MetricsRow* row = nullptr);
    IdentityStepResult train_step_identity(const Batch& batch, const GradientSnapshot& snapshot,
                                           std::size_t iteration, MetricsRow* row = nullptr);

    /// Runs `config.iterations` iterations of the T+1 cycle.
    MetricsLog train();

    StylizingEval evaluate() const;
    StylizingEval evaluate_style(std::size_t style) const;

    const std::vector<StyleSource>& styles() const noexcept { return styles_; }
    const StyleTarget& style_target(std::size_t index) const { return targets_.at(index); }
    const TrainConfig& config() const noexcept { return config_; }
    const Adam& optimizer() const noexcept { return adam_; }

private:
    void check_finite(double value, const char* what, std::size_t iteration, Branch branch, const std::string& detail);

    StyleBankModel& model_;
    const FeatureExtractor& extractor_;
    TrainConfig config_;
    std::vector<Tensor> content_;
    std::vector<StyleSource> styles_;
    std::vector<StyleTarget> targets_;
    std::vector<std::size_t> bank_index_; // style list position -> model bank
    Adam adam_;
    std::mt19937_64 rng_;
    bool frozen_ = false;
};

/// Trains `model` on `content_images` with every style in `styles` (banks are
/// created for styles the model does not have yet).
MetricsLog train(StyleBankModel& model, const FeatureExtractor& extractor,
                 std::vector<Tensor> content_images, std::vector<StyleSource> styles,
                 const TrainConfig& config);

struct IncrementalResult {
    MetricsLog log;
    double initial_style_loss = 0;
    double final_style_loss = 0;
};

/// Appends one randomly initialized bank and trains only it, with the encoder
/// and decoder frozen.
IncrementalResult add_style_incremental(StyleBankModel& model, const FeatureExtractor& extractor,
                                        StyleSource style, std::vector<Tensor> content_images,
                                        const TrainConfig& config);

} // namespace stylebank
