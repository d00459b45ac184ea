#include "stylebank/trainer.hpp"

#include <charconv>
#include <cmath>
#include <ostream>
#include <set>
#include <sstream>

#include "stylebank/checkpoint.hpp"
#include "stylebank/image.hpp"
#include "stylebank/ops.hpp"

namespace stylebank {
namespace {

std::uint64_t name_seed(const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string format_number(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return ec == std::errc{} ? std::string(buf, end) : std::string("nan");
}

double global_norm(const std::map<std::string, Tensor>& grads) {
    double acc = 0;
    for (const auto& [name, g] : grads) acc += ops::dot(g, g);
    return std::sqrt(acc);
}

Tensor center_crop(const Tensor& image, std::size_t size) {
    const auto& s = image.shape();
    require(s.h >= size && s.w >= size, ErrorCode::InvalidArgument,
            "content image " + s.str() + " is smaller than the crop size");
    const std::size_t y0 = (s.h - size) / 2, x0 = (s.w - size) / 2;
    Tensor out(Shape{1, 3, size, size});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) out.set(0, c, y, x, image.at(0, c, y0 + y, x0 + x));
    return out;
}

} // namespace

double lr_at(const LrSchedule& schedule, std::int64_t iteration) {
    require(iteration >= 0, ErrorCode::InvalidArgument, "lr_at: iteration must be non-negative");
    require(schedule.interval > 0, ErrorCode::InvalidArgument, "lr_at: decay interval must be positive");
    return schedule.initial * std::pow(schedule.decay, static_cast<double>(iteration / schedule.interval));
}

void TrainConfig::validate() const {
    require(stylizing_steps >= 1, ErrorCode::InvalidArgument, "T must be at least 1");
    require(branch_tradeoff > 0 && std::isfinite(branch_tradeoff), ErrorCode::InvalidArgument,
            "lambda must be positive");
    require(batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be at least 1");
    require(crop >= 8 && crop % 8 == 0, ErrorCode::InvalidArgument, "crop size must be a positive multiple of 8");
    require(style_long_side >= 8, ErrorCode::InvalidArgument, "style long side must be at least 8");
    require(lr.initial > 0 && lr.decay > 0 && lr.interval > 0, ErrorCode::InvalidArgument,
            "learning-rate schedule must be positive");
    weights.validate();
}

const char* to_string(Branch branch) noexcept {
    return branch == Branch::Identity ? "identity" : "stylizing";
}

Branch branch_for_iteration(std::size_t iteration, std::size_t stylizing_steps) {
    require(iteration >= 1, ErrorCode::InvalidArgument, "iterations are 1-based");
    return iteration % (stylizing_steps + 1) == 0 ? Branch::Identity : Branch::Stylizing;
}

std::string MetricsLog::format_row(const MetricsRow& r) {
    std::string ids;
    for (std::size_t i = 0; i < r.style_ids.size(); ++i) ids += (i ? ";" : "") + std::to_string(r.style_ids[i]);
    std::ostringstream out;
    out << r.iteration << ',' << to_string(r.branch) << ',' << ids << ',' << format_number(r.content) << ','
        << format_number(r.style) << ',' << format_number(r.tv) << ',' << format_number(r.identity) << ','
        << format_number(r.total) << ',' << format_number(r.lr) << ',' << format_number(r.grad_norm_k) << ','
        << format_number(r.grad_norm_i);
    return out.str();
}

void MetricsLog::write_csv(std::ostream& out) const {
    out << kHeader << '\n';
    for (const auto& r : rows_) out << format_row(r) << '\n';
}

std::string MetricsLog::to_csv() const {
    std::ostringstream out;
    write_csv(out);
    return out.str();
}

Trainer::Trainer(StyleBankModel& model, const FeatureExtractor& extractor, TrainConfig config,
                 std::vector<Tensor> content_images, std::vector<StyleSource> styles)
    : model_(model),
      extractor_(extractor),
      config_(std::move(config)),
      content_(std::move(content_images)),
      styles_(std::move(styles)),
      rng_(config_.seed) {
    config_.validate();
    require(!content_.empty(), ErrorCode::InvalidArgument, "training needs at least one content image");
    require(!styles_.empty(), ErrorCode::InvalidArgument, "training needs at least one style");
    for (const auto& img : content_) {
        const auto& s = img.shape();
        require(s.n == 1 && s.c == 3 && s.h >= config_.crop && s.w >= config_.crop, ErrorCode::InvalidArgument,
                "content image " + s.str() + " must be [1,3,h,w] with h,w >= crop");
    }
    std::set<std::string> names;
    for (auto& st : styles_) {
        require(names.insert(st.name).second, ErrorCode::DuplicateStyle, "style '" + st.name + "' listed twice");
        st.image = rescale_long_side(st.image, config_.style_long_side);
        if (!model_.has_style(st.name)) model_.add_bank(st.name, config_.seed ^ name_seed(st.name));
        bank_index_.push_back(model_.style_index(st.name));
        targets_.push_back(make_style_target(extractor_, st.image));
    }
}

Batch Trainer::sample_batch() {
    Batch batch;
    std::vector<Tensor> crops;
    std::uniform_int_distribution<std::size_t> pick_image(0, content_.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_style(0, styles_.size() - 1);
    const std::size_t crop = config_.crop;
    for (std::size_t i = 0; i < config_.batch_size; ++i) {
        const Tensor& img = content_[pick_image(rng_)];
        const auto& s = img.shape();
        std::uniform_int_distribution<std::size_t> pick_y(0, s.h - crop), pick_x(0, s.w - crop);
        const std::size_t y0 = pick_y(rng_), x0 = pick_x(rng_);
        Tensor c(Shape{1, 3, crop, crop});
        auto dst = c.data<float>();
        auto src = img.data<float>();
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = 0; y < crop; ++y)
                for (std::size_t x = 0; x < crop; ++x)
                    dst[(ch * crop + y) * crop + x] = src[(ch * s.h + y0 + y) * s.w + x0 + x];
        crops.push_back(std::move(c));
        batch.styles.push_back(pick_style(rng_));
    }
    batch.images = concat_batch(crops);
    return batch;
}

void Trainer::check_finite(double value, const char* what, std::size_t iteration, Branch branch,
                           const std::string& detail) {
    if (std::isfinite(value)) return;
    std::string message = "non-finite " + std::string(to_string(branch)) + " " + what + " at iteration " +
                          std::to_string(iteration) + " (" + detail + ")";
    if (!config_.dump_path.empty()) {
        save_model(config_.dump_path, model_);
        message += "; model state dumped to " + config_.dump_path.string();
    }
    fail(ErrorCode::Numeric, message);
}

GradientSnapshot Trainer::train_step_stylizing(const Batch& batch, std::size_t iteration, MetricsRow* row) {
    const std::size_t m = batch.images.shape().n;
    require(batch.styles.size() == m && m > 0, ErrorCode::InvalidArgument, "batch has mismatched style indices");
    for (std::size_t s : batch.styles)
        require(s < styles_.size(), ErrorCode::UnknownStyle, "style index " + std::to_string(s) + " out of range");

    Tape tape;
    const bool train_ae = !frozen_;
    const EncoderVars enc = bind(tape, model_.encoder(), train_ae);
    const DecoderVars dec = bind(tape, model_.decoder(), train_ae);
    std::map<std::size_t, Var> bank_vars;
    for (std::size_t s : batch.styles)
        if (!bank_vars.count(s)) bank_vars.emplace(s, tape.parameter(model_.bank_at(bank_index_[s]).kernel));

    const Var features = encode(enc, tape.constant(batch.images));
    Var transferred;
    if (bank_vars.size() == 1) {
        transferred = apply_bank(bank_vars.begin()->second, features);
    } else {
        std::vector<Var> parts;
        for (std::size_t i = 0; i < m; ++i)
            parts.push_back(apply_bank(bank_vars.at(batch.styles[i]), ad::batch_slice(features, i)));
        transferred = ad::concat_batch(parts);
    }
    const Var output = decode(dec, transferred);
    std::vector<const StyleTarget*> targets;
    for (std::size_t s : batch.styles) targets.push_back(&targets_[s]);
    const PerceptualTerms terms = perceptual_loss(extractor_, batch.images, targets, output, config_.weights);
    check_finite(terms.total.item(), "loss", iteration, Branch::Stylizing,
                      "L_c=" + format_number(terms.content.item()) + " L_s=" + format_number(terms.style.item()) +
                          " L_tv=" + format_number(terms.tv.item()));
    tape.backward(terms.total);

    GradientSnapshot snap;
    if (train_ae) {
        for (const auto& [name, var] : named_vars(enc, dec)) {
            const Tensor* g = var.grad();
            snap.autoencoder.emplace(name, g ? *g : Tensor(var.shape(), var.dtype()));
        }
    }
    for (const auto& [s, var] : bank_vars) {
        const Tensor* g = var.grad();
        snap.banks.emplace(styles_[s].name, g ? *g : Tensor(var.shape(), var.dtype()));
    }
    snap.autoencoder_norm = global_norm(snap.autoencoder);
    snap.bank_norm = global_norm(snap.banks);
    check_finite(snap.autoencoder_norm + snap.bank_norm, "gradient", iteration, Branch::Stylizing,
                 "||grad_K||=" + format_number(snap.autoencoder_norm) + " ||grad_bank||=" + format_number(snap.bank_norm));

    const double lr = lr_at(config_.lr, static_cast<std::int64_t>(iteration) - 1);
    if (train_ae) {
        model_.for_each_autoencoder_param(
            ParamVisitor([&](const std::string& name, Tensor& p) { adam_.step(name, p, snap.autoencoder.at(name), lr); }));
    }
    for (const auto& [name, g] : snap.banks) adam_.step("bank/" + name + "/kernel", model_.bank(name).kernel, g, lr);

    if (row) {
        row->iteration = iteration;
        row->branch = Branch::Stylizing;
        row->style_ids = batch.styles;
        row->content = terms.content.item();
        row->style = terms.style.item();
        row->tv = terms.tv.item();
        row->identity = 0;
        row->total = terms.total.item();
        row->lr = lr;
        row->grad_norm_k = snap.autoencoder_norm;
        row->grad_norm_i = 0;
    }
    return snap;
}

IdentityStepResult Trainer::train_step_identity(const Batch& batch, const GradientSnapshot& snapshot,
                                                std::size_t iteration, MetricsRow* row) {
    require(!frozen_, ErrorCode::State, "identity branch cannot run with a frozen auto-encoder");
    Tape tape;
    const EncoderVars enc = bind(tape, model_.encoder(), true);
    const DecoderVars dec = bind(tape, model_.decoder(), true);
    const Var input = tape.constant(batch.images);
    const Var output = decode(dec, encode(enc, input));
    const Var loss = identity_loss(input, output);
    IdentityStepResult result;
    result.loss = loss.item();
    check_finite(result.loss, "loss", iteration, Branch::Identity, "L_I=" + format_number(result.loss));
    tape.backward(loss);

    std::map<std::string, Tensor> grads;
    for (const auto& [name, var] : named_vars(enc, dec)) {
        const Tensor* g = var.grad();
        grads.emplace(name, g ? *g : Tensor(var.shape(), var.dtype()));
    }
    result.raw_norm = global_norm(grads);
    check_finite(result.raw_norm, "gradient", iteration, Branch::Identity, "||grad_I||=" + format_number(result.raw_norm));
    const double lr = lr_at(config_.lr, static_cast<std::int64_t>(iteration) - 1);
    if (result.raw_norm == 0.0) {
        result.skipped = true;
    } else {
        const double factor = config_.branch_tradeoff * snapshot.autoencoder_norm / result.raw_norm;
        for (auto& [name, g] : grads) g = ops::scale(g, factor);
        result.applied_norm = global_norm(grads);
        model_.for_each_autoencoder_param(
            ParamVisitor([&](const std::string& name, Tensor& p) { adam_.step(name, p, grads.at(name), lr); }));
    }
    if (row) {
        row->iteration = iteration;
        row->branch = Branch::Identity;
        row->style_ids.clear();
        row->content = row->style = row->tv = 0;
        row->identity = result.loss;
        row->total = result.loss;
        row->lr = lr;
        row->grad_norm_k = snapshot.autoencoder_norm;
        row->grad_norm_i = result.raw_norm;
        row->skipped = result.skipped;
    }
    return result;
}

MetricsLog Trainer::train() {
    MetricsLog log;
    GradientSnapshot last;
    for (std::size_t it = 1; it <= config_.iterations; ++it) {
        MetricsRow row;
        const Batch batch = sample_batch();
        if (!frozen_ && branch_for_iteration(it, config_.stylizing_steps) == Branch::Identity) {
            train_step_identity(batch, last, it, &row);
        } else {
            last = train_step_stylizing(batch, it, &row);
        }
        log.append(row);
    }
    return log;
}

StylizingEval Trainer::evaluate_style(std::size_t style) const {
    require(style < styles_.size(), ErrorCode::UnknownStyle, "style index out of range");
    StylizingEval eval;
    const FilterBank& bank = model_.bank_at(bank_index_[style]);
    for (const Tensor& img : content_) {
        const Tensor crop = center_crop(img, config_.crop);
        const Tensor out = stylize_with(model_, crop, bank);
        const FeaturePyramid out_pyr = extractor_.extract(out);
        const double c = content_loss(out_pyr, extractor_.extract(crop));
        const double s = style_loss(out_pyr, targets_[style]);
        const double t = ops::tv_loss(out);
        eval.content += c;
        eval.style += s;
        eval.tv += t;
        eval.total += config_.weights.content * c + config_.weights.style * s + config_.weights.tv * t;
    }
    const auto n = static_cast<double>(content_.size());
    eval.content /= n;
    eval.style /= n;
    eval.tv /= n;
    eval.total /= n;
    return eval;
}

StylizingEval Trainer::evaluate() const {
    StylizingEval eval;
    for (std::size_t s = 0; s < styles_.size(); ++s) {
        const StylizingEval e = evaluate_style(s);
        eval.content += e.content;
        eval.style += e.style;
        eval.tv += e.tv;
        eval.total += e.total;
    }
    const auto n = static_cast<double>(styles_.size());
    eval.content /= n;
    eval.style /= n;
    eval.tv /= n;
    eval.total /= n;
    return eval;
}

MetricsLog train(StyleBankModel& model, const FeatureExtractor& extractor, std::vector<Tensor> content_images,
                 std::vector<StyleSource> styles, const TrainConfig& config) {
    Trainer trainer(model, extractor, config, std::move(content_images), std::move(styles));
    return trainer.train();
}

IncrementalResult add_style_incremental(StyleBankModel& model, const FeatureExtractor& extractor,
                                        StyleSource style, std::vector<Tensor> content_images,
                                        const TrainConfig& config) {
    require(!model.has_style(style.name), ErrorCode::DuplicateStyle, "style '" + style.name + "' already exists");
    const std::string name = style.name;
    std::vector<StyleSource> styles;
    styles.push_back(std::move(style));
    Trainer trainer(model, extractor, config, std::move(content_images), std::move(styles));
    trainer.freeze_autoencoder(true);
    IncrementalResult result;
    result.initial_style_loss = trainer.evaluate_style(0).style;
    result.log = trainer.train();
    result.final_style_loss = trainer.evaluate_style(0).style;
    return result;
}

} // namespace stylebank
