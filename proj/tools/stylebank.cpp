#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stylebank/analysis.hpp"
#include "stylebank/checkpoint.hpp"
#include "stylebank/image.hpp"
#include "stylebank/service.hpp"
#include "stylebank/trainer.hpp"

namespace fs = std::filesystem;
using namespace stylebank;

namespace {

std::vector<fs::path> expand_pngs(const std::vector<std::string>& inputs) {
    std::vector<fs::path> out;
    for (const auto& in : inputs) {
        if (!fs::is_directory(in)) {
            out.emplace_back(in);
            continue;
        }
        std::vector<fs::path> found;
        for (const auto& e : fs::directory_iterator(in))
            if (e.is_regular_file() && e.path().extension() == ".png") found.push_back(e.path());
        std::sort(found.begin(), found.end());
        out.insert(out.end(), found.begin(), found.end());
    }
    require(!out.empty(), ErrorCode::InvalidArgument, "no input images found");
    return out;
}

std::vector<Tensor> load_images(const std::vector<std::string>& inputs) {
    std::vector<Tensor> images;
    for (const auto& p : expand_pngs(inputs)) images.push_back(load_png(p).to_tensor());
    return images;
}

// "name=path"
StyleSource parse_style(const std::string& arg) {
    const auto eq = arg.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::InvalidArgument,
            "style '" + arg + "' must be name=path.png");
    return {arg.substr(0, eq), load_png(arg.substr(eq + 1)).to_tensor()};
}

FeatureExtractor extractor_from(const std::string& path) {
    return path.empty() ? FeatureExtractor::random() : load_extractor(path);
}

void write_text(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct TrainFlags {
    std::size_t iterations = 300;
    std::size_t batch = 4;
    std::size_t crop = 64;
    std::size_t stylizing_steps = 2;
    double lambda = 1.0;
    double lr = 0.01;
    std::uint64_t seed = 1;
    double alpha = 1.0, beta = 50.0, gamma = 1e-5;
    std::string metrics;
    std::string extractor;

    void add(CLI::App* app) {
        app->add_option("--iters", iterations, "Training iterations")->check(CLI::PositiveNumber);
        app->add_option("--batch", batch, "Batch size m")->check(CLI::PositiveNumber);
        app->add_option("--crop", crop, "Content crop size (multiple of 8)");
        app->add_option("--T", stylizing_steps, "Stylizing steps per cycle")->check(CLI::PositiveNumber);
        app->add_option("--lambda", lambda, "Identity/stylizing gradient ratio");
        app->add_option("--lr", lr, "Initial learning rate");
        app->add_option("--seed", seed, "Random seed");
        app->add_option("--alpha", alpha, "Content weight");
        app->add_option("--beta", beta, "Style weight");
        app->add_option("--gamma", gamma, "Total-variation weight");
        app->add_option("--metrics", metrics, "Write the metrics CSV here");
        app->add_option("--extractor", extractor, "Extractor weight file (default: built-in random stack)");
    }

    TrainConfig config(const fs::path& dump) const {
        TrainConfig c;
        c.iterations = iterations;
        c.batch_size = batch;
        c.crop = crop;
        c.stylizing_steps = stylizing_steps;
        c.branch_tradeoff = lambda;
        c.lr.initial = lr;
        c.seed = seed;
        c.weights = {alpha, beta, gamma};
        c.dump_path = dump;
        return c;
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"StyleBank style transfer: training, inference, analysis and HTTP service"};
    app.require_subcommand(1);
    std::string model_path;
    auto add_model = [&](CLI::App* sub) {
        return sub->add_option("--model", model_path, "Model checkpoint")->envname("STYLEBANK_MODEL");
    };

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a model from content images and styles");
    std::vector<std::string> content, styles;
    std::string out_path;
    std::size_t channels = 128, bank_kernel = 3;
    TrainFlags train_flags;
    train_cmd->add_option("--content", content, "Content PNGs or directories")->required();
    train_cmd->add_option("--style", styles, "Style as name=path.png (repeatable)")->required();
    train_cmd->add_option("--out", out_path, "Output checkpoint")->required();
    train_cmd->add_option("--channels", channels, "C_max")->check(CLI::IsMember({32, 64, 128}));
    train_cmd->add_option("--bank-kernel", bank_kernel, "StyleBank kernel size")->check(CLI::IsMember({3, 5, 7}));
    train_flags.add(train_cmd);

    // add-style
    auto* add_cmd = app.add_subcommand("add-style", "Train one new bank with the auto-encoder frozen");
    std::string style_name, style_image;
    add_model(add_cmd)->required();
    add_cmd->add_option("--name", style_name, "New style name")->required();
    add_cmd->add_option("--style-image", style_image, "Style PNG")->required()->check(CLI::ExistingFile);
    add_cmd->add_option("--content", content, "Content PNGs or directories")->required();
    add_cmd->add_option("--out", out_path, "Output checkpoint (default: overwrite --model)");
    TrainFlags add_flags;
    add_flags.iterations = 200;
    add_flags.add(add_cmd);

    // stylize
    auto* stylize_cmd = app.add_subcommand("stylize", "Apply one style to an image");
    std::string style, in_path;
    add_model(stylize_cmd)->required();
    stylize_cmd->add_option("--style", style, "Style name")->required();
    stylize_cmd->add_option("--in", in_path, "Input PNG")->required()->check(CLI::ExistingFile);
    stylize_cmd->add_option("--out", out_path, "Output PNG")->required();

    // fuse
    auto* fuse_cmd = app.add_subcommand("fuse", "Linear fusion of several styles");
    std::string weights;
    add_model(fuse_cmd)->required();
    fuse_cmd->add_option("--weights", weights, "name=w,name=w,...")->required();
    fuse_cmd->add_option("--in", in_path, "Input PNG")->required()->check(CLI::ExistingFile);
    fuse_cmd->add_option("--out", out_path, "Output PNG")->required();

    // segment
    auto* segment_cmd = app.add_subcommand("segment", "K-means segmentation of encoder features");
    std::size_t k = 4;
    std::uint64_t segment_seed = 0;
    add_model(segment_cmd)->required();
    segment_cmd->add_option("--in", in_path, "Input PNG")->required()->check(CLI::ExistingFile);
    segment_cmd->add_option("--k", k, "Cluster count")->check(CLI::PositiveNumber);
    segment_cmd->add_option("--seed", segment_seed, "Seed of the first restart");
    segment_cmd->add_option("--out", out_path, "Label map PNG (image resolution)")->required();

    // analyze
    auto* analyze_cmd = app.add_subcommand("analyze", "Channel sparsity statistics and style elements");
    std::vector<std::string> analyze_inputs;
    std::string sparsity_csv, element_out, element_labels;
    int element_label = 0;
    double threshold = -1;
    add_model(analyze_cmd)->required();
    analyze_cmd->add_option("--in", analyze_inputs, "Input PNGs or directories")->required();
    analyze_cmd->add_option("--sparsity", sparsity_csv, "Write channel,mean,stddev CSV here");
    analyze_cmd->add_option("--style", style, "Style for --element");
    analyze_cmd->add_option("--element", element_out, "Write a style-element reconstruction of the first image");
    analyze_cmd->add_option("--labels", element_labels, "Label PNG selecting the element region (default: whole image)");
    analyze_cmd->add_option("--label", element_label, "Label value of the region");
    analyze_cmd->add_option("--threshold", threshold, "Channel threshold (default: 1e-3 of the max response)");

    // serve
    auto* serve_cmd = app.add_subcommand("serve", "HTTP inference service");
    int port = 8787;
    std::string host = "127.0.0.1";
    std::size_t max_side = 1024;
    add_model(serve_cmd)->required();
    serve_cmd->add_option("--port", port, "Listen port")->check(CLI::Range(1, 65535));
    serve_cmd->add_option("--host", host, "Listen address");
    serve_cmd->add_option("--max-size", max_side, "Largest accepted width/height")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*train_cmd) {
            ModelConfig mc{channels, bank_kernel};
            StyleBankModel model = StyleBankModel::create(mc, train_flags.seed);
            std::vector<StyleSource> sources;
            for (const auto& s : styles) sources.push_back(parse_style(s));
            const FeatureExtractor extractor = extractor_from(train_flags.extractor);
            const MetricsLog log = train(model, extractor, load_images(content), std::move(sources),
                                         train_flags.config(fs::path(out_path).concat(".nan-dump")));
            save_model(out_path, model);
            if (!train_flags.metrics.empty()) write_text(train_flags.metrics, log.to_csv());
            std::cout << "trained " << log.rows().size() << " iterations, styles:";
            for (const auto& n : model.style_names()) std::cout << ' ' << n;
            std::cout << '\n';
        } else if (*add_cmd) {
            StyleBankModel model = load_model(model_path);
            const FeatureExtractor extractor = extractor_from(add_flags.extractor);
            const std::uint64_t before = model.autoencoder_hash();
            const fs::path target = out_path.empty() ? fs::path(model_path) : fs::path(out_path);
            const IncrementalResult r =
                add_style_incremental(model, extractor, {style_name, load_png(style_image).to_tensor()},
                                      load_images(content), add_flags.config(fs::path(target).concat(".nan-dump")));
            require(model.autoencoder_hash() == before, ErrorCode::State, "auto-encoder changed during add-style");
            save_model(target, model);
            if (!add_flags.metrics.empty()) write_text(add_flags.metrics, r.log.to_csv());
            std::printf("added %s: style loss %.6g -> %.6g, autoencoder hash %016llx\n", style_name.c_str(),
                        r.initial_style_loss, r.final_style_loss, static_cast<unsigned long long>(before));
        } else if (*stylize_cmd) {
            const StyleBankModel model = load_model(model_path);
            const Tensor out = stylize(model, load_png(in_path).to_tensor(), style);
            save_png(out_path, ImageBuffer::from_tensor(out));
        } else if (*fuse_cmd) {
            const StyleBankModel model = load_model(model_path);
            const LinearFusion fused = fuse_named(model, parse_weight_list(weights));
            std::cerr << "fusion weights" << (fused.renormalized ? " (normalized)" : "") << ":";
            const auto names = parse_weight_list(weights);
            std::size_t i = 0;
            for (const auto& [name, w] : names) std::cerr << ' ' << name << '=' << fused.weights[i++];
            std::cerr << '\n';
            const Tensor out = stylize_with(model, load_png(in_path).to_tensor(), fused.bank);
            save_png(out_path, ImageBuffer::from_tensor(out));
        } else if (*segment_cmd) {
            const StyleBankModel model = load_model(model_path);
            const Tensor img = load_png(in_path).to_tensor();
            const ClusterResult r = kmeans_segment(encode(model, img), k, segment_seed);
            const LabelMap full = upsample_labels({r.width, r.height, r.labels}, img.shape().h / r.height);
            const auto png = encode_label_png(full);
            write_file_atomic(out_path, png);
            std::printf("k=%zu inertia=%.6g rounds=%zu\n", k, r.inertia, r.rounds);
        } else if (*analyze_cmd) {
            const StyleBankModel model = load_model(model_path);
            const std::vector<Tensor> images = load_images(analyze_inputs);
            require(!sparsity_csv.empty() || !element_out.empty(), ErrorCode::InvalidArgument,
                    "analyze needs --sparsity and/or --element");
            if (!sparsity_csv.empty()) {
                std::ostringstream csv;
                sparsity_stats(model, images).write_csv(csv);
                write_text(sparsity_csv, csv.str());
            }
            if (!element_out.empty()) {
                require(!style.empty(), ErrorCode::InvalidArgument, "--element needs --style");
                const Tensor features = encode(model, images.front());
                const auto& s = features.shape();
                Tensor mask = Tensor::full(Shape{1, 1, s.h, s.w}, 1.0);
                if (!element_labels.empty()) {
                    const LabelMap labels = decode_label_png(read_file(element_labels));
                    std::vector<int> reduced = labels.labels;
                    if (labels.height != s.h || labels.width != s.w)
                        reduced = reduce_labels(labels.labels, labels.height, labels.width, labels.height / s.h);
                    require(reduced.size() == s.plane(), ErrorCode::InvalidMask, "label map does not match the image");
                    for (std::size_t i = 0; i < reduced.size(); ++i)
                        mask.set_flat(i, reduced[i] == element_label ? 1.0 : 0.0);
                }
                const double t = threshold >= 0 ? threshold : default_channel_threshold(features, mask);
                save_png(element_out, ImageBuffer::from_tensor(reconstruct_style_element(model, features, style, mask, t)));
            }
        } else if (*serve_cmd) {
            Service service(std::make_shared<const StyleBankModel>(load_model(model_path)),
                            ServiceConfig{max_side, max_side, 0});
            std::cerr << "serving " << model_path << " on " << host << ':' << port << '\n';
            if (!service.listen(host, port)) {
                std::cerr << "error: cannot listen on " << host << ':' << port << '\n';
                return 1;
            }
        }
    } catch (const Error& e) {
        std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
