#include "stylebank/service.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <mutex>

#include <httplib.h>
#include <json.hpp>
#include <sodium.h>

#include "stylebank/analysis.hpp"
#include "stylebank/image.hpp"

namespace stylebank {

using nlohmann::json;

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    const int variant = sodium_base64_VARIANT_ORIGINAL;
    std::string out(sodium_base64_encoded_len(bytes.size(), variant), '\0');
    sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), variant);
    out.resize(out.size() - 1); // trailing NUL
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    if (text.starts_with("data:")) {
        const auto comma = text.find(',');
        require(comma != std::string_view::npos && text.substr(0, comma).ends_with(";base64"),
                ErrorCode::InvalidArgument, "malformed data URL");
        text.remove_prefix(comma + 1);
    }
    std::vector<std::uint8_t> out(text.size() / 4 * 3 + 3);
    std::size_t len = 0;
    const char* end = nullptr;
    const int rc = sodium_base642bin(out.data(), out.size(), text.data(), text.size(), "\r\n", &len, &end,
                                     sodium_base64_VARIANT_ORIGINAL);
    require(rc == 0 && end == text.data() + text.size(), ErrorCode::InvalidArgument, "invalid base64 payload");
    out.resize(len);
    return out;
}

std::map<std::string, double> parse_weight_list(std::string_view text) {
    std::map<std::string, double> out;
    while (!text.empty()) {
        const auto comma = text.find(',');
        std::string_view item = text.substr(0, comma);
        while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front()))) item.remove_prefix(1);
        while (!item.empty() && std::isspace(static_cast<unsigned char>(item.back()))) item.remove_suffix(1);
        text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
        const auto eq = item.find('=');
        require(eq != std::string_view::npos && eq > 0, ErrorCode::InvalidArgument,
                "weight entry '" + std::string(item) + "' is not name=value");
        const std::string_view num = item.substr(eq + 1);
        double w = 0;
        const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), w);
        require(ec == std::errc{} && ptr == num.data() + num.size() && std::isfinite(w), ErrorCode::InvalidArgument,
                "weight '" + std::string(num) + "' is not a number");
        require(out.emplace(std::string(item.substr(0, eq)), w).second, ErrorCode::InvalidArgument,
                "style '" + std::string(item.substr(0, eq)) + "' listed twice");
    }
    require(!out.empty(), ErrorCode::InvalidArgument, "no fusion weights given");
    return out;
}

LinearFusion fuse_named(const StyleBankModel& model, const std::map<std::string, double>& weights) {
    require(!weights.empty(), ErrorCode::InvalidArgument, "no fusion weights given");
    std::vector<FilterBank> banks;
    std::vector<double> w;
    for (const auto& [name, value] : weights) {
        banks.push_back(model.bank(name));
        w.push_back(value);
    }
    return fuse_linear(banks, w);
}

int http_status(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::UnknownStyle: return 404;
    case ErrorCode::InvalidMask: return 422;
    case ErrorCode::InvalidArgument:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::Format: return 400;
    case ErrorCode::DuplicateStyle: return 409;
    case ErrorCode::Numeric:
    case ErrorCode::State:
    case ErrorCode::Io: return 500;
    }
    return 500;
}

namespace {

struct HttpError {
    int status;
    std::string message;
};

Response json_response(int status, const json& body) { return {status, body.dump(), "application/json"}; }

Response error_response(int status, const std::string& message) {
    return json_response(status, json{{"error", message}});
}

const json& field(const json& body, const char* name) {
    if (!body.is_object() || !body.contains(name)) throw HttpError{400, std::string("missing field '") + name + "'"};
    return body.at(name);
}

std::string string_field(const json& body, const char* name) {
    const json& v = field(body, name);
    if (!v.is_string()) throw HttpError{400, std::string("field '") + name + "' must be a string"};
    return v.get<std::string>();
}

class Handler {
public:
    Handler(std::shared_ptr<const StyleBankModel> model, const ServiceConfig& config)
        : model_(std::move(model)), config_(config) {}

    Response styles() const {
        json list = json::array();
        for (const auto& b : model_->banks()) list.push_back({{"name", b.name}, {"kernel_size", b.kernel_size()}});
        return json_response(200, json{{"styles", list}});
    }

    Response stylize(const json& body) const {
        const std::string style = string_field(body, "style");
        const Tensor img = image(body);
        return image_response(stylebank::stylize(*model_, img, style));
    }

    Response fuse(const json& body) const {
        const json& w = field(body, "weights");
        if (!w.is_object() || w.empty()) throw HttpError{400, "'weights' must be a non-empty object"};
        std::map<std::string, double> weights;
        for (const auto& [name, value] : w.items()) {
            if (!value.is_number()) throw HttpError{400, "weight for '" + name + "' must be a number"};
            weights.emplace(name, value.get<double>());
        }
        const Tensor img = image(body);
        const LinearFusion fused = fuse_named(*model_, weights);
        return image_response(stylize_with(*model_, img, fused.bank));
    }

    Response segment(const json& body) const {
        const json& kv = field(body, "k");
        if (!kv.is_number_integer() || kv.get<std::int64_t>() < 1) throw HttpError{400, "'k' must be a positive integer"};
        const auto k = static_cast<std::size_t>(kv.get<std::int64_t>());
        const Tensor img = image(body);
        const Tensor features = encode(*model_, img);
        const ClusterResult r = kmeans_segment(features, k, config_.segment_seed);
        LabelMap coarse{r.width, r.height, r.labels};
        const LabelMap full = upsample_labels(coarse, img.shape().h / r.height);
        return json_response(200, json{{"labels", base64_encode(encode_label_png(full))}, {"k", k}});
    }

    Response fuse_regions(const json& body) const {
        const std::string labels_b64 = string_field(body, "labels");
        const json& a = field(body, "assignment");
        if (!a.is_object() || a.empty()) throw HttpError{400, "'assignment' must be a non-empty object"};
        std::map<int, std::string> assignment;
        for (const auto& [key, value] : a.items()) {
            int label = 0;
            const auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), label);
            if (ec != std::errc{} || ptr != key.data() + key.size() || label < 0 || label > 255)
                throw HttpError{400, "assignment key '" + key + "' is not a label in 0..255"};
            if (!value.is_string()) throw HttpError{400, "assignment for label " + key + " must be a style name"};
            assignment.emplace(label, value.get<std::string>());
        }
        for (const auto& [label, style] : assignment) model_->style_index(style);

        const Tensor img = image(body);
        LabelMap labels = decode_label_png(base64_decode(labels_b64));
        const Tensor features = encode(*model_, img);
        const auto& fs = features.shape();
        std::vector<int> reduced;
        if (labels.height == img.shape().h && labels.width == img.shape().w) {
            reduced = reduce_labels(labels.labels, labels.height, labels.width, img.shape().h / fs.h);
        } else if (labels.height == fs.h && labels.width == fs.w) {
            reduced = std::move(labels.labels);
        } else {
            throw HttpError{422, "label map is " + std::to_string(labels.width) + "x" + std::to_string(labels.height) +
                                     "; expected image or feature resolution"};
        }
        const RegionMaskSet masks = RegionMaskSet::from_labels(reduced, fs.h, fs.w, assignment);
        return image_response(decode(*model_, stylebank::fuse_regions(*model_, features, masks)));
    }

private:
    Tensor image(const json& body) const {
        const std::string b64 = string_field(body, "image");
        const ImageBuffer buf = decode_png(base64_decode(b64));
        if (buf.width > config_.max_width || buf.height > config_.max_height)
            throw HttpError{413, "image " + std::to_string(buf.width) + "x" + std::to_string(buf.height) +
                                     " exceeds the " + std::to_string(config_.max_width) + "x" +
                                     std::to_string(config_.max_height) + " cap"};
        return buf.to_tensor();
    }

    static Response image_response(const Tensor& out) {
        return json_response(200, json{{"image", base64_encode(encode_png(ImageBuffer::from_tensor(out)))}});
    }

    std::shared_ptr<const StyleBankModel> model_;
    const ServiceConfig& config_;
};

} // namespace

struct Service::Impl {
    ServiceConfig config;
    mutable std::mutex mutex;
    std::shared_ptr<const StyleBankModel> model;
    httplib::Server server;
};

Service::Service(std::shared_ptr<const StyleBankModel> model, ServiceConfig config) : impl_(std::make_unique<Impl>()) {
    require(model != nullptr, ErrorCode::InvalidArgument, "service needs a model");
    require(sodium_init() >= 0, ErrorCode::State, "libsodium failed to initialize");
    impl_->config = config;
    impl_->model = std::move(model);

    auto route = [this](const httplib::Request& req, httplib::Response& res) {
        const Response r = handle(req.method, req.path, req.body);
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    };
    impl_->server.Get("/styles", route);
    impl_->server.Get("/healthz", route);
    for (const char* p : {"/stylize", "/fuse", "/segment", "/fuse-regions"}) impl_->server.Post(p, route);
    impl_->server.set_payload_max_length(64u << 20);
}

Service::~Service() { stop(); }

void Service::swap_model(std::shared_ptr<const StyleBankModel> model) {
    require(model != nullptr, ErrorCode::InvalidArgument, "service needs a model");
    std::lock_guard lock(impl_->mutex);
    impl_->model = std::move(model);
}

std::shared_ptr<const StyleBankModel> Service::model() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->model;
}

Response Service::handle(std::string_view method, std::string_view path, std::string_view body) const {
    if (path == "/healthz" && method == "GET") return {200, "ok", "text/plain"};
    const Handler h(model(), impl_->config);
    if (path == "/styles" && method == "GET") return h.styles();

    using Endpoint = Response (Handler::*)(const json&) const;
    static const std::map<std::string_view, Endpoint> posts{
        {"/stylize", &Handler::stylize},
        {"/fuse", &Handler::fuse},
        {"/segment", &Handler::segment},
        {"/fuse-regions", &Handler::fuse_regions},
    };
    const auto it = posts.find(path);
    if (it == posts.end()) return error_response(404, "no such endpoint");
    if (method != "POST") return error_response(405, "method not allowed");

    try {
        json parsed = json::parse(body);
        if (!parsed.is_object()) return error_response(400, "request body must be a JSON object");
        return (h.*(it->second))(parsed);
    } catch (const json::exception& e) {
        return error_response(400, e.what());
    } catch (const HttpError& e) {
        return error_response(e.status, e.message);
    } catch (const Error& e) {
        return error_response(http_status(e.code()), e.what());
    }
}

bool Service::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }
int Service::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }
bool Service::listen_bound() { return impl_->server.listen_after_bind(); }
void Service::wait_until_ready() const { impl_->server.wait_until_ready(); }
void Service::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

} // namespace stylebank
