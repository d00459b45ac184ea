#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stylebank/network.hpp"

namespace stylebank {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Accepts an optional `data:...;base64,` prefix. Throws InvalidArgument on bad input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// "a=0.3,b=0.7" -> {a: 0.3, b: 0.7}
std::map<std::string, double> parse_weight_list(std::string_view text);

/// Resolves style names and fuses their banks.
LinearFusion fuse_named(const StyleBankModel& model, const std::map<std::string, double>& weights);

struct ServiceConfig {
    std::size_t max_width = 1024;
    std::size_t max_height = 1024;
    std::uint64_t segment_seed = 0;
};

struct Response {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

int http_status(ErrorCode code) noexcept;

/// Stateless inference front end over one shared immutable model.
class Service {
public:
    explicit Service(std::shared_ptr<const StyleBankModel> model, ServiceConfig config = {});
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    Response handle(std::string_view method, std::string_view path, std::string_view body) const;

    /// Requests already running keep the model they started with.
    void swap_model(std::shared_ptr<const StyleBankModel> model);
    std::shared_ptr<const StyleBankModel> model() const;

    /// Binds and serves until stop(). Returns false if the port cannot be bound.
    bool listen(const std::string& host, int port);
    /// Binds an ephemeral port and returns it (or -1); serve with listen_bound().
    int bind_any_port(const std::string& host);
    bool listen_bound();
    void wait_until_ready() const;
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace stylebank
