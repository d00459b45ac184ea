#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "stylebank/tensor.hpp"

namespace stylebank {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moments and step counter for one parameter tensor.
struct AdamState {
    Tensor m;
    Tensor v;
    std::uint64_t step = 0;
};

/// Bias-corrected Adam. State is keyed by parameter name so parameters that
/// receive no gradient in an iteration keep their moments and counters as is.
class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    /// Applies one update to `param` in place. Rejects non-finite gradients.
    void step(const std::string& name, Tensor& param, const Tensor& grad, double lr);

    const AdamState* state(const std::string& name) const;
    const AdamConfig& config() const noexcept { return config_; }

private:
    AdamConfig config_;
    std::map<std::string, AdamState> states_;
};

} // namespace stylebank
