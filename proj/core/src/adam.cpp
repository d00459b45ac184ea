#include "stylebank/adam.hpp"

#include <cmath>

namespace stylebank {

void Adam::step(const std::string& name, Tensor& param, const Tensor& grad, double lr) {
    require(grad.shape() == param.shape() && grad.dtype() == param.dtype(),
            ErrorCode::ShapeMismatch, "adam: gradient for '" + name + "' does not match parameter");
    require(grad.all_finite(), ErrorCode::Numeric, "adam: non-finite gradient for '" + name + "'");
    auto [it, inserted] = states_.try_emplace(name);
    AdamState& st = it->second;
    if (inserted) {
        st.m = Tensor(param.shape(), param.dtype());
        st.v = Tensor(param.shape(), param.dtype());
    }
    require(st.m.shape() == param.shape(), ErrorCode::ShapeMismatch,
            "adam: state for '" + name + "' has stale dims");
    st.step += 1;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    dispatch(param.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto p = param.data<T>();
        auto g = grad.data<T>();
        auto m = st.m.data<T>();
        auto v = st.v.data<T>();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double mi = b1 * m[i] + (1.0 - b1) * gi;
            const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / c1;
            const double vhat = vi / c2;
            p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
    });
}

const AdamState* Adam::state(const std::string& name) const {
    auto it = states_.find(name);
    return it == states_.end() ? nullptr : &it->second;
}

} // namespace stylebank
