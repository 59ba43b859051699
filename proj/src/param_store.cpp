#include "m3tts/param_store.hpp"

#include <cmath>

namespace m3tts {

template <typename T>
BasicTensor<T> ParameterStore<T>::add(const std::string& name, const BasicTensor<T>& init) {
    if (params_.count(name)) {
        throw UsageError("duplicate parameter name '" + name + "'");
    }
    Parameter<T> p;
    p.value = init.detach(true);
    p.m.assign(p.value.numel(), T(0));
    p.v.assign(p.value.numel(), T(0));
    auto it = params_.emplace(name, std::move(p)).first;
    return it->second.value;
}

template <typename T>
const BasicTensor<T>& ParameterStore<T>::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw UsageError("unknown parameter '" + name + "'");
    }
    return it->second.value;
}

template <typename T>
std::size_t ParameterStore<T>::total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) {
        n += p.value.numel();
    }
    return n;
}

template <typename T>
void ParameterStore<T>::zero_grad(std::string_view prefix) {
    for (auto& [name, p] : params_) {
        if (name.starts_with(prefix)) {
            p.value.zero_grad();
        }
    }
}

template <typename T>
void adamw_step(ParameterStore<T>& store, const AdamWConfig& cfg, std::string_view prefix) {
    for (auto& [name, p] : store.entries()) {
        if (name.starts_with(prefix) && !p.value.has_grad()) {
            throw UsageError("adamw_step: parameter '" + name + "' has no gradient");
        }
    }
    for (auto& [name, p] : store.entries()) {
        if (!name.starts_with(prefix)) {
            continue;
        }
        p.step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
        auto w = p.value.mutable_data();
        auto g = p.value.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            const double m = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
            const double v = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
            p.m[i] = static_cast<T>(m);
            p.v[i] = static_cast<T>(v);
            double wi = static_cast<double>(w[i]) * (1.0 - cfg.lr * cfg.weight_decay);
            wi -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
            w[i] = static_cast<T>(wi);
        }
    }
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template void adamw_step(ParameterStore<float>&, const AdamWConfig&, std::string_view);
template void adamw_step(ParameterStore<double>&, const AdamWConfig&, std::string_view);

} // namespace m3tts
