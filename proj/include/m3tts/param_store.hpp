#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "m3tts/tensor.hpp"

namespace m3tts {

// Decoupled-weight-decay Adam hyperparameters.
struct AdamWConfig {
    double lr = 7.5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <typename T>
struct Parameter {
    BasicTensor<T> value;
    std::vector<T> m; // first moment
    std::vector<T> v; // second moment
    std::uint64_t step = 0;
};

// Named trainable tensors, iterated in lexicographic name order.
template <typename T>
class ParameterStore {
public:
    using Map = std::map<std::string, Parameter<T>>;

    // Registers a copy of `init` as a trainable leaf. Names must be unique.
    BasicTensor<T> add(const std::string& name, const BasicTensor<T>& init);

    const BasicTensor<T>& get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t size() const { return params_.size(); }
    std::size_t total_elements() const;

    Map& entries() { return params_; }
    const Map& entries() const { return params_; }

    // Releases gradients of every parameter whose name starts with prefix.
    void zero_grad(std::string_view prefix = {});

    // Same names and values in another precision; optimizer state is reset.
    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& [name, p] : params_) {
            std::vector<U> data(p.value.vec().begin(), p.value.vec().end());
            out.add(name, BasicTensor<U>::from_data(p.value.shape(), std::move(data)));
        }
        return out;
    }

private:
    Map params_;
};

// One AdamW update on every parameter whose name starts with `prefix`.
// Gradients are left in place; the caller resets them. Throws UsageError
// naming the first selected parameter that has no gradient.
template <typename T>
void adamw_step(ParameterStore<T>& store, const AdamWConfig& cfg, std::string_view prefix = {});

} // namespace m3tts
