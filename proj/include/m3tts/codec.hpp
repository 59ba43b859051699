#pragma once

#include <cstddef>
#include <string>

#include "m3tts/ops.hpp"
#include "m3tts/param_store.hpp"
#include "m3tts/rng.hpp"

// Toy variational codec: 2x temporal and 100 -> 40 channel compression.
namespace m3tts::codec {

inline constexpr std::size_t kFeatureDim = 100;
inline constexpr std::size_t kLatentDim = 40;

struct CodecConfig {
    std::size_t hidden = 64;
    double beta = 1e-2;

    void validate() const;
    bool operator==(const CodecConfig&) const = default;
};

template <typename T>
struct LatentDist {
    BasicTensor<T> mu;     // [ceil(T/2) x 40]
    BasicTensor<T> logvar; // [ceil(T/2) x 40]
    std::size_t source_len = 0;
};

template <typename T>
void init_params(const CodecConfig& cfg, ParameterStore<T>& store, Rng& rng, const std::string& prefix = "codec.");

inline std::size_t latent_length(std::size_t frames) { return (frames + 1) / 2; }

// Encoder: k=3 conv -> stride-2 conv -> mu / logvar heads. Decoder: 40 -> hidden,
// stride-2 transposed conv, k=3 conv, projection to 100 channels.
template <typename T>
class Codec {
public:
    Codec(CodecConfig cfg, const ParameterStore<T>& store, std::string prefix = "codec.");

    LatentDist<T> encode(const BasicTensor<T>& x) const;
    BasicTensor<T> decode(const BasicTensor<T>& z, std::size_t source_len) const;

private:
    const BasicTensor<T>& p(const std::string& name) const { return store_.get(prefix_ + name); }

    CodecConfig cfg_;
    const ParameterStore<T>& store_;
    std::string prefix_;
};

// z = mu + exp(logvar / 2) * eps, eps ~ N(0, 1).
template <typename T>
BasicTensor<T> reparameterize(const LatentDist<T>& d, Rng& rng);

// mean((x - x_hat)^2) + beta * mean(0.5 (mu^2 + exp(logvar) - 1 - logvar)).
template <typename T>
BasicTensor<T> vae_loss(const BasicTensor<T>& x, const BasicTensor<T>& x_hat, const LatentDist<T>& d, double beta);

// Identity adapter for the uncompressed target.
template <typename T>
BasicTensor<T> fbank_path(const BasicTensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) != kFeatureDim) {
        throw ShapeError("fbank_path: expected [T x 100], got " + shape_str(x.shape()));
    }
    return x;
}

} // namespace m3tts::codec
