#include "m3tts/codec.hpp"

#include <cmath>
#include <numeric>

namespace m3tts::codec {

void CodecConfig::validate() const {
    if (hidden == 0) {
        throw ConfigError("codec hidden width must be >= 1");
    }
    if (!(beta >= 0.0)) {
        throw ConfigError("codec beta must be >= 0");
    }
}

template <typename T>
void init_params(const CodecConfig& cfg, ParameterStore<T>& store, Rng& rng, const std::string& prefix) {
    cfg.validate();
    const std::size_t h = cfg.hidden;
    auto lin = [&](const std::string& name, std::size_t in, std::size_t out) {
        store.add(prefix + name + ".w", BasicTensor<T>::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
        store.add(prefix + name + ".b", BasicTensor<T>::zeros({out}));
    };
    lin("enc.conv", 3 * kFeatureDim, h);
    lin("enc.down", 2 * h, h);
    lin("enc.mu", h, kLatentDim);
    lin("enc.logvar", h, kLatentDim);
    lin("dec.in", kLatentDim, h);
    lin("dec.up", h, 2 * h);
    lin("dec.conv", 3 * h, h);
    lin("dec.out", h, kFeatureDim);
}

template <typename T>
Codec<T>::Codec(CodecConfig cfg, const ParameterStore<T>& store, std::string prefix)
    : cfg_(cfg), store_(store), prefix_(std::move(prefix)) {
    cfg_.validate();
    const std::size_t h = cfg_.hidden;
    const std::pair<const char*, Shape> expected[] = {
        {"enc.conv.w", {3 * kFeatureDim, h}}, {"enc.down.w", {2 * h, h}}, {"enc.mu.w", {h, kLatentDim}},
        {"enc.logvar.w", {h, kLatentDim}},    {"dec.in.w", {kLatentDim, h}}, {"dec.up.w", {h, 2 * h}},
        {"dec.conv.w", {3 * h, h}},           {"dec.out.w", {h, kFeatureDim}},
    };
    for (const auto& [name, shape] : expected) {
        if (!store_.contains(prefix_ + name)) {
            throw ConfigMismatchError("codec parameter '" + prefix_ + name + "' missing");
        }
        if (p(name).shape() != shape) {
            throw ConfigMismatchError("codec parameter '" + prefix_ + name + "' has shape " +
                                      shape_str(p(name).shape()) + ", config expects " + shape_str(shape));
        }
    }
}

template <typename T>
LatentDist<T> Codec<T>::encode(const BasicTensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != kFeatureDim) {
        throw ShapeError("vae_encode: expected [T x 100], got " + shape_str(x.shape()));
    }
    const std::size_t len = x.dim(0);
    if (len == 0) {
        throw ShapeError("vae_encode: empty sequence");
    }
    auto xp = x;
    if (len % 2 == 1) {
        std::vector<std::size_t> idx(len + 1);
        std::iota(idx.begin(), idx.end() - 1, 0);
        idx.back() = len - 1;
        xp = gather_rows(x, std::span<const std::size_t>(idx));
    }
    const std::size_t padded = xp.dim(0), h = cfg_.hidden;
    auto c = silu(linear(unfold_rows(xp, 3), p("enc.conv.w"), p("enc.conv.b")));
    auto d = silu(linear(reshape(c, {padded / 2, 2 * h}), p("enc.down.w"), p("enc.down.b")));
    LatentDist<T> out;
    out.mu = linear(d, p("enc.mu.w"), p("enc.mu.b"));
    out.logvar = linear(d, p("enc.logvar.w"), p("enc.logvar.b"));
    out.source_len = len;
    return out;
}

template <typename T>
BasicTensor<T> Codec<T>::decode(const BasicTensor<T>& z, std::size_t source_len) const {
    if (z.rank() != 2 || z.dim(1) != kLatentDim) {
        throw ShapeError("vae_decode: expected [T_lat x 40], got " + shape_str(z.shape()));
    }
    const std::size_t lat = z.dim(0), h = cfg_.hidden;
    if (source_len == 0 || latent_length(source_len) != lat) {
        throw ShapeError("vae_decode: source length " + std::to_string(source_len) + " does not match " +
                         std::to_string(lat) + " latent frames");
    }
    auto a = silu(linear(z, p("dec.in.w"), p("dec.in.b")));
    auto u = silu(reshape(linear(a, p("dec.up.w"), p("dec.up.b")), {2 * lat, h}));
    auto c = silu(linear(unfold_rows(u, 3), p("dec.conv.w"), p("dec.conv.b")));
    auto y = linear(c, p("dec.out.w"), p("dec.out.b"));
    return source_len == 2 * lat ? y : slice_rows(y, 0, source_len);
}

template <typename T>
BasicTensor<T> reparameterize(const LatentDist<T>& d, Rng& rng) {
    if (d.mu.shape() != d.logvar.shape()) {
        throw ShapeError("reparameterize: mu " + shape_str(d.mu.shape()) + " vs logvar " +
                         shape_str(d.logvar.shape()));
    }
    auto eps = BasicTensor<T>::randn(d.mu.shape(), rng);
    return add(d.mu, mul(exp(scale(d.logvar, T(0.5))), eps));
}

template <typename T>
BasicTensor<T> vae_loss(const BasicTensor<T>& x, const BasicTensor<T>& x_hat, const LatentDist<T>& d, double beta) {
    if (!(beta >= 0.0)) {
        throw DomainError("vae_loss: beta must be >= 0, got " + std::to_string(beta));
    }
    if (x.shape() != x_hat.shape() || d.mu.shape() != d.logvar.shape()) {
        throw ShapeError("vae_loss: inconsistent shapes");
    }
    auto recon = mse(x, x_hat);
    // 0.5 (mu^2 + e^logvar - 1 - logvar)
    auto kl = scale(sub(add(square(d.mu), exp(d.logvar)), add_scalar(d.logvar, T(1))), T(0.5));
    return add(recon, scale(mean(kl), static_cast<T>(beta)));
}

template void init_params(const CodecConfig&, ParameterStore<float>&, Rng&, const std::string&);
template void init_params(const CodecConfig&, ParameterStore<double>&, Rng&, const std::string&);
template class Codec<float>;
template class Codec<double>;
template BasicTensor<float> reparameterize(const LatentDist<float>&, Rng&);
template BasicTensor<double> reparameterize(const LatentDist<double>&, Rng&);
template BasicTensor<float> vae_loss(const BasicTensor<float>&, const BasicTensor<float>&, const LatentDist<float>&,
                                     double);
template BasicTensor<double> vae_loss(const BasicTensor<double>&, const BasicTensor<double>&,
                                      const LatentDist<double>&, double);

} // namespace m3tts::codec
