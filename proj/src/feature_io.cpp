#include "m3tts/feature_io.hpp"

#include <cmath>

#include "m3tts/binary_io.hpp"

namespace m3tts {

namespace {
constexpr char kMagic[4] = {'M', '3', 'F', 'T'};
}

std::string encode_features(const Tensor& frames) {
    if (frames.rank() != 2) {
        throw ShapeError("feature file: expected [T x C], got " + shape_str(frames.shape()));
    }
    bin::Writer w;
    w.bytes(kMagic, 4);
    w.u8(kFeatureFileVersion);
    w.u32(static_cast<std::uint32_t>(frames.dim(0)));
    w.u32(static_cast<std::uint32_t>(frames.dim(1)));
    w.f32s(frames.data());
    return w.buffer();
}

Tensor decode_features(std::string_view bytes) {
    bin::Reader r(bytes);
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
        throw ParseError("feature file: bad magic", 0);
    }
    const std::size_t version_at = r.offset();
    if (const auto v = r.u8("version"); v != kFeatureFileVersion) {
        throw ParseError("feature file: unsupported version " + std::to_string(v), version_at);
    }
    const std::size_t frames = r.u32("frame count");
    const std::size_t channels = r.u32("channel count");
    const std::size_t data_at = r.offset();
    auto data = r.f32s(frames * channels, "payload");
    if (!r.at_end()) {
        throw ParseError("feature file: trailing bytes", r.offset());
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            throw ParseError("feature file: non-finite value", data_at + i * sizeof(float));
        }
    }
    return Tensor::from_data({frames, channels}, std::move(data));
}

void write_features(const std::string& path, const Tensor& frames) {
    bin::write_file(path, encode_features(frames));
}

Tensor read_features(const std::string& path) {
    return decode_features(bin::read_file(path));
}

} // namespace m3tts
