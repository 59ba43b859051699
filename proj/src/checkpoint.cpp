#include "m3tts/checkpoint.hpp"

#include <cmath>

#include "m3tts/binary_io.hpp"

namespace m3tts {

namespace {
constexpr char kMagic[4] = {'M', '3', 'T', 'S'};
constexpr std::uint8_t kMaxRank = 8;

void check_finite(std::span<const float> v, std::size_t offset, const char* what) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw ParseError(std::string("checkpoint: non-finite value in ") + what, offset + i * sizeof(float));
        }
    }
}
} // namespace

std::string encode_checkpoint(const TrainState& s) {
    bin::Writer w;
    w.bytes(kMagic, 4);
    w.u16(kCheckpointVersion);
    w.str(dump_config(s.config));
    const auto& entries = s.params.entries();
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, p] : entries) {
        w.str(name);
        w.u8(static_cast<std::uint8_t>(p.value.rank()));
        for (auto e : p.value.shape()) {
            w.u32(static_cast<std::uint32_t>(e));
        }
        w.f32s(p.value.data());
    }
    for (const auto& [name, p] : entries) {
        w.str(name);
        w.u64(p.step);
        w.f32s(p.m);
        w.f32s(p.v);
    }
    w.u64(s.step);
    w.str(s.rng_state);
    return w.buffer();
}

TrainState decode_checkpoint(std::string_view bytes) {
    bin::Reader r(bytes);
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
        throw ParseError("checkpoint: bad magic", 0);
    }
    const std::size_t version_at = r.offset();
    if (const auto v = r.u16("version"); v != kCheckpointVersion) {
        throw ParseError("checkpoint: unsupported version " + std::to_string(v), version_at);
    }
    TrainState s;
    const std::size_t config_at = r.offset();
    try {
        s.config = parse_config(r.str("config"));
    } catch (const ConfigError& e) {
        throw ParseError(std::string("checkpoint: embedded config rejected: ") + e.what(), config_at);
    }

    const std::uint32_t count = r.u32("parameter count");
    std::vector<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t at = r.offset();
        auto name = r.str("parameter name");
        const auto rank = r.u8("rank");
        if (rank > kMaxRank) {
            throw ParseError("checkpoint: parameter '" + name + "' has rank " + std::to_string(rank), at);
        }
        Shape shape(rank);
        for (auto& e : shape) {
            e = r.u32("extent");
        }
        const std::size_t data_at = r.offset();
        auto data = r.f32s(shape_numel(shape), "parameter data");
        check_finite(data, data_at, "parameter data");
        if (s.params.contains(name)) {
            throw ParseError("checkpoint: duplicate parameter '" + name + "'", at);
        }
        s.params.add(name, Tensor::from_data(std::move(shape), std::move(data)));
        names.push_back(std::move(name));
    }
    for (const auto& expected : names) {
        const std::size_t at = r.offset();
        if (r.str("optimizer entry name") != expected) {
            throw ParseError("checkpoint: optimizer state out of order, expected '" + expected + "'", at);
        }
        auto& p = s.params.entries().at(expected);
        p.step = r.u64("optimizer step");
        const std::size_t m_at = r.offset();
        auto m = r.f32s(p.value.numel(), "first moment");
        check_finite(m, m_at, "first moment");
        const std::size_t v_at = r.offset();
        auto v = r.f32s(p.value.numel(), "second moment");
        check_finite(v, v_at, "second moment");
        p.m = std::move(m);
        p.v = std::move(v);
    }
    s.step = r.u64("training step");
    const std::size_t rng_at = r.offset();
    s.rng_state = r.str("rng state");
    try {
        Rng probe;
        probe.set_state(s.rng_state);
    } catch (const DataError&) {
        throw ParseError("checkpoint: invalid RNG state", rng_at);
    }
    if (!r.at_end()) {
        throw ParseError("checkpoint: trailing bytes", r.offset());
    }
    return s;
}

void save_checkpoint(const std::string& path, const TrainState& s) {
    bin::write_file(path, encode_checkpoint(s));
}

TrainState load_checkpoint(const std::string& path, const RunConfig* expected) {
    auto s = decode_checkpoint(bin::read_file(path));
    if (expected && !(s.config == *expected)) {
        throw ConfigMismatchError("checkpoint '" + path + "' was written with a different configuration");
    }
    return s;
}

} // namespace m3tts
