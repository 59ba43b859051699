#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "m3tts/config.hpp"
#include "m3tts/param_store.hpp"

namespace m3tts {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct TrainState {
    RunConfig config;
    ParameterStore<float> params; // codec.* and model.*, with AdamW moments
    std::uint64_t step = 0;       // completed training steps
    std::string rng_state;        // training stream
};

// Layout: "M3TS", u16 version, u32-prefixed config JSON, u32 parameter
// count, then per parameter (u32-prefixed name, u8 rank, u32 extents, f32
// data); then per parameter (u32-prefixed name, u64 optimizer step, f32 m,
// f32 v); then u64 training step and the u32-prefixed RNG state.
std::string encode_checkpoint(const TrainState& s);

// Parses fully before returning, so a corrupt file never yields partial
// state. Throws ParseError with the byte offset of the problem.
TrainState decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const TrainState& s);

// With `expected`, a differing configuration raises ConfigMismatchError.
TrainState load_checkpoint(const std::string& path, const RunConfig* expected = nullptr);

} // namespace m3tts
