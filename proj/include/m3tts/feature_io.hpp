#pragma once

#include <string>
#include <string_view>

#include "m3tts/tensor.hpp"

// "M3FT" feature files: magic, version byte, u32 frames, u32 channels, then
// row-major little-endian float32 data.
namespace m3tts {

inline constexpr std::uint8_t kFeatureFileVersion = 1;

std::string encode_features(const Tensor& frames);
Tensor decode_features(std::string_view bytes);

void write_features(const std::string& path, const Tensor& frames);
Tensor read_features(const std::string& path);

} // namespace m3tts
