#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3tts/rng.hpp"
#include "m3tts/tensor.hpp"

// Synthetic text -> feature corpus with a known monotonic alignment.
namespace m3tts::corpus {

inline constexpr std::size_t kFeatureDim = 100;

struct CorpusConfig {
    std::uint64_t seed = 1234;
    std::size_t size = 512;     // training utterances, indices [0, size)
    std::size_t held_out = 32;  // evaluation utterances, indices [size, size + held_out)
    std::size_t vocab = 32;
    std::size_t text_len_min = 4;
    std::size_t text_len_max = 16;
    std::size_t dur_min = 2;
    std::size_t dur_max = 6;
    double noise_sigma = 0.05;
    double drift_amp = 0.1;

    void validate() const;
    bool operator==(const CorpusConfig&) const = default;
};

struct SynthUtterance {
    std::uint64_t seed = 0;   // per-utterance stream seed
    std::size_t index = 0;
    std::vector<int> tokens;
    std::vector<std::size_t> durations;
    Tensor features;          // [T_s x 100]
    std::vector<int> alignment; // frame -> token index
};

// Fixed unit-variance pattern of one token, keyed by (corpus seed, token).
std::vector<float> token_pattern(std::uint64_t corpus_seed, int token);

// Frames for given tokens and durations: pattern + drift + N(0, sigma^2) noise.
SynthUtterance render_utterance(const CorpusConfig& cfg, std::vector<int> tokens,
                                std::vector<std::size_t> durations, Rng& rng);

// Draws tokens and durations from rng, then renders.
SynthUtterance synth_utterance(const CorpusConfig& cfg, Rng& rng);

// Pure function of (cfg.seed, index).
SynthUtterance synth_utterance(const CorpusConfig& cfg, std::size_t index);

std::vector<SynthUtterance> generate(const CorpusConfig& cfg, std::size_t first, std::size_t count);

struct LengthQuery {
    std::size_t ref_speech = 0;
    std::size_t ref_text = 0;
    std::size_t tar_text = 0;
};

// round(ref_speech / ref_text * tar_text), halves away from zero, computed
// in exact integer arithmetic and clamped to >= 1. `clamped` reports the
// clamp.
std::size_t target_length(const LengthQuery& q, bool* clamped = nullptr);

struct InferenceInput {
    std::vector<int> tokens;   // prompt tokens then target tokens
    Tensor cond;               // [T_p + L_gen x D]; prompt latents, zeros elsewhere
    std::vector<int> mask;     // 0 over prompt frames, 1 over generated frames
    std::size_t prompt_len = 0;
    std::size_t gen_len = 0;
};

// gen_len 0 means: take it from target_length.
InferenceInput build_inference_input(std::span<const int> prompt_tokens, const Tensor& prompt_latents,
                                     std::span<const int> target_tokens, std::size_t gen_len = 0);

// Frame -> token alignment at the codec's half rate: latent frame j covers
// feature frames 2j and 2j+1 and takes the token of frame 2j.
std::vector<int> downsample_alignment(std::span<const int> alignment);

// Nearest-pattern token per frame, consecutive repeats collapsed.
std::vector<int> nearest_pattern_decode(const Tensor& frames, std::uint64_t corpus_seed, std::size_t vocab);

// JSON-lines manifest, one utterance per line, with features in M3FT files
// next to it.
void write_corpus(const std::string& dir, const CorpusConfig& cfg, std::span<const SynthUtterance> utts);

struct ManifestRecord {
    std::uint64_t seed = 0;
    std::size_t index = 0;
    std::vector<int> tokens;
    std::size_t frames = 0;
    std::string features;
};

std::vector<ManifestRecord> read_manifest(const std::string& path);

} // namespace m3tts::corpus
