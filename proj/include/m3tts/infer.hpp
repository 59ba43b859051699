#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "m3tts/checkpoint.hpp"
#include "m3tts/corpus.hpp"
#include "m3tts/flow.hpp"

namespace m3tts {

struct InferResult {
    Tensor latents;               // generated region only, [L_gen x latent_dim]
    Tensor features;              // decoded through the checkpoint's path, [frames x 100]
    std::size_t gen_len = 0;
    std::size_t steps = 0;        // integrator steps
    std::size_t field_evals = 0;  // guided-field evaluations by the integrator
    std::size_t model_evals = 0;  // network evaluations (two per guided evaluation)
};

// Prompt = the given utterance; the generated length follows target_length.
// Guidance uses the fully dropped model (no speech condition, null text) as
// the unconditional branch. Throws ConfigMismatchError when `path` differs
// from the checkpoint's and DataError for tokens outside its vocab.
InferResult infer(const TrainState& ckpt, AcousticPath path, const corpus::SynthUtterance& prompt,
                  std::span<const int> target_tokens, const flow::SamplerSpec& spec, std::uint64_t seed);

} // namespace m3tts
