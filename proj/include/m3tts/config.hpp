#pragma once

#include <cstdint>
#include <string>

#include "m3tts/codec.hpp"
#include "m3tts/corpus.hpp"
#include "m3tts/flow.hpp"
#include "m3tts/mmdit.hpp"
#include "m3tts/param_store.hpp"

namespace m3tts {

enum class AcousticPath { vae, fbank };

std::string to_string(AcousticPath p);
AcousticPath parse_path(const std::string& s);

struct CodecTraining {
    codec::CodecConfig codec;
    std::size_t steps = 1500;
    std::size_t batch = 8;
    double lr = 2e-3;

    bool operator==(const CodecTraining&) const = default;
};

struct TrainConfig {
    std::size_t batch_size = 16;
    std::size_t total_steps = 10000;
    AdamWConfig optim;
    flow::MaskRange mask;
    flow::MaskMode mask_mode = flow::MaskMode::contiguous;
    bool masked_loss = false;
    double cfg_drop_p = 0.2;
    std::size_t checkpoint_every = 1000; // 0 disables intermediate checkpoints
    std::size_t log_every = 1;
};

// Fixed probe used when exporting attention maps: x_t is built from the
// clean latents at time t with noise drawn from `seed`.
struct ProbeConfig {
    double t = 0.9;
    std::uint64_t seed = 7;
    double mask_ratio = 1.0; // contiguous masked span; 1 = no speech prompt
};

struct RunConfig {
    std::uint64_t seed = 0;
    AcousticPath path = AcousticPath::vae;
    mmdit::ModelConfig model; // latent_dim and text_vocab are derived, see resolve()
    corpus::CorpusConfig corpus;
    CodecTraining codec;
    TrainConfig train;
    flow::SamplerSpec sampler;
    ProbeConfig probe;

    // Sets derived fields (latent width from the path, vocab from the corpus)
    // and validates everything. Throws ConfigError.
    void resolve();

    std::size_t latent_dim() const { return path == AcousticPath::vae ? codec::kLatentDim : codec::kFeatureDim; }
};

bool operator==(const TrainConfig& a, const TrainConfig& b);
bool operator==(const ProbeConfig& a, const ProbeConfig& b);
bool operator==(const RunConfig& a, const RunConfig& b);

// Unknown keys and wrong types are rejected with ConfigError.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string dump_config(const RunConfig& cfg);

} // namespace m3tts
