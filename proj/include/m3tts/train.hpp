#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "m3tts/checkpoint.hpp"
#include "m3tts/codec.hpp"
#include "m3tts/config.hpp"
#include "m3tts/corpus.hpp"
#include "m3tts/mmdit.hpp"

namespace m3tts {

// One utterance in the model's acoustic space.
struct TrainingTarget {
    Tensor latents;              // [T x latent_dim]
    std::vector<int> tokens;
    std::vector<int> alignment;  // per latent frame
};

// Codec latents (mu) on the vae path, raw features on the fbank path.
TrainingTarget make_target(const RunConfig& cfg, const ParameterStore<float>& params,
                           const corpus::SynthUtterance& utt);

struct CodecReport {
    double first_loss = 0.0;
    double last_loss = 0.0;
};

// Fits the codec.* parameters with the ELBO; model.* parameters are untouched.
CodecReport train_codec(const CodecTraining& cfg, ParameterStore<float>& params,
                        std::span<const corpus::SynthUtterance> utts, Rng& rng);

// Mean squared error of decode(mu) against the input over all frames.
double codec_reconstruction_mse(const codec::CodecConfig& cfg, const ParameterStore<float>& params,
                                std::span<const corpus::SynthUtterance> utts);

// Fresh parameters: codec (trained when the path needs it) then model.
TrainState initial_state(const RunConfig& cfg);

struct StepRecord {
    std::uint64_t step = 0;  // 1-based
    double loss = 0.0;
    double wall_ms = 0.0;        // since this run started
    double steps_per_sec = 0.0;  // over this run
};

class Trainer {
public:
    explicit Trainer(TrainState state);
    // The model keeps a reference to state().params.
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    // One optimizer step on a freshly sampled batch; returns the loss.
    double step();

    TrainState& state() { return state_; }
    const TrainState& state() const { return state_; }
    const std::vector<TrainingTarget>& targets() const { return targets_; }

private:
    TrainState state_;
    Rng rng_;
    std::vector<TrainingTarget> targets_;
    std::unique_ptr<mmdit::MMDiT<float>> model_;
};

struct TrainOptions {
    std::string out_dir;                        // metrics.csv and checkpoints; empty = none
    std::function<void(const StepRecord&)> on_log;
};

// Runs until config.train.total_steps. Non-finite losses abort with the
// step number.
TrainState run_training(TrainState state, const TrainOptions& opts);

// Whether two configurations describe the same parameters and data, so a
// checkpoint from one can resume under the other.
bool same_architecture(const RunConfig& a, const RunConfig& b);

std::string checkpoint_name(std::uint64_t step);

} // namespace m3tts
