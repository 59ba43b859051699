#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "m3tts/ops.hpp"
#include "m3tts/param_store.hpp"
#include "m3tts/rng.hpp"

namespace m3tts::mmdit {

// Architecture hyperparameters. Defaults are the desk-scale model; the
// published 16-layer configuration is dim 640, 8 + 8 layers, 10 heads.
struct ModelConfig {
    std::size_t dim = 64;
    std::size_t n_joint_layers = 4;
    std::size_t n_single_layers = 4;
    std::size_t n_heads = 4;
    std::size_t latent_dim = 40;
    std::size_t text_vocab = 32;
    std::size_t text_encoder_layers = 2;
    double rope_base = 10000.0;
    double ffn_mult = 4.0;
    // false: RoPE positions restart at 0 in each modality; true: text
    // positions continue after the last speech position.
    bool shared_positions = false;

    void validate() const;
    std::size_t head_dim() const { return dim / n_heads; }
    std::size_t ffn_dim() const;
    // Row of the token embedding table reserved for the dropped-text token.
    int null_token() const { return static_cast<int>(text_vocab); }

    bool operator==(const ModelConfig&) const = default;
};

// Conditioning for one utterance. c_f = broadcast(c_g) + (1 - m) * x1_proj.
template <typename T>
struct ConditioningBundle {
    double t = 0.0;
    BasicTensor<T> c_g;      // [D]
    std::vector<int> mask;   // 1 = frame to generate, 0 = given frame
    BasicTensor<T> x1_proj;  // [T_s x D]
    BasicTensor<T> c_f;      // [T_s x D]
};

// Post-softmax weights of one head of one joint layer for one utterance,
// over the concatenated [speech; text] sequence.
struct AttentionRecord {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t speech_len = 0;  // stream boundary T_s
    std::size_t text_len = 0;
    Tensor weights;              // [(T_s+T_t) x (T_s+T_t)]
};

// One utterance for model_forward. speech_cond / text_cond false reproduce
// the classifier-free-guidance drops (no x1 term in c_f / null text).
template <typename T>
struct SampleInput {
    BasicTensor<T> x_t;        // [T_s x D_lat]
    double t = 0.0;
    std::vector<int> mask;     // length T_s
    BasicTensor<T> x1;         // [T_s x D_lat] clean latents for given frames
    std::vector<int> tokens;   // length T_t
    bool speech_cond = true;
    bool text_cond = true;
};

template <typename T>
struct ForwardOutput {
    std::vector<BasicTensor<T>> velocity;               // per sample, [T_s x D_lat]
    std::vector<std::vector<AttentionRecord>> attention;  // per sample, when captured
};

// Registers every model parameter under `prefix` with the standard
// initialization: AdaLN gate outputs start at zero, so every block starts as
// the identity on its residual stream.
template <typename T>
void init_params(const ModelConfig& cfg, ParameterStore<T>& store, Rng& rng, const std::string& prefix = "model.");

// Sinusoidal features of t (frequency ladder up to period 10000, t scaled by
// 1000) used before the time MLP.
template <typename T>
BasicTensor<T> sinusoidal_features(double t, std::size_t dim);

template <typename T>
ConditioningBundle<T> build_conditioning(double t, std::span<const int> mask, const BasicTensor<T>& x1_proj,
                                         const BasicTensor<T>& c_g);

template <typename T>
class MMDiT {
public:
    MMDiT(ModelConfig cfg, const ParameterStore<T>& store, std::string prefix = "model.");

    const ModelConfig& config() const { return cfg_; }

    // c_g = Emb(t): sinusoidal features through Linear-SiLU-Linear. Shape [D].
    BasicTensor<T> time_embed(double t) const;

    // Clean latents projected to model width, [T_s x D].
    BasicTensor<T> project_condition(const BasicTensor<T>& x1) const;

    BasicTensor<T> encode_text(std::span<const int> tokens) const;

    // One Joint-DiT block on a single utterance. Output shapes equal input
    // shapes. When `capture` is non-null, one record per head is appended.
    std::pair<BasicTensor<T>, BasicTensor<T>> joint_block_forward(std::size_t layer, const BasicTensor<T>& h_a,
                                                                  const BasicTensor<T>& h_t,
                                                                  const ConditioningBundle<T>& cond,
                                                                  std::vector<AttentionRecord>* capture = nullptr) const;

    BasicTensor<T> single_block_forward(std::size_t layer, const BasicTensor<T>& h_a,
                                        const ConditioningBundle<T>& cond) const;

    // All joint blocks, then all single blocks. Returns (H^a after the
    // single blocks, H^t after the joint blocks).
    std::pair<BasicTensor<T>, BasicTensor<T>> blocks_forward(const BasicTensor<T>& h_a, const BasicTensor<T>& h_t,
                                                             const ConditioningBundle<T>& cond) const;

    // Full velocity prediction for one utterance.
    BasicTensor<T> forward(const SampleInput<T>& in, std::vector<AttentionRecord>* capture = nullptr) const;

    // Variable-length batch packed into one sequence per stream; attention is
    // block-diagonal so no utterance sees another and nothing is padded.
    ForwardOutput<T> forward_batch(std::span<const SampleInput<T>> batch, bool capture = false) const;

private:
    struct Packing;
    struct PackedCond {
        BasicTensor<T> c_g; // [B x D]
        BasicTensor<T> c_f; // [sum T_s x D]
    };

    const BasicTensor<T>& p(const std::string& name) const { return store_.get(prefix_ + name); }

    Packing make_packing(std::span<const std::size_t> speech_lens, std::span<const std::size_t> text_lens) const;
    BasicTensor<T> time_embed_rows(std::span<const double> ts) const;
    BasicTensor<T> encode_text_packed(std::span<const int> tokens, const Packing& pack) const;
    std::pair<BasicTensor<T>, BasicTensor<T>> joint_packed(std::size_t layer, const BasicTensor<T>& h_s,
                                                           const BasicTensor<T>& h_t, const PackedCond& cond,
                                                           const Packing& pack, std::vector<T>* probs) const;
    BasicTensor<T> single_packed(std::size_t layer, const BasicTensor<T>& h_s, const PackedCond& cond,
                                 const Packing& pack) const;
    BasicTensor<T> feed_forward(const std::string& name, const BasicTensor<T>& x) const;
    PackedCond single_cond(const ConditioningBundle<T>& cond) const;

    ModelConfig cfg_;
    const ParameterStore<T>& store_;
    std::string prefix_;
};

} // namespace m3tts::mmdit
