#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m3tts/checkpoint.hpp"
#include "m3tts/corpus.hpp"

namespace m3tts {

struct AlignmentScore {
    double monotonic_fraction = 1.0; // adjacent row pairs with non-decreasing argmax
    bool undefined = false;          // path shorter than 2
    // Filled when a ground-truth alignment is supplied.
    std::optional<double> diagonal_deviation; // mean |argmax - truth| in tokens
    std::optional<double> agreement;          // fraction of rows with argmax == truth
};

AlignmentScore monotonicity_score(std::span<const int> path, std::span<const int> truth = {});

// Speech -> text block of one joint layer: rows are speech frames, columns
// text tokens, each row renormalized to sum 1.
struct AttentionMap {
    std::size_t layer = 0;
    std::optional<std::size_t> head; // empty: mean over heads
    Tensor weights;                  // [T_s x T_t]
    std::vector<int> argmax;         // per row
};

// Runs the model once on the configured probe input (x_t at probe.t, fixed
// noise, probe.mask_ratio masked) and slices every selected joint layer.
// Selecting a layer past the joint stack is rejected: single blocks carry no
// text stream.
std::vector<AttentionMap> extract_attention(const TrainState& ckpt, const corpus::SynthUtterance& sample,
                                            std::optional<std::size_t> layer = {},
                                            std::optional<std::size_t> head = {});

// 8-bit binary PGM, each row scaled to its maximum.
std::string encode_pgm(const Tensor& weights);

// attn_layer<L>[_head<H>].pgm and argmax_layer<L>[_head<H>].csv (row,argmax,truth).
void write_attention(const std::string& dir, std::span<const AttentionMap> maps, std::span<const int> truth = {});

struct ArgmaxCsv {
    std::vector<int> argmax;
    std::vector<int> truth; // empty when the file has no truth column values
};

ArgmaxCsv read_argmax_csv(const std::string& path);

struct LayerAlignment {
    std::size_t layer = 0;
    double monotonic = 0.0; // mean over samples
    double agreement = 0.0;
};

struct AlignmentEval {
    std::vector<LayerAlignment> layers;
    std::size_t best = 0; // index into layers, highest agreement
};

// Head-averaged maps of every joint layer, scored against the corpus alignment.
AlignmentEval evaluate_alignment(const TrainState& ckpt, std::span<const corpus::SynthUtterance> samples);

} // namespace m3tts
