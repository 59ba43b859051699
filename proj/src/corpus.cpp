#include "m3tts/corpus.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>

#include "json.hpp"

#include "m3tts/feature_io.hpp"

namespace m3tts::corpus {

namespace {
constexpr std::uint64_t kPatternStream = 0x70617474ull;
constexpr std::uint64_t kUtteranceStream = 0x75747472ull;
constexpr double kDriftPeriod = 64.0; // frames
} // namespace

void CorpusConfig::validate() const {
    if (vocab < 2) {
        throw ConfigError("corpus: vocab must be >= 2");
    }
    if (text_len_min < 1 || text_len_min > text_len_max) {
        throw ConfigError("corpus: text length range must satisfy 1 <= min <= max");
    }
    if (dur_min < 1 || dur_min > dur_max) {
        throw ConfigError("corpus: duration range must satisfy 1 <= min <= max");
    }
    if (size < 1) {
        throw ConfigError("corpus: size must be >= 1");
    }
    if (!(noise_sigma >= 0.0) || !(drift_amp >= 0.0)) {
        throw ConfigError("corpus: noise and drift must be >= 0");
    }
}

std::vector<float> token_pattern(std::uint64_t corpus_seed, int token) {
    Rng rng(mix_seed(mix_seed(corpus_seed, kPatternStream), static_cast<std::uint64_t>(token)));
    std::vector<float> p(kFeatureDim);
    for (auto& v : p) {
        v = static_cast<float>(rng.normal());
    }
    return p;
}

SynthUtterance render_utterance(const CorpusConfig& cfg, std::vector<int> tokens, std::vector<std::size_t> durations,
                                Rng& rng) {
    if (tokens.empty() || tokens.size() != durations.size()) {
        throw UsageError("render_utterance: need one duration per token and at least one token");
    }
    SynthUtterance u;
    std::size_t frames = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab) {
            throw DataError("render_utterance: token " + std::to_string(tokens[i]) + " outside vocab");
        }
        if (durations[i] == 0) {
            throw UsageError("render_utterance: durations must be >= 1");
        }
        frames += durations[i];
        u.alignment.insert(u.alignment.end(), durations[i], static_cast<int>(i));
    }
    std::vector<float> data(frames * kFeatureDim);
    std::size_t f = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto pat = token_pattern(cfg.seed, tokens[i]);
        for (std::size_t k = 0; k < durations[i]; ++k, ++f) {
            for (std::size_t c = 0; c < kFeatureDim; ++c) {
                const double phase = 2.0 * std::numbers::pi * (static_cast<double>(f) / kDriftPeriod + 0.37 * c);
                data[f * kFeatureDim + c] =
                    static_cast<float>(pat[c] + cfg.drift_amp * std::sin(phase) + cfg.noise_sigma * rng.normal());
            }
        }
    }
    u.tokens = std::move(tokens);
    u.durations = std::move(durations);
    u.features = Tensor::from_data({frames, kFeatureDim}, std::move(data));
    return u;
}

SynthUtterance synth_utterance(const CorpusConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t n = cfg.text_len_min + rng.index(cfg.text_len_max - cfg.text_len_min + 1);
    std::vector<int> tokens;
    std::vector<std::size_t> durations;
    for (std::size_t i = 0; i < n; ++i) {
        // No immediate repeats, so every frame's source token is identifiable.
        int tok;
        do {
            tok = static_cast<int>(rng.index(cfg.vocab));
        } while (!tokens.empty() && tok == tokens.back());
        tokens.push_back(tok);
        durations.push_back(cfg.dur_min + rng.index(cfg.dur_max - cfg.dur_min + 1));
    }
    return render_utterance(cfg, std::move(tokens), std::move(durations), rng);
}

SynthUtterance synth_utterance(const CorpusConfig& cfg, std::size_t index) {
    const std::uint64_t seed = mix_seed(mix_seed(cfg.seed, kUtteranceStream), index);
    Rng rng(seed);
    auto u = synth_utterance(cfg, rng);
    u.seed = seed;
    u.index = index;
    return u;
}

std::vector<SynthUtterance> generate(const CorpusConfig& cfg, std::size_t first, std::size_t count) {
    std::vector<SynthUtterance> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(synth_utterance(cfg, first + i));
    }
    return out;
}

std::size_t target_length(const LengthQuery& q, bool* clamped) {
    if (q.ref_speech == 0 || q.ref_text == 0 || q.tar_text == 0) {
        throw DomainError("target_length: all lengths must be positive");
    }
    using u128 = unsigned __int128;
    const u128 num = static_cast<u128>(q.ref_speech) * q.tar_text;
    const u128 den = q.ref_text;
    // floor(num / den + 1/2) for non-negative values.
    const u128 r = (2 * num + den) / (2 * den);
    if (r > std::numeric_limits<std::size_t>::max()) {
        throw DomainError("target_length: result overflows");
    }
    if (clamped) {
        *clamped = r == 0;
    }
    return r == 0 ? 1 : static_cast<std::size_t>(r);
}

InferenceInput build_inference_input(std::span<const int> prompt_tokens, const Tensor& prompt_latents,
                                     std::span<const int> target_tokens, std::size_t gen_len) {
    if (prompt_tokens.empty() || prompt_latents.rank() != 2 || prompt_latents.dim(0) == 0) {
        throw UsageError("build_inference_input: prompt must have tokens and at least one frame");
    }
    if (target_tokens.empty()) {
        throw UsageError("build_inference_input: target token sequence is empty");
    }
    InferenceInput in;
    in.prompt_len = prompt_latents.dim(0);
    in.gen_len = gen_len != 0 ? gen_len
                              : target_length({in.prompt_len, prompt_tokens.size(), target_tokens.size()});
    in.tokens.assign(prompt_tokens.begin(), prompt_tokens.end());
    in.tokens.insert(in.tokens.end(), target_tokens.begin(), target_tokens.end());
    const std::size_t d = prompt_latents.dim(1), total = in.prompt_len + in.gen_len;
    std::vector<float> cond(total * d, 0.0f);
    std::copy(prompt_latents.vec().begin(), prompt_latents.vec().end(), cond.begin());
    in.cond = Tensor::from_data({total, d}, std::move(cond));
    in.mask.assign(total, 1);
    std::fill_n(in.mask.begin(), in.prompt_len, 0);
    return in;
}

std::vector<int> downsample_alignment(std::span<const int> alignment) {
    std::vector<int> out;
    for (std::size_t j = 0; j < alignment.size(); j += 2) {
        out.push_back(alignment[j]);
    }
    return out;
}

std::vector<int> nearest_pattern_decode(const Tensor& frames, std::uint64_t corpus_seed, std::size_t vocab) {
    if (frames.rank() != 2 || frames.dim(1) != kFeatureDim) {
        throw ShapeError("nearest_pattern_decode: expected [T x 100], got " + shape_str(frames.shape()));
    }
    std::vector<std::vector<float>> pats;
    for (std::size_t v = 0; v < vocab; ++v) {
        pats.push_back(token_pattern(corpus_seed, static_cast<int>(v)));
    }
    std::vector<int> out;
    for (std::size_t f = 0; f < frames.dim(0); ++f) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < vocab; ++v) {
            double d = 0.0;
            for (std::size_t c = 0; c < kFeatureDim; ++c) {
                const double e = frames.at(f, c) - pats[v][c];
                d += e * e;
            }
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(v);
            }
        }
        if (out.empty() || out.back() != best) {
            out.push_back(best);
        }
    }
    return out;
}

void write_corpus(const std::string& dir, const CorpusConfig& cfg, std::span<const SynthUtterance> utts) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl", std::ios::trunc);
    if (!manifest) {
        throw DataError("cannot write manifest in '" + dir + "'");
    }
    for (const auto& u : utts) {
        char name[32];
        std::snprintf(name, sizeof(name), "utt_%06zu.m3ft", u.index);
        write_features((fs::path(dir) / name).string(), u.features);
        nlohmann::json rec = {
            {"corpus_seed", cfg.seed}, {"seed", u.seed},     {"index", u.index},
            {"tokens", u.tokens},      {"durations", u.durations}, {"T_s", u.features.dim(0)},
            {"features", name},
        };
        manifest << rec.dump() << '\n';
    }
}

std::vector<ManifestRecord> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open manifest '" + path + "'");
    }
    std::vector<ManifestRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestRecord r;
            r.seed = j.at("seed").get<std::uint64_t>();
            r.index = j.at("index").get<std::size_t>();
            r.tokens = j.at("tokens").get<std::vector<int>>();
            r.frames = j.at("T_s").get<std::size_t>();
            r.features = j.at("features").get<std::string>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

} // namespace m3tts::corpus
