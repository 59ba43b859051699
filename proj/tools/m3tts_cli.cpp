// Command-line driver: corpus generation, training, sampling, attention
// export, alignment scoring, benchmarking and checkpoint inspection.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "m3tts/alignment.hpp"
#include "m3tts/bench.hpp"
#include "m3tts/binary_io.hpp"
#include "m3tts/checkpoint.hpp"
#include "m3tts/feature_io.hpp"
#include "m3tts/infer.hpp"
#include "m3tts/train.hpp"

namespace fs = std::filesystem;
using namespace m3tts;

namespace {

std::vector<int> parse_tokens(const std::string& s) {
    std::istringstream is(s);
    std::vector<int> out;
    std::string word;
    while (is >> word) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(word, &used));
            if (used != word.size()) {
                throw std::invalid_argument(word);
            }
        } catch (const std::exception&) {
            throw UsageError("--target-tokens: '" + word + "' is not an integer");
        }
    }
    if (out.empty()) {
        throw UsageError("--target-tokens: no tokens given");
    }
    return out;
}

int cmd_gen_corpus(const std::string& config, const std::string& out) {
    const auto cfg = load_config(config);
    const auto utts = corpus::generate(cfg.corpus, 0, cfg.corpus.size + cfg.corpus.held_out);
    corpus::write_corpus(out, cfg.corpus, utts);
    std::printf("wrote %zu utterances (%zu train, %zu held out) to %s\n", utts.size(), cfg.corpus.size,
                cfg.corpus.held_out, out.c_str());
    return 0;
}

int cmd_train(const std::string& config, const std::string& out, const std::string& resume) {
    const auto cfg = load_config(config);
    TrainState state;
    if (resume.empty()) {
        state = initial_state(cfg);
    } else {
        state = load_checkpoint(resume);
        if (!same_architecture(state.config, cfg)) {
            throw ConfigMismatchError("checkpoint '" + resume + "' does not match the model/data/codec settings of " +
                                      config);
        }
        state.config = cfg;
    }
    TrainOptions opts;
    opts.out_dir = out;
    const std::size_t every = std::max<std::size_t>(1, cfg.train.total_steps / 20);
    opts.on_log = [every](const StepRecord& r) {
        if (r.step % every == 0) {
            std::printf("step %llu loss %.6f (%.1f steps/s)\n", static_cast<unsigned long long>(r.step), r.loss,
                        r.steps_per_sec);
            std::fflush(stdout);
        }
    };
    const auto final_state = run_training(std::move(state), opts);
    std::printf("finished at step %llu; checkpoint %s\n", static_cast<unsigned long long>(final_state.step),
                (fs::path(out) / "final.m3ts").c_str());
    return 0;
}

int cmd_sample(const std::string& ckpt_path, std::size_t prompt_index, const std::string& tokens, std::size_t nfe,
               double cfg_scale, const std::string& method, std::uint64_t seed, const std::string& out) {
    const auto ckpt = load_checkpoint(ckpt_path);
    flow::SamplerSpec spec;
    spec.nfe = nfe;
    spec.cfg_scale = cfg_scale;
    spec.method = flow::parse_method(method);
    const auto prompt = corpus::synth_utterance(ckpt.config.corpus, prompt_index);
    const auto target = parse_tokens(tokens);
    const auto res = infer(ckpt, ckpt.config.path, prompt, target, spec, seed);
    fs::create_directories(out);
    write_features((fs::path(out) / "latents.m3ft").string(), res.latents);
    write_features((fs::path(out) / "features.m3ft").string(), res.features);
    const auto decoded = corpus::nearest_pattern_decode(res.features, ckpt.config.corpus.seed, ckpt.config.corpus.vocab);
    nlohmann::json summary = {
        {"prompt_index", prompt_index},     {"target_tokens", target},   {"gen_len", res.gen_len},
        {"integrator_steps", res.steps},    {"field_evals", res.field_evals}, {"model_evals", res.model_evals},
        {"nearest_pattern_tokens", decoded},
    };
    std::ofstream(fs::path(out) / "summary.json") << summary.dump(2) << '\n';
    std::printf("generated %zu latent frames (%zu steps, %zu model evaluations)\n", res.gen_len, res.steps,
                res.model_evals);
    return 0;
}

int cmd_attn(const std::string& ckpt_path, std::size_t index, const std::string& out, std::optional<std::size_t> layer,
             std::optional<std::size_t> head) {
    const auto ckpt = load_checkpoint(ckpt_path);
    const auto sample = corpus::synth_utterance(ckpt.config.corpus, index);
    const auto maps = extract_attention(ckpt, sample, layer, head);
    const auto truth = ckpt.config.path == AcousticPath::vae ? corpus::downsample_alignment(sample.alignment)
                                                             : sample.alignment;
    write_attention(out, maps, truth);
    for (const auto& m : maps) {
        const auto s = monotonicity_score(m.argmax, truth);
        std::printf("layer %zu: %zux%zu monotonic %.4f agreement %.4f deviation %.4f\n", m.layer, m.weights.dim(0),
                    m.weights.dim(1), s.monotonic_fraction, *s.agreement, *s.diagonal_deviation);
    }
    return 0;
}

int cmd_score_align(const std::string& csv) {
    const auto data = read_argmax_csv(csv);
    const auto s = monotonicity_score(data.argmax, data.truth);
    std::printf("monotonic_fraction %.6f%s\n", s.monotonic_fraction, s.undefined ? " (undefined: fewer than 2 rows)" : "");
    if (s.agreement) {
        std::printf("agreement %.6f\ndiagonal_deviation %.6f\n", *s.agreement, *s.diagonal_deviation);
    }
    return 0;
}

int cmd_bench(const std::string& config, std::size_t steps, std::size_t warmup, const std::string& out) {
    const auto cfg = load_config(config);
    const AcousticPath variants[] = {AcousticPath::vae, AcousticPath::fbank};
    const auto report = bench_throughput(cfg, variants, steps, warmup);
    fs::create_directories(out);
    write_bench_csv((fs::path(out) / "bench.csv").string(), report);
    for (const auto& v : report.variants) {
        std::printf("%-5s %zu steps in %.3f s: %.3f steps/s\n", to_string(v.path).c_str(), v.timed_steps, v.elapsed_s,
                    v.steps_per_sec);
    }
    std::printf("vae/fbank speedup %.3f\n", report.ratio);
    return 0;
}

int cmd_ckpt_info(const std::string& path) {
    const auto s = load_checkpoint(path);
    std::printf("format version %u\npath %s\ntraining step %llu\nparameters %zu tensors, %zu elements\nconfig:\n%s\n",
                static_cast<unsigned>(kCheckpointVersion), to_string(s.config.path).c_str(),
                static_cast<unsigned long long>(s.step), s.params.size(), s.params.total_elements(),
                dump_config(s.config).c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint text-speech diffusion transformer toolkit"};
    app.require_subcommand(1);

    std::string config, out, resume, ckpt, tokens, method = "euler", csv;
    std::size_t index = 0, nfe = 32, steps = 0, warmup = 0;
    std::uint64_t seed = 0;
    double cfg_scale = 2.0;
    std::optional<std::size_t> layer, head;

    auto* gen = app.add_subcommand("gen-corpus", "Write the synthetic corpus");
    gen->add_option("--config", config)->required();
    gen->add_option("--out", out)->required();

    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", config)->required();
    train->add_option("--out", out)->required();
    train->add_option("--resume", resume, "Checkpoint to continue from");

    auto* sample = app.add_subcommand("sample", "Generate speech latents for target tokens");
    sample->add_option("--ckpt", ckpt)->required();
    sample->add_option("--prompt-index", index)->required();
    sample->add_option("--target-tokens", tokens)->required();
    sample->add_option("--nfe", nfe);
    sample->add_option("--cfg", cfg_scale);
    sample->add_option("--method", method)->check(CLI::IsMember({"euler", "midpoint"}));
    sample->add_option("--seed", seed);
    sample->add_option("--out", out)->required();

    auto* attn = app.add_subcommand("attn", "Export speech-to-text attention maps");
    attn->add_option("--ckpt", ckpt)->required();
    attn->add_option("--sample-index", index)->required();
    attn->add_option("--out", out)->required();
    attn->add_option("--layer", layer);
    attn->add_option("--head", head);

    auto* score = app.add_subcommand("score-align", "Score an argmax path");
    score->add_option("--argmax-csv", csv)->required();

    auto* bench = app.add_subcommand("bench", "Compare vae and fbank training throughput");
    bench->add_option("--config", config)->required();
    bench->add_option("--steps", steps)->required();
    bench->add_option("--warmup", warmup)->required();
    bench->add_option("--out", out)->required();

    auto* info = app.add_subcommand("ckpt-info", "Describe a checkpoint");
    info->add_option("file", ckpt)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_corpus(config, out);
        }
        if (train->parsed()) {
            return cmd_train(config, out, resume);
        }
        if (sample->parsed()) {
            return cmd_sample(ckpt, index, tokens, nfe, cfg_scale, method, seed, out);
        }
        if (attn->parsed()) {
            return cmd_attn(ckpt, index, out, layer, head);
        }
        if (score->parsed()) {
            return cmd_score_align(csv);
        }
        if (bench->parsed()) {
            return cmd_bench(config, steps, warmup, out);
        }
        return cmd_ckpt_info(ckpt);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
