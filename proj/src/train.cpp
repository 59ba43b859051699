#include "m3tts/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "m3tts/flow.hpp"

namespace m3tts {

namespace {
enum Stream : std::uint64_t { kModelInit = 1, kCodecInit = 2, kCodecTrain = 3, kTrain = 4 };
}

TrainingTarget make_target(const RunConfig& cfg, const ParameterStore<float>& params,
                           const corpus::SynthUtterance& utt) {
    TrainingTarget t;
    t.tokens = utt.tokens;
    if (cfg.path == AcousticPath::fbank) {
        t.latents = codec::fbank_path(utt.features);
        t.alignment = utt.alignment;
    } else {
        codec::Codec<float> c(cfg.codec.codec, params);
        t.latents = c.encode(utt.features).mu.detach();
        t.alignment = corpus::downsample_alignment(utt.alignment);
    }
    return t;
}

CodecReport train_codec(const CodecTraining& cfg, ParameterStore<float>& params,
                        std::span<const corpus::SynthUtterance> utts, Rng& rng) {
    if (utts.empty()) {
        throw UsageError("train_codec: no utterances");
    }
    codec::Codec<float> c(cfg.codec, params);
    AdamWConfig opt;
    opt.lr = cfg.lr;
    CodecReport report;
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        std::vector<Tensor> losses;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto& x = utts[rng.index(utts.size())].features;
            auto d = c.encode(x);
            auto z = codec::reparameterize(d, rng);
            losses.push_back(codec::vae_loss(x, c.decode(z, d.source_len), d, cfg.codec.beta));
        }
        auto total = losses[0];
        for (std::size_t b = 1; b < losses.size(); ++b) {
            total = add(total, losses[b]);
        }
        total = scale(total, 1.0f / static_cast<float>(losses.size()));
        if (s == 0) {
            report.first_loss = total.item();
        }
        report.last_loss = total.item();
        backward(total);
        adamw_step(params, opt, "codec.");
        params.zero_grad("codec.");
    }
    return report;
}

double codec_reconstruction_mse(const codec::CodecConfig& cfg, const ParameterStore<float>& params,
                                std::span<const corpus::SynthUtterance> utts) {
    codec::Codec<float> c(cfg, params);
    double se = 0.0;
    std::size_t n = 0;
    for (const auto& u : utts) {
        auto d = c.encode(u.features);
        auto y = c.decode(d.mu, d.source_len);
        for (std::size_t i = 0; i < y.numel(); ++i) {
            const double e = static_cast<double>(y.vec()[i]) - u.features.vec()[i];
            se += e * e;
        }
        n += y.numel();
    }
    return n ? se / static_cast<double>(n) : 0.0;
}

TrainState initial_state(const RunConfig& cfg_in) {
    TrainState s;
    s.config = cfg_in;
    s.config.resolve();
    const auto& cfg = s.config;
    Rng codec_init(mix_seed(cfg.seed, kCodecInit));
    codec::init_params(cfg.codec.codec, s.params, codec_init);
    if (cfg.path == AcousticPath::vae) {
        const auto utts = corpus::generate(cfg.corpus, 0, cfg.corpus.size);
        Rng codec_rng(mix_seed(cfg.seed, kCodecTrain));
        train_codec(cfg.codec, s.params, utts, codec_rng);
    }
    Rng model_init(mix_seed(cfg.seed, kModelInit));
    mmdit::init_params(cfg.model, s.params, model_init);
    s.rng_state = Rng(mix_seed(cfg.seed, kTrain)).state();
    return s;
}

Trainer::Trainer(TrainState state) : state_(std::move(state)) {
    state_.config.resolve();
    rng_.set_state(state_.rng_state);
    for (const auto& u : corpus::generate(state_.config.corpus, 0, state_.config.corpus.size)) {
        targets_.push_back(make_target(state_.config, state_.params, u));
    }
    model_ = std::make_unique<mmdit::MMDiT<float>>(state_.config.model, state_.params);
}

double Trainer::step() {
    const auto& cfg = state_.config;
    const std::uint64_t n = state_.step + 1;
    try {
        std::vector<mmdit::SampleInput<float>> batch(cfg.train.batch_size);
        std::vector<Tensor> targets;
        std::vector<int> mask_rows;
        for (auto& in : batch) {
            const auto& tgt = targets_[rng_.index(targets_.size())];
            const auto& x1 = tgt.latents;
            auto x0 = flow::sample_prior<float>(x1.shape(), rng_);
            const double t = rng_.uniform();
            in.mask = flow::sample_mask(x1.dim(0), cfg.train.mask, rng_, cfg.train.mask_mode);
            const auto drops = flow::draw_cfg_drops(cfg.train.cfg_drop_p, rng_);
            in.x_t = flow::interpolate(x0, x1, t);
            in.t = t;
            in.x1 = x1;
            in.tokens = tgt.tokens;
            in.speech_cond = !drops.drop_speech;
            in.text_cond = !drops.drop_text;
            targets.push_back(flow::target_velocity(x0, x1, t));
            mask_rows.insert(mask_rows.end(), in.mask.begin(), in.mask.end());
        }
        auto out = model_->forward_batch(batch);
        auto loss = flow::cfm_loss(concat_rows(out.velocity), concat_rows(targets), mask_rows, cfg.train.masked_loss);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            throw NumericError("non-finite loss");
        }
        backward(loss);
        adamw_step(state_.params, cfg.train.optim, "model.");
        state_.params.zero_grad("model.");
        state_.step = n;
        state_.rng_state = rng_.state();
        return value;
    } catch (const NumericError& e) {
        throw NumericError("training step " + std::to_string(n) + ": " + e.what());
    }
}

std::string checkpoint_name(std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%06llu.m3ts", static_cast<unsigned long long>(step));
    return buf;
}

TrainState run_training(TrainState state, const TrainOptions& opts) {
    namespace fs = std::filesystem;
    Trainer trainer(std::move(state));
    const auto& cfg = trainer.state().config;
    std::ofstream metrics;
    if (!opts.out_dir.empty()) {
        fs::create_directories(opts.out_dir);
        metrics.open(fs::path(opts.out_dir) / "metrics.csv", std::ios::trunc);
        if (!metrics) {
            throw DataError("cannot write metrics in '" + opts.out_dir + "'");
        }
        metrics << "step,loss,wall_ms,steps_per_sec\n";
    }
    const auto start = std::chrono::steady_clock::now();
    std::uint64_t done = 0;
    while (trainer.state().step < cfg.train.total_steps) {
        const double loss = trainer.step();
        ++done;
        const auto step = trainer.state().step;
        if (step % cfg.train.log_every == 0 || step == cfg.train.total_steps) {
            StepRecord rec;
            rec.step = step;
            rec.loss = loss;
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            rec.steps_per_sec = rec.wall_ms > 0.0 ? 1000.0 * static_cast<double>(done) / rec.wall_ms : 0.0;
            if (metrics.is_open()) {
                char line[128];
                std::snprintf(line, sizeof(line), "%llu,%.9g,%.3f,%.3f\n", static_cast<unsigned long long>(rec.step),
                              rec.loss, rec.wall_ms, rec.steps_per_sec);
                metrics << line << std::flush;
            }
            if (opts.on_log) {
                opts.on_log(rec);
            }
        }
        if (!opts.out_dir.empty() && cfg.train.checkpoint_every != 0 && step % cfg.train.checkpoint_every == 0) {
            save_checkpoint((fs::path(opts.out_dir) / checkpoint_name(step)).string(), trainer.state());
        }
    }
    if (!opts.out_dir.empty()) {
        save_checkpoint((fs::path(opts.out_dir) / "final.m3ts").string(), trainer.state());
    }
    return std::move(trainer.state());
}

bool same_architecture(const RunConfig& a, const RunConfig& b) {
    return a.seed == b.seed && a.path == b.path && a.model == b.model && a.corpus == b.corpus && a.codec == b.codec;
}

} // namespace m3tts
