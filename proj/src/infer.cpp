#include "m3tts/infer.hpp"

#include "m3tts/train.hpp"

namespace m3tts {

InferResult infer(const TrainState& ckpt, AcousticPath path, const corpus::SynthUtterance& prompt,
                  std::span<const int> target_tokens, const flow::SamplerSpec& spec, std::uint64_t seed) {
    const auto& cfg = ckpt.config;
    if (path != cfg.path) {
        throw ConfigMismatchError("checkpoint was trained on the " + to_string(cfg.path) + " path, request is " +
                                  to_string(path));
    }
    spec.validate();
    auto check_vocab = [&](std::span<const int> toks, const char* what) {
        for (int t : toks) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg.model.text_vocab) {
                throw DataError(std::string(what) + " token " + std::to_string(t) + " outside checkpoint vocab of " +
                                std::to_string(cfg.model.text_vocab));
            }
        }
    };
    check_vocab(prompt.tokens, "prompt");
    check_vocab(target_tokens, "target");

    const auto tgt = make_target(cfg, ckpt.params, prompt);
    const auto input = corpus::build_inference_input(tgt.tokens, tgt.latents, target_tokens);
    mmdit::MMDiT<float> model(cfg.model, ckpt.params);

    InferResult res;
    res.gen_len = input.gen_len;
    auto field = [&](const Tensor& x, double t) {
        std::vector<mmdit::SampleInput<float>> pair(2);
        for (auto& in : pair) {
            in.x_t = x;
            in.t = t;
            in.mask = input.mask;
            in.x1 = input.cond;
            in.tokens = input.tokens;
        }
        pair[1].speech_cond = false;
        pair[1].text_cond = false;
        auto out = model.forward_batch(pair);
        res.model_evals += 2;
        return flow::guided_velocity(out.velocity[0], out.velocity[1], spec.cfg_scale).detach();
    };
    Rng rng(seed);
    auto x0 = flow::sample_prior<float>(input.cond.shape(), rng);
    auto sol = flow::ode_solve(field, x0, spec);
    res.steps = sol.steps;
    res.field_evals = sol.field_evals;
    res.latents = slice_rows(sol.x1, input.prompt_len, input.gen_len).detach();
    if (path == AcousticPath::vae) {
        codec::Codec<float> c(cfg.codec.codec, ckpt.params);
        res.features = c.decode(res.latents, 2 * input.gen_len).detach();
    } else {
        res.features = res.latents;
    }
    return res;
}

} // namespace m3tts
