#include "m3tts/mmdit.hpp"

#include <cmath>
#include <numbers>

namespace m3tts::mmdit {

namespace {

constexpr std::size_t kModChunks = 6; // shift/scale/gate for attention, then for the FFN
constexpr double kModInitStd = 0.02;

std::string joint_name(std::size_t layer, const char* stream, const char* what) {
    return "joint." + std::to_string(layer) + "." + stream + "." + what;
}

std::string single_name(std::size_t layer, const char* what) {
    return "single." + std::to_string(layer) + "." + what;
}

template <typename T>
BasicTensor<T> modulate(const BasicTensor<T>& x, const BasicTensor<T>& shift, const BasicTensor<T>& scale_) {
    return add(mul(x, add_scalar(scale_, T(1))), shift);
}

template <typename T>
BasicTensor<T> gated(const BasicTensor<T>& h, const BasicTensor<T>& gate, const BasicTensor<T>& y) {
    return add(h, mul(gate, y));
}

} // namespace

void ModelConfig::validate() const {
    if (dim == 0 || n_heads == 0 || n_joint_layers == 0 || n_single_layers == 0 || latent_dim == 0 ||
        text_vocab == 0) {
        throw ConfigError("model config: all extents must be >= 1");
    }
    if (dim % n_heads != 0) {
        throw ConfigError("model config: dim " + std::to_string(dim) + " is not divisible by " +
                          std::to_string(n_heads) + " heads");
    }
    if (head_dim() % 2 != 0) {
        throw ConfigError("model config: head dimension " + std::to_string(head_dim()) + " must be even for RoPE");
    }
    if (!(ffn_mult > 0.0) || !(rope_base > 0.0)) {
        throw ConfigError("model config: ffn_mult and rope_base must be positive");
    }
}

std::size_t ModelConfig::ffn_dim() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(dim) * ffn_mult)));
}

template <typename T>
void init_params(const ModelConfig& cfg, ParameterStore<T>& store, Rng& rng, const std::string& prefix) {
    cfg.validate();
    const std::size_t d = cfg.dim, f = cfg.ffn_dim();
    auto normal = [&](const std::string& name, Shape shape, double std) {
        store.add(prefix + name, BasicTensor<T>::randn(std::move(shape), rng, std));
    };
    auto zeros = [&](const std::string& name, Shape shape) {
        store.add(prefix + name, BasicTensor<T>::zeros(std::move(shape)));
    };
    auto lin = [&](const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
        normal(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)));
        zeros(name + ".b", {out});
    };
    // Modulation linear: shift/scale columns small random, gate columns zero.
    auto mod = [&](const std::string& name, std::size_t chunks) {
        auto w = BasicTensor<T>::randn({d, chunks * d}, rng, kModInitStd);
        if (chunks == kModChunks) {
            auto wd = w.mutable_data();
            for (std::size_t r = 0; r < d; ++r) {
                for (std::size_t gate : {std::size_t{2}, std::size_t{5}}) {
                    for (std::size_t c = 0; c < d; ++c) {
                        wd[r * chunks * d + gate * d + c] = T(0);
                    }
                }
            }
        }
        store.add(prefix + name + ".w", w);
        zeros(name + ".b", {chunks * d});
    };
    auto ffn = [&](const std::string& name) {
        lin(name + ".ffn.0", d, f);
        lin(name + ".ffn.1", f, d);
    };

    lin("latent_in", cfg.latent_dim, d);
    lin("cond_in", cfg.latent_dim, d);
    lin("time.mlp0", d, d);
    lin("time.mlp1", d, d);
    normal("text.embed", {cfg.text_vocab + 1, d}, 1.0);
    for (std::size_t i = 0; i < cfg.text_encoder_layers; ++i) {
        const std::string n = "text.enc." + std::to_string(i);
        lin(n + ".qkv", d, 3 * d);
        lin(n + ".out", d, d);
        ffn(n);
    }
    for (std::size_t l = 0; l < cfg.n_joint_layers; ++l) {
        const bool last = l + 1 == cfg.n_joint_layers;
        for (const char* stream : {"speech", "text"}) {
            // The last joint block's text stream only feeds keys/values: its
            // output is discarded, so it carries no output projection or FFN.
            const bool pre_only = last && std::string(stream) == "text";
            const std::string base = "joint." + std::to_string(l) + "." + stream;
            mod(base + ".mod", pre_only ? 2 : kModChunks);
            normal(base + ".tag", {d}, kModInitStd);
            lin(base + ".qkv", d, 3 * d);
            if (!pre_only) {
                lin(base + ".out", d, d);
                ffn(base);
            }
        }
    }
    for (std::size_t l = 0; l < cfg.n_single_layers; ++l) {
        const std::string base = "single." + std::to_string(l);
        mod(base + ".mod", kModChunks);
        lin(base + ".qkv", d, 3 * d);
        lin(base + ".out", d, d);
        ffn(base);
    }
    mod("final.mod", 2);
    lin("final.proj", d, cfg.latent_dim, 0.1);
}

template <typename T>
BasicTensor<T> sinusoidal_features(double t, std::size_t dim) {
    std::vector<T> out(dim, T(0));
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = 1000.0 * t * freq;
        out[i] = static_cast<T>(std::cos(arg));
        out[half + i] = static_cast<T>(std::sin(arg));
    }
    return BasicTensor<T>::from_data({dim}, std::move(out));
}

template <typename T>
ConditioningBundle<T> build_conditioning(double t, std::span<const int> mask, const BasicTensor<T>& x1_proj,
                                         const BasicTensor<T>& c_g) {
    if (x1_proj.rank() != 2) {
        throw ShapeError("build_conditioning: x1_proj must be [T_s x D], got " + shape_str(x1_proj.shape()));
    }
    const std::size_t ts = x1_proj.dim(0), d = x1_proj.dim(1);
    if (mask.size() != ts) {
        throw ShapeError("build_conditioning: mask length " + std::to_string(mask.size()) + " != T_s " +
                         std::to_string(ts));
    }
    if (c_g.numel() != d) {
        throw ShapeError("build_conditioning: c_g " + shape_str(c_g.shape()) + " does not match width " +
                         std::to_string(d));
    }
    std::vector<T> keep(ts);
    for (std::size_t i = 0; i < ts; ++i) {
        if (mask[i] != 0 && mask[i] != 1) {
            throw DataError("build_conditioning: mask entry " + std::to_string(i) + " is not binary");
        }
        keep[i] = static_cast<T>(1 - mask[i]);
    }
    std::vector<std::size_t> zeros(ts, 0);
    ConditioningBundle<T> b;
    b.t = t;
    b.c_g = c_g;
    b.mask.assign(mask.begin(), mask.end());
    b.x1_proj = x1_proj;
    b.c_f = add(gather_rows(reshape(c_g, {1, d}), std::span<const std::size_t>(zeros)),
                mul_rows(x1_proj, std::span<const T>(keep)));
    return b;
}

template <typename T>
struct MMDiT<T>::Packing {
    std::vector<std::size_t> speech_lens, text_lens, joint_lens;
    std::vector<std::size_t> speech_seg, text_seg;
    std::vector<std::size_t> speech_pos, text_pos, text_enc_pos;
    std::vector<std::size_t> to_joint, from_joint;
    std::size_t total_speech = 0, total_text = 0;
};

template <typename T>
MMDiT<T>::MMDiT(ModelConfig cfg, const ParameterStore<T>& store, std::string prefix)
    : cfg_(std::move(cfg)), store_(store), prefix_(std::move(prefix)) {
    cfg_.validate();
    if (!store_.contains(prefix_ + "final.proj.w")) {
        throw UsageError("parameter store has no model under prefix '" + prefix_ + "'");
    }
    const auto& w = p("latent_in.w");
    if (w.dim(0) != cfg_.latent_dim || w.dim(1) != cfg_.dim) {
        throw ConfigMismatchError("parameters " + shape_str(w.shape()) + " do not match latent_dim " +
                                  std::to_string(cfg_.latent_dim) + " / dim " + std::to_string(cfg_.dim));
    }
    if (p("text.embed").dim(0) != cfg_.text_vocab + 1) {
        throw ConfigMismatchError("token embedding does not match text_vocab " + std::to_string(cfg_.text_vocab));
    }
}

template <typename T>
typename MMDiT<T>::Packing MMDiT<T>::make_packing(std::span<const std::size_t> speech_lens,
                                                  std::span<const std::size_t> text_lens) const {
    Packing pk;
    pk.speech_lens.assign(speech_lens.begin(), speech_lens.end());
    pk.text_lens.assign(text_lens.begin(), text_lens.end());
    for (auto s : speech_lens) {
        pk.total_speech += s;
    }
    for (auto s : text_lens) {
        pk.total_text += s;
    }
    std::size_t so = 0, to = 0;
    for (std::size_t b = 0; b < speech_lens.size(); ++b) {
        const std::size_t ts = speech_lens[b], tt = text_lens[b];
        for (std::size_t i = 0; i < ts; ++i) {
            pk.speech_seg.push_back(b);
            pk.speech_pos.push_back(i);
            pk.to_joint.push_back(so + i);
        }
        for (std::size_t j = 0; j < tt; ++j) {
            pk.text_seg.push_back(b);
            pk.text_pos.push_back(cfg_.shared_positions ? ts + j : j);
            pk.text_enc_pos.push_back(j);
            pk.to_joint.push_back(pk.total_speech + to + j);
        }
        pk.joint_lens.push_back(ts + tt);
        so += ts;
        to += tt;
    }
    pk.from_joint.resize(pk.to_joint.size());
    for (std::size_t r = 0; r < pk.to_joint.size(); ++r) {
        pk.from_joint[pk.to_joint[r]] = r;
    }
    return pk;
}

template <typename T>
BasicTensor<T> MMDiT<T>::time_embed_rows(std::span<const double> ts) const {
    std::vector<BasicTensor<T>> rows;
    for (double t : ts) {
        if (!(t >= 0.0 && t <= 1.0)) {
            throw DomainError("time_embed: t = " + std::to_string(t) + " outside [0, 1]");
        }
        rows.push_back(reshape(sinusoidal_features<T>(t, cfg_.dim), {1, cfg_.dim}));
    }
    auto feats = rows.size() == 1 ? rows[0] : concat_rows(rows);
    auto h = silu(linear(feats, p("time.mlp0.w"), p("time.mlp0.b")));
    return linear(h, p("time.mlp1.w"), p("time.mlp1.b"));
}

template <typename T>
BasicTensor<T> MMDiT<T>::time_embed(double t) const {
    const double ts[] = {t};
    return reshape(time_embed_rows(ts), {cfg_.dim});
}

template <typename T>
BasicTensor<T> MMDiT<T>::project_condition(const BasicTensor<T>& x1) const {
    return linear(x1, p("cond_in.w"), p("cond_in.b"));
}

template <typename T>
BasicTensor<T> MMDiT<T>::feed_forward(const std::string& name, const BasicTensor<T>& x) const {
    auto h = gelu(linear(x, p(name + ".ffn.0.w"), p(name + ".ffn.0.b")));
    return linear(h, p(name + ".ffn.1.w"), p(name + ".ffn.1.b"));
}

template <typename T>
BasicTensor<T> MMDiT<T>::encode_text_packed(std::span<const int> tokens, const Packing& pack) const {
    const std::size_t dh = cfg_.head_dim();
    auto x = embedding(p("text.embed"), tokens);
    for (std::size_t i = 0; i < cfg_.text_encoder_layers; ++i) {
        const std::string n = "text.enc." + std::to_string(i);
        auto qkv = chunk_cols(linear(layer_norm(x), p(n + ".qkv.w"), p(n + ".qkv.b")), 3);
        auto q = rope(qkv[0], std::span<const std::size_t>(pack.text_enc_pos), cfg_.rope_base, dh);
        auto k = rope(qkv[1], std::span<const std::size_t>(pack.text_enc_pos), cfg_.rope_base, dh);
        auto a = attention(q, k, qkv[2], cfg_.n_heads, std::span<const std::size_t>(pack.text_lens));
        x = add(x, linear(a, p(n + ".out.w"), p(n + ".out.b")));
        x = add(x, feed_forward(n, layer_norm(x)));
    }
    return x;
}

template <typename T>
BasicTensor<T> MMDiT<T>::encode_text(std::span<const int> tokens) const {
    const std::size_t zero = 0, len = tokens.size();
    auto pack = make_packing(std::span<const std::size_t>(&zero, 1), std::span<const std::size_t>(&len, 1));
    return encode_text_packed(tokens, pack);
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> MMDiT<T>::joint_packed(std::size_t layer, const BasicTensor<T>& h_s,
                                                                 const BasicTensor<T>& h_t, const PackedCond& cond,
                                                                 const Packing& pack, std::vector<T>* probs) const {
    const std::size_t dh = cfg_.head_dim();
    const bool pre_only = layer + 1 == cfg_.n_joint_layers;

    auto sm = chunk_cols(linear(silu(cond.c_f), p(joint_name(layer, "speech", "mod.w")),
                                p(joint_name(layer, "speech", "mod.b"))),
                         kModChunks);
    auto tm_rows = linear(silu(cond.c_g), p(joint_name(layer, "text", "mod.w")), p(joint_name(layer, "text", "mod.b")));
    auto tm = chunk_cols(gather_rows(tm_rows, std::span<const std::size_t>(pack.text_seg)), pre_only ? 2 : kModChunks);

    auto ns = add_broadcast(modulate(layer_norm(h_s), sm[0], sm[1]), p(joint_name(layer, "speech", "tag")));
    auto nt = add_broadcast(modulate(layer_norm(h_t), tm[0], tm[1]), p(joint_name(layer, "text", "tag")));
    auto qkv_s = chunk_cols(linear(ns, p(joint_name(layer, "speech", "qkv.w")), p(joint_name(layer, "speech", "qkv.b"))), 3);
    auto qkv_t = chunk_cols(linear(nt, p(joint_name(layer, "text", "qkv.w")), p(joint_name(layer, "text", "qkv.b"))), 3);

    const std::span<const std::size_t> spos(pack.speech_pos), tpos(pack.text_pos);
    const std::span<const std::size_t> to_joint(pack.to_joint), from_joint(pack.from_joint);
    auto joint = [&](const BasicTensor<T>& s, const BasicTensor<T>& t) {
        return gather_rows(concat_rows(std::vector<BasicTensor<T>>{s, t}), to_joint);
    };
    auto q = joint(rope(qkv_s[0], spos, cfg_.rope_base, dh), rope(qkv_t[0], tpos, cfg_.rope_base, dh));
    auto k = joint(rope(qkv_s[1], spos, cfg_.rope_base, dh), rope(qkv_t[1], tpos, cfg_.rope_base, dh));
    auto v = joint(qkv_s[2], qkv_t[2]);
    auto a = attention(q, k, v, cfg_.n_heads, std::span<const std::size_t>(pack.joint_lens), probs);
    const std::size_t lens[] = {pack.total_speech, pack.total_text};
    auto streams = split_rows(gather_rows(a, from_joint), std::span<const std::size_t>(lens));

    auto out_s = gated(h_s, sm[2],
                       linear(streams[0], p(joint_name(layer, "speech", "out.w")), p(joint_name(layer, "speech", "out.b"))));
    out_s = gated(out_s, sm[5], feed_forward("joint." + std::to_string(layer) + ".speech",
                                             modulate(layer_norm(out_s), sm[3], sm[4])));
    if (pre_only) {
        return {out_s, h_t};
    }
    auto out_t = gated(h_t, tm[2],
                       linear(streams[1], p(joint_name(layer, "text", "out.w")), p(joint_name(layer, "text", "out.b"))));
    out_t = gated(out_t, tm[5], feed_forward("joint." + std::to_string(layer) + ".text",
                                             modulate(layer_norm(out_t), tm[3], tm[4])));
    return {out_s, out_t};
}

template <typename T>
BasicTensor<T> MMDiT<T>::single_packed(std::size_t layer, const BasicTensor<T>& h_s, const PackedCond& cond,
                                       const Packing& pack) const {
    const std::size_t dh = cfg_.head_dim();
    auto m = chunk_cols(linear(silu(cond.c_f), p(single_name(layer, "mod.w")), p(single_name(layer, "mod.b"))), kModChunks);
    auto n = modulate(layer_norm(h_s), m[0], m[1]);
    auto qkv = chunk_cols(linear(n, p(single_name(layer, "qkv.w")), p(single_name(layer, "qkv.b"))), 3);
    const std::span<const std::size_t> spos(pack.speech_pos);
    auto a = attention(rope(qkv[0], spos, cfg_.rope_base, dh), rope(qkv[1], spos, cfg_.rope_base, dh), qkv[2],
                       cfg_.n_heads, std::span<const std::size_t>(pack.speech_lens));
    auto h = gated(h_s, m[2], linear(a, p(single_name(layer, "out.w")), p(single_name(layer, "out.b"))));
    return gated(h, m[5], feed_forward("single." + std::to_string(layer), modulate(layer_norm(h), m[3], m[4])));
}

template <typename T>
typename MMDiT<T>::PackedCond MMDiT<T>::single_cond(const ConditioningBundle<T>& cond) const {
    return PackedCond{reshape(cond.c_g, {1, cfg_.dim}), cond.c_f};
}

namespace {

template <typename T>
void append_records(std::vector<AttentionRecord>& out, std::size_t layer, std::size_t n_heads, std::size_t ts,
                    std::size_t tt, const T* probs) {
    const std::size_t len = ts + tt;
    for (std::size_t h = 0; h < n_heads; ++h) {
        std::vector<float> w(probs + h * len * len, probs + (h + 1) * len * len);
        out.push_back(AttentionRecord{layer, h, ts, tt, Tensor::from_data({len, len}, std::move(w))});
    }
}

} // namespace

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> MMDiT<T>::joint_block_forward(std::size_t layer, const BasicTensor<T>& h_a,
                                                                        const BasicTensor<T>& h_t,
                                                                        const ConditioningBundle<T>& cond,
                                                                        std::vector<AttentionRecord>* capture) const {
    if (layer >= cfg_.n_joint_layers) {
        throw UsageError("joint layer " + std::to_string(layer) + " out of range");
    }
    if (h_a.rank() != 2 || h_t.rank() != 2 || h_a.dim(1) != cfg_.dim || h_t.dim(1) != cfg_.dim) {
        throw ShapeError("joint_block_forward: streams " + shape_str(h_a.shape()) + " and " + shape_str(h_t.shape()) +
                         " must both have feature dim " + std::to_string(cfg_.dim));
    }
    if (cond.c_f.dim(0) != h_a.dim(0)) {
        throw ShapeError("joint_block_forward: conditioning covers " + std::to_string(cond.c_f.dim(0)) +
                         " frames, speech stream has " + std::to_string(h_a.dim(0)));
    }
    const std::size_t ts = h_a.dim(0), tt = h_t.dim(0);
    auto pack = make_packing(std::span<const std::size_t>(&ts, 1), std::span<const std::size_t>(&tt, 1));
    std::vector<T> probs;
    auto out = joint_packed(layer, h_a, h_t, single_cond(cond), pack, capture ? &probs : nullptr);
    if (capture) {
        append_records(*capture, layer, cfg_.n_heads, ts, tt, probs.data());
    }
    return out;
}

template <typename T>
BasicTensor<T> MMDiT<T>::single_block_forward(std::size_t layer, const BasicTensor<T>& h_a,
                                              const ConditioningBundle<T>& cond) const {
    if (layer >= cfg_.n_single_layers) {
        throw UsageError("single layer " + std::to_string(layer) + " out of range");
    }
    if (h_a.rank() != 2 || h_a.dim(1) != cfg_.dim) {
        throw ShapeError("single_block_forward: speech stream " + shape_str(h_a.shape()) + " must have feature dim " +
                         std::to_string(cfg_.dim));
    }
    if (cond.c_f.dim(0) != h_a.dim(0)) {
        throw ShapeError("single_block_forward: conditioning length does not match speech stream");
    }
    const std::size_t ts = h_a.dim(0), tt = 0;
    auto pack = make_packing(std::span<const std::size_t>(&ts, 1), std::span<const std::size_t>(&tt, 1));
    return single_packed(layer, h_a, single_cond(cond), pack);
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> MMDiT<T>::blocks_forward(const BasicTensor<T>& h_a,
                                                                   const BasicTensor<T>& h_t,
                                                                   const ConditioningBundle<T>& cond) const {
    auto hs = h_a;
    auto ht = h_t;
    for (std::size_t l = 0; l < cfg_.n_joint_layers; ++l) {
        std::tie(hs, ht) = joint_block_forward(l, hs, ht, cond);
    }
    for (std::size_t l = 0; l < cfg_.n_single_layers; ++l) {
        hs = single_block_forward(l, hs, cond);
    }
    return {hs, ht};
}

template <typename T>
BasicTensor<T> MMDiT<T>::forward(const SampleInput<T>& in, std::vector<AttentionRecord>* capture) const {
    auto out = forward_batch(std::span<const SampleInput<T>>(&in, 1), capture != nullptr);
    if (capture) {
        for (auto& r : out.attention[0]) {
            capture->push_back(std::move(r));
        }
    }
    return out.velocity[0];
}

template <typename T>
ForwardOutput<T> MMDiT<T>::forward_batch(std::span<const SampleInput<T>> batch, bool capture) const {
    if (batch.empty()) {
        throw UsageError("forward_batch: empty batch");
    }
    std::vector<std::size_t> speech_lens, text_lens;
    std::vector<int> tokens;
    std::vector<double> ts;
    std::vector<T> keep;
    std::vector<BasicTensor<T>> xts, x1s;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& in = batch[b];
        if (in.x_t.rank() != 2 || in.x_t.dim(1) != cfg_.latent_dim || in.x_t.dim(0) == 0) {
            throw ShapeError("model_forward: x_t " + shape_str(in.x_t.shape()) + " must be [T_s x " +
                             std::to_string(cfg_.latent_dim) + "] with T_s >= 1");
        }
        if (in.x1.shape() != in.x_t.shape()) {
            throw ShapeError("model_forward: x1 " + shape_str(in.x1.shape()) + " does not match x_t " +
                             shape_str(in.x_t.shape()));
        }
        const std::size_t len = in.x_t.dim(0);
        if (in.mask.size() != len) {
            throw ShapeError("model_forward: mask length " + std::to_string(in.mask.size()) + " != T_s " +
                             std::to_string(len));
        }
        if (in.tokens.empty()) {
            throw DataError("model_forward: empty token sequence");
        }
        for (std::size_t i = 0; i < in.tokens.size(); ++i) {
            if (in.tokens[i] < 0 || static_cast<std::size_t>(in.tokens[i]) >= cfg_.text_vocab) {
                throw DataError("model_forward: token " + std::to_string(in.tokens[i]) + " at index " +
                                std::to_string(i) + " is outside the vocabulary of size " +
                                std::to_string(cfg_.text_vocab));
            }
        }
        speech_lens.push_back(len);
        if (in.text_cond) {
            text_lens.push_back(in.tokens.size());
            tokens.insert(tokens.end(), in.tokens.begin(), in.tokens.end());
        } else {
            text_lens.push_back(1);
            tokens.push_back(cfg_.null_token());
        }
        for (std::size_t i = 0; i < len; ++i) {
            if (in.mask[i] != 0 && in.mask[i] != 1) {
                throw DataError("model_forward: mask entry " + std::to_string(i) + " is not binary");
            }
            keep.push_back(in.speech_cond ? static_cast<T>(1 - in.mask[i]) : T(0));
        }
        ts.push_back(in.t);
        xts.push_back(in.x_t);
        x1s.push_back(in.x1);
    }
    auto pack = make_packing(speech_lens, text_lens);
    auto xt = xts.size() == 1 ? xts[0] : concat_rows(xts);
    auto x1 = x1s.size() == 1 ? x1s[0] : concat_rows(x1s);

    PackedCond cond;
    cond.c_g = time_embed_rows(ts);
    cond.c_f = add(gather_rows(cond.c_g, std::span<const std::size_t>(pack.speech_seg)),
                   mul_rows(project_condition(x1), std::span<const T>(keep)));

    auto hs = linear(xt, p("latent_in.w"), p("latent_in.b"));
    auto ht = encode_text_packed(tokens, pack);
    std::vector<std::vector<T>> probs(cfg_.n_joint_layers);
    for (std::size_t l = 0; l < cfg_.n_joint_layers; ++l) {
        std::tie(hs, ht) = joint_packed(l, hs, ht, cond, pack, capture ? &probs[l] : nullptr);
    }
    for (std::size_t l = 0; l < cfg_.n_single_layers; ++l) {
        hs = single_packed(l, hs, cond, pack);
    }
    auto fm = chunk_cols(linear(silu(cond.c_f), p("final.mod.w"), p("final.mod.b")), 2);
    auto v = linear(modulate(layer_norm(hs), fm[0], fm[1]), p("final.proj.w"), p("final.proj.b"));

    ForwardOutput<T> out;
    out.velocity = batch.size() == 1 ? std::vector<BasicTensor<T>>{v}
                                     : split_rows(v, std::span<const std::size_t>(speech_lens));
    if (capture) {
        out.attention.resize(batch.size());
        for (std::size_t l = 0; l < cfg_.n_joint_layers; ++l) {
            std::size_t off = 0;
            for (std::size_t b = 0; b < batch.size(); ++b) {
                const std::size_t len = pack.joint_lens[b];
                append_records(out.attention[b], l, cfg_.n_heads, speech_lens[b], text_lens[b], probs[l].data() + off);
                off += cfg_.n_heads * len * len;
            }
        }
    }
    return out;
}

template void init_params(const ModelConfig&, ParameterStore<float>&, Rng&, const std::string&);
template void init_params(const ModelConfig&, ParameterStore<double>&, Rng&, const std::string&);
template BasicTensor<float> sinusoidal_features(double, std::size_t);
template BasicTensor<double> sinusoidal_features(double, std::size_t);
template ConditioningBundle<float> build_conditioning(double, std::span<const int>, const BasicTensor<float>&,
                                                      const BasicTensor<float>&);
template ConditioningBundle<double> build_conditioning(double, std::span<const int>, const BasicTensor<double>&,
                                                       const BasicTensor<double>&);
template class MMDiT<float>;
template class MMDiT<double>;

} // namespace m3tts::mmdit
