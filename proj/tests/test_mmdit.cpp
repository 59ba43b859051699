#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "m3tts/mmdit.hpp"
#include "support.hpp"

using namespace m3tts;
using namespace m3tts::mmdit;
namespace ot = m3tts::testing;
using ot::Mat;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.dim = 8;
    c.n_heads = 2;
    c.n_joint_layers = 2;
    c.n_single_layers = 1;
    c.latent_dim = 4;
    c.text_vocab = 5;
    c.text_encoder_layers = 1;
    c.ffn_mult = 2.0;
    return c;
}

ModelConfig small_config() {
    ModelConfig c;
    c.dim = 16;
    c.n_heads = 2;
    c.n_joint_layers = 2;
    c.n_single_layers = 2;
    c.latent_dim = 6;
    c.text_vocab = 7;
    c.text_encoder_layers = 1;
    return c;
}

template <typename T>
SampleInput<T> random_input(const ModelConfig& cfg, std::size_t ts, std::size_t tt, Rng& rng) {
    SampleInput<T> in;
    in.x_t = BasicTensor<T>::randn({ts, cfg.latent_dim}, rng);
    in.x1 = BasicTensor<T>::randn({ts, cfg.latent_dim}, rng);
    in.t = rng.uniform();
    for (std::size_t i = 0; i < ts; ++i) {
        in.mask.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
    for (std::size_t j = 0; j < tt; ++j) {
        in.tokens.push_back(static_cast<int>(rng.index(cfg.text_vocab)));
    }
    return in;
}

// Dense re-implementation of the model on one utterance, straight from the
// parameter tensors, sharing no code with the packed forward.
class DenseModel {
public:
    DenseModel(const ModelConfig& cfg, const ParameterStore<double>& s) : cfg_(cfg), s_(s) {}

    Mat p(const std::string& name) const { return Mat(s_.get("model." + name)); }

    Mat lin(const Mat& x, const std::string& name) const { return ot::affine(x, p(name + ".w"), p(name + ".b")); }

    Mat ffn(const Mat& x, const std::string& name) const {
        return lin(ot::map(lin(x, name + ".ffn.0"), ot::gelu), name + ".ffn.1");
    }

    static Mat modulate(const Mat& x, const Mat& shift, const Mat& scale) {
        return ot::plus(ot::times(x, ot::map(scale, [](double v) { return 1.0 + v; })), shift);
    }

    Mat sinusoid(double t) const {
        const std::size_t half = cfg_.dim / 2;
        Mat f(1, cfg_.dim);
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
            f(0, i) = std::cos(1000.0 * t * freq);
            f(0, half + i) = std::sin(1000.0 * t * freq);
        }
        return f;
    }

    Mat time_embed(double t) const { return lin(ot::map(lin(sinusoid(t), "time.mlp0"), ot::silu), "time.mlp1"); }

    static std::vector<std::size_t> iota(std::size_t n, std::size_t from = 0) {
        std::vector<std::size_t> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = from + i;
        }
        return v;
    }

    Mat text_encoder(const std::vector<int>& tokens) const {
        const Mat table = p("text.embed");
        Mat x(tokens.size(), cfg_.dim);
        for (std::size_t r = 0; r < tokens.size(); ++r) {
            for (std::size_t c = 0; c < cfg_.dim; ++c) {
                x(r, c) = table(static_cast<std::size_t>(tokens[r]), c);
            }
        }
        const auto pos = iota(tokens.size());
        for (std::size_t i = 0; i < cfg_.text_encoder_layers; ++i) {
            const std::string n = "text.enc." + std::to_string(i);
            const Mat qkv = lin(ot::layer_norm(x), n + ".qkv");
            const std::size_t d = cfg_.dim;
            const Mat a = ot::attention(ot::rope(ot::cols(qkv, 0, d), pos, cfg_.rope_base, cfg_.head_dim()),
                                        ot::rope(ot::cols(qkv, d, d), pos, cfg_.rope_base, cfg_.head_dim()),
                                        ot::cols(qkv, 2 * d, d), cfg_.n_heads);
            x = ot::plus(x, lin(a, n + ".out"));
            x = ot::plus(x, ffn(ot::layer_norm(x), n));
        }
        return x;
    }

    Mat chunk(const Mat& m, std::size_t i) const { return ot::cols(m, i * cfg_.dim, cfg_.dim); }

    // c_f rows for the speech stream, c_g repeated for the text stream.
    std::pair<Mat, Mat> joint(std::size_t l, const Mat& hs, const Mat& ht, const Mat& cf, const Mat& cg) const {
        const std::string bs = "joint." + std::to_string(l) + ".speech", bt = "joint." + std::to_string(l) + ".text";
        const bool last = l + 1 == cfg_.n_joint_layers;
        const std::size_t d = cfg_.dim;
        const Mat ms = lin(ot::map(cf, ot::silu), bs + ".mod");
        const Mat mt = lin(ot::map(ot::repeat_row(cg, ht.rows), ot::silu), bt + ".mod");
        const Mat tag_s = ot::repeat_row(p(bs + ".tag"), hs.rows), tag_t = ot::repeat_row(p(bt + ".tag"), ht.rows);
        const Mat ns = ot::plus(modulate(ot::layer_norm(hs), chunk(ms, 0), chunk(ms, 1)), tag_s);
        const Mat nt = ot::plus(modulate(ot::layer_norm(ht), chunk(mt, 0), chunk(mt, 1)), tag_t);
        const Mat qs = lin(ns, bs + ".qkv"), qt = lin(nt, bt + ".qkv");
        const auto ps = iota(hs.rows), pt = iota(ht.rows, cfg_.shared_positions ? hs.rows : 0);
        const std::size_t hd = cfg_.head_dim();
        const Mat q = ot::vstack(ot::rope(ot::cols(qs, 0, d), ps, cfg_.rope_base, hd),
                                 ot::rope(ot::cols(qt, 0, d), pt, cfg_.rope_base, hd));
        const Mat k = ot::vstack(ot::rope(ot::cols(qs, d, d), ps, cfg_.rope_base, hd),
                                 ot::rope(ot::cols(qt, d, d), pt, cfg_.rope_base, hd));
        const Mat v = ot::vstack(ot::cols(qs, 2 * d, d), ot::cols(qt, 2 * d, d));
        const Mat a = ot::attention(q, k, v, cfg_.n_heads);
        Mat os = ot::plus(hs, ot::times(chunk(ms, 2), lin(ot::rows_of(a, 0, hs.rows), bs + ".out")));
        os = ot::plus(os, ot::times(chunk(ms, 5), ffn(modulate(ot::layer_norm(os), chunk(ms, 3), chunk(ms, 4)), bs)));
        if (last) {
            return {os, ht};
        }
        Mat ot_ = ot::plus(ht, ot::times(chunk(mt, 2), lin(ot::rows_of(a, hs.rows, ht.rows), bt + ".out")));
        ot_ = ot::plus(ot_, ot::times(chunk(mt, 5), ffn(modulate(ot::layer_norm(ot_), chunk(mt, 3), chunk(mt, 4)), bt)));
        return {os, ot_};
    }

    Mat single(std::size_t l, const Mat& hs, const Mat& cf) const {
        const std::string b = "single." + std::to_string(l);
        const std::size_t d = cfg_.dim, hd = cfg_.head_dim();
        const Mat m = lin(ot::map(cf, ot::silu), b + ".mod");
        const Mat qkv = lin(modulate(ot::layer_norm(hs), chunk(m, 0), chunk(m, 1)), b + ".qkv");
        const auto ps = iota(hs.rows);
        const Mat a = ot::attention(ot::rope(ot::cols(qkv, 0, d), ps, cfg_.rope_base, hd),
                                    ot::rope(ot::cols(qkv, d, d), ps, cfg_.rope_base, hd), ot::cols(qkv, 2 * d, d),
                                    cfg_.n_heads);
        Mat h = ot::plus(hs, ot::times(chunk(m, 2), lin(a, b + ".out")));
        return ot::plus(h, ot::times(chunk(m, 5), ffn(modulate(ot::layer_norm(h), chunk(m, 3), chunk(m, 4)), b)));
    }

    Mat cond_rows(const SampleInput<double>& in, const Mat& cg) const {
        Mat cf = ot::repeat_row(cg, in.mask.size());
        if (in.speech_cond) {
            const Mat proj = lin(Mat(in.x1), "cond_in");
            for (std::size_t r = 0; r < cf.rows; ++r) {
                for (std::size_t c = 0; c < cf.cols; ++c) {
                    cf(r, c) += (1 - in.mask[r]) * proj(r, c);
                }
            }
        }
        return cf;
    }

    Mat forward(const SampleInput<double>& in) const {
        const Mat cg = time_embed(in.t);
        const Mat cf = cond_rows(in, cg);
        Mat hs = lin(Mat(in.x_t), "latent_in");
        Mat ht = text_encoder(in.text_cond ? in.tokens : std::vector<int>{cfg_.null_token()});
        for (std::size_t l = 0; l < cfg_.n_joint_layers; ++l) {
            std::tie(hs, ht) = joint(l, hs, ht, cf, cg);
        }
        for (std::size_t l = 0; l < cfg_.n_single_layers; ++l) {
            hs = single(l, hs, cf);
        }
        const Mat fm = lin(ot::map(cf, ot::silu), "final.mod");
        return lin(modulate(ot::layer_norm(hs), chunk(fm, 0), chunk(fm, 1)), "final.proj");
    }

private:
    ModelConfig cfg_;
    const ParameterStore<double>& s_;
};

struct Fixture {
    ModelConfig cfg;
    ParameterStore<double> store;
    explicit Fixture(ModelConfig c, bool randomized = true, std::uint64_t seed = 3) : cfg(std::move(c)) {
        Rng rng(seed);
        init_params(cfg, store, rng);
        if (randomized) {
            ot::randomize(store, rng);
        }
    }
};

} // namespace

TEST(TimeEmbed, ShapeAndDeterminism) {
    for (std::size_t d : {16u, 640u}) {
        ModelConfig cfg;
        cfg.dim = d;
        cfg.n_heads = d == 640 ? 10 : 2;
        cfg.n_joint_layers = cfg.n_single_layers = 1;
        cfg.text_encoder_layers = 0;
        ParameterStore<float> s;
        Rng rng(1);
        init_params(cfg, s, rng);
        MMDiT<float> m(cfg, s);
        auto a = m.time_embed(0.5), b = m.time_embed(0.5);
        EXPECT_EQ(a.shape(), (Shape{d}));
        EXPECT_EQ(a.vec(), b.vec());
        EXPECT_NE(m.time_embed(0.0).vec(), m.time_embed(1.0).vec());
    }
}

TEST(TimeEmbed, OutsideUnitIntervalIsDomainError) {
    Fixture f(tiny_config());
    MMDiT<double> m(f.cfg, f.store);
    EXPECT_THROW(m.time_embed(-0.01), DomainError);
    EXPECT_THROW(m.time_embed(1.5), DomainError);
    EXPECT_NO_THROW(m.time_embed(0.0));
    EXPECT_NO_THROW(m.time_embed(1.0));
}

TEST(TimeEmbed, SinusoidalFeaturesMatchFormula) {
    auto f = sinusoidal_features<double>(0.3, 8);
    for (std::size_t i = 0; i < 4; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / 4.0);
        EXPECT_NEAR(f.vec()[i], std::cos(300.0 * freq), 1e-12);
        EXPECT_NEAR(f.vec()[4 + i], std::sin(300.0 * freq), 1e-12);
    }
}

TEST(Conditioning, FullMaskBroadcastsGlobalVector) {
    Rng rng(2);
    auto cg = TensorD::randn({4}, rng);
    auto proj = TensorD::randn({3, 4}, rng);
    const int ones[] = {1, 1, 1};
    auto b = build_conditioning(0.4, ones, proj, cg);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            EXPECT_EQ(b.c_f.at(r, c), cg.vec()[c]);
        }
    }
}

TEST(Conditioning, EmptyMaskAddsProjection) {
    Rng rng(3);
    auto cg = TensorD::randn({4}, rng);
    auto proj = TensorD::randn({3, 4}, rng);
    const int zeros[] = {0, 0, 0};
    auto b = build_conditioning(0.4, zeros, proj, cg);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            EXPECT_NEAR(b.c_f.at(r, c), cg.vec()[c] + proj.at(r, c), 1e-15);
        }
    }
}

TEST(Conditioning, MixedMaskRowByRow) {
    Rng rng(4);
    auto cg = TensorD::randn({5}, rng);
    auto proj = TensorD::randn({3, 5}, rng);
    const int mask[] = {1, 0, 1};
    auto b = build_conditioning(0.9, mask, proj, cg);
    EXPECT_EQ(b.t, 0.9);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 5; ++c) {
            const double want = mask[r] ? cg.vec()[c] : cg.vec()[c] + proj.at(r, c);
            EXPECT_NEAR(b.c_f.at(r, c), want, 1e-15);
        }
    }
}

TEST(Conditioning, MaskLengthMustMatch) {
    const int mask[] = {1, 0};
    EXPECT_THROW(build_conditioning(0.5, mask, TensorD::zeros({3, 4}), TensorD::zeros({4})), ShapeError);
    const int bad[] = {1, 2, 0};
    EXPECT_THROW(build_conditioning(0.5, bad, TensorD::zeros({3, 4}), TensorD::zeros({4})), DataError);
}

TEST(JointBlock, PreservesStreamShapes) {
    ModelConfig cfg = small_config();
    Fixture f(cfg);
    MMDiT<double> m(cfg, f.store);
    Rng rng(5);
    auto ha = TensorD::randn({7, 16}, rng), ht = TensorD::randn({5, 16}, rng);
    std::vector<int> mask(7, 1);
    auto cond = build_conditioning(0.3, mask, TensorD::zeros({7, 16}), m.time_embed(0.3));
    std::vector<AttentionRecord> rec;
    auto [a, t] = m.joint_block_forward(0, ha, ht, cond, &rec);
    EXPECT_EQ(a.shape(), (Shape{7, 16}));
    EXPECT_EQ(t.shape(), (Shape{5, 16}));
    ASSERT_EQ(rec.size(), 2u);
    EXPECT_EQ(rec[0].weights.shape(), (Shape{12, 12}));
    EXPECT_THROW(m.joint_block_forward(0, ha, TensorD::zeros({5, 8}), cond), ShapeError);
    EXPECT_THROW(m.joint_block_forward(2, ha, ht, cond), UsageError);
}

TEST(JointBlock, MatchesDenseOracle) {
    for (bool shared : {false, true}) {
        ModelConfig cfg = small_config();
        cfg.shared_positions = shared;
        Fixture f(cfg);
        MMDiT<double> m(cfg, f.store);
        DenseModel dense(cfg, f.store);
        Rng rng(6);
        for (auto [ts, tt] : {std::pair<std::size_t, std::size_t>{1, 1}, {7, 5}}) {
            auto ha = TensorD::randn({ts, 16}, rng), ht = TensorD::randn({tt, 16}, rng);
            auto proj = TensorD::randn({ts, 16}, rng);
            std::vector<int> mask(ts);
            for (auto& x : mask) {
                x = rng.bernoulli(0.5);
            }
            auto cond = build_conditioning(0.6, mask, proj, m.time_embed(0.6));
            for (std::size_t layer : {0u, 1u}) {
                auto [a, t] = m.joint_block_forward(layer, ha, ht, cond);
                auto [ra, rt] = dense.joint(layer, Mat(ha), Mat(ht), Mat(cond.c_f), Mat(cond.c_g));
                EXPECT_LT(ot::max_abs_diff(Mat(a), ra), 1e-10) << "layer " << layer;
                EXPECT_LT(ot::max_abs_diff(Mat(t), rt), 1e-10) << "layer " << layer;
            }
        }
    }
}

TEST(SingleBlock, MatchesDenseOracle) {
    ModelConfig cfg = small_config();
    Fixture f(cfg);
    MMDiT<double> m(cfg, f.store);
    DenseModel dense(cfg, f.store);
    Rng rng(7);
    for (std::size_t ts : {1u, 2u, 6u}) {
        auto ha = TensorD::randn({ts, 16}, rng);
        std::vector<int> mask(ts, 0);
        auto cond = build_conditioning(0.2, mask, TensorD::randn({ts, 16}, rng), m.time_embed(0.2));
        auto out = m.single_block_forward(1, ha, cond);
        EXPECT_EQ(out.shape(), ha.shape());
        EXPECT_LT(ot::max_abs_diff(Mat(out), dense.single(1, Mat(ha), Mat(cond.c_f))), 1e-10);
    }
}

TEST(Blocks, ZeroGatesMakeEveryBlockTheIdentity) {
    ModelConfig cfg = small_config();
    ParameterStore<float> s;
    Rng rng(8);
    init_params(cfg, s, rng);
    MMDiT<float> m(cfg, s);
    auto ha = Tensor::randn({6, 16}, rng), ht = Tensor::randn({4, 16}, rng);
    std::vector<int> mask = {1, 1, 0, 0, 1, 0};
    auto cond = build_conditioning(0.5, mask, Tensor::randn({6, 16}, rng), m.time_embed(0.5));
    auto [a, t] = m.joint_block_forward(0, ha, ht, cond);
    EXPECT_EQ(a.vec(), ha.vec());
    EXPECT_EQ(t.vec(), ht.vec());
    auto [sa, st] = m.blocks_forward(ha, ht, cond);
    EXPECT_LT(ot::max_abs_diff(Mat(sa), Mat(ha)), 1e-6);
    EXPECT_LT(ot::max_abs_diff(Mat(st), Mat(ht)), 1e-6);
}

TEST(ModelForward, OutputShapeFollowsSpeechLength) {
    ModelConfig cfg = small_config();
    Fixture f(cfg, false);
    MMDiT<double> m(cfg, f.store);
    Rng rng(9);
    for (std::size_t ts : {5u, 12u}) {
        auto in = random_input<double>(cfg, ts, 8, rng);
        EXPECT_EQ(m.forward(in).shape(), (Shape{ts, cfg.latent_dim}));
    }
}

TEST(ModelForward, Deterministic) {
    ModelConfig cfg = small_config();
    ParameterStore<float> s;
    Rng rng(10);
    init_params(cfg, s, rng);
    ot::randomize(s, rng);
    MMDiT<float> m(cfg, s);
    auto in = random_input<float>(cfg, 9, 4, rng);
    EXPECT_EQ(m.forward(in).vec(), m.forward(in).vec());
}

TEST(ModelForward, OutOfVocabTokenNamesIndex) {
    ModelConfig cfg = small_config();
    Fixture f(cfg, false);
    MMDiT<double> m(cfg, f.store);
    Rng rng(11);
    auto in = random_input<double>(cfg, 4, 3, rng);
    in.tokens[2] = static_cast<int>(cfg.text_vocab);
    try {
        m.forward(in);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos) << e.what();
    }
}

TEST(ModelForward, MatchesDenseOracle) {
    ModelConfig cfg = small_config();
    Fixture f(cfg);
    MMDiT<double> m(cfg, f.store);
    DenseModel dense(cfg, f.store);
    Rng rng(12);
    auto in = random_input<double>(cfg, 6, 4, rng);
    EXPECT_LT(ot::max_abs_diff(Mat(m.forward(in)), dense.forward(in)), 1e-10);
    in.speech_cond = false;
    in.text_cond = false;
    EXPECT_LT(ot::max_abs_diff(Mat(m.forward(in)), dense.forward(in)), 1e-10);
}

TEST(ModelForward, PackedBatchEqualsPerSampleOracle) {
    ModelConfig cfg = small_config();
    Fixture f(cfg);
    MMDiT<double> m(cfg, f.store);
    DenseModel dense(cfg, f.store);
    Rng rng(13);
    std::vector<SampleInput<double>> batch = {random_input<double>(cfg, 3, 5, rng), random_input<double>(cfg, 8, 2, rng),
                                              random_input<double>(cfg, 1, 1, rng)};
    batch[1].text_cond = false;
    batch[2].speech_cond = false;
    auto out = m.forward_batch(batch, true);
    ASSERT_EQ(out.velocity.size(), 3u);
    for (std::size_t b = 0; b < 3; ++b) {
        EXPECT_LT(ot::max_abs_diff(Mat(out.velocity[b]), dense.forward(batch[b])), 1e-10) << "sample " << b;
    }
    // Attention of every captured head is a distribution per query row.
    for (std::size_t b = 0; b < 3; ++b) {
        ASSERT_EQ(out.attention[b].size(), cfg.n_joint_layers * cfg.n_heads);
        for (const auto& r : out.attention[b]) {
            const std::size_t n = r.speech_len + r.text_len;
            ASSERT_EQ(r.weights.shape(), (Shape{n, n}));
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    s += r.weights.at(i, j);
                }
                EXPECT_NEAR(s, 1.0, 1e-5);
            }
        }
    }
}

TEST(ModelForward, RejectsMalformedInputs) {
    ModelConfig cfg = small_config();
    Fixture f(cfg, false);
    MMDiT<double> m(cfg, f.store);
    Rng rng(14);
    auto in = random_input<double>(cfg, 4, 3, rng);
    auto bad = in;
    bad.mask.pop_back();
    EXPECT_THROW(m.forward(bad), ShapeError);
    bad = in;
    bad.x_t = TensorD::zeros({4, cfg.latent_dim + 1});
    EXPECT_THROW(m.forward(bad), ShapeError);
    bad = in;
    bad.tokens.clear();
    EXPECT_THROW(m.forward(bad), DataError);
    EXPECT_THROW(m.forward_batch(std::span<const SampleInput<double>>()), UsageError);
}

TEST(ModelConfigTest, Validation) {
    ModelConfig c = small_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.dim = 6;
    c.n_heads = 2;
    EXPECT_THROW(c.validate(), ConfigError); // head dim 3
    c = small_config();
    c.n_joint_layers = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelGradient, FullModelMatchesFiniteDifferences) {
    ModelConfig cfg = tiny_config();
    Fixture f(cfg, true, 21);
    MMDiT<double> m(cfg, f.store);
    Rng rng(22);
    std::vector<SampleInput<double>> batch = {random_input<double>(cfg, 5, 3, rng), random_input<double>(cfg, 2, 2, rng)};
    batch[0].mask = {1, 0, 1, 1, 0};
    batch[1].text_cond = false;
    auto target0 = TensorD::randn({5, cfg.latent_dim}, rng);
    auto target1 = TensorD::randn({2, cfg.latent_dim}, rng);
    auto loss = [&] {
        auto out = m.forward_batch(batch);
        return add(mse(out.velocity[0], target0), mse(out.velocity[1], target1));
    };
    const auto r = ot::check_param_grads(f.store, loss, 1e-4);
    EXPECT_EQ(r.checked, f.store.size());
    EXPECT_LT(r.worst, 1e-4) << "worst parameter: " << r.worst_name;
}

namespace {

// Runs `steps` AdamW updates on one sample and returns the names of model
// parameters whose gradient at the updated point is exactly zero.
std::vector<std::string> dormant_after(const ModelConfig& cfg, std::size_t steps) {
    ParameterStore<float> s;
    Rng rng(23);
    init_params(cfg, s, rng);
    MMDiT<float> m(cfg, s);
    auto in = random_input<float>(cfg, 6, 4, rng);
    in.mask = {1, 1, 0, 0, 1, 0};
    auto target = Tensor::randn({6, cfg.latent_dim}, rng);
    AdamWConfig opt;
    opt.lr = 1e-3;
    for (std::size_t i = 0; i < steps; ++i) {
        backward(mse(m.forward(in), target));
        adamw_step(s, opt);
        s.zero_grad();
    }
    backward(mse(m.forward(in), target));
    std::vector<std::string> zero;
    for (const auto& [name, p] : s.entries()) {
        const bool live = p.value.has_grad() &&
                          std::any_of(p.value.grad().begin(), p.value.grad().end(), [](float g) { return g != 0.0f; });
        if (!live) {
            zero.push_back(name);
        }
    }
    return zero;
}

} // namespace

TEST(ModelGradient, SingleJointLayerHasNoDeadBranchAfterOneStep) {
    ModelConfig cfg = small_config();
    cfg.n_joint_layers = 1;
    const auto zero = dormant_after(cfg, 1);
    EXPECT_TRUE(zero.empty()) << zero.size() << " dormant, first: " << zero.front();
}

// With two zero-initialized gates in series (text output of joint layer l,
// then the speech gate of layer l+1), the text output/FFN weights of every
// joint layer but the last receive gradient only from the second update on.
TEST(ModelGradient, DeepJointStackWakesUpOnSecondStep) {
    ModelConfig cfg = small_config();
    cfg.n_joint_layers = 3;
    std::vector<std::string> expected;
    for (std::size_t l = 0; l + 1 < cfg.n_joint_layers; ++l) {
        const std::string b = "model.joint." + std::to_string(l) + ".text.";
        for (const char* w : {"ffn.0.b", "ffn.0.w", "ffn.1.b", "ffn.1.w", "out.b", "out.w"}) {
            expected.push_back(b + w);
        }
    }
    EXPECT_EQ(dormant_after(cfg, 1), expected);
    const auto zero = dormant_after(cfg, 2);
    EXPECT_TRUE(zero.empty()) << zero.size() << " dormant, first: " << zero.front();
}

TEST(ModelForward, TextChangesPrediction) {
    ModelConfig cfg = small_config();
    Fixture f(cfg);
    MMDiT<double> m(cfg, f.store);
    Rng rng(24);
    auto in = random_input<double>(cfg, 6, 4, rng);
    auto base = m.forward(in);
    in.tokens[1] = (in.tokens[1] + 1) % static_cast<int>(cfg.text_vocab);
    EXPECT_GT(ot::max_abs_diff(Mat(base), Mat(m.forward(in))), 1e-6);
}
