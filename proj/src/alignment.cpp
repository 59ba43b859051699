#include "m3tts/alignment.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "m3tts/binary_io.hpp"
#include "m3tts/flow.hpp"
#include "m3tts/train.hpp"

namespace m3tts {

AlignmentScore monotonicity_score(std::span<const int> path, std::span<const int> truth) {
    if (path.empty()) {
        throw UsageError("monotonicity_score: empty path");
    }
    if (!truth.empty() && truth.size() != path.size()) {
        throw ShapeError("monotonicity_score: path has " + std::to_string(path.size()) + " rows, truth has " +
                         std::to_string(truth.size()));
    }
    AlignmentScore s;
    if (path.size() < 2) {
        s.undefined = true;
    } else {
        std::size_t ok = 0;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            ok += path[i + 1] >= path[i];
        }
        s.monotonic_fraction = static_cast<double>(ok) / static_cast<double>(path.size() - 1);
    }
    if (!truth.empty()) {
        double dev = 0.0;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < path.size(); ++i) {
            dev += std::abs(path[i] - truth[i]);
            hits += path[i] == truth[i];
        }
        s.diagonal_deviation = dev / static_cast<double>(path.size());
        s.agreement = static_cast<double>(hits) / static_cast<double>(path.size());
    }
    return s;
}

std::vector<AttentionMap> extract_attention(const TrainState& ckpt, const corpus::SynthUtterance& sample,
                                            std::optional<std::size_t> layer, std::optional<std::size_t> head) {
    const auto& cfg = ckpt.config;
    if (layer && *layer >= cfg.model.n_joint_layers) {
        throw UsageError("attention capture is only available on joint layers 0.." +
                         std::to_string(cfg.model.n_joint_layers - 1) + "; single blocks have no text stream");
    }
    if (head && *head >= cfg.model.n_heads) {
        throw UsageError("head " + std::to_string(*head) + " out of range (model has " +
                         std::to_string(cfg.model.n_heads) + ")");
    }
    const auto tgt = make_target(cfg, ckpt.params, sample);
    Rng rng(mix_seed(cfg.probe.seed, sample.index));
    mmdit::SampleInput<float> in;
    const auto& x1 = tgt.latents;
    auto x0 = flow::sample_prior<float>(x1.shape(), rng);
    in.x_t = flow::interpolate(x0, x1, cfg.probe.t);
    in.t = cfg.probe.t;
    in.mask = flow::mask_with_ratio(x1.dim(0), cfg.probe.mask_ratio, rng);
    in.x1 = x1;
    in.tokens = tgt.tokens;

    mmdit::MMDiT<float> model(cfg.model, ckpt.params);
    std::vector<mmdit::AttentionRecord> records;
    model.forward(in, &records);

    const std::size_t ts = x1.dim(0), tt = tgt.tokens.size();
    std::vector<AttentionMap> maps;
    for (std::size_t l = 0; l < cfg.model.n_joint_layers; ++l) {
        if (layer && l != *layer) {
            continue;
        }
        std::vector<double> acc(ts * tt, 0.0);
        std::size_t heads = 0;
        for (const auto& r : records) {
            if (r.layer != l || (head && r.head != *head)) {
                continue;
            }
            ++heads;
            const std::size_t len = r.speech_len + r.text_len;
            for (std::size_t i = 0; i < ts; ++i) {
                double row = 0.0;
                for (std::size_t j = 0; j < tt; ++j) {
                    row += r.weights.vec()[i * len + ts + j];
                }
                for (std::size_t j = 0; j < tt; ++j) {
                    acc[i * tt + j] += r.weights.vec()[i * len + ts + j] / row;
                }
            }
        }
        AttentionMap m;
        m.layer = l;
        m.head = head;
        std::vector<float> w(ts * tt);
        for (std::size_t i = 0; i < ts; ++i) {
            int best = 0;
            for (std::size_t j = 0; j < tt; ++j) {
                w[i * tt + j] = static_cast<float>(acc[i * tt + j] / static_cast<double>(heads));
                if (w[i * tt + j] > w[i * tt + static_cast<std::size_t>(best)]) {
                    best = static_cast<int>(j);
                }
            }
            m.argmax.push_back(best);
        }
        m.weights = Tensor::from_data({ts, tt}, std::move(w));
        maps.push_back(std::move(m));
    }
    return maps;
}

std::string encode_pgm(const Tensor& weights) {
    if (weights.rank() != 2) {
        throw ShapeError("encode_pgm: expected a matrix, got " + shape_str(weights.shape()));
    }
    const std::size_t rows = weights.dim(0), cols = weights.dim(1);
    std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (std::size_t i = 0; i < rows; ++i) {
        float mx = 0.0f;
        for (std::size_t j = 0; j < cols; ++j) {
            mx = std::max(mx, weights.at(i, j));
        }
        for (std::size_t j = 0; j < cols; ++j) {
            const double v = mx > 0.0f ? 255.0 * weights.at(i, j) / mx : 0.0;
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 255.0)))));
        }
    }
    return out;
}

void write_attention(const std::string& dir, std::span<const AttentionMap> maps, std::span<const int> truth) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (const auto& m : maps) {
        std::string stem = "layer" + std::to_string(m.layer);
        if (m.head) {
            stem += "_head" + std::to_string(*m.head);
        }
        bin::write_file((fs::path(dir) / ("attn_" + stem + ".pgm")).string(), encode_pgm(m.weights));
        std::ofstream csv(fs::path(dir) / ("argmax_" + stem + ".csv"), std::ios::trunc);
        if (!csv) {
            throw DataError("cannot write argmax csv in '" + dir + "'");
        }
        csv << "row,argmax,truth\n";
        for (std::size_t i = 0; i < m.argmax.size(); ++i) {
            csv << i << ',' << m.argmax[i] << ',';
            if (i < truth.size()) {
                csv << truth[i];
            }
            csv << '\n';
        }
    }
}

ArgmaxCsv read_argmax_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open '" + path + "'");
    }
    ArgmaxCsv out;
    std::string line;
    std::size_t line_no = 0;
    bool any_truth = false, missing_truth = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1 || line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        std::string row, arg, truth;
        std::getline(ss, row, ',');
        std::getline(ss, arg, ',');
        std::getline(ss, truth, ',');
        try {
            out.argmax.push_back(std::stoi(arg));
            if (truth.empty()) {
                missing_truth = true;
            } else {
                out.truth.push_back(std::stoi(truth));
                any_truth = true;
            }
        } catch (const std::exception&) {
            throw DataError(path + ":" + std::to_string(line_no) + ": malformed row");
        }
    }
    if (any_truth && missing_truth) {
        throw DataError(path + ": truth column is only partially filled");
    }
    return out;
}

AlignmentEval evaluate_alignment(const TrainState& ckpt, std::span<const corpus::SynthUtterance> samples) {
    if (samples.empty()) {
        throw UsageError("evaluate_alignment: no samples");
    }
    AlignmentEval ev;
    ev.layers.resize(ckpt.config.model.n_joint_layers);
    for (const auto& s : samples) {
        const auto truth = ckpt.config.path == AcousticPath::vae ? corpus::downsample_alignment(s.alignment)
                                                                 : s.alignment;
        for (const auto& m : extract_attention(ckpt, s)) {
            const auto score = monotonicity_score(m.argmax, truth);
            ev.layers[m.layer].layer = m.layer;
            ev.layers[m.layer].monotonic += score.monotonic_fraction;
            ev.layers[m.layer].agreement += *score.agreement;
        }
    }
    for (auto& l : ev.layers) {
        l.monotonic /= static_cast<double>(samples.size());
        l.agreement /= static_cast<double>(samples.size());
        if (l.agreement > ev.layers[ev.best].agreement) {
            ev.best = l.layer;
        }
    }
    return ev;
}

} // namespace m3tts
