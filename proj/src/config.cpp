#include "m3tts/config.hpp"

#include <set>

#include "json.hpp"

#include "m3tts/binary_io.hpp"

namespace m3tts {

using nlohmann::json;

std::string to_string(AcousticPath p) {
    return p == AcousticPath::vae ? "vae" : "fbank";
}

AcousticPath parse_path(const std::string& s) {
    if (s == "vae") {
        return AcousticPath::vae;
    }
    if (s == "fbank") {
        return AcousticPath::fbank;
    }
    throw ConfigError("unknown acoustic path '" + s + "' (expected vae or fbank)");
}

namespace {

std::string mask_mode_name(flow::MaskMode m) {
    return m == flow::MaskMode::contiguous ? "contiguous" : "scattered";
}

flow::MaskMode parse_mask_mode(const std::string& s) {
    if (s == "contiguous") {
        return flow::MaskMode::contiguous;
    }
    if (s == "scattered") {
        return flow::MaskMode::scattered;
    }
    throw ConfigError("unknown mask mode '" + s + "'");
}

// Reads keys of one JSON object, remembering which were consumed so the
// leftovers can be reported.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) {
            throw ConfigError("config section '" + name_ + "' must be an object");
        }
    }

    template <typename V>
    void get(const char* key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            out = j_.at(key).get<V>();
        } catch (const json::exception&) {
            throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
        }
    }

    Section sub(const char* key) {
        seen_.insert(key);
        static const json empty = json::object();
        return Section(j_.contains(key) ? j_.at(key) : empty, name_.empty() ? key : name_ + "." + key);
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) {
                throw ConfigError("unknown config key '" + (name_.empty() ? key : name_ + "." + key) + "'");
            }
        }
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

} // namespace

bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return a.batch_size == b.batch_size && a.total_steps == b.total_steps && a.optim.lr == b.optim.lr &&
           a.optim.beta1 == b.optim.beta1 && a.optim.beta2 == b.optim.beta2 && a.optim.eps == b.optim.eps &&
           a.optim.weight_decay == b.optim.weight_decay && a.mask.lo == b.mask.lo && a.mask.hi == b.mask.hi &&
           a.mask_mode == b.mask_mode && a.masked_loss == b.masked_loss && a.cfg_drop_p == b.cfg_drop_p &&
           a.checkpoint_every == b.checkpoint_every && a.log_every == b.log_every;
}

bool operator==(const ProbeConfig& a, const ProbeConfig& b) {
    return a.t == b.t && a.seed == b.seed && a.mask_ratio == b.mask_ratio;
}

bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.seed == b.seed && a.path == b.path && a.model == b.model && a.corpus == b.corpus && a.codec == b.codec &&
           a.train == b.train && a.sampler.method == b.sampler.method && a.sampler.nfe == b.sampler.nfe &&
           a.sampler.cfg_scale == b.sampler.cfg_scale && a.probe == b.probe;
}

void RunConfig::resolve() {
    model.latent_dim = latent_dim();
    model.text_vocab = corpus.vocab;
    model.validate();
    corpus.validate();
    codec.codec.validate();
    sampler.validate();
    if (train.batch_size < 1 || train.total_steps < 1 || train.log_every < 1) {
        throw ConfigError("train: batch_size, total_steps and log_every must be >= 1");
    }
    if (!(train.cfg_drop_p >= 0.0 && train.cfg_drop_p <= 1.0)) {
        throw ConfigError("train: cfg_drop_p must lie in [0, 1]");
    }
    if (!(train.mask.lo >= 0.0 && train.mask.lo <= train.mask.hi && train.mask.hi <= 1.0)) {
        throw ConfigError("train: mask ratio range must satisfy 0 <= min <= max <= 1");
    }
    if (!(train.optim.lr > 0.0) || !(train.optim.beta1 >= 0.0 && train.optim.beta1 < 1.0) ||
        !(train.optim.beta2 >= 0.0 && train.optim.beta2 < 1.0) || !(train.optim.eps > 0.0) ||
        !(train.optim.weight_decay >= 0.0)) {
        throw ConfigError("train: invalid optimizer hyperparameters");
    }
    if (path == AcousticPath::vae && (codec.steps < 1 || codec.batch < 1 || !(codec.lr > 0.0))) {
        throw ConfigError("codec: steps, batch and lr must be positive on the vae path");
    }
    if (!(probe.t >= 0.0 && probe.t <= 1.0) || !(probe.mask_ratio >= 0.0 && probe.mask_ratio <= 1.0)) {
        throw ConfigError("probe: t and mask_ratio must lie in [0, 1]");
    }
}

RunConfig parse_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    Section s(root, "");
    s.get("seed", c.seed);
    std::string path = to_string(c.path);
    s.get("path", path);
    c.path = parse_path(path);

    auto m = s.sub("model");
    m.get("dim", c.model.dim);
    m.get("joint_layers", c.model.n_joint_layers);
    m.get("single_layers", c.model.n_single_layers);
    m.get("heads", c.model.n_heads);
    m.get("text_encoder_layers", c.model.text_encoder_layers);
    m.get("rope_base", c.model.rope_base);
    m.get("ffn_mult", c.model.ffn_mult);
    m.get("shared_positions", c.model.shared_positions);
    m.finish();

    auto co = s.sub("corpus");
    co.get("seed", c.corpus.seed);
    co.get("size", c.corpus.size);
    co.get("held_out", c.corpus.held_out);
    co.get("vocab", c.corpus.vocab);
    co.get("text_len_min", c.corpus.text_len_min);
    co.get("text_len_max", c.corpus.text_len_max);
    co.get("dur_min", c.corpus.dur_min);
    co.get("dur_max", c.corpus.dur_max);
    co.get("noise_sigma", c.corpus.noise_sigma);
    co.get("drift_amp", c.corpus.drift_amp);
    co.finish();

    auto cd = s.sub("codec");
    cd.get("hidden", c.codec.codec.hidden);
    cd.get("beta", c.codec.codec.beta);
    cd.get("steps", c.codec.steps);
    cd.get("batch", c.codec.batch);
    cd.get("lr", c.codec.lr);
    cd.finish();

    auto t = s.sub("train");
    t.get("batch_size", c.train.batch_size);
    t.get("total_steps", c.train.total_steps);
    t.get("lr", c.train.optim.lr);
    t.get("beta1", c.train.optim.beta1);
    t.get("beta2", c.train.optim.beta2);
    t.get("eps", c.train.optim.eps);
    t.get("weight_decay", c.train.optim.weight_decay);
    t.get("mask_min", c.train.mask.lo);
    t.get("mask_max", c.train.mask.hi);
    std::string mode = mask_mode_name(c.train.mask_mode);
    t.get("mask_mode", mode);
    c.train.mask_mode = parse_mask_mode(mode);
    t.get("masked_loss", c.train.masked_loss);
    t.get("cfg_drop_p", c.train.cfg_drop_p);
    t.get("checkpoint_every", c.train.checkpoint_every);
    t.get("log_every", c.train.log_every);
    t.finish();

    auto sp = s.sub("sampler");
    std::string method = flow::to_string(c.sampler.method);
    sp.get("method", method);
    try {
        c.sampler.method = flow::parse_method(method);
    } catch (const UsageError& e) {
        throw ConfigError(e.what());
    }
    sp.get("nfe", c.sampler.nfe);
    sp.get("cfg_scale", c.sampler.cfg_scale);
    sp.finish();

    auto pr = s.sub("probe");
    pr.get("t", c.probe.t);
    pr.get("seed", c.probe.seed);
    pr.get("mask_ratio", c.probe.mask_ratio);
    pr.finish();

    s.finish();
    try {
        c.resolve();
    } catch (const UsageError& e) {
        throw ConfigError(e.what());
    }
    return c;
}

RunConfig load_config(const std::string& path) {
    return parse_config(bin::read_file(path));
}

std::string dump_config(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["path"] = to_string(c.path);
    j["model"] = {
        {"dim", c.model.dim},
        {"joint_layers", c.model.n_joint_layers},
        {"single_layers", c.model.n_single_layers},
        {"heads", c.model.n_heads},
        {"text_encoder_layers", c.model.text_encoder_layers},
        {"rope_base", c.model.rope_base},
        {"ffn_mult", c.model.ffn_mult},
        {"shared_positions", c.model.shared_positions},
    };
    j["corpus"] = {
        {"seed", c.corpus.seed},
        {"size", c.corpus.size},
        {"held_out", c.corpus.held_out},
        {"vocab", c.corpus.vocab},
        {"text_len_min", c.corpus.text_len_min},
        {"text_len_max", c.corpus.text_len_max},
        {"dur_min", c.corpus.dur_min},
        {"dur_max", c.corpus.dur_max},
        {"noise_sigma", c.corpus.noise_sigma},
        {"drift_amp", c.corpus.drift_amp},
    };
    j["codec"] = {
        {"hidden", c.codec.codec.hidden}, {"beta", c.codec.codec.beta}, {"steps", c.codec.steps},
        {"batch", c.codec.batch},         {"lr", c.codec.lr},
    };
    j["train"] = {
        {"batch_size", c.train.batch_size},
        {"total_steps", c.train.total_steps},
        {"lr", c.train.optim.lr},
        {"beta1", c.train.optim.beta1},
        {"beta2", c.train.optim.beta2},
        {"eps", c.train.optim.eps},
        {"weight_decay", c.train.optim.weight_decay},
        {"mask_min", c.train.mask.lo},
        {"mask_max", c.train.mask.hi},
        {"mask_mode", mask_mode_name(c.train.mask_mode)},
        {"masked_loss", c.train.masked_loss},
        {"cfg_drop_p", c.train.cfg_drop_p},
        {"checkpoint_every", c.train.checkpoint_every},
        {"log_every", c.train.log_every},
    };
    j["sampler"] = {
        {"method", flow::to_string(c.sampler.method)},
        {"nfe", c.sampler.nfe},
        {"cfg_scale", c.sampler.cfg_scale},
    };
    j["probe"] = {{"t", c.probe.t}, {"seed", c.probe.seed}, {"mask_ratio", c.probe.mask_ratio}};
    return j.dump(2);
}

} // namespace m3tts
