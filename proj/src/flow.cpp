#include "m3tts/flow.hpp"

#include <cmath>
#include <numeric>

namespace m3tts::flow {

std::string to_string(SamplerMethod m) {
    return m == SamplerMethod::euler ? "euler" : "midpoint";
}

SamplerMethod parse_method(const std::string& s) {
    if (s == "euler") {
        return SamplerMethod::euler;
    }
    if (s == "midpoint") {
        return SamplerMethod::midpoint;
    }
    throw UsageError("unknown sampler method '" + s + "' (expected euler or midpoint)");
}

void SamplerSpec::validate() const {
    if (nfe < 1) {
        throw UsageError("sampler nfe must be >= 1");
    }
    if (!(cfg_scale >= 0.0)) {
        throw UsageError("cfg scale must be >= 0");
    }
}

namespace {

void check_t(double t, const char* op) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw DomainError(std::string(op) + ": t = " + std::to_string(t) + " outside [0, 1]");
    }
}

template <typename T>
void check_same(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

} // namespace

template <typename T>
BasicTensor<T> interpolate(const BasicTensor<T>& x0, const BasicTensor<T>& x1, double t) {
    check_same(x0, x1, "interpolate");
    check_t(t, "interpolate");
    return add(scale(x0, static_cast<T>(1.0 - t)), scale(x1, static_cast<T>(t)));
}

template <typename T>
BasicTensor<T> target_velocity(const BasicTensor<T>& x0, const BasicTensor<T>& x1, double t) {
    check_same(x0, x1, "target_velocity");
    check_t(t, "target_velocity");
    return sub(x1, x0);
}

template <typename T>
BasicTensor<T> cfm_loss(const BasicTensor<T>& v_pred, const BasicTensor<T>& u_t, std::span<const int> mask,
                        bool masked_only) {
    check_same(v_pred, u_t, "cfm_loss");
    if (masked_only) {
        return masked_mse(v_pred, u_t, mask);
    }
    return mse(v_pred, u_t);
}

std::vector<int> mask_with_ratio(std::size_t ts, double ratio, Rng& rng, MaskMode mode) {
    if (ts < 1) {
        throw UsageError("mask: sequence length must be >= 1");
    }
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw DomainError("mask: ratio " + std::to_string(ratio) + " outside [0, 1]");
    }
    const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ts)));
    std::vector<int> m(ts, 0);
    if (mode == MaskMode::contiguous) {
        const std::size_t start = rng.index(ts - count + 1);
        std::fill(m.begin() + static_cast<std::ptrdiff_t>(start), m.begin() + static_cast<std::ptrdiff_t>(start + count), 1);
    } else {
        std::vector<std::size_t> order(ts);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = 0; i < count; ++i) {
            std::swap(order[i], order[i + rng.index(ts - i)]);
            m[order[i]] = 1;
        }
    }
    return m;
}

std::vector<int> sample_mask(std::size_t ts, MaskRange range, Rng& rng, MaskMode mode) {
    if (!(range.lo >= 0.0 && range.lo <= range.hi && range.hi <= 1.0)) {
        throw DomainError("mask: invalid ratio range [" + std::to_string(range.lo) + ", " + std::to_string(range.hi) + "]");
    }
    const double r = range.lo == range.hi ? range.lo : rng.uniform(range.lo, range.hi);
    return mask_with_ratio(ts, r, rng, mode);
}

CfgDrops draw_cfg_drops(double p, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw DomainError("cfg dropout probability " + std::to_string(p) + " outside [0, 1]");
    }
    CfgDrops d;
    d.drop_speech = rng.bernoulli(p);
    d.drop_text = rng.bernoulli(p);
    return d;
}

template <typename T>
std::pair<mmdit::ConditioningBundle<T>, bool> cfg_dropout(const mmdit::ConditioningBundle<T>& cond, bool text_present,
                                                          double p, Rng& rng) {
    const auto drops = draw_cfg_drops(p, rng);
    auto out = cond;
    if (drops.drop_speech) {
        out = mmdit::build_conditioning(cond.t, std::span<const int>(cond.mask),
                                        BasicTensor<T>::zeros(cond.x1_proj.shape()), cond.c_g);
    }
    return {out, text_present && !drops.drop_text};
}

template <typename T>
BasicTensor<T> guided_velocity(const BasicTensor<T>& v_cond, const BasicTensor<T>& v_uncond, double w) {
    check_same(v_cond, v_uncond, "guided_velocity");
    return add(v_uncond, scale(sub(v_cond, v_uncond), static_cast<T>(w)));
}

OdeResult ode_solve(const VelocityField& field, const Tensor& x0, const SamplerSpec& spec) {
    spec.validate();
    const auto n_steps = static_cast<double>(spec.nfe);
    const Shape shape = x0.shape();
    const auto& base = x0.vec();
    OdeResult r;
    // x_n = x0 + (sum of step velocities) / nfe, accumulated in double so a
    // constant field lands on x0 + c exactly for every nfe.
    std::vector<double> acc(base.size(), 0.0);
    auto state = [&](const Tensor* k1, std::size_t step) {
        std::vector<float> out(base.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double half = k1 ? 0.5 * static_cast<double>(k1->vec()[i]) : 0.0;
            out[i] = static_cast<float>(static_cast<double>(base[i]) + (acc[i] + half) / n_steps);
            if (!std::isfinite(out[i])) {
                throw NumericError("ode_solve: non-finite state at step " + std::to_string(step));
            }
        }
        return Tensor::from_data(shape, std::move(out));
    };
    auto eval = [&](const Tensor& at, double t) {
        ++r.field_evals;
        Tensor v = field(at, t);
        if (v.shape() != shape) {
            throw ShapeError("ode_solve: field returned " + shape_str(v.shape()) + " for state " + shape_str(shape));
        }
        return v;
    };
    Tensor x = state(nullptr, 0);
    for (std::size_t n = 0; n < spec.nfe; ++n) {
        const double t = static_cast<double>(n) / n_steps;
        Tensor v = eval(x, t);
        if (spec.method == SamplerMethod::midpoint) {
            v = eval(state(&v, n), t + 0.5 / n_steps);
        }
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += static_cast<double>(v.vec()[i]);
        }
        x = state(nullptr, n);
        ++r.steps;
    }
    r.x1 = x;
    return r;
}

template BasicTensor<float> interpolate(const BasicTensor<float>&, const BasicTensor<float>&, double);
template BasicTensor<double> interpolate(const BasicTensor<double>&, const BasicTensor<double>&, double);
template BasicTensor<float> target_velocity(const BasicTensor<float>&, const BasicTensor<float>&, double);
template BasicTensor<double> target_velocity(const BasicTensor<double>&, const BasicTensor<double>&, double);
template BasicTensor<float> cfm_loss(const BasicTensor<float>&, const BasicTensor<float>&, std::span<const int>, bool);
template BasicTensor<double> cfm_loss(const BasicTensor<double>&, const BasicTensor<double>&, std::span<const int>, bool);
template std::pair<mmdit::ConditioningBundle<float>, bool> cfg_dropout(const mmdit::ConditioningBundle<float>&, bool,
                                                                       double, Rng&);
template std::pair<mmdit::ConditioningBundle<double>, bool> cfg_dropout(const mmdit::ConditioningBundle<double>&, bool,
                                                                        double, Rng&);
template BasicTensor<float> guided_velocity(const BasicTensor<float>&, const BasicTensor<float>&, double);
template BasicTensor<double> guided_velocity(const BasicTensor<double>&, const BasicTensor<double>&, double);

} // namespace m3tts::flow
