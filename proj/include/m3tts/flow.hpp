#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "m3tts/mmdit.hpp"
#include "m3tts/ops.hpp"
#include "m3tts/rng.hpp"

// Conditional flow matching on the linear path x_t = (1-t) x0 + t x1.
namespace m3tts::flow {

enum class SamplerMethod { euler, midpoint };

std::string to_string(SamplerMethod m);
SamplerMethod parse_method(const std::string& s);

struct SamplerSpec {
    SamplerMethod method = SamplerMethod::euler;
    std::size_t nfe = 32; // integrator steps
    double cfg_scale = 2.0;

    void validate() const;
};

enum class MaskMode { contiguous, scattered };

struct MaskRange {
    double lo = 0.7;
    double hi = 1.0;
};

template <typename T>
BasicTensor<T> interpolate(const BasicTensor<T>& x0, const BasicTensor<T>& x1, double t);

// d/dt of the interpolant; independent of t because alpha(t) = t.
template <typename T>
BasicTensor<T> target_velocity(const BasicTensor<T>& x0, const BasicTensor<T>& x1, double t);

// Mean squared error between predicted and target velocity. With
// `masked_only`, only rows whose mask entry is 1 contribute.
template <typename T>
BasicTensor<T> cfm_loss(const BasicTensor<T>& v_pred, const BasicTensor<T>& u_t, std::span<const int> mask = {},
                        bool masked_only = false);

// Standard-normal prior p_0.
template <typename T>
BasicTensor<T> sample_prior(Shape shape, Rng& rng) {
    return BasicTensor<T>::randn(std::move(shape), rng);
}

// Masks round(r * T_s) frames (half away from zero) with r ~ U(lo, hi).
// 1 = frame to generate.
std::vector<int> sample_mask(std::size_t ts, MaskRange range, Rng& rng, MaskMode mode = MaskMode::contiguous);
std::vector<int> mask_with_ratio(std::size_t ts, double ratio, Rng& rng, MaskMode mode = MaskMode::contiguous);

struct CfgDrops {
    bool drop_speech = false;
    bool drop_text = false;
};

// Two independent Bernoulli(p) draws: speech condition first, then text.
CfgDrops draw_cfg_drops(double p, Rng& rng);

// Applies drawn drops to a bundle. A dropped speech condition zeroes the x1
// term, leaving c_f equal to broadcast c_g. Returns the bundle and whether
// text is still present.
template <typename T>
std::pair<mmdit::ConditioningBundle<T>, bool> cfg_dropout(const mmdit::ConditioningBundle<T>& cond, bool text_present,
                                                          double p, Rng& rng);

// v_uncond + w (v_cond - v_uncond).
template <typename T>
BasicTensor<T> guided_velocity(const BasicTensor<T>& v_cond, const BasicTensor<T>& v_uncond, double w);

using VelocityField = std::function<Tensor(const Tensor& x, double t)>;

struct OdeResult {
    Tensor x1;
    std::size_t steps = 0;
    std::size_t field_evals = 0;
};

// Fixed-step integration from t = 0 to t = 1 with step 1/nfe.
OdeResult ode_solve(const VelocityField& field, const Tensor& x0, const SamplerSpec& spec);

} // namespace m3tts::flow
