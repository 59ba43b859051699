#pragma once

// Test oracles: central finite differences and a naive dense-matrix library
// used to recompute model pieces independently of the tensor ops.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "m3tts/ops.hpp"
#include "m3tts/param_store.hpp"
#include "m3tts/rng.hpp"

namespace m3tts::testing {

struct GradCheck {
    double worst = 0.0;
    std::string worst_name;
    std::size_t checked = 0;
};

// Norm-wise relative error between two gradient vectors.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
    return std::sqrt(diff) / denom;
}

// Compares the autodiff gradient of every parameter in `store` (whose name
// starts with prefix) against central differences of `loss`.
inline GradCheck check_param_grads(ParameterStore<double>& store, const std::function<TensorD()>& loss, double h,
                                   const std::string& prefix = "") {
    store.zero_grad();
    backward(loss());
    GradCheck out;
    for (auto& [name, p] : store.entries()) {
        if (!name.starts_with(prefix)) {
            continue;
        }
        std::vector<double> analytic(p.value.numel(), 0.0);
        if (p.value.has_grad()) {
            std::copy(p.value.grad().begin(), p.value.grad().end(), analytic.begin());
        }
        std::vector<double> numeric(p.value.numel());
        auto w = p.value.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            w[i] = orig + h;
            const double up = loss().item();
            w[i] = orig - h;
            const double down = loss().item();
            w[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        const double e = rel_error(analytic, numeric);
        ++out.checked;
        if (e > out.worst) {
            out.worst = e;
            out.worst_name = name;
        }
    }
    store.zero_grad();
    return out;
}

// Gradient check of f with respect to its inputs. The scalar probed is
// sum(f(x) * r) for a fixed random r, so every output element contributes.
inline double check_input_grads(std::vector<TensorD> inputs,
                                const std::function<TensorD(const std::vector<TensorD>&)>& f, Rng& rng,
                                double h = 1e-6) {
    for (auto& x : inputs) {
        x = x.detach(true);
    }
    const auto probe = f(inputs);
    const auto r = TensorD::randn(probe.shape(), rng);
    auto scalar = [&](const std::vector<TensorD>& in) {
        auto y = f(in);
        return y.rank() == 0 ? mul(y, r) : sum(mul(y, r));
    };
    backward(scalar(inputs));
    double worst = 0.0;
    for (auto& x : inputs) {
        std::vector<double> analytic(x.numel(), 0.0);
        if (x.has_grad()) {
            std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
        }
        std::vector<double> numeric(x.numel());
        auto w = x.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            w[i] = orig + h;
            const double up = scalar(inputs).item();
            w[i] = orig - h;
            const double down = scalar(inputs).item();
            w[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        worst = std::max(worst, rel_error(analytic, numeric));
    }
    return worst;
}

inline TensorD uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
    }
    return TensorD::from_data(std::move(shape), std::move(v));
}

// Dense row-major matrix in double precision.
struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
    template <typename T>
    explicit Mat(const BasicTensor<T>& t)
        : rows(t.rank() == 1 ? 1 : t.dim(0)), cols(t.rank() == 1 ? t.dim(0) : t.dim(1)), v(t.vec().begin(), t.vec().end()) {}

    double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

inline Mat mm(const Mat& a, const Mat& b) {
    Mat c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) {
                s += a(i, k) * b(k, j);
            }
            c(i, j) = s;
        }
    }
    return c;
}

// x w + b, with b a 1 x n row.
inline Mat affine(const Mat& x, const Mat& w, const Mat& b) {
    Mat y = mm(x, w);
    for (std::size_t i = 0; i < y.rows; ++i) {
        for (std::size_t j = 0; j < y.cols; ++j) {
            y(i, j) += b.v[j];
        }
    }
    return y;
}

template <typename F>
Mat map(Mat x, F f) {
    for (auto& e : x.v) {
        e = f(e);
    }
    return x;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Mat layer_norm(const Mat& x, double eps = 1e-5) {
    Mat y(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double mu = 0.0, var = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) {
            mu += x(i, j);
        }
        mu /= static_cast<double>(x.cols);
        for (std::size_t j = 0; j < x.cols; ++j) {
            var += (x(i, j) - mu) * (x(i, j) - mu);
        }
        var /= static_cast<double>(x.cols);
        for (std::size_t j = 0; j < x.cols; ++j) {
            y(i, j) = (x(i, j) - mu) / std::sqrt(var + eps);
        }
    }
    return y;
}

inline Mat cols(const Mat& x, std::size_t start, std::size_t count) {
    Mat y(x.rows, count);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t j = 0; j < count; ++j) {
            y(i, j) = x(i, start + j);
        }
    }
    return y;
}

inline Mat rows_of(const Mat& x, std::size_t start, std::size_t count) {
    Mat y(count, x.cols);
    std::copy_n(x.v.begin() + static_cast<std::ptrdiff_t>(start * x.cols), count * x.cols, y.v.begin());
    return y;
}

inline Mat vstack(const Mat& a, const Mat& b) {
    Mat y(a.rows + b.rows, a.cols);
    std::copy(a.v.begin(), a.v.end(), y.v.begin());
    std::copy(b.v.begin(), b.v.end(), y.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
    return y;
}

inline Mat zip(const Mat& a, const Mat& b, const std::function<double(double, double)>& f) {
    Mat y = a;
    for (std::size_t i = 0; i < y.v.size(); ++i) {
        y.v[i] = f(a.v[i], b.v[i]);
    }
    return y;
}

inline Mat plus(const Mat& a, const Mat& b) { return zip(a, b, [](double x, double y) { return x + y; }); }
inline Mat times(const Mat& a, const Mat& b) { return zip(a, b, [](double x, double y) { return x * y; }); }

// Repeats a 1 x n row `n` times.
inline Mat repeat_row(const Mat& r, std::size_t n) {
    Mat y(n, r.cols);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(r.v.begin(), r.v.end(), y.v.begin() + static_cast<std::ptrdiff_t>(i * r.cols));
    }
    return y;
}

// Rotation of pairs (2i, 2i+1) inside every head_dim block.
inline Mat rope(const Mat& x, const std::vector<std::size_t>& pos, double base, std::size_t head_dim) {
    Mat y = x;
    for (std::size_t r = 0; r < x.rows; ++r) {
        for (std::size_t h0 = 0; h0 < x.cols; h0 += head_dim) {
            for (std::size_t i = 0; i < head_dim / 2; ++i) {
                const double ang =
                    static_cast<double>(pos[r]) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
                const double a = x(r, h0 + 2 * i), b = x(r, h0 + 2 * i + 1);
                y(r, h0 + 2 * i) = a * std::cos(ang) - b * std::sin(ang);
                y(r, h0 + 2 * i + 1) = a * std::sin(ang) + b * std::cos(ang);
            }
        }
    }
    return y;
}

// Full (unsegmented) multi-head attention.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads) {
    const std::size_t n = q.rows, dh = q.cols / heads;
    Mat out(n, q.cols);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> s(n);
            double mx = -1e300;
            for (std::size_t j = 0; j < n; ++j) {
                double d = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                    d += q(i, h * dh + c) * k(j, h * dh + c);
                }
                s[j] = d / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (auto& e : s) {
                e = std::exp(e - mx);
                z += e;
            }
            for (std::size_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    acc += s[j] / z * v(j, h * dh + c);
                }
                out(i, h * dh + c) = acc;
            }
        }
    }
    return out;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        m = std::max(m, std::abs(a.v[i] - b.v[i]));
    }
    return m;
}

// Overwrites every parameter with N(0, stddev^2) noise, so zero-initialized
// gates and biases do not hide any path.
template <typename T>
void randomize(ParameterStore<T>& store, Rng& rng, double stddev = 0.3) {
    for (auto& [name, p] : store.entries()) {
        for (auto& w : p.value.mutable_data()) {
            w = static_cast<T>(stddev * rng.normal());
        }
    }
}

} // namespace m3tts::testing
