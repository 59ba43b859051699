#include "m3tts/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace m3tts {

namespace {

template <typename T>
std::vector<T>* grad_of(TensorNode<T>& self, std::size_t i) {
    auto& p = self.parents[i];
    if (!p || !p->requires_grad) {
        return nullptr;
    }
    return &p->grad_buffer();
}

template <typename T>
void require_rank2(const BasicTensor<T>& x, const char* op) {
    if (!x.defined() || x.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                         (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
    }
}

template <typename T>
void require_same(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename T>
std::vector<T> transpose(const T* src, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    return out;
}

template <typename T, typename F, typename G>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& a, F forward, G derivative) {
    std::vector<T> out(a.numel());
    const auto& x = a.vec();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = forward(x[i]);
    }
    return detail::make_result<T>(op, a.shape(), std::move(out), {a}, [derivative](TensorNode<T>& self) {
        if (auto* g = grad_of(self, 0)) {
            const auto& x = self.parents[0]->data;
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * derivative(x[i], self.data[i]);
            }
        }
    });
}

} // namespace

namespace kernels {

template <typename T>
void gemm_acc(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c, std::size_t m, std::size_t k,
              std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        T* __restrict__ c0 = c + i * n;
        T* __restrict__ c1 = c0 + n;
        T* __restrict__ c2 = c1 + n;
        T* __restrict__ c3 = c2 + n;
        const T* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T x0 = a0[p];
            const T x1 = a0[k + p];
            const T x2 = a0[2 * k + p];
            const T x3 = a0[3 * k + p];
            const T* __restrict__ br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T bv = br[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        T* __restrict__ c0 = c + i * n;
        const T* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T x0 = a0[p];
            const T* __restrict__ br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                c0[j] += x0 * br[j];
            }
        }
    }
}

template void gemm_acc(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);

} // namespace kernels

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.vec()[i] + b.vec()[i];
    }
    return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (auto* g = grad_of(self, p)) {
                for (std::size_t i = 0; i < g->size(); ++i) {
                    (*g)[i] += self.grad[i];
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.vec()[i] - b.vec()[i];
    }
    return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i];
            }
        }
        if (auto* g = grad_of(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] -= self.grad[i];
            }
        }
    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.vec()[i] * b.vec()[i];
    }
    return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * y[i];
            }
        }
        if (auto* g = grad_of(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * x[i];
            }
        }
    });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
    return unary<T>(
        "scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
    return unary<T>(
        "add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& a) {
    return unary<T>(
        "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
    return unary<T>(
        "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& a) {
    return unary<T>(
        "silu", a, [](T x) { return x / (T(1) + std::exp(-x)); },
        [](T x, T) {
            const T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    return unary<T>(
        "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-T(0.5) * x * x); });
}

template <typename T>
BasicTensor<T> add_broadcast(const BasicTensor<T>& x, const BasicTensor<T>& v) {
    require_rank2(x, "add_broadcast");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (v.numel() != n || v.rank() > 2 || (v.rank() == 2 && v.dim(0) != 1)) {
        throw ShapeError("add_broadcast: vector " + shape_str(v.shape()) + " does not broadcast over " +
                         shape_str(x.shape()));
    }
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = x.vec()[i * n + j] + v.vec()[j];
        }
    }
    return detail::make_result<T>("add_broadcast", x.shape(), std::move(out), {x, v}, [m, n](TensorNode<T>& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < m * n; ++i) {
                (*g)[i] += self.grad[i];
            }
        }
        if (auto* g = grad_of(self, 1)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    (*g)[j] += self.grad[i * n + j];
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> mul_rows(const BasicTensor<T>& x, std::span<const T> factors) {
    require_rank2(x, "mul_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (factors.size() != m) {
        throw ShapeError("mul_rows: " + std::to_string(factors.size()) + " factors for " + shape_str(x.shape()));
    }
    std::vector<T> f(factors.begin(), factors.end());
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = x.vec()[i * n + j] * f[i];
        }
    }
    return detail::make_result<T>("mul_rows", x.shape(), std::move(out), {x},
                                  [m, n, f = std::move(f)](TensorNode<T>& self) {
                                      if (auto* g = grad_of(self, 0)) {
                                          for (std::size_t i = 0; i < m; ++i) {
                                              for (std::size_t j = 0; j < n; ++j) {
                                                  (*g)[i * n + j] += self.grad[i * n + j] * f[i];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    kernels::gemm_acc(a.vec().data(), b.vec().data(), out.data(), m, k, n);
    return detail::make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](TensorNode<T>& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        if (auto* g = grad_of(self, 0)) {
            auto bt = transpose(bv.data(), k, n);
            kernels::gemm_acc(self.grad.data(), bt.data(), g->data(), m, n, k);
        }
        if (auto* g = grad_of(self, 1)) {
            auto at = transpose(av.data(), m, k);
            kernels::gemm_acc(at.data(), self.grad.data(), g->data(), k, m, n);
        }
    });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
    require_rank2(x, "linear");
    require_rank2(w, "linear");
    const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
    if (w.dim(0) != k) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
    }
    const bool has_bias = b.defined();
    if (has_bias && b.numel() != n) {
        throw ShapeError("linear: bias " + shape_str(b.shape()) + " for weight " + shape_str(w.shape()));
    }
    std::vector<T> out(m * n, T(0));
    if (has_bias) {
        for (std::size_t i = 0; i < m; ++i) {
            std::copy(b.vec().begin(), b.vec().end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
        }
    }
    kernels::gemm_acc(x.vec().data(), w.vec().data(), out.data(), m, k, n);
    return detail::make_result<T>("linear", {m, n}, std::move(out), {x, w, b}, [m, k, n](TensorNode<T>& self) {
        const auto& xv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        if (auto* g = grad_of(self, 0)) {
            auto wt = transpose(wv.data(), k, n);
            kernels::gemm_acc(self.grad.data(), wt.data(), g->data(), m, n, k);
        }
        if (auto* g = grad_of(self, 1)) {
            auto xt = transpose(xv.data(), m, k);
            kernels::gemm_acc(xt.data(), self.grad.data(), g->data(), k, m, n);
        }
        if (self.parents[2]) {
            if (auto* g = grad_of(self, 2)) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        (*g)[j] += self.grad[i * n + j];
                    }
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids) {
    require_rank2(table, "embedding");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw DataError("embedding: token id " + std::to_string(ids[i]) + " at index " + std::to_string(i) +
                            " outside vocabulary of size " + std::to_string(vocab));
        }
        idx[i] = static_cast<std::size_t>(ids[i]);
    }
    std::vector<T> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(table.vec().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const std::size_t rows = idx.size();
    return detail::make_result<T>("embedding", {rows, d}, std::move(out), {table},
                                  [d, idx = std::move(idx)](TensorNode<T>& self) {
                                      if (auto* g = grad_of(self, 0)) {
                                          for (std::size_t i = 0; i < idx.size(); ++i) {
                                              for (std::size_t j = 0; j < d; ++j) {
                                                  (*g)[idx[i] * d + j] += self.grad[i * d + j];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x) {
    require_rank2(x, "layer_norm");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<T> out(m * n);
    std::vector<T> rstd(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = x.vec().data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mu += row[j];
        }
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double r = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[i] = static_cast<T>(r);
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = static_cast<T>((row[j] - mu) * r);
        }
    }
    return detail::make_result<T>("layer_norm", x.shape(), std::move(out), {x},
                                  [m, n, rstd = std::move(rstd)](TensorNode<T>& self) {
                                      auto* g = grad_of(self, 0);
                                      if (!g) {
                                          return;
                                      }
                                      for (std::size_t i = 0; i < m; ++i) {
                                          const T* y = self.data.data() + i * n;
                                          const T* dy = self.grad.data() + i * n;
                                          double mdy = 0.0, mdyy = 0.0;
                                          for (std::size_t j = 0; j < n; ++j) {
                                              mdy += dy[j];
                                              mdyy += static_cast<double>(dy[j]) * y[j];
                                          }
                                          mdy /= static_cast<double>(n);
                                          mdyy /= static_cast<double>(n);
                                          for (std::size_t j = 0; j < n; ++j) {
                                              (*g)[i * n + j] += static_cast<T>(rstd[i] * (dy[j] - mdy - y[j] * mdyy));
                                          }
                                      }
                                  });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) {
        outer *= x.dim(a);
    }
    for (std::size_t a = axis + 1; a < x.rank(); ++a) {
        inner *= x.dim(a);
    }
    const std::size_t len = x.dim(axis);
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = x.vec()[base];
            for (std::size_t j = 1; j < len; ++j) {
                mx = std::max(mx, x.vec()[base + j * inner]);
            }
            T total = T(0);
            for (std::size_t j = 0; j < len; ++j) {
                const T e = std::exp(x.vec()[base + j * inner] - mx);
                out[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < len; ++j) {
                out[base + j * inner] /= total;
            }
        }
    }
    return detail::make_result<T>("softmax", x.shape(), std::move(out), {x},
                                  [outer, inner, len](TensorNode<T>& self) {
                                      auto* g = grad_of(self, 0);
                                      if (!g) {
                                          return;
                                      }
                                      for (std::size_t o = 0; o < outer; ++o) {
                                          for (std::size_t in = 0; in < inner; ++in) {
                                              const std::size_t base = o * len * inner + in;
                                              T dot = T(0);
                                              for (std::size_t j = 0; j < len; ++j) {
                                                  const std::size_t p = base + j * inner;
                                                  dot += self.grad[p] * self.data[p];
                                              }
                                              for (std::size_t j = 0; j < len; ++j) {
                                                  const std::size_t p = base + j * inner;
                                                  (*g)[p] += self.data[p] * (self.grad[p] - dot);
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    T total = T(0);
    for (auto v : a.vec()) {
        total += v;
    }
    return detail::make_result<T>("sum", Shape{}, std::vector<T>{total}, {a}, [](TensorNode<T>& self) {
        if (auto* g = grad_of(self, 0)) {
            for (auto& v : *g) {
                v += self.grad[0];
            }
        }
    });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    if (a.numel() == 0) {
        throw ShapeError("mean of an empty tensor");
    }
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same(a, b, "mse");
    if (a.numel() == 0) {
        throw ShapeError("mse of empty tensors");
    }
    const std::size_t n = a.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.vec()[i]) - b.vec()[i];
        acc += d * d;
    }
    const T value = static_cast<T>(acc / static_cast<double>(n));
    return detail::make_result<T>("mse", Shape{}, std::vector<T>{value}, {a, b}, [n](TensorNode<T>& self) {
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        const T c = T(2) * self.grad[0] / static_cast<T>(n);
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) {
                (*g)[i] += c * (x[i] - y[i]);
            }
        }
        if (auto* g = grad_of(self, 1)) {
            for (std::size_t i = 0; i < n; ++i) {
                (*g)[i] -= c * (x[i] - y[i]);
            }
        }
    });
}

template <typename T>
BasicTensor<T> masked_mse(const BasicTensor<T>& a, const BasicTensor<T>& b, std::span<const int> row_flags) {
    require_same(a, b, "masked_mse");
    require_rank2(a, "masked_mse");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (row_flags.size() != m) {
        throw ShapeError("masked_mse: " + std::to_string(row_flags.size()) + " row flags for " + shape_str(a.shape()));
    }
    std::vector<int> flags(row_flags.begin(), row_flags.end());
    std::size_t rows = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (!flags[i]) {
            continue;
        }
        ++rows;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = static_cast<double>(a.vec()[i * n + j]) - b.vec()[i * n + j];
            acc += d * d;
        }
    }
    if (rows == 0 || n == 0) {
        throw UsageError("masked_mse: no rows selected");
    }
    const std::size_t count = rows * n;
    const T value = static_cast<T>(acc / static_cast<double>(count));
    return detail::make_result<T>(
        "masked_mse", Shape{}, std::vector<T>{value}, {a, b}, [m, n, count, flags = std::move(flags)](TensorNode<T>& self) {
            const auto& x = self.parents[0]->data;
            const auto& y = self.parents[1]->data;
            const T c = T(2) * self.grad[0] / static_cast<T>(count);
            auto* ga = grad_of(self, 0);
            auto* gb = grad_of(self, 1);
            for (std::size_t i = 0; i < m; ++i) {
                if (!flags[i]) {
                    continue;
                }
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t p = i * n + j;
                    if (ga) {
                        (*ga)[p] += c * (x[p] - y[p]);
                    }
                    if (gb) {
                        (*gb)[p] -= c * (x[p] - y[p]);
                    }
                }
            }
        });
}

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    require_rank2(parts[0], "concat_rows");
    const std::size_t n = parts[0].dim(1);
    std::size_t rows = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.dim(1) != n) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        offsets.push_back(rows);
        rows += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(rows * n);
    for (const auto& p : parts) {
        out.insert(out.end(), p.vec().begin(), p.vec().end());
    }
    return detail::make_result<T>("concat_rows", {rows, n}, std::move(out), parts,
                                  [n, offsets = std::move(offsets)](TensorNode<T>& self) {
                                      for (std::size_t p = 0; p < offsets.size(); ++p) {
                                          if (auto* g = grad_of(self, p)) {
                                              const std::size_t start = offsets[p] * n;
                                              for (std::size_t i = 0; i < g->size(); ++i) {
                                                  (*g)[i] += self.grad[start + i];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t start, std::size_t count) {
    require_rank2(x, "slice_rows");
    const std::size_t n = x.dim(1);
    if (start + count > x.dim(0)) {
        throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_str(x.shape()));
    }
    std::vector<T> out(x.vec().begin() + static_cast<std::ptrdiff_t>(start * n),
                       x.vec().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
    return detail::make_result<T>("slice_rows", {count, n}, std::move(out), {x}, [start, n](TensorNode<T>& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*g)[start * n + i] += self.grad[i];
            }
        }
    });
}

template <typename T>
std::vector<BasicTensor<T>> split_rows(const BasicTensor<T>& x, std::span<const std::size_t> lengths) {
    require_rank2(x, "split_rows");
    std::size_t total = 0;
    for (auto l : lengths) {
        total += l;
    }
    if (total != x.dim(0)) {
        throw ShapeError("split_rows: lengths sum to " + std::to_string(total) + " but tensor is " + shape_str(x.shape()));
    }
    std::vector<BasicTensor<T>> out;
    std::size_t start = 0;
    for (auto l : lengths) {
        out.push_back(slice_rows(x, start, l));
        start += l;
    }
    return out;
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t count) {
    require_rank2(x, "slice_cols");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (start + count > n) {
        throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_str(x.shape()));
    }
    std::vector<T> out(m * count);
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(x.vec().begin() + static_cast<std::ptrdiff_t>(i * n + start), count,
                    out.begin() + static_cast<std::ptrdiff_t>(i * count));
    }
    return detail::make_result<T>("slice_cols", {m, count}, std::move(out), {x},
                                  [m, n, start, count](TensorNode<T>& self) {
                                      if (auto* g = grad_of(self, 0)) {
                                          for (std::size_t i = 0; i < m; ++i) {
                                              for (std::size_t j = 0; j < count; ++j) {
                                                  (*g)[i * n + start + j] += self.grad[i * count + j];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
std::vector<BasicTensor<T>> chunk_cols(const BasicTensor<T>& x, std::size_t n) {
    require_rank2(x, "chunk_cols");
    if (n == 0 || x.dim(1) % n != 0) {
        throw ShapeError("chunk_cols: " + shape_str(x.shape()) + " not divisible into " + std::to_string(n) + " chunks");
    }
    const std::size_t w = x.dim(1) / n;
    std::vector<BasicTensor<T>> out;
    for (std::size_t c = 0; c < n; ++c) {
        out.push_back(slice_cols(x, c * w, w));
    }
    return out;
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> index) {
    require_rank2(x, "gather_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<std::size_t> idx(index.begin(), index.end());
    std::vector<T> out(idx.size() * n);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m) {
            throw ShapeError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " + shape_str(x.shape()));
        }
        std::copy_n(x.vec().begin() + static_cast<std::ptrdiff_t>(idx[i] * n), n,
                    out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    const std::size_t rows = idx.size();
    return detail::make_result<T>("gather_rows", {rows, n}, std::move(out), {x},
                                  [n, idx = std::move(idx)](TensorNode<T>& self) {
                                      if (auto* g = grad_of(self, 0)) {
                                          for (std::size_t i = 0; i < idx.size(); ++i) {
                                              for (std::size_t j = 0; j < n; ++j) {
                                                  (*g)[idx[i] * n + j] += self.grad[i * n + j];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return detail::make_result<T>("reshape", std::move(shape), x.vec(), {x}, [](TensorNode<T>& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
BasicTensor<T> unfold_rows(const BasicTensor<T>& x, std::size_t kernel) {
    require_rank2(x, "unfold_rows");
    if (kernel % 2 == 0) {
        throw ConfigError("unfold_rows: kernel must be odd, got " + std::to_string(kernel));
    }
    const std::size_t len = x.dim(0), c = x.dim(1), pad = kernel / 2;
    std::vector<T> out(len * kernel * c, T(0));
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t k = 0; k < kernel; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) {
                continue;
            }
            std::copy_n(x.vec().begin() + src * static_cast<std::ptrdiff_t>(c), c,
                        out.begin() + static_cast<std::ptrdiff_t>((t * kernel + k) * c));
        }
    }
    return detail::make_result<T>("unfold_rows", {len, kernel * c}, std::move(out), {x},
                                  [len, c, kernel, pad](TensorNode<T>& self) {
                                      auto* g = grad_of(self, 0);
                                      if (!g) {
                                          return;
                                      }
                                      for (std::size_t t = 0; t < len; ++t) {
                                          for (std::size_t k = 0; k < kernel; ++k) {
                                              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) -
                                                                         static_cast<std::ptrdiff_t>(pad);
                                              if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) {
                                                  continue;
                                              }
                                              for (std::size_t j = 0; j < c; ++j) {
                                                  (*g)[static_cast<std::size_t>(src) * c + j] +=
                                                      self.grad[(t * kernel + k) * c + j];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::span<const std::size_t> positions, double base,
                    std::size_t head_dim) {
    require_rank2(x, "rope");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (head_dim == 0 || head_dim % 2 != 0) {
        throw ConfigError("rope: head dimension must be even, got " + std::to_string(head_dim));
    }
    if (d % head_dim != 0) {
        throw ConfigError("rope: width " + std::to_string(d) + " is not a multiple of head dimension " +
                          std::to_string(head_dim));
    }
    if (positions.size() != rows) {
        throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for " + shape_str(x.shape()));
    }
    const std::size_t half = head_dim / 2;
    std::vector<T> cosv(rows * half), sinv(rows * half);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(positions[r]) * freq;
            cosv[r * half + i] = static_cast<T>(std::cos(angle));
            sinv[r * half + i] = static_cast<T>(std::sin(angle));
        }
    }
    std::vector<T> out(rows * d);
    const auto& in = x.vec();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t h = 0; h < d; h += head_dim) {
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t p = r * d + h + 2 * i;
                const T c = cosv[r * half + i], s = sinv[r * half + i];
                out[p] = in[p] * c - in[p + 1] * s;
                out[p + 1] = in[p] * s + in[p + 1] * c;
            }
        }
    }
    return detail::make_result<T>(
        "rope", x.shape(), std::move(out), {x},
        [rows, d, head_dim, half, cosv = std::move(cosv), sinv = std::move(sinv)](TensorNode<T>& self) {
            auto* g = grad_of(self, 0);
            if (!g) {
                return;
            }
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t h = 0; h < d; h += head_dim) {
                    for (std::size_t i = 0; i < half; ++i) {
                        const std::size_t p = r * d + h + 2 * i;
                        const T c = cosv[r * half + i], s = sinv[r * half + i];
                        (*g)[p] += self.grad[p] * c + self.grad[p + 1] * s;
                        (*g)[p + 1] += -self.grad[p] * s + self.grad[p + 1] * c;
                    }
                }
            }
        });
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t n_heads, std::span<const std::size_t> segments, std::vector<T>* probs) {
    require_rank2(q, "attention");
    require_same(q, k, "attention");
    require_same(q, v, "attention");
    const std::size_t rows = q.dim(0), d = q.dim(1);
    if (n_heads == 0 || d % n_heads != 0) {
        throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
                          " heads");
    }
    std::size_t total = 0;
    for (auto s : segments) {
        total += s;
    }
    if (total != rows) {
        throw ShapeError("attention: segments cover " + std::to_string(total) + " rows, input has " +
                         std::to_string(rows));
    }
    const std::size_t dh = d / n_heads;
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<std::size_t> segs(segments.begin(), segments.end());

    // Probabilities for every (segment, head), kept for the backward pass.
    std::size_t prob_count = 0;
    for (auto s : segs) {
        prob_count += n_heads * s * s;
    }
    std::vector<T> p_all(prob_count);
    std::vector<T> out(rows * d, T(0));
    const auto& qv = q.vec();
    const auto& kv = k.vec();
    const auto& vv = v.vec();

    std::size_t off = 0, pofs = 0;
    std::vector<T> kt;
    for (auto len : segs) {
        kt.resize(dh * len);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t col = h * dh;
            for (std::size_t j = 0; j < len; ++j) {
                for (std::size_t e = 0; e < dh; ++e) {
                    kt[e * len + j] = kv[(off + j) * d + col + e];
                }
            }
            T* pmat = p_all.data() + pofs;
            for (std::size_t i = 0; i < len; ++i) {
                T* srow = pmat + i * len;
                std::fill(srow, srow + len, T(0));
                const T* qrow = qv.data() + (off + i) * d + col;
                for (std::size_t e = 0; e < dh; ++e) {
                    const T qe = qrow[e] * sc;
                    const T* krow = kt.data() + e * len;
                    for (std::size_t j = 0; j < len; ++j) {
                        srow[j] += qe * krow[j];
                    }
                }
                T mx = srow[0];
                for (std::size_t j = 1; j < len; ++j) {
                    mx = std::max(mx, srow[j]);
                }
                T z = T(0);
                for (std::size_t j = 0; j < len; ++j) {
                    srow[j] = std::exp(srow[j] - mx);
                    z += srow[j];
                }
                const T inv = T(1) / z;
                for (std::size_t j = 0; j < len; ++j) {
                    srow[j] *= inv;
                }
                T* orow = out.data() + (off + i) * d + col;
                for (std::size_t j = 0; j < len; ++j) {
                    const T pij = srow[j];
                    const T* vrow = vv.data() + (off + j) * d + col;
                    for (std::size_t e = 0; e < dh; ++e) {
                        orow[e] += pij * vrow[e];
                    }
                }
            }
            pofs += len * len;
        }
        off += len;
    }
    if (probs) {
        probs->insert(probs->end(), p_all.begin(), p_all.end());
    }

    return detail::make_result<T>(
        "attention", q.shape(), std::move(out), {q, k, v},
        [d, dh, n_heads, sc, segs = std::move(segs), p_all = std::move(p_all)](TensorNode<T>& self) {
            const auto& qv = self.parents[0]->data;
            const auto& kv = self.parents[1]->data;
            const auto& vv = self.parents[2]->data;
            auto* gq = grad_of(self, 0);
            auto* gk = grad_of(self, 1);
            auto* gv = grad_of(self, 2);
            const auto& go = self.grad;
            std::vector<T> vt, dp;
            std::size_t off = 0, pofs = 0;
            for (auto len : segs) {
                vt.resize(dh * len);
                dp.resize(len);
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t col = h * dh;
                    for (std::size_t j = 0; j < len; ++j) {
                        for (std::size_t e = 0; e < dh; ++e) {
                            vt[e * len + j] = vv[(off + j) * d + col + e];
                        }
                    }
                    const T* pmat = p_all.data() + pofs;
                    for (std::size_t i = 0; i < len; ++i) {
                        const T* prow = pmat + i * len;
                        const T* dorow = go.data() + (off + i) * d + col;
                        if (gv) {
                            for (std::size_t j = 0; j < len; ++j) {
                                T* gvrow = gv->data() + (off + j) * d + col;
                                for (std::size_t e = 0; e < dh; ++e) {
                                    gvrow[e] += prow[j] * dorow[e];
                                }
                            }
                        }
                        if (!gq && !gk) {
                            continue;
                        }
                        std::fill(dp.begin(), dp.end(), T(0));
                        for (std::size_t e = 0; e < dh; ++e) {
                            const T de = dorow[e];
                            const T* vrow = vt.data() + e * len;
                            for (std::size_t j = 0; j < len; ++j) {
                                dp[j] += de * vrow[j];
                            }
                        }
                        T dot = T(0);
                        for (std::size_t j = 0; j < len; ++j) {
                            dot += prow[j] * dp[j];
                        }
                        for (std::size_t j = 0; j < len; ++j) {
                            const T ds = prow[j] * (dp[j] - dot) * sc;
                            if (gq) {
                                const T* krow = kv.data() + (off + j) * d + col;
                                T* gqrow = gq->data() + (off + i) * d + col;
                                for (std::size_t e = 0; e < dh; ++e) {
                                    gqrow[e] += ds * krow[e];
                                }
                            }
                            if (gk) {
                                const T* qrow = qv.data() + (off + i) * d + col;
                                T* gkrow = gk->data() + (off + j) * d + col;
                                for (std::size_t e = 0; e < dh; ++e) {
                                    gkrow[e] += ds * qrow[e];
                                }
                            }
                        }
                    }
                    pofs += len * len;
                }
                off += len;
            }
        });
}

#define M3TTS_INSTANTIATE_OPS(T)                                                                                      \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                         \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                         \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                         \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                           \
    template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                                      \
    template BasicTensor<T> square(const BasicTensor<T>&);                                                             \
    template BasicTensor<T> exp(const BasicTensor<T>&);                                                                \
    template BasicTensor<T> silu(const BasicTensor<T>&);                                                               \
    template BasicTensor<T> gelu(const BasicTensor<T>&);                                                               \
    template BasicTensor<T> add_broadcast(const BasicTensor<T>&, const BasicTensor<T>&);                               \
    template BasicTensor<T> mul_rows(const BasicTensor<T>&, std::span<const T>);                                       \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                      \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);               \
    template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const int>);                                    \
    template BasicTensor<T> layer_norm(const BasicTensor<T>&);                                                         \
    template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                               \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                                \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                               \
    template BasicTensor<T> mse(const BasicTensor<T>&, const BasicTensor<T>&);                                         \
    template BasicTensor<T> masked_mse(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const int>);            \
    template BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>&);                                           \
    template BasicTensor<T> slice_rows(const BasicTensor<T>&, std::size_t, std::size_t);                               \
    template std::vector<BasicTensor<T>> split_rows(const BasicTensor<T>&, std::span<const std::size_t>);              \
    template BasicTensor<T> slice_cols(const BasicTensor<T>&, std::size_t, std::size_t);                               \
    template std::vector<BasicTensor<T>> chunk_cols(const BasicTensor<T>&, std::size_t);                               \
    template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::size_t>);                          \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                                     \
    template BasicTensor<T> unfold_rows(const BasicTensor<T>&, std::size_t);                                           \
    template BasicTensor<T> rope(const BasicTensor<T>&, std::span<const std::size_t>, double, std::size_t);            \
    template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,             \
                                      std::size_t, std::span<const std::size_t>, std::vector<T>*);

M3TTS_INSTANTIATE_OPS(float)
M3TTS_INSTANTIATE_OPS(double)

#undef M3TTS_INSTANTIATE_OPS

} // namespace m3tts
