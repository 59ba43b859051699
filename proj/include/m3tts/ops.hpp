#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "m3tts/tensor.hpp"

// Differentiable operations on BasicTensor<T>. Every op records its backward
// rule when any input requires grad, and throws NumericError if it produces a
// non-finite value. Row/column ops expect rank-2 tensors laid out [rows x cols].
namespace m3tts {

inline constexpr double kLayerNormEps = 1e-5;

// Elementwise, identical shapes.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T s);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s);
template <typename T> BasicTensor<T> square(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> silu(const BasicTensor<T>& a);
// Exact (erf) GELU.
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& a);

// x[m x n] + v broadcast over rows; v is [n] or [1 x n].
template <typename T> BasicTensor<T> add_broadcast(const BasicTensor<T>& x, const BasicTensor<T>& v);
// x[m x n] with row i multiplied by the constant factors[i].
template <typename T> BasicTensor<T> mul_rows(const BasicTensor<T>& x, std::span<const T> factors);

template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// x[m x k] * w[k x n] + b[n]; `b` may be undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b);

// Rows of table[V x D] picked by ids.
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids);

// Per-row normalization, no affine parameters, eps = kLayerNormEps.
template <typename T> BasicTensor<T> layer_norm(const BasicTensor<T>& x);

template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);
// mean((a - b)^2) over all elements.
template <typename T> BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b);
// mean((a - b)^2) over the elements of rows whose flag is nonzero.
template <typename T>
BasicTensor<T> masked_mse(const BasicTensor<T>& a, const BasicTensor<T>& b, std::span<const int> row_flags);

template <typename T> BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts);
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t start, std::size_t count);
template <typename T>
std::vector<BasicTensor<T>> split_rows(const BasicTensor<T>& x, std::span<const std::size_t> lengths);
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t count);
// Splits columns into n equal chunks.
template <typename T>
std::vector<BasicTensor<T>> chunk_cols(const BasicTensor<T>& x, std::size_t n);
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> index);
// Row-major reinterpretation; element count must match.
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

// Stride-1 1-D unfold with symmetric zero padding: x[T x C] -> [T x kernel*C],
// row t holding frames t-pad .. t+pad. kernel must be odd.
template <typename T> BasicTensor<T> unfold_rows(const BasicTensor<T>& x, std::size_t kernel);

// Rotary embedding over each head_dim-wide column block of x[rows x D]. Row r
// is rotated by angle positions[r] * base^(-2i/head_dim) on pair (2i, 2i+1).
template <typename T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::span<const std::size_t> positions, double base,
                    std::size_t head_dim);

// Single-head convenience: x[T x d_head].
template <typename T>
BasicTensor<T> rope_apply(const BasicTensor<T>& x, std::span<const std::size_t> positions, double base) {
    return rope(x, positions, base, x.rank() == 2 ? x.dim(1) : 0);
}

// Multi-head scaled dot-product attention over packed sequences. q, k, v are
// [N x D] with N = sum(segments); attention is restricted to each segment.
// When `probs` is non-null the post-softmax weights are appended to it,
// segment by segment, each laid out [head][row][col].
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t n_heads, std::span<const std::size_t> segments,
                         std::vector<T>* probs = nullptr);

namespace kernels {

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

} // namespace kernels

} // namespace m3tts
