#pragma once

#include "ses/tensor.hpp"

#include <span>
#include <vector>

namespace ses {

enum class Elementwise { add, sub, mul };

/// a (op) b. `b` may equal a's shape or a suffix of it, in which case it is
/// repeated along a's leading axes.
Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind);

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::mul); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor scale(const Tensor& a, double factor);
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

/// Normalises over the flattened `axes` for every index of the remaining
/// axes, after subtracting the per-group maximum.
Tensor softmax(const Tensor& x, std::vector<std::size_t> axes);

/// Sliding k x k neighbourhoods with zero padding (k - 1) / 2.
/// [C,H,W] -> [C,k*k,H,W] and [N,C,H,W] -> [N,C,k*k,H,W]; footprint index
/// j = dy * k + dx enumerates the window row-major.
Tensor unfold(const Tensor& x, std::size_t k);

Tensor relu(const Tensor& x);

/// 2x2 max pooling with stride 2 over the last two axes; odd extents keep a
/// partial final window. Ties go to the first maximum in row-major order.
Tensor maxpool2(const Tensor& x);

/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);

/// Mean negative log-likelihood of `labels` under softmax(logits), logits [N,L].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

namespace detail {

// Raw-buffer kernels shared between ops and fused layers.
void unfold_plane(const double* src, double* dst, std::size_t h, std::size_t w, std::size_t k);
void fold_plane_add(const double* src, double* dst, std::size_t h, std::size_t w, std::size_t k);

}  // namespace detail

}  // namespace ses
