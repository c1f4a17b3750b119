#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "melt/tensor.hpp"

namespace melt {

using TokenId = std::size_t;

// Every op below records a backward rule on the active tape when any input
// requires grad. Shapes are 1-D ([n]), 2-D ([rows x cols]) or scalar ([]).
//
// Broadcasting rule for the binary elementwise ops: the second operand may
// either match the first exactly or equal its trailing dimensions, e.g.
// [d] against [n x d]. Nothing else broadcasts.

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// scale * a + shift
Tensor affine(const Tensor& a, double scale, double shift = 0.0);
inline Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }
Tensor sigmoid(const Tensor& a);
/// tanh-approximated GELU
Tensor gelu(const Tensor& a);

/// Key j is visible from query row i iff j <= i + offset.
struct CausalMask {
  std::ptrdiff_t offset = 0;
};

/// Row-wise softmax over the last dimension, stabilized by the row max.
/// Entries equal to -inf and entries hidden by `mask` get probability 0.
/// A row with nothing left to normalize over is an error.
Tensor softmax_rows(const Tensor& x, std::optional<CausalMask> mask = std::nullopt);
Tensor log_softmax_rows(const Tensor& x);

/// x / sqrt(mean(x^2) + eps) * weight, over the last dimension.
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps);

/// Rotary position embedding over each head's consecutive (even, odd) pairs.
/// Row r is rotated for position pos0 + r.
Tensor rope(const Tensor& x, std::size_t n_heads, std::size_t pos0, double base);

/// Multi-head causal scaled-dot-product attention. q is [n x d]; k and v are
/// [m x d] and hold positions 0..m-1. Query row i sits at position q_pos0+i
/// and sees keys 0..q_pos0+i. Requires m == q_pos0 + n.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::size_t q_pos0);

Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// [n x 1] -> [n x cols], each row's single value repeated.
Tensor repeat_cols(const Tensor& a, std::size_t cols);
/// [n x d] -> [n x 1] row means.
Tensor row_mean(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// out[i] = a[i, idx[i]]
Tensor pick(const Tensor& a, std::span<const std::size_t> idx);

}  // namespace melt
