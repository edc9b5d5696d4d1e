#pragma once

#include <cstddef>
#include <utility>

#include "gcalab/rng.hpp"
#include "gcalab/tensor.hpp"

namespace gcalab {

enum class Elementwise { kAdd, kSub, kMul, kSigmoid, kTanh, kRelu };

/// Elementwise op. Binary ops broadcast numpy-style (right-aligned, size-1
/// dimensions stretch); unary ops ignore `b`.
Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b = Tensor());

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
/// log(1 + exp(a)), computed without overflow.
Tensor softplus(const Tensor& a);
Tensor scale(const Tensor& a, double factor);

/// Batched matrix product `[..., m, k] @ [..., k, n]`; leading batch
/// dimensions broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

enum class EmptyRowPolicy {
  kThrow,  // raise DegenerateSliceError
  kZero,   // emit an all-zero row
};

/// Softmax over the last dimension. `mask` (nullptr for none) must have the
/// same last dimension as `x`; its leading dimensions broadcast. Masked
/// entries come out as exactly 0.
Tensor softmax_lastdim(const Tensor& x, const Mask* mask = nullptr, EmptyRowPolicy empty = EmptyRowPolicy::kThrow);

/// Normalizes each last-dim slice to zero mean and unit (biased) variance,
/// then applies `gain` and `bias` of shape [d].
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor slice_lastdim(const Tensor& a, std::size_t start, std::size_t length);

/// Row lookup: `ids` of any shape -> `ids.shape + [d]`.
Tensor embedding_gather(const Tensor& table, const IndexTensor& ids);
/// Rows [start, start+length) of a 2-D table.
Tensor slice_rows(const Tensor& table, std::size_t start, std::size_t length);

// Sequence-axis helpers for [B, l, d] activations.

/// Right-pads the sequence axis with zero rows up to `length`.
Tensor pad_seq(const Tensor& x, std::size_t length);
Tensor slice_seq(const Tensor& x, std::size_t start, std::size_t length);
/// out[b, i] = x[b, index[b, i]]; negative indices produce zero rows.
Tensor gather_positions(const Tensor& x, const IndexTensor& index);
/// Zeroes rows whose mask entry is false.
Tensor mask_rows(const Tensor& x, const Mask& mask);

/// [B, l, d] -> [B, h, l, d/h] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

/// Inverted dropout; identity when `training` is false or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

}  // namespace gcalab
