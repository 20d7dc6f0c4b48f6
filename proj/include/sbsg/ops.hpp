#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "sbsg/tensor.hpp"

namespace sbsg {

using Rng = std::mt19937_64;

// Output shape of a trailing-dimension-aligned broadcast of `a` and `b`.
Shape broadcast_shape(const Shape& a, const Shape& b);

// [..., m, k] x [..., k, n] -> [..., m, n]; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);

// Numerically stabilised by subtracting the per-slice max.
Tensor softmax(const Tensor& x, std::ptrdiff_t axis);
Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis);

inline constexpr double kLayerNormEps = 1e-6;

// Normalises over the last dimension, then applies gain and bias of shape [d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, std::span<const std::size_t> order);
Tensor transpose_last(const Tensor& x);

// Sum of all elements as a shape-[1] tensor.
Tensor sum(const Tensor& x);

// Row gather from a [vocab, d] table. `ids` are laid out as `index_shape`;
// the result has shape index_shape + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& index_shape);

// Inverted dropout. Identity when rate == 0 or rng is null.
struct Dropout {
  double rate = 0.0;
  Rng* rng = nullptr;
  bool active() const { return rate > 0.0 && rng != nullptr; }
};
Tensor dropout(const Tensor& x, const Dropout& drop);

}  // namespace sbsg
