#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sbsg/ops.hpp"
#include "sbsg/tensor.hpp"

namespace sbsg {

inline constexpr double kMaskedScore = -1e9;

/// Boolean attend/ignore matrix of shape [batch, rows, cols] (row = query,
/// col = key). A batch of 1 applies to every batch element.
struct AttentionMask {
  std::size_t batch = 1;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  bool at(std::size_t b, std::size_t r, std::size_t c) const {
    return allowed[(b * rows + r) * cols + c] != 0;
  }
  // Throws ContractError if any query row has no allowed key.
  void validate() const;
  // 0 where allowed, kMaskedScore elsewhere, shaped to broadcast against
  // scores of rank `score_rank` whose leading dim is the batch.
  Tensor additive(std::size_t score_rank) const;
};

// allowed[j][t] = (t <= j)
AttentionMask make_causal_mask(std::size_t len);
// Per batch element b: allowed[j][t] = (t <= j) && (t < visible[b]).
// Models keys of a stream that stopped after `visible[b]` positions.
AttentionMask make_causal_mask(std::size_t len, std::span<const std::size_t> visible);
// allowed[b][j][t] = (t < lengths[b]) for every query row j.
AttentionMask make_padding_mask(std::span<const std::size_t> lengths, std::size_t max_len, std::size_t query_len);
inline AttentionMask make_padding_mask(std::span<const std::size_t> lengths, std::size_t max_len) {
  return make_padding_mask(lengths, max_len, max_len);
}

/// Projections for h heads. Head i uses columns [i*d_k, (i+1)*d_k) of the
/// [d_model, d_model] matrices w_q, w_k, w_v; w_o maps the concatenated
/// heads back to d_model.
struct MultiHeadParams {
  Tensor w_q, w_k, w_v, w_o;
  std::size_t heads = 1;

  std::size_t d_model() const { return w_q.dim(0); }
  std::size_t d_k() const { return d_model() / heads; }
  void validate() const;
};

// softmax(Q K^T / sqrt(d_k) + mask) V
Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, const Dropout& drop = {});

Tensor mha(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, const MultiHeadParams& p,
           const Dropout& drop = {});

// [..., q, d_model] -> [..., heads, q, d_k] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

struct StreamPair {
  Tensor fwd;
  Tensor bwd;
};

// Masks for the two streams: *_own over the stream's own keys, *_cross over
// the other stream's keys.
struct BidirectionalMasks {
  AttentionMask fwd_own, bwd_own, fwd_cross, bwd_cross;

  static BidirectionalMasks uniform(const AttentionMask& mask) { return {mask, mask, mask, mask}; }
};

/// Each stream attends to its own prefix and, scaled by `lambda`, to the
/// other stream's prefix:
///   fwd = sdpa(Qf, Kf, Vf) + lambda * sdpa(Qf, Kb, Vb)
///   bwd = sdpa(Qb, Kb, Vb) + lambda * sdpa(Qb, Kf, Vf)
StreamPair bsdpa(const Tensor& q_f, const Tensor& q_b, const Tensor& k_f, const Tensor& k_b, const Tensor& v_f,
                 const Tensor& v_b, const BidirectionalMasks& masks, double lambda, const Dropout& drop = {});
inline StreamPair bsdpa(const Tensor& q_f, const Tensor& q_b, const Tensor& k_f, const Tensor& k_b,
                        const Tensor& v_f, const Tensor& v_b, const AttentionMask& mask, double lambda,
                        const Dropout& drop = {}) {
  return bsdpa(q_f, q_b, k_f, k_b, v_f, v_b, BidirectionalMasks::uniform(mask), lambda, drop);
}

// Multi-head self-attention over both streams with shared projections; the
// per-head combination is bsdpa.
StreamPair bi_mha_intra(const Tensor& s_f, const Tensor& s_b, const BidirectionalMasks& masks,
                        const MultiHeadParams& p, double lambda, const Dropout& drop = {});
inline StreamPair bi_mha_intra(const Tensor& s_f, const Tensor& s_b, const AttentionMask& mask,
                               const MultiHeadParams& p, double lambda, const Dropout& drop = {}) {
  return bi_mha_intra(s_f, s_b, BidirectionalMasks::uniform(mask), p, lambda, drop);
}

}  // namespace sbsg
