#include "sbsg/attention.hpp"

#include <cmath>

#include "sbsg/errors.hpp"

namespace sbsg {

void AttentionMask::validate() const {
  if (batch == 0 || rows == 0 || cols == 0 || allowed.size() != batch * rows * cols) {
    throw ContractError("attention mask has inconsistent dimensions");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < rows; ++r) {
      bool any = false;
      for (std::size_t c = 0; c < cols && !any; ++c) any = at(b, r, c);
      if (!any) {
        throw ContractError("attention mask row " + std::to_string(r) + " (batch " + std::to_string(b) +
                            ") allows no keys");
      }
    }
  }
}

Tensor AttentionMask::additive(std::size_t score_rank) const {
  std::vector<double> values(allowed.size());
  for (std::size_t i = 0; i < allowed.size(); ++i) values[i] = allowed[i] ? 0.0 : kMaskedScore;
  if (batch == 1) return Tensor({rows, cols}, std::move(values));
  if (score_rank < 3) throw DimensionError("batched attention mask needs scores of rank >= 3");
  Shape shape(score_rank, 1);
  shape[0] = batch;
  shape[score_rank - 2] = rows;
  shape[score_rank - 1] = cols;
  return Tensor(std::move(shape), std::move(values));
}

AttentionMask make_causal_mask(std::size_t len) {
  if (len == 0) throw ContractError("causal mask length must be >= 1");
  AttentionMask m{1, len, len, std::vector<std::uint8_t>(len * len, 0)};
  for (std::size_t j = 0; j < len; ++j)
    for (std::size_t t = 0; t <= j; ++t) m.allowed[j * len + t] = 1;
  return m;
}

AttentionMask make_causal_mask(std::size_t len, std::span<const std::size_t> visible) {
  if (len == 0) throw ContractError("causal mask length must be >= 1");
  if (visible.empty()) throw ContractError("causal mask needs at least one batch element");
  AttentionMask m{visible.size(), len, len, std::vector<std::uint8_t>(visible.size() * len * len, 0)};
  for (std::size_t b = 0; b < visible.size(); ++b)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t t = 0; t <= j && t < visible[b]; ++t) m.allowed[(b * len + j) * len + t] = 1;
  return m;
}

AttentionMask make_padding_mask(std::span<const std::size_t> lengths, std::size_t max_len, std::size_t query_len) {
  if (max_len == 0 || query_len == 0) throw ContractError("padding mask length must be >= 1");
  if (lengths.empty()) throw ContractError("padding mask needs at least one batch element");
  AttentionMask m{lengths.size(), query_len, max_len,
                  std::vector<std::uint8_t>(lengths.size() * query_len * max_len, 0)};
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    if (lengths[b] > max_len) throw ContractError("sequence length exceeds padded length");
    for (std::size_t j = 0; j < query_len; ++j)
      for (std::size_t t = 0; t < lengths[b]; ++t) m.allowed[(b * query_len + j) * max_len + t] = 1;
  }
  return m;
}

void MultiHeadParams::validate() const {
  if (!w_q.defined() || w_q.rank() != 2 || w_q.dim(0) != w_q.dim(1)) {
    throw DimensionError("multi-head projection must be square [d_model, d_model]");
  }
  const std::size_t d = w_q.dim(0);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("head count " + std::to_string(heads) + " does not divide d_model " + std::to_string(d));
  }
  for (const Tensor* w : {&w_k, &w_v, &w_o}) {
    if (w->shape() != Shape{d, d}) {
      throw DimensionError("multi-head projection shape " + shape_str(w->shape()) + " != " + shape_str({d, d}));
    }
  }
}

Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, const Dropout& drop) {
  if (q.rank() < 2 || k.rank() != q.rank() || v.rank() != q.rank()) {
    throw DimensionError("sdpa: ranks differ: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                         shape_str(v.shape()));
  }
  const std::size_t d_k = q.dim(-1);
  if (k.dim(-1) != d_k || k.dim(-2) != v.dim(-2)) {
    throw DimensionError("sdpa: incompatible Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                         shape_str(v.shape()));
  }
  if (mask.rows != q.dim(-2) || mask.cols != k.dim(-2) || (mask.batch != 1 && mask.batch != q.dim(0))) {
    throw DimensionError("sdpa: mask [" + std::to_string(mask.batch) + "," + std::to_string(mask.rows) + "," +
                         std::to_string(mask.cols) + "] does not fit Q " + shape_str(q.shape()) + ", K " +
                         shape_str(k.shape()));
  }
  mask.validate();
  Tensor scores = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
  Tensor weights = softmax(add(scores, mask.additive(scores.rank())), -1);
  return matmul(dropout(weights, drop), v);
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t rank = x.rank();
  const std::size_t d = x.dim(-1);
  if (heads == 0 || d % heads != 0) throw DimensionError("split_heads: " + std::to_string(heads) + " heads for " + shape_str(x.shape()));
  Shape split(x.shape().begin(), x.shape().end() - 1);
  split.push_back(heads);
  split.push_back(d / heads);
  // [..., q, h, dk] -> [..., h, q, dk]
  std::vector<std::size_t> order(rank + 1);
  for (std::size_t i = 0; i < rank + 1; ++i) order[i] = i;
  std::swap(order[rank - 1], order[rank - 2]);
  return permute(reshape(x, split), order);
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t rank = x.rank();
  if (rank < 3) throw DimensionError("merge_heads: needs rank >= 3, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(rank);
  for (std::size_t i = 0; i < rank; ++i) order[i] = i;
  std::swap(order[rank - 2], order[rank - 3]);
  Tensor t = permute(x, order);
  Shape merged(t.shape().begin(), t.shape().end() - 2);
  merged.push_back(x.dim(-3) * x.dim(-1));
  return reshape(t, merged);
}

namespace {

void check_model_dim(const Tensor& x, const MultiHeadParams& p, const char* what) {
  if (x.rank() < 2 || x.dim(-1) != p.d_model()) {
    throw DimensionError(std::string(what) + ": input " + shape_str(x.shape()) + " does not match d_model " +
                         std::to_string(p.d_model()));
  }
}

}  // namespace

Tensor mha(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, const MultiHeadParams& p,
           const Dropout& drop) {
  p.validate();
  check_model_dim(q, p, "mha");
  check_model_dim(k, p, "mha");
  check_model_dim(v, p, "mha");
  Tensor qh = split_heads(matmul(q, p.w_q), p.heads);
  Tensor kh = split_heads(matmul(k, p.w_k), p.heads);
  Tensor vh = split_heads(matmul(v, p.w_v), p.heads);
  return matmul(merge_heads(sdpa(qh, kh, vh, mask, drop)), p.w_o);
}

StreamPair bsdpa(const Tensor& q_f, const Tensor& q_b, const Tensor& k_f, const Tensor& k_b, const Tensor& v_f,
                 const Tensor& v_b, const BidirectionalMasks& masks, double lambda, const Dropout& drop) {
  if (q_f.shape() != q_b.shape() || k_f.shape() != k_b.shape() || v_f.shape() != v_b.shape()) {
    throw DimensionError("bsdpa: forward/backward stream shapes differ: Q " + shape_str(q_f.shape()) + " vs " +
                         shape_str(q_b.shape()) + ", K " + shape_str(k_f.shape()) + " vs " + shape_str(k_b.shape()) +
                         ", V " + shape_str(v_f.shape()) + " vs " + shape_str(v_b.shape()));
  }
  Tensor own_f = sdpa(q_f, k_f, v_f, masks.fwd_own, drop);
  Tensor cross_f = sdpa(q_f, k_b, v_b, masks.fwd_cross, drop);
  Tensor own_b = sdpa(q_b, k_b, v_b, masks.bwd_own, drop);
  Tensor cross_b = sdpa(q_b, k_f, v_f, masks.bwd_cross, drop);
  return {add(own_f, scale(cross_f, lambda)), add(own_b, scale(cross_b, lambda))};
}

StreamPair bi_mha_intra(const Tensor& s_f, const Tensor& s_b, const BidirectionalMasks& masks,
                        const MultiHeadParams& p, double lambda, const Dropout& drop) {
  p.validate();
  check_model_dim(s_f, p, "bi_mha_intra");
  check_model_dim(s_b, p, "bi_mha_intra");
  if (s_f.shape() != s_b.shape()) {
    throw DimensionError("bi_mha_intra: stream shapes differ: " + shape_str(s_f.shape()) + " vs " +
                         shape_str(s_b.shape()));
  }
  auto project = [&](const Tensor& s, const Tensor& w) { return split_heads(matmul(s, w), p.heads); };
  StreamPair heads = bsdpa(project(s_f, p.w_q), project(s_b, p.w_q), project(s_f, p.w_k), project(s_b, p.w_k),
                           project(s_f, p.w_v), project(s_b, p.w_v), masks, lambda, drop);
  return {matmul(merge_heads(heads.fwd), p.w_o), matmul(merge_heads(heads.bwd), p.w_o)};
}

}  // namespace sbsg
