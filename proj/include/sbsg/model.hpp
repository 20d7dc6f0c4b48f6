#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sbsg/attention.hpp"
#include "sbsg/ops.hpp"
#include "sbsg/tensor.hpp"

namespace sbsg {

enum class DecoderMode { kBidirectional, kL2R, kR2L };

std::string to_string(DecoderMode mode);
// Accepts "bidirectional", "l2r", "r2l"; anything else is a ConfigError.
DecoderMode parse_decoder_mode(const std::string& text);

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  double lambda = 0.5;
  double dropout = 0.1;
  std::size_t max_positions = 64;
  DecoderMode mode = DecoderMode::kBidirectional;

  // Throws ConfigError on the first violated invariant.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  MultiHeadParams self_attn;
  LayerNormParams ln_attn;
  FeedForwardParams ffn;
  LayerNormParams ln_ffn;
};

struct DecoderLayerParams {
  MultiHeadParams intra;
  LayerNormParams ln_intra;
  MultiHeadParams inter;
  LayerNormParams ln_inter;
  FeedForwardParams ffn;
  LayerNormParams ln_ffn;
};

/// All learned weights. One decoder stack and one output matrix serve both
/// generation directions.
struct Params {
  Tensor embedding;  // [vocab, d_model], shared by source and target
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor output;  // [d_model, vocab]

  // Stable, checkpoint-order listing of every tensor. Entries alias the
  // stored tensors.
  std::vector<std::pair<std::string, Tensor>> named() const;
  Params clone() const;
  void zero_grad() const;
  std::size_t parameter_count() const;
};

Params init_params(const ModelConfig& config, std::uint64_t seed);
// Rebuilds a Params layout from named tensors (e.g. a loaded checkpoint).
Params params_from_named(const ModelConfig& config, const std::vector<std::pair<std::string, Tensor>>& named);

/// Row-major integer matrix of token ids.
struct IdMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;

  int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  int& at(std::size_t r, std::size_t c) { return ids[r * cols + c]; }
  Shape shape() const { return {rows, cols}; }
};

// Training-time switches threaded through a forward pass.
struct ForwardContext {
  bool training = false;
  double dropout_rate = 0.0;
  Rng* rng = nullptr;

  static ForwardContext train(const ModelConfig& config, Rng& rng) { return {true, config.dropout, &rng}; }
  Dropout dropout() const { return training ? Dropout{dropout_rate, rng} : Dropout{}; }
};

// [len, d] table: even columns sin(pos / 10000^(2i/d)), odd columns cos.
Tensor positional_encoding(std::size_t len, std::size_t d_model);
void positional_encoding_row(std::size_t pos, std::size_t d_model, double* out);

Tensor encode(const IdMatrix& src, std::span<const std::size_t> src_lengths, const Params& params,
              const ModelConfig& config, const ForwardContext& ctx = {});

/// How many key positions of each stream stay visible to the other stream,
/// per batch element. Absent means all positions under the causal mask.
struct CrossVisibility {
  std::vector<std::size_t> fwd;  // fwd keys visible to bwd queries
  std::vector<std::size_t> bwd;  // bwd keys visible to fwd queries
};

// Full-prefix bidirectional decoder. Both inputs are [b, q] and start with
// <l2r> / <r2l>. Returns per-stream logits [b, q, vocab].
StreamPair decode_bidirectional(const IdMatrix& fwd_in, const IdMatrix& bwd_in, const Tensor& enc_out,
                                std::span<const std::size_t> src_lengths, const Params& params,
                                const ModelConfig& config, const ForwardContext& ctx = {},
                                const CrossVisibility* visibility = nullptr);

// Single-stream decoder on the same layer stack: logits [b, q, vocab].
Tensor decode_unidirectional(const IdMatrix& in, const Tensor& enc_out, std::span<const std::size_t> src_lengths,
                             const Params& params, const ModelConfig& config, const ForwardContext& ctx = {});

}  // namespace sbsg
