#include "sbsg/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "sbsg/errors.hpp"

namespace sbsg {

std::string to_string(DecoderMode mode) {
  switch (mode) {
    case DecoderMode::kBidirectional: return "bidirectional";
    case DecoderMode::kL2R: return "l2r";
    case DecoderMode::kR2L: return "r2l";
  }
  return "unknown";
}

DecoderMode parse_decoder_mode(const std::string& text) {
  if (text == "bidirectional") return DecoderMode::kBidirectional;
  if (text == "l2r") return DecoderMode::kL2R;
  if (text == "r2l") return DecoderMode::kR2L;
  throw ConfigError("unknown decoder mode '" + text + "' (expected bidirectional, l2r or r2l)");
}

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("layers must be >= 1");
  if (d_model == 0) throw ConfigError("d_model must be >= 1");
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("heads (" + std::to_string(heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
  }
  if (d_ff == 0) throw ConfigError("d_ff must be >= 1");
  if (vocab_size < 7) throw ConfigError("vocab_size must be >= 7, got " + std::to_string(vocab_size));
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (max_positions < 2) throw ConfigError("max_positions must be >= 2");
}

std::vector<std::pair<std::string, Tensor>> Params::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", embedding);
  auto add_mha = [&](const std::string& prefix, const MultiHeadParams& p) {
    out.emplace_back(prefix + ".w_q", p.w_q);
    out.emplace_back(prefix + ".w_k", p.w_k);
    out.emplace_back(prefix + ".w_v", p.w_v);
    out.emplace_back(prefix + ".w_o", p.w_o);
  };
  auto add_ln = [&](const std::string& prefix, const LayerNormParams& p) {
    out.emplace_back(prefix + ".gain", p.gain);
    out.emplace_back(prefix + ".bias", p.bias);
  };
  auto add_ffn = [&](const std::string& prefix, const FeedForwardParams& p) {
    out.emplace_back(prefix + ".w1", p.w1);
    out.emplace_back(prefix + ".b1", p.b1);
    out.emplace_back(prefix + ".w2", p.w2);
    out.emplace_back(prefix + ".b2", p.b2);
  };
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string p = "encoder." + std::to_string(l);
    add_mha(p + ".self_attn", encoder[l].self_attn);
    add_ln(p + ".ln_attn", encoder[l].ln_attn);
    add_ffn(p + ".ffn", encoder[l].ffn);
    add_ln(p + ".ln_ffn", encoder[l].ln_ffn);
  }
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string p = "decoder." + std::to_string(l);
    add_mha(p + ".intra", decoder[l].intra);
    add_ln(p + ".ln_intra", decoder[l].ln_intra);
    add_mha(p + ".inter", decoder[l].inter);
    add_ln(p + ".ln_inter", decoder[l].ln_inter);
    add_ffn(p + ".ffn", decoder[l].ffn);
    add_ln(p + ".ln_ffn", decoder[l].ln_ffn);
  }
  out.emplace_back("output", output);
  return out;
}

namespace {

// Visits every tensor slot in the same order as Params::named().
template <typename ParamsT, typename Fn>
void for_each_slot(ParamsT& p, Fn&& fn) {
  fn(p.embedding);
  auto mha = [&](auto& m) {
    fn(m.w_q);
    fn(m.w_k);
    fn(m.w_v);
    fn(m.w_o);
  };
  auto ln = [&](auto& n) {
    fn(n.gain);
    fn(n.bias);
  };
  auto ffn = [&](auto& f) {
    fn(f.w1);
    fn(f.b1);
    fn(f.w2);
    fn(f.b2);
  };
  for (auto& layer : p.encoder) {
    mha(layer.self_attn);
    ln(layer.ln_attn);
    ffn(layer.ffn);
    ln(layer.ln_ffn);
  }
  for (auto& layer : p.decoder) {
    mha(layer.intra);
    ln(layer.ln_intra);
    mha(layer.inter);
    ln(layer.ln_inter);
    ffn(layer.ffn);
    ln(layer.ln_ffn);
  }
  fn(p.output);
}

Params skeleton(const ModelConfig& config) {
  Params p;
  p.encoder.resize(config.layers);
  p.decoder.resize(config.layers);
  for (auto& l : p.encoder) l.self_attn.heads = config.heads;
  for (auto& l : p.decoder) {
    l.intra.heads = config.heads;
    l.inter.heads = config.heads;
  }
  return p;
}

// Shapes in slot order, mirroring for_each_slot.
std::vector<Shape> slot_shapes(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  std::vector<Shape> shapes;
  shapes.push_back({c.vocab_size, d});
  auto mha = [&] {
    for (int i = 0; i < 4; ++i) shapes.push_back({d, d});
  };
  auto ln = [&] {
    shapes.push_back({d});
    shapes.push_back({d});
  };
  auto ffn = [&] {
    shapes.push_back({d, c.d_ff});
    shapes.push_back({c.d_ff});
    shapes.push_back({c.d_ff, d});
    shapes.push_back({d});
  };
  for (std::size_t l = 0; l < c.layers; ++l) {
    mha();
    ln();
    ffn();
    ln();
  }
  for (std::size_t l = 0; l < c.layers; ++l) {
    mha();
    ln();
    mha();
    ln();
    ffn();
    ln();
  }
  shapes.push_back({d, c.vocab_size});
  return shapes;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

Params Params::clone() const {
  Params out = *this;
  for_each_slot(out, [](Tensor& t) { t = t.clone(); });
  return out;
}

void Params::zero_grad() const {
  for (auto& [name, t] : named()) {
    Tensor h = t;
    h.zero_grad();
  }
}

std::size_t Params::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

Params init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Params p = skeleton(config);
  const auto shapes = slot_shapes(config);
  const auto names = p.named();
  Rng rng(seed);
  std::size_t i = 0;
  for_each_slot(p, [&](Tensor& t) {
    const Shape& shape = shapes[i];
    std::vector<double> values(shape_numel(shape), 0.0);
    if (shape.size() == 2) {
      const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& v : values) v = (2.0 * uniform01(rng) - 1.0) * bound;
    } else if (names[i].first.ends_with(".gain")) {
      std::fill(values.begin(), values.end(), 1.0);
    }
    t = Tensor(shape, std::move(values), true);
    ++i;
  });
  return p;
}

Params params_from_named(const ModelConfig& config, const std::vector<std::pair<std::string, Tensor>>& named) {
  config.validate();
  Params p = skeleton(config);
  const auto expected = p.named();
  const auto shapes = slot_shapes(config);
  std::map<std::string, Tensor> by_name(named.begin(), named.end());
  if (by_name.size() != expected.size()) {
    throw ContractError("expected " + std::to_string(expected.size()) + " parameter tensors, got " +
                        std::to_string(by_name.size()));
  }
  std::size_t i = 0;
  for_each_slot(p, [&](Tensor& t) {
    const std::string& name = expected[i].first;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("missing parameter tensor '" + name + "'");
    if (it->second.shape() != shapes[i]) {
      throw ContractError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", config needs " +
                          shape_str(shapes[i]));
    }
    t = it->second.clone();
    t.set_requires_grad(true);
    ++i;
  });
  return p;
}

void positional_encoding_row(std::size_t pos, std::size_t d_model, double* out) {
  for (std::size_t i = 0; i < d_model; ++i) {
    const double exponent = static_cast<double>(i - i % 2) / static_cast<double>(d_model);
    const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
    out[i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
  }
}

Tensor positional_encoding(std::size_t len, std::size_t d_model) {
  std::vector<double> values(len * d_model);
  for (std::size_t pos = 0; pos < len; ++pos) positional_encoding_row(pos, d_model, values.data() + pos * d_model);
  return Tensor({len, d_model}, std::move(values));
}

namespace {

void check_positions(std::size_t len, const ModelConfig& config, const char* what) {
  if (len == 0 || len > config.max_positions) {
    throw ContractError(std::string(what) + " length " + std::to_string(len) + " outside [1, max_positions=" +
                        std::to_string(config.max_positions) + "]");
  }
}

Tensor embed(const IdMatrix& ids, const Params& params, const ModelConfig& config, const ForwardContext& ctx) {
  Tensor e = scale(embedding(params.embedding, ids.ids, ids.shape()), std::sqrt(static_cast<double>(config.d_model)));
  return dropout(add(e, positional_encoding(ids.cols, config.d_model)), ctx.dropout());
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return add(matmul(relu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

// LN(x + dropout(sublayer))
Tensor residual_norm(const Tensor& x, const Tensor& sublayer, const LayerNormParams& ln, const ForwardContext& ctx) {
  return layer_norm(add(x, dropout(sublayer, ctx.dropout())), ln.gain, ln.bias);
}

void check_params(const Params& params, const ModelConfig& config) {
  if (params.encoder.size() != config.layers || params.decoder.size() != config.layers ||
      params.embedding.shape() != Shape{config.vocab_size, config.d_model}) {
    throw ContractError("parameters do not match model config");
  }
}

// Decoder layer stack shared by the one- and two-stream decoders. With two
// streams the intra-attention is bi_mha_intra; everything after it runs on
// each stream independently with the same weights.
std::vector<Tensor> run_decoder(std::vector<Tensor> streams, const Tensor& enc_out,
                                std::span<const std::size_t> src_lengths, const BidirectionalMasks& intra_masks,
                                const Params& params, const ModelConfig& config, const ForwardContext& ctx) {
  const std::size_t q = streams[0].dim(1);
  const AttentionMask src_mask = make_padding_mask(src_lengths, enc_out.dim(1), q);
  for (const auto& layer : params.decoder) {
    std::vector<Tensor> intra(streams.size());
    if (streams.size() == 2) {
      StreamPair out = bi_mha_intra(streams[0], streams[1], intra_masks, layer.intra, config.lambda, ctx.dropout());
      intra[0] = out.fwd;
      intra[1] = out.bwd;
    } else {
      intra[0] = mha(streams[0], streams[0], streams[0], intra_masks.fwd_own, layer.intra, ctx.dropout());
    }
    for (std::size_t s = 0; s < streams.size(); ++s) {
      Tensor x = residual_norm(streams[s], intra[s], layer.ln_intra, ctx);
      x = residual_norm(x, mha(x, enc_out, enc_out, src_mask, layer.inter, ctx.dropout()), layer.ln_inter, ctx);
      streams[s] = residual_norm(x, feed_forward(x, layer.ffn), layer.ln_ffn, ctx);
    }
  }
  for (auto& s : streams) s = matmul(s, params.output);
  return streams;
}

void check_encoder_output(const Tensor& enc_out, std::size_t batch, std::span<const std::size_t> src_lengths,
                          const ModelConfig& config) {
  if (enc_out.rank() != 3 || enc_out.dim(0) != batch || enc_out.dim(2) != config.d_model ||
      src_lengths.size() != batch) {
    throw ContractError("encoder output " + shape_str(enc_out.shape()) + " does not match decoder batch of " +
                        std::to_string(batch));
  }
}

}  // namespace

Tensor encode(const IdMatrix& src, std::span<const std::size_t> src_lengths, const Params& params,
              const ModelConfig& config, const ForwardContext& ctx) {
  check_params(params, config);
  check_positions(src.cols, config, "source");
  if (src.rows == 0 || src_lengths.size() != src.rows) throw ContractError("source lengths do not match batch");
  const AttentionMask mask = make_padding_mask(src_lengths, src.cols);
  Tensor x = embed(src, params, config, ctx);
  for (const auto& layer : params.encoder) {
    x = residual_norm(x, mha(x, x, x, mask, layer.self_attn, ctx.dropout()), layer.ln_attn, ctx);
    x = residual_norm(x, feed_forward(x, layer.ffn), layer.ln_ffn, ctx);
  }
  return x;
}

StreamPair decode_bidirectional(const IdMatrix& fwd_in, const IdMatrix& bwd_in, const Tensor& enc_out,
                                std::span<const std::size_t> src_lengths, const Params& params,
                                const ModelConfig& config, const ForwardContext& ctx,
                                const CrossVisibility* visibility) {
  check_params(params, config);
  if (fwd_in.rows != bwd_in.rows || fwd_in.cols != bwd_in.cols || fwd_in.rows == 0) {
    throw ContractError("forward input [" + std::to_string(fwd_in.rows) + "," + std::to_string(fwd_in.cols) +
                        "] and backward input [" + std::to_string(bwd_in.rows) + "," + std::to_string(bwd_in.cols) +
                        "] differ");
  }
  check_positions(fwd_in.cols, config, "target");
  check_encoder_output(enc_out, fwd_in.rows, src_lengths, config);
  const std::size_t q = fwd_in.cols;
  const AttentionMask causal = make_causal_mask(q);
  BidirectionalMasks masks = BidirectionalMasks::uniform(causal);
  if (visibility != nullptr) {
    if (visibility->fwd.size() != fwd_in.rows || visibility->bwd.size() != fwd_in.rows) {
      throw ContractError("cross visibility does not match batch size");
    }
    masks.fwd_cross = make_causal_mask(q, visibility->bwd);
    masks.bwd_cross = make_causal_mask(q, visibility->fwd);
  }
  auto out = run_decoder({embed(fwd_in, params, config, ctx), embed(bwd_in, params, config, ctx)}, enc_out,
                         src_lengths, masks, params, config, ctx);
  return {out[0], out[1]};
}

Tensor decode_unidirectional(const IdMatrix& in, const Tensor& enc_out, std::span<const std::size_t> src_lengths,
                             const Params& params, const ModelConfig& config, const ForwardContext& ctx) {
  check_params(params, config);
  if (in.rows == 0) throw ContractError("empty decoder input");
  check_positions(in.cols, config, "target");
  check_encoder_output(enc_out, in.rows, src_lengths, config);
  const BidirectionalMasks masks = BidirectionalMasks::uniform(make_causal_mask(in.cols));
  return run_decoder({embed(in, params, config, ctx)}, enc_out, src_lengths, masks, params, config, ctx)[0];
}

}  // namespace sbsg
