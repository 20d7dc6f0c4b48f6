#include "sbsg/incremental.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include "sbsg/errors.hpp"

namespace sbsg {

namespace {


// Decoder-step rows: accumulators for a block of output columns stay in
// registers while each weight row is streamed once for all R rows.
template <std::size_t R, int kBlock>
std::size_t project_blocks(const double* x, std::size_t in, const double* w, std::size_t n, const double* bias,
                           double* out, std::size_t j0, std::size_t j_end) {
  using Block = Eigen::Matrix<double, 1, kBlock>;
  for (; j0 + kBlock <= j_end; j0 += kBlock) {
    Block acc[R];
    for (std::size_t r = 0; r < R; ++r) {
      acc[r] = bias != nullptr ? Block(Eigen::Map<const Block>(bias + j0)) : Block::Zero();
    }
    for (std::size_t i = 0; i < in; ++i) {
      const Eigen::Map<const Block> wi(w + i * n + j0);
      for (std::size_t r = 0; r < R; ++r) acc[r].noalias() += x[r * in + i] * wi;
    }
    for (std::size_t r = 0; r < R; ++r) Eigen::Map<Block>(out + r * n + j0) = acc[r];
  }
  return j0;
}

// Columns [j0, n) of R rows: 8-wide blocks, then scalar.
template <std::size_t R>
void project_tail(const double* x, std::size_t in, const double* w, std::size_t n, const double* bias, double* out,
                  std::size_t j0) {
  j0 = project_blocks<R, 8>(x, in, w, n, bias, out, j0, n);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = j0; j < n; ++j) {
      double acc = bias != nullptr ? bias[j] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w[i * n + j];
      out[r * n + j] = acc;
    }
  }
}

template <std::size_t R>
void project_few(const double* x, std::size_t in, const double* w, std::size_t n, const double* bias, double* out) {
  project_tail<R>(x, in, w, n, bias, out, project_blocks<R, 32>(x, in, w, n, bias, out, 0, n));
}

// out[r, :] = bias + x[r, :] W for row-major W [in, out].
void project(const double* x, std::size_t rows, const Tensor& w, double* out, const Tensor* bias = nullptr) {
  const std::size_t in = w.dim(0), n = w.dim(1);
  const double* b = bias != nullptr ? bias->data().data() : nullptr;
  if (rows == 1) return project_few<1>(x, in, w.data().data(), n, b, out);
  if (rows == 2) return project_few<2>(x, in, w.data().data(), n, b, out);
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) project_few<4>(x + r * in, in, w.data().data(), n, b, out + r * n);
  for (; r < rows; ++r) project_few<1>(x + r * in, in, w.data().data(), n, b, out + r * n);
}

// Same arithmetic as ops::layer_norm, applied to x + y row by row, into x.
void add_layer_norm(double* x, const double* y, std::size_t rows, std::size_t d, const LayerNormParams& ln) {
  const double* g = ln.gain.data().data();
  const double* b = ln.bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = x + r * d;
    const double* add = y + r * d;
    for (std::size_t j = 0; j < d; ++j) row[j] += add[j];
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv * g[j] + b[j];
  }
}

// For every head h: out_h += weight * softmax(q_h . keys[t]_h / sqrt(dk)) V_h
// over t < count. Rows of keys/values have stride d.
void attend(const double* q, const double* keys, const double* values, std::size_t count, std::size_t d,
            std::size_t heads, double weight, double* out, std::vector<double>& scratch) {
  const std::size_t dk = d / heads;
  scratch.resize(count * heads + d + heads);
  double* score = scratch.data();  // [count, heads]
  double* prod = score + count * heads;
  double* scale = prod + d;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t t = 0; t < count; ++t) {
    const double* k = keys + t * d;
    for (std::size_t j = 0; j < d; ++j) prod[j] = q[j] * k[j];
    for (std::size_t h = 0; h < heads; ++h) {
      double acc = 0.0;
      for (std::size_t j = h * dk; j < (h + 1) * dk; ++j) acc += prod[j];
      score[t * heads + h] = acc * inv_sqrt;
    }
  }
  for (std::size_t h = 0; h < heads; ++h) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < count; ++t) mx = std::max(mx, score[t * heads + h]);
    double total = 0.0;
    for (std::size_t t = 0; t < count; ++t) {
      score[t * heads + h] = std::exp(score[t * heads + h] - mx);
      total += score[t * heads + h];
    }
    scale[h] = weight / total;
  }
  for (std::size_t t = 0; t < count; ++t) {
    const double* v = values + t * d;
    for (std::size_t h = 0; h < heads; ++h) {
      const double c = score[t * heads + h] * scale[h];
      for (std::size_t j = h * dk; j < (h + 1) * dk; ++j) out[j] += c * v[j];
    }
  }
}

// Position-wise feed-forward sublayer followed by the residual layer norm.
void feed_forward(double* x, std::size_t rows, std::size_t d, const FeedForwardParams& ffn, const LayerNormParams& ln,
                  std::vector<double>& hidden, std::vector<double>& out) {
  hidden.resize(rows * ffn.w1.dim(1));
  out.resize(rows * d);
  project(x, rows, ffn.w1, hidden.data(), &ffn.b1);
  for (auto& h : hidden) h = std::max(h, 0.0);
  project(hidden.data(), rows, ffn.w2, out.data(), &ffn.b2);
  add_layer_norm(x, out.data(), rows, d, ln);
}

// Sinusoidal table for positions [0, positions), shared across states.
std::shared_ptr<const std::vector<double>> position_table(std::size_t positions, std::size_t d) {
  static std::mutex mutex;
  static std::map<std::pair<std::size_t, std::size_t>, std::shared_ptr<const std::vector<double>>> tables;
  const std::lock_guard lock(mutex);
  auto& slot = tables[{positions, d}];
  if (!slot) {
    auto table = std::make_shared<std::vector<double>>(positions * d);
    for (std::size_t p = 0; p < positions; ++p) positional_encoding_row(p, d, table->data() + p * d);
    slot = std::move(table);
  }
  return slot;
}

struct Workspace {
  std::vector<double> x, q, k, v, h, o, hidden, scratch;
};

// Inference-only encoder for one unpadded sentence; matches encode().
std::vector<double> encode_sentence(const std::vector<int>& src, const Params& params, const ModelConfig& config,
                                    Workspace& ws) {
  const std::size_t m = src.size(), d = config.d_model;
  const double emb_scale = std::sqrt(static_cast<double>(d));
  const double* emb = params.embedding.data().data();
  const auto& pe = *position_table(config.max_positions, d);
  std::vector<double> x(m * d);
  for (std::size_t i = 0; i < m; ++i) {
    if (src[i] < 0 || static_cast<std::size_t>(src[i]) >= config.vocab_size) {
      throw VocabError("token id " + std::to_string(src[i]) + " outside vocabulary of size " +
                       std::to_string(config.vocab_size));
    }
    std::copy_n(pe.data() + i * d, d, x.data() + i * d);
    const double* e = emb + static_cast<std::size_t>(src[i]) * d;
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] += e[j] * emb_scale;
  }
  for (const auto& layer : params.encoder) {
    ws.q.resize(m * d);
    ws.k.resize(m * d);
    ws.v.resize(m * d);
    ws.h.assign(m * d, 0.0);
    ws.o.resize(m * d);
    project(x.data(), m, layer.self_attn.w_q, ws.q.data());
    project(x.data(), m, layer.self_attn.w_k, ws.k.data());
    project(x.data(), m, layer.self_attn.w_v, ws.v.data());
    for (std::size_t i = 0; i < m; ++i)
      attend(ws.q.data() + i * d, ws.k.data(), ws.v.data(), m, d, config.heads, 1.0, ws.h.data() + i * d, ws.scratch);
    project(ws.h.data(), m, layer.self_attn.w_o, ws.o.data());
    add_layer_norm(x.data(), ws.o.data(), m, d, layer.ln_attn);
    feed_forward(x.data(), m, d, layer.ffn, layer.ln_ffn, ws.hidden, ws.o);
  }
  return x;
}

void check_state(const DecoderState& state, const Params& params, const ModelConfig& config) {
  if (state.layers != config.layers || state.d_model != config.d_model || params.decoder.size() != config.layers) {
    throw ContractError("decoder state does not match model config");
  }
  if (state.streams != 1 && state.streams != 2) throw ContractError("decoder state must have 1 or 2 streams");
}

}  // namespace

DecoderState start_decoding(const Params& params, const ModelConfig& config,
                            const std::vector<std::vector<int>>& sources, std::size_t streams) {
  if (streams != 1 && streams != 2) throw ContractError("decoding needs 1 or 2 streams");
  if (params.encoder.size() != config.layers || params.decoder.size() != config.layers ||
      params.embedding.shape() != Shape{config.vocab_size, config.d_model}) {
    throw ContractError("parameters do not match model config");
  }
  DecoderState state;
  state.streams = streams;
  state.layers = config.layers;
  state.d_model = config.d_model;
  Workspace ws;
  for (const auto& src : sources) {
    if (src.empty()) throw InputError("cannot decode an empty source sentence");
    if (src.size() > config.max_positions) {
      throw ContractError("source length " + std::to_string(src.size()) + " exceeds max_positions=" +
                          std::to_string(config.max_positions));
    }
    const std::size_t len = src.size();
    const std::vector<double> enc = encode_sentence(src, params, config, ws);
    auto memory = std::make_shared<EncoderMemory>();
    memory->length = len;
    for (const auto& layer : params.decoder) {
      std::vector<double> k(len * config.d_model), v(len * config.d_model);
      project(enc.data(), len, layer.inter.w_k, k.data());
      project(enc.data(), len, layer.inter.w_v, v.data());
      memory->keys.push_back(std::move(k));
      memory->values.push_back(std::move(v));
    }
    DecoderState::Item item;
    item.memory = std::move(memory);
    item.layers.resize(config.layers);
    state.items.push_back(std::move(item));
  }
  return state;
}

void limit_visibility(DecoderState& state, std::size_t item, std::size_t stream, std::size_t count) {
  if (item >= state.items.size() || stream >= state.streams) throw ContractError("limit_visibility: bad index");
  if (count == 0) throw ContractError("limit_visibility: at least one position must stay visible");
  auto& v = state.items[item].visible[stream];
  v = std::min(v, count);
}

StepLogits advance(DecoderState& state, std::span<const int> next_f, std::span<const int> next_b,
                   const Params& params, const ModelConfig& config) {
  check_state(state, params, config);
  const std::size_t batch = state.batch();
  const std::size_t streams = state.streams;
  if (next_f.size() != batch || (streams == 2 ? next_b.size() != batch : !next_b.empty())) {
    throw ContractError("step inputs do not match decoder state batch/streams");
  }
  if (state.position >= config.max_positions) {
    throw ContractError("decoder state already holds max_positions=" + std::to_string(config.max_positions));
  }
  for (std::span<const int> ids : {next_f, next_b}) {
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
        throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(config.vocab_size));
      }
    }
  }
  const std::size_t d = config.d_model;
  const std::size_t heads = config.heads;
  const std::size_t pos = state.position;
  const std::size_t vocab = config.vocab_size;
  const double emb_scale = std::sqrt(static_cast<double>(d));
  const double* pe = position_table(config.max_positions, d)->data() + pos * d;

  std::vector<double> logits_f(batch * vocab);
  std::vector<double> logits_b(streams == 2 ? batch * vocab : 0);
  std::vector<double> logits(streams * vocab);
  const double* emb = params.embedding.data().data();
  thread_local Workspace ws;
  ws.x.resize(streams * d);
  ws.q.resize(streams * d);
  ws.k.resize(streams * d);
  ws.v.resize(streams * d);
  ws.o.resize(streams * d);

  for (std::size_t b = 0; b < batch; ++b) {
    auto& item = state.items[b];
    double* x = ws.x.data();
    for (std::size_t s = 0; s < streams; ++s) {
      const double* e = emb + static_cast<std::size_t>(s == 0 ? next_f[b] : next_b[b]) * d;
      for (std::size_t j = 0; j < d; ++j) x[s * d + j] = e[j] * emb_scale + pe[j];
    }

    for (std::size_t l = 0; l < config.layers; ++l) {
      const auto& layer = params.decoder[l];
      auto& cache = item.layers[l];
      project(x, streams, layer.intra.w_q, ws.q.data());
      project(x, streams, layer.intra.w_k, ws.k.data());
      project(x, streams, layer.intra.w_v, ws.v.data());
      for (std::size_t s = 0; s < streams; ++s) {
        cache[s].keys.insert(cache[s].keys.end(), ws.k.data() + s * d, ws.k.data() + (s + 1) * d);
        cache[s].values.insert(cache[s].values.end(), ws.v.data() + s * d, ws.v.data() + (s + 1) * d);
      }
      ws.h.assign(streams * d, 0.0);
      for (std::size_t s = 0; s < streams; ++s) {
        const double* qs = ws.q.data() + s * d;
        double* hs = ws.h.data() + s * d;
        attend(qs, cache[s].keys.data(), cache[s].values.data(), pos + 1, d, heads, 1.0, hs, ws.scratch);
        if (streams == 2) {
          const std::size_t other = 1 - s;
          const std::size_t count = std::min(pos + 1, item.visible[other]);
          attend(qs, cache[other].keys.data(), cache[other].values.data(), count, d, heads, config.lambda, hs,
                 ws.scratch);
        }
      }
      project(ws.h.data(), streams, layer.intra.w_o, ws.o.data());
      add_layer_norm(x, ws.o.data(), streams, d, layer.ln_intra);

      const auto& mem = *item.memory;
      project(x, streams, layer.inter.w_q, ws.q.data());
      ws.h.assign(streams * d, 0.0);
      for (std::size_t s = 0; s < streams; ++s) {
        attend(ws.q.data() + s * d, mem.keys[l].data(), mem.values[l].data(), mem.length, d, heads, 1.0,
               ws.h.data() + s * d, ws.scratch);
      }
      project(ws.h.data(), streams, layer.inter.w_o, ws.o.data());
      add_layer_norm(x, ws.o.data(), streams, d, layer.ln_inter);
      feed_forward(x, streams, d, layer.ffn, layer.ln_ffn, ws.hidden, ws.o);
    }

    project(x, streams, params.output, logits.data());
    std::copy_n(logits.data(), vocab, logits_f.data() + b * vocab);
    if (streams == 2) std::copy_n(logits.data() + vocab, vocab, logits_b.data() + b * vocab);
  }
  state.position += 1;
  StepLogits out;
  out.fwd = Tensor({batch, vocab}, std::move(logits_f));
  if (streams == 2) out.bwd = Tensor({batch, vocab}, std::move(logits_b));
  return out;
}

StepResult incremental_step(const DecoderState& state, std::span<const int> next_f, std::span<const int> next_b,
                            const Params& params, const ModelConfig& config) {
  StepResult result{Tensor(), Tensor(), state};
  StepLogits logits = advance(result.state, next_f, next_b, params, config);
  result.logits_f = logits.fwd;
  result.logits_b = logits.bwd;
  return result;
}

}  // namespace sbsg
