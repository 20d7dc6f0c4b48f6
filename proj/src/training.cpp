#include "sbsg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include "sbsg/checkpoint.hpp"
#include "sbsg/errors.hpp"
#include "sbsg/evalbench.hpp"

namespace sbsg {

void TrainHyper::validate() const {
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0,1)");
  if (!(eps > 0.0)) throw ConfigError("Adam eps must be > 0");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must lie in [0,1)");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (log_interval < 1) throw ConfigError("log_interval must be >= 1");
}

namespace {

Tensor smoothed_loss(std::initializer_list<std::pair<const Tensor*, const IdMatrix*>> streams,
                     std::span<const std::uint8_t> mask, double eps) {
  const std::size_t masked = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  if (masked == 0) throw ContractError("loss mask selects no positions");
  const double total = static_cast<double>(masked * streams.size());
  Tensor loss;
  for (const auto& [logits, out] : streams) {
    if (logits->rank() != 3 || logits->dim(0) != out->rows || logits->dim(1) != out->cols) {
      throw DimensionError("logits " + shape_str(logits->shape()) + " do not match targets " + shape_str(out->shape()));
    }
    if (mask.size() != out->ids.size()) throw DimensionError("loss mask does not match target shape");
    const std::size_t vocab = logits->dim(2);
    if (vocab < 2) throw ContractError("vocabulary too small for label smoothing");
    const double off = eps / static_cast<double>(vocab - 1);
    std::vector<double> weights(out->ids.size() * vocab, 0.0);
    for (std::size_t i = 0; i < out->ids.size(); ++i) {
      if (!mask[i]) continue;
      const int y = out->ids[i];
      if (y == kPadId) throw ContractError("loss mask covers a <pad> target");
      if (y < 0 || static_cast<std::size_t>(y) >= vocab) throw VocabError("target id " + std::to_string(y) + " outside vocabulary");
      double* w = weights.data() + i * vocab;
      for (std::size_t k = 0; k < vocab; ++k) w[k] = -off / total;
      w[kPadId] = 0.0;
      w[y] = -(1.0 - eps + off) / total;
    }
    Tensor term = sum(mul(log_softmax(*logits, -1), Tensor(logits->shape(), std::move(weights))));
    loss = loss.defined() ? add(loss, term) : term;
  }
  return loss;
}

}  // namespace

Tensor joint_loss(const Tensor& logits_f, const Tensor& logits_b, const IdMatrix& fwd_out, const IdMatrix& bwd_out,
                  std::span<const std::uint8_t> loss_mask, double label_smoothing) {
  if (fwd_out.shape() != bwd_out.shape()) throw DimensionError("forward and backward targets differ in shape");
  return smoothed_loss({{&logits_f, &fwd_out}, {&logits_b, &bwd_out}}, loss_mask, label_smoothing);
}

Tensor sequence_loss(const Tensor& logits, const IdMatrix& out, std::span<const std::uint8_t> loss_mask,
                     double label_smoothing) {
  return smoothed_loss({{&logits, &out}}, loss_mask, label_smoothing);
}

double learning_rate(std::size_t step, std::size_t d_model, std::size_t warmup) {
  if (step == 0) throw ContractError("learning rate schedule starts at step 1");
  if (warmup == 0 || d_model == 0) throw ContractError("warmup and d_model must be positive");
  const double s = static_cast<double>(step);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

OptimizerState OptimizerState::zeros_like(std::span<const Tensor> params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, OptimizerState& state, const TrainHyper& hyper, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("optimizer state holds " + std::to_string(state.m.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw ContractError("optimizer moment " + std::to_string(i) + " does not match its parameter");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = params[i].grad();
    auto w = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + hyper.eps);
    }
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= f;
    }
  }
  return norm;
}

std::vector<EncodedExample> encode_dataset(const Dataset& data, const Vocabulary& vocab) {
  std::vector<EncodedExample> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back({vocab.encode(ex.src), vocab.encode(ex.tgt)});
  return out;
}

namespace {

Rng derived_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto p : path) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

std::vector<std::string> id_strings(const std::vector<int>& ids) {
  std::vector<std::string> out;
  for (int id : ids) out.push_back(std::to_string(id));
  return out;
}

std::string format_log_row(const TrainLogRow& row) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6e\t%.4f", row.step, row.loss, row.lr, row.dev_metric);
  return buf;
}

}  // namespace

double dev_score(const Params& params, const ModelConfig& config, const std::vector<EncodedExample>& dev_set,
                 DevMetric metric) {
  if (dev_set.empty()) throw InputError("empty dev set");
  std::vector<std::vector<int>> sources;
  for (const auto& ex : dev_set) sources.push_back(ex.src);
  DecodeConfig cfg;
  cfg.mode = SearchMode::kGreedy;
  cfg.max_len = config.max_positions;
  const auto results = decode_batch(params, config, sources, cfg);
  TokenCorpus hyps, refs;
  for (std::size_t i = 0; i < dev_set.size(); ++i) {
    hyps.push_back(id_strings(results[i].tokens));
    refs.push_back(id_strings(dev_set[i].tgt));
  }
  return metric == DevMetric::kExactMatch ? exact_match(hyps, refs) : bleu(hyps, refs);
}

TrainResult train(const ModelConfig& config, const TrainHyper& hyper, const std::vector<EncodedExample>& train_set,
                  const std::vector<EncodedExample>& dev_set, const std::filesystem::path& checkpoint_path,
                  std::ostream* log) {
  config.validate();
  hyper.validate();
  if (train_set.empty()) throw InputError("empty training set");
  if (dev_set.empty()) throw InputError("empty dev set");
  const bool bi = config.mode == DecoderMode::kBidirectional;

  Params params = init_params(config, hyper.seed);
  std::vector<Tensor> tensors;
  for (auto& [name, t] : params.named()) tensors.push_back(t);
  OptimizerState opt = OptimizerState::zeros_like(tensors);
  Rng dropout_rng = derived_rng(hyper.seed, {1});

  TrainResult result;
  bool have_best = false;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t epoch = 0;
  std::size_t cursor = order.size();
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  for (std::size_t step = 1; step <= hyper.max_steps; ++step) {
    if (cursor >= order.size()) {
      Rng shuffle_rng = derived_rng(hyper.seed, {2, epoch});
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      cursor = 0;
      ++epoch;
    }
    const std::size_t end = std::min(order.size(), cursor + hyper.batch_size);
    Batch batch;
    if (bi) {
      std::vector<EncodedPair> pairs;
      for (std::size_t i = cursor; i < end; ++i) {
        const auto& ex = train_set[order[i]];
        if (hyper.null_side != NullSide::kNone) {
          pairs.push_back({ex.src, split_target(ex.tgt, hyper.null_side)});
          continue;
        }
        Rng split_rng = derived_rng(hyper.seed, {3, epoch, order[i]});
        pairs.push_back({ex.src, split_target(ex.tgt, split_rng)});
      }
      batch = make_batch(pairs);
    } else {
      std::vector<std::vector<int>> sources, targets;
      for (std::size_t i = cursor; i < end; ++i) {
        sources.push_back(train_set[order[i]].src);
        targets.push_back(train_set[order[i]].tgt);
      }
      batch = make_unidirectional_batch(sources, targets, config.mode);
    }
    cursor = end;

    const ForwardContext ctx = ForwardContext::train(config, dropout_rng);
    const Tensor enc = encode(batch.src, batch.src_lengths, params, config, ctx);
    Tensor loss;
    if (bi) {
      StreamPair logits = decode_bidirectional(batch.fwd_in, batch.bwd_in, enc, batch.src_lengths, params, config, ctx);
      loss = joint_loss(logits.fwd, logits.bwd, batch.fwd_out, batch.bwd_out, batch.loss_mask, hyper.label_smoothing);
    } else {
      Tensor logits = decode_unidirectional(batch.fwd_in, enc, batch.src_lengths, params, config, ctx);
      loss = sequence_loss(logits, batch.fwd_out, batch.loss_mask, hyper.label_smoothing);
    }
    params.zero_grad();
    loss.backward();
    clip_grad_norm(tensors, hyper.clip_norm);
    const double lr = learning_rate(step, config.d_model, hyper.warmup_steps);
    adam_step(tensors, opt, hyper, lr);
    loss_sum += loss.item();
    ++loss_count;

    if (step % hyper.log_interval == 0 || step == hyper.max_steps) {
      TrainLogRow row{step, loss_sum / static_cast<double>(loss_count), lr,
                      dev_score(params, config, dev_set, hyper.dev_metric)};
      loss_sum = 0.0;
      loss_count = 0;
      result.log.push_back(row);
      if (log) *log << format_log_row(row) << std::endl;
      if (!have_best || row.dev_metric > result.best_dev) {
        have_best = true;
        result.best_dev = row.dev_metric;
        result.best_step = step;
        result.best = params.clone();
        if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, config, result.best);
      }
    }
  }
  return result;
}

Dataset distill(const ModelConfig& teacher_config, const Params& teacher, const Vocabulary& vocab, const Dataset& data,
                const DecodeConfig& cfg) {
  if (teacher_config.mode == DecoderMode::kBidirectional) {
    throw ContractError("distillation needs a unidirectional teacher, got a bidirectional model");
  }
  if (teacher_config.vocab_size != vocab.size()) {
    throw ContractError("teacher vocabulary size " + std::to_string(teacher_config.vocab_size) +
                        " does not match vocabulary of size " + std::to_string(vocab.size()));
  }
  Dataset out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    const auto src = vocab.encode(ex.src);
    const DecodeResult r = beam_search_unidirectional(teacher, teacher_config, src, cfg);
    Example distilled{ex.src, vocab.decode(r.tokens)};
    // An empty teacher output cannot be written as a dataset line.
    if (distilled.tgt.empty()) distilled.tgt = ex.tgt;
    out.push_back(std::move(distilled));
  }
  return out;
}

}  // namespace sbsg
