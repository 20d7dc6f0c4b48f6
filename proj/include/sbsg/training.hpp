#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "sbsg/data.hpp"
#include "sbsg/decoding.hpp"
#include "sbsg/model.hpp"

namespace sbsg {

enum class DevMetric { kExactMatch, kBleu };

struct TrainHyper {
  double beta1 = 0.9;
  double beta2 = 0.998;
  double eps = 1e-9;
  std::size_t warmup_steps = 400;
  double label_smoothing = 0.1;
  std::size_t batch_size = 32;
  std::size_t max_steps = 3000;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t log_interval = 250;
  DevMetric dev_metric = DevMetric::kExactMatch;
  // <null> side for odd-length targets; kNone re-draws it per example and epoch.
  NullSide null_side = NullSide::kNone;

  void validate() const;
};

// Label-smoothed cross entropy averaged over the masked positions of both
// streams. loss_mask is [b, q] and applies to both streams.
Tensor joint_loss(const Tensor& logits_f, const Tensor& logits_b, const IdMatrix& fwd_out, const IdMatrix& bwd_out,
                  std::span<const std::uint8_t> loss_mask, double label_smoothing);
// Single-stream variant for the baselines.
Tensor sequence_loss(const Tensor& logits, const IdMatrix& out, std::span<const std::uint8_t> loss_mask,
                     double label_smoothing);

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
double learning_rate(std::size_t step, std::size_t d_model, std::size_t warmup);

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;

  static OptimizerState zeros_like(std::span<const Tensor> params);
};

// Bias-corrected Adam update of every tensor in place from its accumulated
// gradient (absent gradients count as zero).
void adam_step(std::span<Tensor> params, OptimizerState& state, const TrainHyper& hyper, double lr);

// Rescales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

struct EncodedExample {
  std::vector<int> src;
  std::vector<int> tgt;
};

std::vector<EncodedExample> encode_dataset(const Dataset& data, const Vocabulary& vocab);

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;  // mean training loss since the previous row
  double lr = 0.0;
  double dev_metric = 0.0;
};

struct TrainResult {
  Params best;
  std::size_t best_step = 0;
  double best_dev = 0.0;
  std::vector<TrainLogRow> log;
};

// Teacher-forced training with per-epoch shuffling and, for bidirectional
// models, per-epoch <null> side draws. Evaluates greedy decoding on the dev
// set every log_interval steps and after the last step, writes each row to
// `log` as "step\tloss\tlr\tdev_metric", and saves the best-dev parameters
// to checkpoint_path whenever the dev metric improves.
TrainResult train(const ModelConfig& config, const TrainHyper& hyper, const std::vector<EncodedExample>& train_set,
                  const std::vector<EncodedExample>& dev_set, const std::filesystem::path& checkpoint_path,
                  std::ostream* log = nullptr);

// Dev metric of greedy decoding (exact match in [0,1] or BLEU in [0,100]).
double dev_score(const Params& params, const ModelConfig& config, const std::vector<EncodedExample>& dev_set,
                 DevMetric metric);

// Sequence-level distillation: each target becomes the teacher's beam output
// for its source. The teacher must be a unidirectional model.
Dataset distill(const ModelConfig& teacher_config, const Params& teacher, const Vocabulary& vocab, const Dataset& data,
                const DecodeConfig& cfg);

}  // namespace sbsg
