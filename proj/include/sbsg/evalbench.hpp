#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "sbsg/decoding.hpp"
#include "sbsg/model.hpp"

namespace sbsg {

using TokenCorpus = std::vector<std::vector<std::string>>;

// Corpus BLEU on pre-tokenized, case-sensitive text, in [0, 100]. No
// smoothing: any zero n-gram precision yields 0.
double bleu(const TokenCorpus& hypotheses, const TokenCorpus& references, std::size_t max_n = 4);

double exact_match(const TokenCorpus& hypotheses, const TokenCorpus& references);

// Source-length bucket [lo, hi].
struct LengthBucket {
  std::size_t lo = 0, hi = 0;
  std::size_t count = 0;
  double bleu = 0.0;
  double exact_match = 0.0;
  double mean_hyp_len = 0.0;
  double mean_ref_len = 0.0;
};

// Buckets [1,w], (w,2w], ...; only non-empty buckets, ascending.
std::vector<LengthBucket> length_report(const TokenCorpus& sources, const TokenCorpus& hypotheses,
                                        const TokenCorpus& references, std::size_t bucket_width);

struct EvalReport {
  std::size_t sentences = 0;
  double bleu = 0.0;
  double exact_match = 0.0;
  std::vector<LengthBucket> buckets;
};

EvalReport evaluate_corpus(const TokenCorpus& sources, const TokenCorpus& hypotheses, const TokenCorpus& references,
                           std::size_t bucket_width);
// Human-readable table followed by a key=value block.
std::string format_eval_report(const EvalReport& report);

struct BenchModel {
  std::string name;
  const Params* params = nullptr;
  ModelConfig config;
};

struct BucketTiming {
  std::size_t lo = 0, hi = 0;
  std::size_t count = 0;
  double seconds = 0.0;
  double mean_steps = 0.0;
};

struct ModelTiming {
  std::string name;
  double seconds = 0.0;  // median over repetitions of the whole test set
  double sentences_per_sec = 0.0;
  double tokens_per_sec = 0.0;
  std::vector<std::size_t> steps;  // decoder invocations per sentence
  std::vector<std::vector<int>> outputs;
  std::vector<BucketTiming> buckets;  // by source length; batch 1 only
};

struct BenchReport {
  ModelTiming candidate;
  ModelTiming baseline;
  double speedup = 0.0;  // baseline seconds / candidate seconds
  std::size_t repetitions = 0;
  std::size_t batch = 1;
  SearchMode search = SearchMode::kGreedy;
};

// One untimed warmup pass per model, then `repetitions` timed passes with the
// two models interleaved. Throws BenchmarkError when the clock reports no
// elapsed time.
BenchReport bench_decode(const BenchModel& candidate, const BenchModel& baseline,
                         const std::vector<std::vector<int>>& sources, const DecodeConfig& cfg,
                         std::size_t repetitions, std::size_t batch = 1, std::size_t bucket_width = 4);

std::string format_bench_report(const BenchReport& report);
// Header plus one row per (model, source-length bucket).
std::string format_bench_csv(const BenchReport& report);

}  // namespace sbsg
