#include "sbsg/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <utility>

#include "sbsg/errors.hpp"

namespace sbsg {

namespace {

void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw InputError(std::string(what) + ": " + std::to_string(a) + " hypotheses vs " + std::to_string(b) +
                     " references");
  }
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

double bleu(const TokenCorpus& hypotheses, const TokenCorpus& references, std::size_t max_n) {
  check_aligned(hypotheses.size(), references.size(), "bleu");
  if (hypotheses.empty()) throw InputError("bleu: empty corpus");
  if (max_n == 0) throw ConfigError("bleu: max_n must be >= 1");
  std::vector<std::size_t> matches(max_n, 0), totals(max_n, 0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& r = references[s];
    hyp_len += h.size();
    ref_len += r.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      if (h.size() < n) continue;
      std::map<std::vector<std::string>, std::size_t> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[{r.begin() + static_cast<std::ptrdiff_t>(i), r.begin() + static_cast<std::ptrdiff_t>(i + n)}];
      std::map<std::vector<std::string>, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + static_cast<std::ptrdiff_t>(i), h.begin() + static_cast<std::ptrdiff_t>(i + n)}];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(c, it->second);
      }
      totals[n - 1] += h.size() - n + 1;
    }
  }
  double log_precision = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (matches[n] == 0) return 0.0;
    log_precision += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  log_precision /= static_cast<double>(max_n);
  const double bp = hyp_len >= ref_len ? 0.0 : 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len);
  return 100.0 * std::exp(log_precision + bp);
}

double exact_match(const TokenCorpus& hypotheses, const TokenCorpus& references) {
  check_aligned(hypotheses.size(), references.size(), "exact_match");
  if (hypotheses.empty()) throw InputError("exact_match: empty corpus");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) hits += hypotheses[i] == references[i];
  return static_cast<double>(hits) / static_cast<double>(hypotheses.size());
}

namespace {

std::size_t bucket_index(std::size_t length, std::size_t width) { return length == 0 ? 0 : (length - 1) / width; }

}  // namespace

std::vector<LengthBucket> length_report(const TokenCorpus& sources, const TokenCorpus& hypotheses,
                                        const TokenCorpus& references, std::size_t bucket_width) {
  if (bucket_width < 1) throw ConfigError("bucket width must be >= 1");
  check_aligned(hypotheses.size(), references.size(), "length_report");
  check_aligned(sources.size(), references.size(), "length_report sources");
  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < sources.size(); ++i) members[bucket_index(sources[i].size(), bucket_width)].push_back(i);
  std::vector<LengthBucket> rows;
  for (const auto& [b, idx] : members) {
    LengthBucket row;
    row.lo = b * bucket_width + 1;
    row.hi = (b + 1) * bucket_width;
    row.count = idx.size();
    TokenCorpus h, r;
    for (auto i : idx) {
      h.push_back(hypotheses[i]);
      r.push_back(references[i]);
      row.mean_hyp_len += static_cast<double>(hypotheses[i].size());
      row.mean_ref_len += static_cast<double>(references[i].size());
    }
    row.mean_hyp_len /= static_cast<double>(row.count);
    row.mean_ref_len /= static_cast<double>(row.count);
    row.bleu = bleu(h, r);
    row.exact_match = exact_match(h, r);
    rows.push_back(row);
  }
  return rows;
}

EvalReport evaluate_corpus(const TokenCorpus& sources, const TokenCorpus& hypotheses, const TokenCorpus& references,
                           std::size_t bucket_width) {
  EvalReport report;
  report.sentences = hypotheses.size();
  report.bleu = bleu(hypotheses, references);
  report.exact_match = exact_match(hypotheses, references);
  report.buckets = length_report(sources, hypotheses, references, bucket_width);
  return report;
}

std::string format_eval_report(const EvalReport& report) {
  std::ostringstream os;
  os << "src_len    count   bleu     exact   hyp_len  ref_len\n";
  for (const auto& b : report.buckets) {
    char line[160];
    std::snprintf(line, sizeof line, "%3zu-%-3zu %8zu %7.2f %8.4f %8.2f %8.2f\n", b.lo, b.hi, b.count, b.bleu,
                  b.exact_match, b.mean_hyp_len, b.mean_ref_len);
    os << line;
  }
  os << "\nsentences=" << report.sentences << '\n'
     << "bleu=" << fixed(report.bleu, 4) << '\n'
     << "exact_match=" << fixed(report.exact_match, 4) << '\n';
  for (const auto& b : report.buckets) {
    const std::string key = "bucket_" + std::to_string(b.lo) + "_" + std::to_string(b.hi);
    os << key << ".count=" << b.count << '\n'
       << key << ".bleu=" << fixed(b.bleu, 4) << '\n'
       << key << ".mean_hyp_len=" << fixed(b.mean_hyp_len, 4) << '\n';
  }
  return os.str();
}

namespace {

using Clock = std::chrono::steady_clock;

struct Pass {
  double total = 0.0;
  std::vector<double> per_sentence;
};

// Times both models over alternating blocks of chunks so that load spikes on a
// shared machine land on both about equally. Blocks are long enough for each
// model's weights to settle in cache.
constexpr std::size_t kChunksPerBlock = 32;

std::pair<Pass, Pass> timed_passes(const BenchModel& candidate, const BenchModel& baseline,
                                   const std::vector<std::vector<int>>& sources, const DecodeConfig& cfg,
                                   std::size_t batch, std::vector<DecodeResult>* out_c,
                                   std::vector<DecodeResult>* out_b) {
  std::pair<Pass, Pass> passes;
  passes.first.per_sentence.assign(sources.size(), 0.0);
  passes.second.per_sentence.assign(sources.size(), 0.0);
  const auto run = [&](const BenchModel& model, Pass& pass, std::vector<DecodeResult>* outputs,
                       const std::vector<std::vector<int>>& chunk, std::size_t start) {
    const auto t0 = Clock::now();
    auto results = decode_batch(*model.params, model.config, chunk, cfg);
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    pass.total += dt;
    for (std::size_t i = 0; i < chunk.size(); ++i) pass.per_sentence[start + i] = dt / static_cast<double>(chunk.size());
    if (outputs) {
      for (auto& r : results) outputs->push_back(std::move(r));
    }
  };
  const auto run_block = [&](const BenchModel& model, Pass& pass, std::vector<DecodeResult>* outputs,
                             std::size_t lo, std::size_t hi) {
    for (std::size_t start = lo; start < hi; start += batch) {
      const std::size_t end = std::min(hi, start + batch);
      std::vector<std::vector<int>> chunk(sources.begin() + static_cast<std::ptrdiff_t>(start),
                                          sources.begin() + static_cast<std::ptrdiff_t>(end));
      run(model, pass, outputs, chunk, start);
    }
  };
  const std::size_t block = batch * kChunksPerBlock;
  for (std::size_t lo = 0, k = 0; lo < sources.size(); lo += block, ++k) {
    const std::size_t hi = std::min(sources.size(), lo + block);
    if (k % 2 == 0) {
      run_block(candidate, passes.first, out_c, lo, hi);
      run_block(baseline, passes.second, out_b, lo, hi);
    } else {
      run_block(baseline, passes.second, out_b, lo, hi);
      run_block(candidate, passes.first, out_c, lo, hi);
    }
  }
  return passes;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ModelTiming summarize(const BenchModel& model, const std::vector<DecodeResult>& warm, const std::vector<Pass>& passes,
                      const std::vector<std::vector<int>>& sources, std::size_t bucket_width, std::size_t batch) {
  ModelTiming t;
  t.name = model.name;
  std::vector<double> totals;
  for (const auto& p : passes) totals.push_back(p.total);
  t.seconds = median(totals);
  if (!(t.seconds > 0.0)) throw BenchmarkError("timer reported no elapsed time for model '" + model.name + "'");
  std::size_t tokens = 0;
  for (const auto& r : warm) {
    t.steps.push_back(r.steps);
    t.outputs.push_back(r.tokens);
    tokens += r.tokens.size();
  }
  t.sentences_per_sec = static_cast<double>(sources.size()) / t.seconds;
  t.tokens_per_sec = static_cast<double>(tokens) / t.seconds;
  if (batch != 1) return t;

  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < sources.size(); ++i) members[bucket_index(sources[i].size(), bucket_width)].push_back(i);
  for (const auto& [b, idx] : members) {
    BucketTiming bt;
    bt.lo = b * bucket_width + 1;
    bt.hi = (b + 1) * bucket_width;
    bt.count = idx.size();
    std::vector<double> sums;
    for (const auto& p : passes) {
      double s = 0.0;
      for (auto i : idx) s += p.per_sentence[i];
      sums.push_back(s);
    }
    bt.seconds = median(sums);
    for (auto i : idx) bt.mean_steps += static_cast<double>(t.steps[i]);
    bt.mean_steps /= static_cast<double>(bt.count);
    t.buckets.push_back(bt);
  }
  return t;
}

}  // namespace

BenchReport bench_decode(const BenchModel& candidate, const BenchModel& baseline,
                         const std::vector<std::vector<int>>& sources, const DecodeConfig& cfg,
                         std::size_t repetitions, std::size_t batch, std::size_t bucket_width) {
  if (sources.empty()) throw InputError("bench: empty test set");
  if (repetitions < 1) throw ConfigError("bench: repetitions must be >= 1");
  if (batch < 1) throw ConfigError("bench: batch must be >= 1");
  if (bucket_width < 1) throw ConfigError("bench: bucket width must be >= 1");
  if (!candidate.params || !baseline.params) throw ContractError("bench: missing model parameters");
  if (candidate.config.vocab_size != baseline.config.vocab_size) {
    throw ContractError("bench: models disagree on vocabulary size");
  }
  std::vector<DecodeResult> warm_c, warm_b;
  timed_passes(candidate, baseline, sources, cfg, batch, &warm_c, &warm_b);
  std::vector<Pass> passes_c, passes_b;
  for (std::size_t r = 0; r < repetitions; ++r) {
    auto [c, b] = timed_passes(candidate, baseline, sources, cfg, batch, nullptr, nullptr);
    passes_c.push_back(std::move(c));
    passes_b.push_back(std::move(b));
  }
  BenchReport report;
  report.candidate = summarize(candidate, warm_c, passes_c, sources, bucket_width, batch);
  report.baseline = summarize(baseline, warm_b, passes_b, sources, bucket_width, batch);
  report.speedup = report.baseline.seconds / report.candidate.seconds;
  report.repetitions = repetitions;
  report.batch = batch;
  report.search = cfg.mode;
  return report;
}

std::string format_bench_report(const BenchReport& report) {
  std::ostringstream os;
  os << "# CPU wall clock, batch " << report.batch << ", " << to_string(report.search) << " search, median of "
     << report.repetitions << " runs\n";
  os << "model        seconds    sent/s     tok/s   mean_steps\n";
  for (const ModelTiming* t : {&report.candidate, &report.baseline}) {
    double steps = 0.0;
    for (auto s : t->steps) steps += static_cast<double>(s);
    steps /= static_cast<double>(std::max<std::size_t>(1, t->steps.size()));
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %9.4f %9.2f %9.2f %10.3f\n", t->name.c_str(), t->seconds,
                  t->sentences_per_sec, t->tokens_per_sec, steps);
    os << line;
  }
  os << "speedup " << fixed(report.speedup, 3) << "x\n\n";
  os << "batch=" << report.batch << '\n' << "search=" << to_string(report.search) << '\n'
     << "repetitions=" << report.repetitions << '\n';
  for (const ModelTiming* t : {&report.candidate, &report.baseline}) {
    std::size_t steps = 0;
    for (auto s : t->steps) steps += s;
    os << t->name << ".seconds=" << fixed(t->seconds, 6) << '\n'
       << t->name << ".sentences_per_sec=" << fixed(t->sentences_per_sec, 3) << '\n'
       << t->name << ".tokens_per_sec=" << fixed(t->tokens_per_sec, 3) << '\n'
       << t->name << ".total_steps=" << steps << '\n';
  }
  os << "speedup=" << fixed(report.speedup, 4) << '\n';
  return os.str();
}

std::string format_bench_csv(const BenchReport& report) {
  std::ostringstream os;
  os << "model,bucket_lo,bucket_hi,sentences,seconds,sentences_per_sec,mean_steps\n";
  for (const ModelTiming* t : {&report.candidate, &report.baseline}) {
    for (const auto& b : t->buckets) {
      os << t->name << ',' << b.lo << ',' << b.hi << ',' << b.count << ',' << fixed(b.seconds, 6) << ','
         << fixed(static_cast<double>(b.count) / b.seconds, 3) << ',' << fixed(b.mean_steps, 3) << '\n';
    }
    if (t->buckets.empty()) {
      double steps = 0.0;
      for (auto s : t->steps) steps += static_cast<double>(s);
      os << t->name << ",all,all," << t->steps.size() << ',' << fixed(t->seconds, 6) << ','
         << fixed(t->sentences_per_sec, 3) << ',' << fixed(steps / static_cast<double>(t->steps.size()), 3) << '\n';
    }
  }
  return os.str();
}

}  // namespace sbsg
