#include "sbsg/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sbsg/data.hpp"
#include "sbsg/errors.hpp"
#include "sbsg/incremental.hpp"

namespace sbsg {

std::string to_string(SearchMode mode) { return mode == SearchMode::kBeam ? "beam" : "greedy"; }

SearchMode parse_search_mode(const std::string& text) {
  if (text == "beam") return SearchMode::kBeam;
  if (text == "greedy") return SearchMode::kGreedy;
  throw ConfigError("unknown search mode '" + text + "' (expected beam or greedy)");
}

void DecodeConfig::validate(DecoderMode model_mode) const {
  if (beam_size < 1) throw ConfigError("beam size must be >= 1");
  if (mode == SearchMode::kBeam && model_mode == DecoderMode::kBidirectional && beam_size % 2 != 0) {
    throw ConfigError("bidirectional beam search needs an even beam size (got " + std::to_string(beam_size) + ")");
  }
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("length penalty alpha must be finite and >= 0");
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
}

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

std::vector<bool> banned_tokens(std::size_t vocab_size, DecoderMode mode) {
  std::vector<bool> banned(vocab_size, false);
  for (int id : {kPadId, kL2RId, kR2LId}) banned[static_cast<std::size_t>(id)] = true;
  if (mode != DecoderMode::kBidirectional) banned[kNullId] = true;
  return banned;
}

namespace {

void check_limits(const ModelConfig& config, std::size_t max_len, DecoderMode expected) {
  if (expected == DecoderMode::kBidirectional ? config.mode != DecoderMode::kBidirectional
                                              : config.mode == DecoderMode::kBidirectional) {
    throw ContractError("decoder called on a model of mode " + to_string(config.mode));
  }
  if (max_len < 1 || max_len > config.max_positions) {
    throw ConfigError("max_len " + std::to_string(max_len) + " outside [1, max_positions=" +
                      std::to_string(config.max_positions) + "]");
  }
}

void log_softmax_row(const double* x, std::size_t n, std::vector<double>& out) {
  out.resize(n);
  const double mx = *std::max_element(x, x + n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += std::exp(x[i] - mx);
  const double lse = mx + std::log(total);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - lse;
}

int argmax_allowed(const std::vector<double>& logp, const std::vector<bool>& banned) {
  int best = -1;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    if (banned[i]) continue;
    if (best < 0 || logp[i] > logp[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

struct TokenScore {
  double logp;
  int id;
};

// Best `width` allowed tokens, highest log-prob first, lower id on ties.
std::vector<TokenScore> top_tokens(const std::vector<double>& logp, const std::vector<bool>& banned,
                                   std::size_t width) {
  std::vector<TokenScore> all;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    if (!banned[i]) all.push_back({logp[i], static_cast<int>(i)});
  }
  width = std::min(width, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(width), all.end(),
                    [](const TokenScore& a, const TokenScore& b) { return a.logp > b.logp || (a.logp == b.logp && a.id < b.id); });
  all.resize(width);
  return all;
}

std::size_t generated_length(const std::vector<int>& tokens) { return tokens.size(); }

void finish_bidirectional(DecodeResult& r, double alpha) {
  r.tokens = stitch(r.fwd, r.bwd);
  r.score = r.logp / length_penalty(generated_length(r.fwd) + generated_length(r.bwd), alpha);
}

void finish_unidirectional(DecodeResult& r, DecoderMode mode, double alpha) {
  r.tokens.clear();
  for (int id : r.fwd) {
    if (id != kEosId) r.tokens.push_back(id);
  }
  if (mode == DecoderMode::kR2L) std::reverse(r.tokens.begin(), r.tokens.end());
  r.score = r.logp / length_penalty(generated_length(r.fwd), alpha);
}

int start_token(DecoderMode mode) { return mode == DecoderMode::kR2L ? kR2LId : kL2RId; }

// Lexicographic order on (fwd, bwd) used to break exact score ties among
// finished hypotheses.
bool better_final(const DecodeResult& a, const DecodeResult& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.fwd != b.fwd) return a.fwd < b.fwd;
  return a.bwd < b.bwd;
}

}  // namespace

std::vector<DecodeResult> greedy_bidirectional(const Params& params, const ModelConfig& config,
                                               const std::vector<std::vector<int>>& sources, std::size_t max_len) {
  check_limits(config, max_len, DecoderMode::kBidirectional);
  const std::size_t vocab = config.vocab_size;
  const auto banned = banned_tokens(vocab, config.mode);
  std::vector<DecodeResult> results(sources.size());
  if (sources.empty()) return results;

  DecoderState state = start_decoding(params, config, sources, 2);
  std::vector<std::size_t> owner(sources.size());
  std::iota(owner.begin(), owner.end(), 0);
  std::vector<int> in_f(sources.size(), kL2RId), in_b(sources.size(), kR2LId);
  std::vector<std::array<bool, 2>> done(sources.size(), {false, false});
  std::vector<double> logp;

  for (std::size_t step = 1; step <= max_len && state.batch() > 0; ++step) {
    const StepLogits logits = advance(state, in_f, in_b, params, config);
    for (std::size_t j = 0; j < state.batch(); ++j) {
      DecodeResult& r = results[owner[j]];
      ++r.steps;
      for (std::size_t s = 0; s < 2; ++s) {
        int& next = s == 0 ? in_f[j] : in_b[j];
        if (done[j][s]) {
          next = kPadId;
          continue;
        }
        const Tensor& l = s == 0 ? logits.fwd : logits.bwd;
        log_softmax_row(l.data().data() + j * vocab, vocab, logp);
        const int tok = argmax_allowed(logp, banned);
        r.logp += logp[static_cast<std::size_t>(tok)];
        (s == 0 ? r.fwd : r.bwd).push_back(tok);
        next = tok;
        if (tok == kEosId) {
          done[j][s] = true;
          next = kPadId;
          limit_visibility(state, j, s, state.position);
        }
      }
    }
    // Drop sentences whose streams have both finished.
    std::size_t keep = 0;
    for (std::size_t j = 0; j < state.batch(); ++j) {
      if (done[j][0] && done[j][1]) continue;
      if (keep != j) {
        state.items[keep] = std::move(state.items[j]);
        owner[keep] = owner[j];
        in_f[keep] = in_f[j];
        in_b[keep] = in_b[j];
        done[keep] = done[j];
      }
      ++keep;
    }
    state.items.resize(keep);
    owner.resize(keep);
    in_f.resize(keep);
    in_b.resize(keep);
    done.resize(keep);
  }
  for (auto& r : results) finish_bidirectional(r, 0.0);
  return results;
}

std::vector<DecodeResult> greedy_unidirectional(const Params& params, const ModelConfig& config,
                                                const std::vector<std::vector<int>>& sources, std::size_t max_len) {
  check_limits(config, max_len, DecoderMode::kL2R);
  const std::size_t vocab = config.vocab_size;
  const auto banned = banned_tokens(vocab, config.mode);
  std::vector<DecodeResult> results(sources.size());
  if (sources.empty()) return results;

  DecoderState state = start_decoding(params, config, sources, 1);
  std::vector<std::size_t> owner(sources.size());
  std::iota(owner.begin(), owner.end(), 0);
  std::vector<int> in(sources.size(), start_token(config.mode));
  std::vector<double> logp;

  for (std::size_t step = 1; step <= max_len && state.batch() > 0; ++step) {
    const StepLogits logits = advance(state, in, {}, params, config);
    std::size_t keep = 0;
    for (std::size_t j = 0; j < state.batch(); ++j) {
      DecodeResult& r = results[owner[j]];
      ++r.steps;
      log_softmax_row(logits.fwd.data().data() + j * vocab, vocab, logp);
      const int tok = argmax_allowed(logp, banned);
      r.logp += logp[static_cast<std::size_t>(tok)];
      r.fwd.push_back(tok);
      if (tok == kEosId) continue;
      if (keep != j) {
        state.items[keep] = std::move(state.items[j]);
        owner[keep] = owner[j];
      }
      in[keep] = tok;
      ++keep;
    }
    state.items.resize(keep);
    owner.resize(keep);
    in.resize(keep);
  }
  for (auto& r : results) finish_unidirectional(r, config.mode, 0.0);
  return results;
}

namespace {

struct PairHypothesis {
  DecoderState state;
  std::vector<int> fwd, bwd;
  double logp_f = 0.0, logp_b = 0.0;
  bool done_f = false, done_b = false;
};

struct PairCandidate {
  double score;
  int tok_f, tok_b;
  std::size_t pair;
  double logp_f, logp_b;
};

}  // namespace

DecodeResult beam_search_bidirectional(const Params& params, const ModelConfig& config, std::span<const int> src,
                                       const DecodeConfig& cfg) {
  cfg.validate(config.mode);
  check_limits(config, cfg.max_len, DecoderMode::kBidirectional);
  const std::size_t vocab = config.vocab_size;
  const auto banned = banned_tokens(vocab, config.mode);
  const std::size_t pairs_kept = cfg.beam_size / 2;
  const std::size_t width = cfg.candidate_width > 0
                                ? cfg.candidate_width
                                : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.beam_size))));

  std::vector<PairHypothesis> live(1);
  live[0].state = start_decoding(params, config, {std::vector<int>(src.begin(), src.end())}, 2);
  std::vector<DecodeResult> finished;
  std::vector<double> logp;
  std::size_t steps = 0;

  for (std::size_t step = 1; step <= cfg.max_len && !live.empty(); ++step) {
    ++steps;
    std::vector<PairCandidate> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      PairHypothesis& h = live[i];
      const int in_f = h.fwd.empty() ? kL2RId : (h.done_f ? kPadId : h.fwd.back());
      const int in_b = h.bwd.empty() ? kR2LId : (h.done_b ? kPadId : h.bwd.back());
      const StepLogits logits = advance(h.state, std::span<const int>(&in_f, 1), std::span<const int>(&in_b, 1),
                                        params, config);
      std::vector<TokenScore> cand_f{{0.0, kPadId}}, cand_b{{0.0, kPadId}};
      if (!h.done_f) {
        log_softmax_row(logits.fwd.data().data(), vocab, logp);
        cand_f = top_tokens(logp, banned, width);
      }
      if (!h.done_b) {
        log_softmax_row(logits.bwd.data().data(), vocab, logp);
        cand_b = top_tokens(logp, banned, width);
      }
      for (const auto& f : cand_f) {
        for (const auto& b : cand_b) {
          const double lf = h.logp_f + f.logp;
          const double lb = h.logp_b + b.logp;
          candidates.push_back({lf + lb, f.id, b.id, i, lf, lb});
        }
      }
    }
    const std::size_t kept = std::min(pairs_kept, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(kept), candidates.end(),
                      [](const PairCandidate& a, const PairCandidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.tok_f != b.tok_f) return a.tok_f < b.tok_f;
                        if (a.tok_b != b.tok_b) return a.tok_b < b.tok_b;
                        return a.pair < b.pair;
                      });
    std::vector<PairHypothesis> next;
    for (std::size_t c = 0; c < kept; ++c) {
      const PairCandidate& cand = candidates[c];
      const PairHypothesis& parent = live[cand.pair];
      PairHypothesis h;
      h.fwd = parent.fwd;
      h.bwd = parent.bwd;
      h.done_f = parent.done_f;
      h.done_b = parent.done_b;
      h.logp_f = cand.logp_f;
      h.logp_b = cand.logp_b;
      if (!h.done_f) {
        h.fwd.push_back(cand.tok_f);
        h.done_f = cand.tok_f == kEosId;
      }
      if (!h.done_b) {
        h.bwd.push_back(cand.tok_b);
        h.done_b = cand.tok_b == kEosId;
      }
      if ((h.done_f && h.done_b) || step == cfg.max_len) {
        DecodeResult r;
        r.fwd = std::move(h.fwd);
        r.bwd = std::move(h.bwd);
        r.logp = h.logp_f + h.logp_b;
        finished.push_back(std::move(r));
        continue;
      }
      h.state = parent.state;
      if (h.done_f && !parent.done_f) limit_visibility(h.state, 0, 0, h.state.position);
      if (h.done_b && !parent.done_b) limit_visibility(h.state, 0, 1, h.state.position);
      next.push_back(std::move(h));
    }
    live = std::move(next);
  }

  for (auto& r : finished) finish_bidirectional(r, cfg.alpha);
  auto best = std::min_element(finished.begin(), finished.end(),
                               [](const DecodeResult& a, const DecodeResult& b) { return better_final(a, b); });
  DecodeResult out = std::move(*best);
  out.steps = steps;
  return out;
}

namespace {

struct Beam {
  DecoderState state;
  std::vector<int> tokens;
  double logp = 0.0;
};

struct BeamCandidate {
  double score;
  int tok;
  std::size_t beam;
};

}  // namespace

DecodeResult beam_search_unidirectional(const Params& params, const ModelConfig& config, std::span<const int> src,
                                        const DecodeConfig& cfg) {
  cfg.validate(config.mode);
  check_limits(config, cfg.max_len, DecoderMode::kL2R);
  const std::size_t vocab = config.vocab_size;
  const auto banned = banned_tokens(vocab, config.mode);
  const std::size_t k = cfg.beam_size;

  std::vector<Beam> live(1);
  live[0].state = start_decoding(params, config, {std::vector<int>(src.begin(), src.end())}, 1);
  std::vector<DecodeResult> finished;
  std::vector<double> logp;
  std::size_t steps = 0;

  for (std::size_t step = 1; step <= cfg.max_len && !live.empty(); ++step) {
    ++steps;
    std::vector<BeamCandidate> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      Beam& b = live[i];
      const int in = b.tokens.empty() ? start_token(config.mode) : b.tokens.back();
      const StepLogits logits = advance(b.state, std::span<const int>(&in, 1), {}, params, config);
      log_softmax_row(logits.fwd.data().data(), vocab, logp);
      for (const auto& t : top_tokens(logp, banned, k)) candidates.push_back({b.logp + t.logp, t.id, i});
    }
    const std::size_t kept = std::min(k, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(kept), candidates.end(),
                      [](const BeamCandidate& a, const BeamCandidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.tok != b.tok) return a.tok < b.tok;
                        return a.beam < b.beam;
                      });
    std::vector<Beam> next;
    for (std::size_t c = 0; c < kept; ++c) {
      const BeamCandidate& cand = candidates[c];
      const Beam& parent = live[cand.beam];
      std::vector<int> tokens = parent.tokens;
      tokens.push_back(cand.tok);
      if (cand.tok == kEosId || step == cfg.max_len) {
        DecodeResult r;
        r.fwd = std::move(tokens);
        r.logp = cand.score;
        finished.push_back(std::move(r));
        continue;
      }
      next.push_back({parent.state, std::move(tokens), cand.score});
    }
    live = std::move(next);
  }

  for (auto& r : finished) finish_unidirectional(r, config.mode, cfg.alpha);
  auto best = std::min_element(finished.begin(), finished.end(),
                               [](const DecodeResult& a, const DecodeResult& b) { return better_final(a, b); });
  DecodeResult out = std::move(*best);
  out.steps = steps;
  return out;
}

std::vector<DecodeResult> decode_batch(const Params& params, const ModelConfig& config,
                                       const std::vector<std::vector<int>>& sources, const DecodeConfig& cfg) {
  cfg.validate(config.mode);
  const bool bi = config.mode == DecoderMode::kBidirectional;
  if (cfg.mode == SearchMode::kGreedy) {
    return bi ? greedy_bidirectional(params, config, sources, cfg.max_len)
              : greedy_unidirectional(params, config, sources, cfg.max_len);
  }
  std::vector<DecodeResult> out;
  out.reserve(sources.size());
  for (const auto& src : sources) {
    out.push_back(bi ? beam_search_bidirectional(params, config, src, cfg)
                     : beam_search_unidirectional(params, config, src, cfg));
  }
  return out;
}

}  // namespace sbsg
