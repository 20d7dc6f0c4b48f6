#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "sbsg/data.hpp"
#include "sbsg/decoding.hpp"
#include "sbsg/errors.hpp"
#include "sbsg/incremental.hpp"
#include "search_oracle.hpp"
#include "test_util.hpp"

namespace sbsg {
namespace {

using test::tiny_config;

std::vector<std::vector<int>> random_sources(std::size_t n, std::size_t vocab, Rng& rng, std::size_t max_len = 6) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> s(1 + rng() % max_len);
    for (auto& t : s) t = kFirstRealId + static_cast<int>(rng() % (vocab - kFirstRealId));
    out.push_back(std::move(s));
  }
  return out;
}

// Log-probability of the generated halves under a full (non-cached) forward
// pass, with finished streams hidden from the other stream after their <eos>.
double recompute_bidirectional(const Params& params, const ModelConfig& config, const std::vector<int>& src,
                               const std::vector<int>& fwd, const std::vector<int>& bwd) {
  const std::size_t q = std::max(fwd.size(), bwd.size());
  IdMatrix in_f{1, q, std::vector<int>(q, kPadId)}, in_b{1, q, std::vector<int>(q, kPadId)};
  in_f.ids[0] = kL2RId;
  in_b.ids[0] = kR2LId;
  for (std::size_t j = 0; j + 1 < q; ++j) {
    if (j < fwd.size() && fwd[j] != kEosId) in_f.ids[j + 1] = fwd[j];
    if (j < bwd.size() && bwd[j] != kEosId) in_b.ids[j + 1] = bwd[j];
  }
  auto visible = [](const std::vector<int>& h) {
    return !h.empty() && h.back() == kEosId ? h.size() : kAllVisible;
  };
  CrossVisibility vis{{visible(fwd)}, {visible(bwd)}};
  const std::vector<std::size_t> lens{src.size()};
  const Tensor enc = encode(IdMatrix{1, src.size(), src}, lens, params, config);
  const StreamPair logits = decode_bidirectional(in_f, in_b, enc, lens, params, config, {}, &vis);
  const std::size_t v = config.vocab_size;
  double total = 0.0;
  for (std::size_t j = 0; j < fwd.size(); ++j)
    total += test::detail::log_probs(logits.fwd.data().data() + j * v, v)[static_cast<std::size_t>(fwd[j])];
  for (std::size_t j = 0; j < bwd.size(); ++j)
    total += test::detail::log_probs(logits.bwd.data().data() + j * v, v)[static_cast<std::size_t>(bwd[j])];
  return total;
}

double recompute_unidirectional(const Params& params, const ModelConfig& config, const std::vector<int>& src,
                                const std::vector<int>& toks) {
  IdMatrix in{1, toks.size(), std::vector<int>(toks.size())};
  in.ids[0] = config.mode == DecoderMode::kR2L ? kR2LId : kL2RId;
  for (std::size_t j = 0; j + 1 < toks.size(); ++j) in.ids[j + 1] = toks[j];
  const std::vector<std::size_t> lens{src.size()};
  const Tensor enc = encode(IdMatrix{1, src.size(), src}, lens, params, config);
  const Tensor logits = decode_unidirectional(in, enc, lens, params, config);
  const std::size_t v = config.vocab_size;
  double total = 0.0;
  for (std::size_t j = 0; j < toks.size(); ++j)
    total += test::detail::log_probs(logits.data().data() + j * v, v)[static_cast<std::size_t>(toks[j])];
  return total;
}

TEST(LengthPenalty, Examples) {
  for (std::size_t n : {1u, 3u, 17u}) EXPECT_EQ(length_penalty(n, 0.0), 1.0);
  for (double a : {0.0, 0.6, 2.0}) EXPECT_DOUBLE_EQ(length_penalty(1, a), 1.0);
  EXPECT_NEAR(length_penalty(6, 0.6), 1.4387, 1e-4);
  EXPECT_DOUBLE_EQ(length_penalty(6, 0.6), std::pow(11.0 / 6.0, 0.6));
}

TEST(DecodeConfig, Validation) {
  DecodeConfig cfg;
  cfg.beam_size = 3;
  EXPECT_THROW(cfg.validate(DecoderMode::kBidirectional), ConfigError);
  EXPECT_NO_THROW(cfg.validate(DecoderMode::kL2R));
  cfg.mode = SearchMode::kGreedy;
  EXPECT_NO_THROW(cfg.validate(DecoderMode::kBidirectional));
  cfg = DecodeConfig{};
  cfg.max_len = 1;
  EXPECT_THROW(cfg.validate(DecoderMode::kL2R), ConfigError);
  cfg = DecodeConfig{};
  cfg.alpha = -1.0;
  EXPECT_THROW(cfg.validate(DecoderMode::kL2R), ConfigError);
  EXPECT_EQ(parse_search_mode("greedy"), SearchMode::kGreedy);
  EXPECT_THROW(parse_search_mode("sample"), ConfigError);
}

TEST(Decoding, ModeAndLengthContracts) {
  const ModelConfig bi = tiny_config();
  const ModelConfig uni = tiny_config(11, DecoderMode::kL2R);
  const Params pb = init_params(bi, 1), pu = init_params(uni, 1);
  const std::vector<int> src{6, 7};
  DecodeConfig cfg;
  cfg.max_len = 8;
  EXPECT_THROW(beam_search_bidirectional(pu, uni, src, cfg), ContractError);
  EXPECT_THROW(beam_search_unidirectional(pb, bi, src, cfg), ContractError);
  EXPECT_THROW(greedy_bidirectional(pb, bi, {src}, bi.max_positions + 1), ConfigError);
  cfg.beam_size = 5;
  EXPECT_THROW(beam_search_bidirectional(pb, bi, src, cfg), ConfigError);
  const auto banned = banned_tokens(11, DecoderMode::kBidirectional);
  EXPECT_TRUE(banned[kPadId] && banned[kL2RId] && banned[kR2LId]);
  EXPECT_FALSE(banned[kNullId] || banned[kEosId] || banned[6]);
  EXPECT_TRUE(banned_tokens(11, DecoderMode::kL2R)[kNullId]);
}

TEST(Greedy, DeterministicAndBatchIndependent) {
  Rng rng(31);
  const ModelConfig config = tiny_config();
  const Params params = init_params(config, 3);
  const auto sources = random_sources(7, config.vocab_size, rng);
  const auto a = greedy_bidirectional(params, config, sources, 10);
  const auto b = greedy_bidirectional(params, config, sources, 10);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    EXPECT_EQ(a[i].fwd, b[i].fwd);
    EXPECT_EQ(a[i].bwd, b[i].bwd);
    const auto single = greedy_bidirectional(params, config, {sources[i]}, 10);
    EXPECT_EQ(single[0].fwd, a[i].fwd);
    EXPECT_EQ(single[0].bwd, a[i].bwd);
    EXPECT_NEAR(single[0].logp, a[i].logp, 1e-10);
  }
}

TEST(Greedy, LogProbMatchesFullRecomputeAndStepCounts) {
  Rng rng(32);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ModelConfig config = tiny_config();
    const Params params = init_params(config, seed);
    const auto sources = random_sources(6, config.vocab_size, rng);
    const auto out = greedy_bidirectional(params, config, sources, 9);
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const auto& r = out[i];
      EXPECT_NEAR(r.logp, recompute_bidirectional(params, config, sources[i], r.fwd, r.bwd), 1e-9);
      EXPECT_EQ(r.steps, std::max(r.fwd.size(), r.bwd.size()));
      EXPECT_LE(r.steps, 9u);
      EXPECT_EQ(r.score, r.logp);
    }
  }
}

TEST(Greedy, StitchedOutputHasNoReservedTokens) {
  Rng rng(33);
  const ModelConfig config = tiny_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Params params = init_params(config, seed);
    for (const auto& r : greedy_bidirectional(params, config, random_sources(10, config.vocab_size, rng), 12)) {
      for (int t : r.tokens) EXPECT_FALSE(is_reserved(t) && t != kUnkId) << t;
    }
  }
}

TEST(Greedy, UnidirectionalCountsAndR2LReversal) {
  Rng rng(34);
  for (DecoderMode mode : {DecoderMode::kL2R, DecoderMode::kR2L}) {
    const ModelConfig config = tiny_config(11, mode);
    const Params params = init_params(config, 4);
    const auto sources = random_sources(5, config.vocab_size, rng);
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const auto r = greedy_unidirectional(params, config, {sources[i]}, 8)[0];
      EXPECT_EQ(r.steps, r.fwd.size());
      EXPECT_NEAR(r.logp, recompute_unidirectional(params, config, sources[i], r.fwd), 1e-9);
      std::vector<int> expect;
      for (int t : r.fwd)
        if (t != kEosId) expect.push_back(t);
      if (mode == DecoderMode::kR2L) std::reverse(expect.begin(), expect.end());
      EXPECT_EQ(r.tokens, expect);
      EXPECT_EQ(std::count(r.fwd.begin(), r.fwd.end(), kNullId), 0);
    }
  }
}

TEST(BeamSearch, PairBeamOfOneWithUnitWidthIsGreedy) {
  Rng rng(35);
  const ModelConfig config = tiny_config();
  for (std::uint64_t seed : {5u, 6u}) {
    const Params params = init_params(config, seed);
    DecodeConfig cfg;
    cfg.beam_size = 2;
    cfg.candidate_width = 1;
    cfg.alpha = 0.0;
    cfg.max_len = 10;
    for (const auto& src : random_sources(5, config.vocab_size, rng)) {
      const auto g = greedy_bidirectional(params, config, {src}, 10)[0];
      const auto b = beam_search_bidirectional(params, config, src, cfg);
      EXPECT_EQ(b.fwd, g.fwd);
      EXPECT_EQ(b.bwd, g.bwd);
      EXPECT_EQ(b.tokens, g.tokens);
      EXPECT_NEAR(b.logp, g.logp, 1e-12);
    }
  }
}

TEST(BeamSearch, UnidirectionalBeamOfOneIsGreedy) {
  Rng rng(36);
  const ModelConfig config = tiny_config(11, DecoderMode::kL2R);
  const Params params = init_params(config, 7);
  DecodeConfig cfg;
  cfg.beam_size = 1;
  cfg.max_len = 10;
  for (const auto& src : random_sources(5, config.vocab_size, rng)) {
    const auto g = greedy_unidirectional(params, config, {src}, 10)[0];
    const auto b = beam_search_unidirectional(params, config, src, cfg);
    EXPECT_EQ(b.fwd, g.fwd);
    EXPECT_NEAR(b.logp, g.logp, 1e-12);
  }
}

TEST(BeamSearch, ScoresRecomputablePostHoc) {
  Rng rng(37);
  const ModelConfig bi = tiny_config();
  const ModelConfig uni = tiny_config(11, DecoderMode::kL2R);
  const Params pb = init_params(bi, 8), pu = init_params(uni, 8);
  DecodeConfig cfg;
  cfg.beam_size = 6;
  cfg.max_len = 8;
  for (const auto& src : random_sources(5, bi.vocab_size, rng)) {
    const auto b = beam_search_bidirectional(pb, bi, src, cfg);
    EXPECT_NEAR(b.logp, recompute_bidirectional(pb, bi, src, b.fwd, b.bwd), 1e-9);
    EXPECT_NEAR(b.score, b.logp / length_penalty(b.fwd.size() + b.bwd.size(), cfg.alpha), 1e-12);
    const auto u = beam_search_unidirectional(pu, uni, src, cfg);
    EXPECT_NEAR(u.logp, recompute_unidirectional(pu, uni, src, u.fwd), 1e-9);
    EXPECT_NEAR(u.score, u.logp / length_penalty(u.fwd.size(), cfg.alpha), 1e-12);
  }
}

TEST(BeamSearch, NeverBeatsTheExhaustiveOptimum) {
  ModelConfig config = tiny_config(8);
  const Params params = init_params(config, 2024);
  const std::vector<int> src{6, 7, 6};
  const auto oracle = test::exhaustive_bidirectional(params, config, src, 3, 0.6);
  for (std::size_t k : {2u, 8u, 64u}) {
    DecodeConfig cfg;
    cfg.beam_size = k;
    cfg.max_len = 3;
    const auto r = beam_search_bidirectional(params, config, src, cfg);
    EXPECT_LE(r.score, oracle.score + 1e-12);
  }
}

TEST(BeamSearch, ExhaustiveBeamMatchesOracle) {
  const ModelConfig bi = tiny_config(8);
  const ModelConfig uni = tiny_config(8, DecoderMode::kL2R);
  Rng rng(38);
  for (std::uint64_t seed : {11u, 12u}) {
    const Params pb = init_params(bi, seed), pu = init_params(uni, seed);
    for (const auto& src : random_sources(2, 8, rng, 4)) {
      const auto ob = test::exhaustive_bidirectional(pb, bi, src, 3, 0.6);
      DecodeConfig cfg;
      cfg.beam_size = 2 * 25 * 25 * 25;
      cfg.max_len = 3;
      const auto rb = beam_search_bidirectional(pb, bi, src, cfg);
      EXPECT_EQ(rb.fwd, ob.fwd);
      EXPECT_EQ(rb.bwd, ob.bwd);
      EXPECT_NEAR(rb.score, ob.score, 1e-12);

      const auto ou = test::exhaustive_unidirectional(pu, uni, src, 4, 0.6);
      cfg.beam_size = 5 * 5 * 5;
      cfg.max_len = 4;
      const auto ru = beam_search_unidirectional(pu, uni, src, cfg);
      EXPECT_EQ(ru.fwd, ou.fwd);
      EXPECT_NEAR(ru.score, ou.score, 1e-12);
    }
  }
}

TEST(DecodeBatch, DispatchesOnModeAndSearch) {
  Rng rng(39);
  const ModelConfig config = tiny_config();
  const Params params = init_params(config, 9);
  const auto sources = random_sources(3, config.vocab_size, rng);
  DecodeConfig cfg;
  cfg.max_len = 8;
  const auto beams = decode_batch(params, config, sources, cfg);
  cfg.mode = SearchMode::kGreedy;
  const auto greedy = decode_batch(params, config, sources, cfg);
  ASSERT_EQ(beams.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto b = beam_search_bidirectional(params, config, sources[i], DecodeConfig{4, 0.6, 8});
    EXPECT_EQ(beams[i].tokens, b.tokens);
    EXPECT_EQ(greedy[i].tokens, greedy_bidirectional(params, config, {sources[i]}, 8)[0].tokens);
  }
}

}  // namespace
}  // namespace sbsg
