#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>

#include "sbsg/errors.hpp"
#include "sbsg/evalbench.hpp"
#include "bleu_oracle.hpp"
#include "test_util.hpp"

namespace sbsg {
namespace {

std::vector<std::string> words(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

TokenCorpus corpus(const std::vector<std::string>& lines) {
  TokenCorpus c;
  for (const auto& l : lines) c.push_back(words(l));
  return c;
}

const std::vector<std::string> kHyp = {"the cat sat on the mat", "a quick brown fox jumps over the dog",
                                       "i like green eggs and ham very much"};
const std::vector<std::string> kRef = {"the cat sat on a mat", "the quick brown fox jumps over the lazy dog",
                                       "i do not like green eggs and ham"};

TEST(Bleu, IdenticalCorpusScoresHundred) {
  const auto c = corpus(kRef);
  EXPECT_NEAR(bleu(c, c), 100.0, 1e-9);
}

TEST(Bleu, NoFourGramMatchScoresZero) {
  EXPECT_EQ(bleu(corpus({"a b c d e"}), corpus({"a b c x d e"})), 0.0);
  EXPECT_EQ(bleu(corpus({"x y z"}), corpus({"a b c"})), 0.0);
}

TEST(Bleu, ToyCorpusMatchesFrozenSacrebleu) {
  // sacrebleu 2.6.0, tokenize='none', smooth_method='none':
  // counts 18/22 12/19 9/16 6/13, sys_len 22, ref_len 23.
  EXPECT_NEAR(bleu(corpus(kHyp), corpus(kRef)), 57.8311, 0.01);
}

TEST(Bleu, AgreesWithIndependentOracle) {
  EXPECT_NEAR(bleu(corpus(kHyp), corpus(kRef)), test::bleu_oracle(corpus(kHyp), corpus(kRef)), 1e-9);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    TokenCorpus h, r;
    for (int s = 0; s < 6; ++s) {
      std::vector<std::string> a, b;
      const auto la = 4 + rng() % 8, lb = 4 + rng() % 8;
      for (std::size_t i = 0; i < la; ++i) a.push_back(std::string(1, static_cast<char>('a' + rng() % 3)));
      for (std::size_t i = 0; i < lb; ++i) b.push_back(std::string(1, static_cast<char>('a' + rng() % 3)));
      h.push_back(a);
      r.push_back(b);
    }
    EXPECT_NEAR(bleu(h, r), test::bleu_oracle(h, r), 1e-9) << "trial " << trial;
  }
}

TEST(Bleu, BrevityPenaltyOnlyForShortHypotheses) {
  const auto ref = corpus({"a b c d e f g h"});
  const double shorter = bleu(corpus({"a b c d e f"}), ref);
  EXPECT_NEAR(shorter, 100.0 * std::exp(1.0 - 8.0 / 6.0), 1e-9);
  EXPECT_NEAR(bleu(corpus({"a b c d e f g h"}), ref), 100.0, 1e-9);
}

TEST(Bleu, IsCaseSensitive) { EXPECT_EQ(bleu(corpus({"A b c d"}), corpus({"a b c d"})), 0.0); }

TEST(Bleu, Errors) {
  EXPECT_THROW(bleu(corpus({"a"}), corpus({"a", "b"})), InputError);
  EXPECT_THROW(bleu({}, {}), InputError);
}

TEST(ExactMatch, CountsIdenticalSequences) {
  EXPECT_DOUBLE_EQ(exact_match(corpus({"a b", "c", "d e"}), corpus({"a b", "c d", "d e"})), 2.0 / 3.0);
  EXPECT_THROW(exact_match(corpus({"a"}), corpus({"a", "b"})), InputError);
}

TEST(LengthReport, BucketsBySourceLength) {
  const auto src = corpus({"1", "1 2 3 4", "1 2 3 4 5", "1 2 3 4 5 6 7 8 9"});
  const auto hyp = corpus({"a b c d", "a b c d", "x", "a b c d e"});
  const auto ref = corpus({"a b c d", "a b c e", "y", "a b c d e"});
  const auto rows = length_report(src, hyp, ref, 4);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].lo, 1u);
  EXPECT_EQ(rows[0].hi, 4u);
  EXPECT_EQ(rows[0].count, 2u);
  EXPECT_DOUBLE_EQ(rows[0].exact_match, 0.5);
  EXPECT_EQ(rows[1].lo, 5u);
  EXPECT_EQ(rows[1].count, 1u);
  EXPECT_EQ(rows[1].bleu, 0.0);
  EXPECT_EQ(rows[2].lo, 9u);
  EXPECT_EQ(rows[2].hi, 12u);
  EXPECT_NEAR(rows[2].bleu, 100.0, 1e-9);
  EXPECT_DOUBLE_EQ(rows[2].mean_hyp_len, 5.0);
  EXPECT_THROW(length_report(src, hyp, ref, 0), ConfigError);
}

TEST(EvalReport, FormatsKeyValues) {
  const auto src = corpus(kRef);
  const auto report = evaluate_corpus(src, corpus(kHyp), corpus(kRef), 4);
  const std::string text = format_eval_report(report);
  EXPECT_NE(text.find("bleu=57.83"), std::string::npos);
  EXPECT_NE(text.find("sentences=3"), std::string::npos);
}

struct BenchFixture : ::testing::Test {
  ModelConfig bi_cfg = test::tiny_config(12);
  ModelConfig uni_cfg = test::tiny_config(12, DecoderMode::kL2R);
  Params bi = init_params(bi_cfg, 1);
  Params uni = init_params(uni_cfg, 2);
  std::vector<std::vector<int>> sources;

  void SetUp() override {
    Rng rng(9);
    for (int i = 0; i < 6; ++i) {
      std::vector<int> s(3 + rng() % 5);
      for (auto& t : s) t = 6 + static_cast<int>(rng() % 6);
      sources.push_back(s);
    }
  }
};

TEST_F(BenchFixture, SelfComparisonAndStepCounts) {
  DecodeConfig cfg;
  cfg.mode = SearchMode::kGreedy;
  cfg.max_len = 8;
  const auto report = bench_decode({"sbsg", &bi, bi_cfg}, {"copy", &bi, bi_cfg}, sources, cfg, 3);
  EXPECT_GT(report.speedup, 0.0);
  EXPECT_EQ(report.candidate.outputs, report.baseline.outputs);
  EXPECT_EQ(report.candidate.steps, report.baseline.steps);
  const auto greedy = greedy_bidirectional(bi, bi_cfg, sources, 8);
  ASSERT_EQ(report.candidate.steps.size(), sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    EXPECT_EQ(report.candidate.steps[i], greedy[i].steps);
    EXPECT_EQ(report.candidate.outputs[i], greedy[i].tokens);
  }
}

TEST_F(BenchFixture, BiAgainstUniReport) {
  DecodeConfig cfg;
  cfg.mode = SearchMode::kGreedy;
  cfg.max_len = 8;
  const auto report = bench_decode({"sbsg", &bi, bi_cfg}, {"l2r", &uni, uni_cfg}, sources, cfg, 1);
  EXPECT_NEAR(report.speedup, report.baseline.seconds / report.candidate.seconds, 1e-12);
  EXPECT_FALSE(report.candidate.buckets.empty());
  const std::string text = format_bench_report(report);
  EXPECT_NE(text.find("speedup="), std::string::npos);
  const std::string csv = format_bench_csv(report);
  EXPECT_NE(csv.find("sbsg"), std::string::npos);
  EXPECT_NE(csv.find("l2r"), std::string::npos);
}

TEST_F(BenchFixture, RejectsBadArguments) {
  DecodeConfig cfg;
  cfg.mode = SearchMode::kGreedy;
  EXPECT_THROW(bench_decode({"a", &bi, bi_cfg}, {"b", &uni, uni_cfg}, {}, cfg, 1), InputError);
  EXPECT_THROW(bench_decode({"a", &bi, bi_cfg}, {"b", &uni, uni_cfg}, sources, cfg, 0), ConfigError);
  ModelConfig other = test::tiny_config(13, DecoderMode::kL2R);
  Params p = init_params(other, 3);
  EXPECT_THROW(bench_decode({"a", &bi, bi_cfg}, {"b", &p, other}, sources, cfg, 1), ContractError);
}

}  // namespace
}  // namespace sbsg
