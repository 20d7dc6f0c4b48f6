#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "sbsg/data.hpp"
#include "sbsg/errors.hpp"

namespace sbsg {
namespace {

namespace fs = std::filesystem;

constexpr int a = 6, b = 7, c = 8, d = 9;

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("sbsg_data_" + std::to_string(::getpid()) + "_" + name);
}

std::vector<int> random_target(Rng& rng, std::size_t max_len, int vocab) {
  std::vector<int> y(1 + rng() % max_len);
  for (auto& t : y) t = kFirstRealId + static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
  return y;
}

TEST(SplitTarget, EvenLength) {
  const std::vector<int> y{a, b, c, d};
  const auto t = split_target(y, NullSide::kFwd);
  EXPECT_EQ(t.fwd, (std::vector<int>{kL2RId, a, b, kEosId}));
  EXPECT_EQ(t.bwd, (std::vector<int>{kR2LId, d, c, kEosId}));
  EXPECT_EQ(t.null_side, NullSide::kNone);
}

TEST(SplitTarget, OddLengthNullSides) {
  const std::vector<int> y{a, b, c};
  const auto f = split_target(y, NullSide::kFwd);
  EXPECT_EQ(f.fwd, (std::vector<int>{kL2RId, a, kNullId, kEosId}));
  EXPECT_EQ(f.bwd, (std::vector<int>{kR2LId, c, b, kEosId}));
  EXPECT_EQ(f.null_side, NullSide::kFwd);
  const auto k = split_target(y, NullSide::kBwd);
  EXPECT_EQ(k.fwd, (std::vector<int>{kL2RId, a, b, kEosId}));
  EXPECT_EQ(k.bwd, (std::vector<int>{kR2LId, c, kNullId, kEosId}));
  EXPECT_EQ(k.null_side, NullSide::kBwd);
}

TEST(SplitTarget, SingleToken) {
  const std::vector<int> y{a};
  const auto t = split_target(y, NullSide::kBwd);
  EXPECT_EQ(t.fwd, (std::vector<int>{kL2RId, a, kEosId}));
  EXPECT_EQ(t.bwd, (std::vector<int>{kR2LId, kNullId, kEosId}));
  EXPECT_EQ(stitch(t.fwd, t.bwd), y);
}

TEST(SplitTarget, RejectsReservedAndEmpty) {
  Rng rng(1);
  EXPECT_THROW(split_target(std::vector<int>{}, rng), InputError);
  EXPECT_THROW(split_target(std::vector<int>{a, kEosId}, rng), InputError);
  EXPECT_THROW(split_target(std::vector<int>{kNullId}, rng), InputError);
  EXPECT_THROW(split_target(std::vector<int>{a, b, c}, NullSide::kNone), ContractError);
}

TEST(SplitTarget, RngPicksBothSides) {
  Rng rng(5);
  const std::vector<int> y{a, b, c};
  int fwd = 0, bwd = 0;
  for (int i = 0; i < 2000; ++i) (split_target(y, rng).null_side == NullSide::kFwd ? fwd : bwd)++;
  EXPECT_GT(fwd, 900);
  EXPECT_GT(bwd, 900);
}

TEST(Stitch, Examples) {
  EXPECT_EQ(stitch(std::vector<int>{a, b}, std::vector<int>{d, c}), (std::vector<int>{a, b, c, d}));
  EXPECT_EQ(stitch(std::vector<int>{a, kNullId}, std::vector<int>{c, b}), (std::vector<int>{a, b, c}));
  EXPECT_TRUE(stitch(std::vector<int>{}, std::vector<int>{}).empty());
  // Everything after the first <eos> is ignored.
  EXPECT_EQ(stitch(std::vector<int>{kL2RId, a, kEosId, b}, std::vector<int>{kR2LId, c, kEosId, d}),
            (std::vector<int>{a, c}));
}

TEST(SplitTarget, RoundTripProperty) {
  Rng rng(2024);
  std::size_t odd = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto y = random_target(rng, 30, 20);
    odd += y.size() % 2;
    const auto t = split_target(y, rng);
    ASSERT_EQ(t.fwd.size(), t.bwd.size());
    ASSERT_EQ(stitch(t.fwd, t.bwd), y);
  }
  EXPECT_GT(odd, 4000u);
}

TEST(Vocabulary, ReservedIdsAndFrequencyOrder) {
  const auto v = build_vocab({{"b", "b", "a"}}, 100);
  EXPECT_EQ(v.size(), 8u);
  EXPECT_EQ(v.id("<pad>"), 0);
  EXPECT_EQ(v.id("<eos>"), 1);
  EXPECT_EQ(v.id("<unk>"), 2);
  EXPECT_EQ(v.id("<l2r>"), 3);
  EXPECT_EQ(v.id("<r2l>"), 4);
  EXPECT_EQ(v.id("<null>"), 5);
  EXPECT_EQ(v.id("b"), 6);
  EXPECT_EQ(v.id("a"), 7);
  EXPECT_EQ(v.id("zzz"), kUnkId);
}

TEST(Vocabulary, TiesLexicographicAndTruncation) {
  const auto v = build_vocab({{"y", "x", "z", "x"}, {"y"}}, 100);
  EXPECT_EQ(v.token(6), "x");
  EXPECT_EQ(v.token(7), "y");
  EXPECT_EQ(v.token(8), "z");
  const auto t = build_vocab({{"b", "b", "a"}}, 7);
  EXPECT_EQ(t.size(), 7u);
  EXPECT_EQ(t.id("b"), 6);
  EXPECT_EQ(t.id("a"), kUnkId);
}

TEST(Vocabulary, ErrorsAndRoundTrip) {
  EXPECT_THROW(build_vocab({}, 100), InputError);
  EXPECT_THROW(build_vocab({{"a"}}, 6), ConfigError);
  EXPECT_THROW(Vocabulary({"a", "b"}), VocabError);
  auto tokens = Vocabulary::reserved_tokens();
  tokens.push_back("a");
  tokens.push_back("a");
  EXPECT_THROW(Vocabulary{tokens}, VocabError);

  const auto v = build_vocab({{"hello", "world", "hello"}}, 100);
  const auto path = temp_path("vocab.txt");
  v.save(path);
  const auto w = Vocabulary::load(path);
  EXPECT_EQ(v.tokens(), w.tokens());
  fs::remove(path);
  EXPECT_THROW(Vocabulary::load(temp_path("missing")), IoError);
  EXPECT_THROW(v.token(99), VocabError);

  const std::vector<std::string> sentence{"world", "hello", "nope"};
  const auto ids = v.encode(sentence);
  EXPECT_EQ(ids, (std::vector<int>{7, 6, kUnkId}));
  EXPECT_EQ(v.decode(ids), (std::vector<std::string>{"world", "hello", "<unk>"}));
}

TEST(Dataset, ReadWriteAndErrors) {
  const Dataset data{{{"1", "2"}, {"2", "1"}}, {{"x"}, {"y", "z"}}};
  const auto path = temp_path("data.tsv");
  write_dataset(path, data);
  const auto back = read_dataset(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].tgt, (std::vector<std::string>{"y", "z"}));
  {
    std::ofstream out(path);
    out << "a b\tc\nno tab here\n";
  }
  try {
    read_dataset(path);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
  {
    std::ofstream out(path);
    out << "a b\t\n";
  }
  EXPECT_THROW(read_dataset(path), InputError);
  fs::remove(path);
  EXPECT_THROW(read_dataset(path), IoError);
  EXPECT_EQ(tokenize("  a\tb  c "), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(MakeBatch, ShiftPaddingAndMask) {
  std::vector<EncodedPair> pairs;
  pairs.push_back({{a, b, c}, split_target(std::vector<int>{a, b, c, d}, NullSide::kNone)});
  pairs.push_back({{a}, split_target(std::vector<int>{a, b}, NullSide::kNone)});
  const Batch batch = make_batch(pairs);
  ASSERT_TRUE(batch.bidirectional());
  EXPECT_EQ(batch.src.cols, 3u);
  EXPECT_EQ(batch.src.at(1, 1), kPadId);
  EXPECT_EQ(batch.src_lengths, (std::vector<std::size_t>{3, 1}));
  EXPECT_EQ(batch.fwd_in.cols, 3u);  // len(fwd) - 1
  EXPECT_EQ(batch.fwd_in.at(0, 0), kL2RId);
  EXPECT_EQ(batch.fwd_out.at(0, 0), a);
  EXPECT_EQ(batch.fwd_out.at(0, 2), kEosId);
  EXPECT_EQ(batch.bwd_in.at(0, 0), kR2LId);
  EXPECT_EQ(batch.bwd_out.at(0, 0), d);
  EXPECT_EQ(batch.fwd_out.at(1, 1), kEosId);
  EXPECT_EQ(batch.fwd_out.at(1, 2), kPadId);
  EXPECT_EQ(batch.bwd_out.at(1, 2), kPadId);
  EXPECT_EQ(batch.loss_mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0}));
}

TEST(MakeBatch, MaskCountAndUnpadRoundTrip) {
  Rng rng(77);
  std::vector<EncodedPair> pairs;
  std::vector<std::vector<int>> targets;
  for (int i = 0; i < 40; ++i) {
    targets.push_back(random_target(rng, 12, 9));
    pairs.push_back({random_target(rng, 10, 9), split_target(targets.back(), rng)});
  }
  const Batch batch = make_batch(pairs);
  std::size_t non_pad = 0, masked = 0;
  for (std::size_t i = 0; i < batch.fwd_out.ids.size(); ++i) {
    non_pad += batch.fwd_out.ids[i] != kPadId;
    masked += batch.loss_mask[i];
    if (batch.loss_mask[i] == 0) {
      EXPECT_EQ(batch.fwd_out.ids[i], kPadId);
      EXPECT_EQ(batch.bwd_out.ids[i], kPadId);
    }
  }
  EXPECT_EQ(masked, non_pad);
  for (std::size_t r = 0; r < batch.size(); ++r) {
    std::vector<int> f, k;
    for (std::size_t j = 0; j < batch.fwd_out.cols; ++j) {
      f.push_back(batch.fwd_out.at(r, j));
      k.push_back(batch.bwd_out.at(r, j));
    }
    EXPECT_EQ(stitch(f, k), targets[r]);
  }
}

TEST(MakeBatch, UnidirectionalDirections) {
  const std::vector<std::vector<int>> src{{a, b}};
  const std::vector<std::vector<int>> tgt{{a, b, c}};
  const Batch l2r = make_unidirectional_batch(src, tgt, DecoderMode::kL2R);
  EXPECT_FALSE(l2r.bidirectional());
  EXPECT_EQ(l2r.fwd_in.ids, (std::vector<int>{kL2RId, a, b, c}));
  EXPECT_EQ(l2r.fwd_out.ids, (std::vector<int>{a, b, c, kEosId}));
  const Batch r2l = make_unidirectional_batch(src, tgt, DecoderMode::kR2L);
  EXPECT_EQ(r2l.fwd_in.ids, (std::vector<int>{kR2LId, c, b, a}));
  EXPECT_EQ(r2l.fwd_out.ids, (std::vector<int>{c, b, a, kEosId}));
  EXPECT_THROW(make_batch(std::vector<EncodedPair>{}), ContractError);
}

TEST(Synth, TaskDefinitions) {
  for (auto task : {SynthTask::kCopy, SynthTask::kReverse, SynthTask::kSort}) {
    const auto data = synth_generate(task, 200, 2, 16, 16, 9);
    ASSERT_EQ(data.size(), 200u);
    for (const auto& ex : data) {
      ASSERT_GE(ex.src.size(), 2u);
      ASSERT_LE(ex.src.size(), 16u);
      std::vector<std::string> expect = ex.src;
      if (task == SynthTask::kReverse) std::reverse(expect.begin(), expect.end());
      if (task == SynthTask::kSort)
        std::sort(expect.begin(), expect.end(), [](const auto& x, const auto& y) { return std::stoi(x) < std::stoi(y); });
      ASSERT_EQ(ex.tgt, expect);
      for (const auto& t : ex.src) {
        ASSERT_GE(std::stoi(t), 0);
        ASSERT_LT(std::stoi(t), 16);
      }
    }
  }
  EXPECT_EQ(parse_synth_task("sort"), SynthTask::kSort);
  EXPECT_THROW(parse_synth_task("shuffle"), ConfigError);
}

TEST(Synth, DeterministicPerSeedAndRangeChecked) {
  const auto x = synth_generate(SynthTask::kCopy, 50, 2, 16, 16, 3);
  const auto y = synth_generate(SynthTask::kCopy, 50, 2, 16, 16, 3);
  const auto z = synth_generate(SynthTask::kCopy, 50, 2, 16, 16, 4);
  auto same = [](const Dataset& p, const Dataset& q) {
    return std::equal(p.begin(), p.end(), q.begin(), q.end(),
                      [](const Example& e, const Example& f) { return e.src == f.src && e.tgt == f.tgt; });
  };
  EXPECT_TRUE(same(x, y));
  EXPECT_FALSE(same(x, z));
  EXPECT_THROW(synth_generate(SynthTask::kCopy, 5, 0, 4, 16, 1), ConfigError);
  EXPECT_THROW(synth_generate(SynthTask::kCopy, 5, 5, 4, 16, 1), ConfigError);
  EXPECT_THROW(synth_generate(SynthTask::kCopy, 5, 2, 63, 16, 1), ConfigError);
  EXPECT_NO_THROW(synth_generate(SynthTask::kCopy, 5, 2, 62, 16, 1));
}

}  // namespace
}  // namespace sbsg
