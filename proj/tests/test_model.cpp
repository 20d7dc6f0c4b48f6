#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sbsg/checkpoint.hpp"
#include "sbsg/data.hpp"
#include "sbsg/errors.hpp"
#include "sbsg/incremental.hpp"
#include "sbsg/model.hpp"
#include "test_util.hpp"

namespace sbsg {
namespace {

using test::max_abs_diff;
using test::random_ids;
using test::tiny_config;

IdMatrix with_start(IdMatrix m, int start) {
  for (std::size_t r = 0; r < m.rows; ++r) m.at(r, 0) = start;
  return m;
}

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(6);
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_decoder_mode("r2l"), DecoderMode::kR2L);
  EXPECT_THROW(parse_decoder_mode("sideways"), ConfigError);
}

TEST(InitParams, DeterministicWithConfigShapes) {
  const ModelConfig c = tiny_config();
  Params a = init_params(c, 3), b = init_params(c, 3), other = init_params(c, 4);
  auto na = a.named(), nb = b.named(), no = other.named();
  ASSERT_EQ(na.size(), nb.size());
  bool differs = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].first, nb[i].first);
    EXPECT_EQ(max_abs_diff(na[i].second, nb[i].second), 0.0) << na[i].first;
    differs |= max_abs_diff(na[i].second, no[i].second) > 0.0;
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a.embedding.shape(), Shape({c.vocab_size, c.d_model}));
  EXPECT_EQ(a.output.shape(), Shape({c.d_model, c.vocab_size}));
  EXPECT_EQ(a.decoder[0].ffn.w1.shape(), Shape({c.d_model, c.d_ff}));
  EXPECT_EQ(a.decoder[1].ln_inter.gain.shape(), Shape({c.d_model}));
  // embedding + output + per-layer tensors
  const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
  const std::size_t enc_layer = 4 * d * d + 2 * (2 * d) + (d * f + f + f * d + d);
  const std::size_t dec_layer = 8 * d * d + 3 * (2 * d) + (d * f + f + f * d + d);
  EXPECT_EQ(a.parameter_count(), 2 * v * d + c.layers * (enc_layer + dec_layer));
}

TEST(InitParams, LayerNormAndBiasInitAndUniformBounds) {
  const ModelConfig c = tiny_config();
  Params p = init_params(c, 1);
  for (double g : p.encoder[0].ln_attn.gain.data()) EXPECT_EQ(g, 1.0);
  for (double b : p.decoder[1].ln_ffn.bias.data()) EXPECT_EQ(b, 0.0);
  for (double b : p.decoder[0].ffn.b1.data()) EXPECT_EQ(b, 0.0);
  const double bound = std::sqrt(6.0 / static_cast<double>(c.d_model + c.d_ff));
  for (double w : p.encoder[0].ffn.w1.data()) EXPECT_LE(std::abs(w), bound);
}

TEST(InitParams, EmbeddingMeanWithinThreeSigma) {
  ModelConfig c = tiny_config(200);
  c.d_model = 64;
  c.heads = 4;
  Params p = init_params(c, 9);
  const double n = static_cast<double>(p.embedding.numel());
  ASSERT_GE(n, 1e4);
  double mean = 0.0;
  for (double x : p.embedding.data()) mean += x;
  mean /= n;
  const double bound = std::sqrt(6.0 / (200.0 + 64.0));
  const double sigma = bound / std::sqrt(3.0) / std::sqrt(n);
  EXPECT_LT(std::abs(mean), 3.0 * sigma);
}

TEST(Encode, ShapeBatchIndependenceAndPaddingInvariance) {
  const ModelConfig c = tiny_config();
  Params p = init_params(c, 5);
  Rng rng(51);
  IdMatrix src = random_ids(3, 5, c.vocab_size, rng, kFirstRealId);
  const std::vector<std::size_t> lens = {5, 3, 4};
  Tensor out = encode(src, lens, p, c);
  EXPECT_EQ(out.shape(), Shape({3, 5, c.d_model}));

  IdMatrix swapped = src;
  for (std::size_t j = 0; j < 5; ++j) std::swap(swapped.at(0, j), swapped.at(2, j));
  const std::vector<std::size_t> swapped_lens = {4, 3, 5};
  Tensor out2 = encode(swapped, swapped_lens, p, c);
  const std::size_t row = 5 * c.d_model;
  EXPECT_LT(max_abs_diff(std::span(out.data().data(), row), std::span(out2.data().data() + 2 * row, row)), 1e-12);

  // Row 1 alone, unpadded, must equal its padded rendition on real positions.
  IdMatrix alone{1, 3, {src.at(1, 0), src.at(1, 1), src.at(1, 2)}};
  const std::size_t three = 3;
  Tensor single = encode(alone, std::span(&three, 1), p, c);
  EXPECT_LT(max_abs_diff(single.data(), std::span(out.data().data() + row, 3 * c.d_model)), 1e-10);

  IdMatrix bad = src;
  bad.at(0, 0) = static_cast<int>(c.vocab_size);
  EXPECT_THROW(encode(bad, lens, p, c), VocabError);
}

struct DecodeFixture {
  ModelConfig config = tiny_config();
  Params params;
  IdMatrix src, fwd, bwd;
  std::vector<std::size_t> src_lens;
  Tensor enc;

  DecodeFixture(std::uint64_t seed, std::size_t batch, std::size_t q, double lambda = 0.5) {
    config.lambda = lambda;
    params = init_params(config, seed);
    Rng rng(seed + 100);
    src = random_ids(batch, 4, config.vocab_size, rng, kFirstRealId);
    src_lens.assign(batch, 4);
    if (batch > 1) src_lens[1] = 2;
    fwd = with_start(random_ids(batch, q, config.vocab_size, rng, kFirstRealId), kL2RId);
    bwd = with_start(random_ids(batch, q, config.vocab_size, rng, kFirstRealId), kR2LId);
    enc = encode(src, src_lens, params, config);
  }
};

TEST(DecodeBidirectional, LambdaZeroEqualsUnidirectional) {
  DecodeFixture f(61, 2, 5, 0.0);
  StreamPair bi = decode_bidirectional(f.fwd, f.bwd, f.enc, f.src_lens, f.params, f.config);
  Tensor uni = decode_unidirectional(f.fwd, f.enc, f.src_lens, f.params, f.config);
  EXPECT_EQ(bi.fwd.shape(), Shape({2, 5, f.config.vocab_size}));
  EXPECT_LT(max_abs_diff(bi.fwd, uni), 1e-10);
  Tensor uni_b = decode_unidirectional(f.bwd, f.enc, f.src_lens, f.params, f.config);
  EXPECT_LT(max_abs_diff(bi.bwd, uni_b), 1e-10);
}

TEST(DecodeBidirectional, DirectionSwapSymmetry) {
  DecodeFixture f(62, 2, 4);
  StreamPair a = decode_bidirectional(f.fwd, f.bwd, f.enc, f.src_lens, f.params, f.config);
  StreamPair b = decode_bidirectional(f.bwd, f.fwd, f.enc, f.src_lens, f.params, f.config);
  EXPECT_EQ(max_abs_diff(a.fwd, b.bwd), 0.0);
  EXPECT_EQ(max_abs_diff(a.bwd, b.fwd), 0.0);
}

TEST(DecodeBidirectional, CausalityProbe) {
  DecodeFixture f(63, 2, 5);
  StreamPair base = decode_bidirectional(f.fwd, f.bwd, f.enc, f.src_lens, f.params, f.config);
  const std::size_t v = f.config.vocab_size;
  for (std::size_t p = 1; p < 5; ++p) {
    for (int stream = 0; stream < 2; ++stream) {
      IdMatrix fi = f.fwd, bi = f.bwd;
      IdMatrix& target = stream == 0 ? fi : bi;
      for (std::size_t r = 0; r < 2; ++r) target.at(r, p) = kFirstRealId + (target.at(r, p) - kFirstRealId + 1) % 5;
      StreamPair out = decode_bidirectional(fi, bi, f.enc, f.src_lens, f.params, f.config);
      double before = 0.0, at = 0.0;
      for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t j = 0; j < 5; ++j) {
          for (std::size_t k = 0; k < v; ++k) {
            const std::size_t i = (r * 5 + j) * v + k;
            const double d = std::max(std::abs(out.fwd[i] - base.fwd[i]), std::abs(out.bwd[i] - base.bwd[i]));
            (j < p ? before : at) = std::max(j < p ? before : at, d);
          }
        }
      }
      EXPECT_LT(before, 1e-10) << "p=" << p << " stream=" << stream;
      EXPECT_GT(at, 1e-6) << "perturbation had no effect";
    }
  }
}

TEST(DecodeUnidirectional, CausalityAndShape) {
  DecodeFixture f(64, 1, 6);
  f.config.mode = DecoderMode::kL2R;
  Tensor base = decode_unidirectional(f.fwd, f.enc, f.src_lens, f.params, f.config);
  EXPECT_EQ(base.shape(), Shape({1, 6, f.config.vocab_size}));
  IdMatrix changed = f.fwd;
  changed.at(0, 3) = changed.at(0, 3) == 7 ? 8 : 7;
  Tensor out = decode_unidirectional(changed, f.enc, f.src_lens, f.params, f.config);
  const std::size_t v = f.config.vocab_size;
  EXPECT_EQ(max_abs_diff(std::span(base.data().data(), 3 * v), std::span(out.data().data(), 3 * v)), 0.0);
}

TEST(DecodeBidirectional, SoftmaxRowsSumToOne) {
  DecodeFixture f(65, 2, 3);
  StreamPair out = decode_bidirectional(f.fwd, f.bwd, f.enc, f.src_lens, f.params, f.config);
  Tensor p = softmax(out.fwd, -1);
  const std::size_t v = f.config.vocab_size;
  for (std::size_t r = 0; r < p.numel() / v; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < v; ++k) s += p[r * v + k];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(DecodeBidirectional, CrossVisibilityHidesLaterKeys) {
  DecodeFixture f(66, 1, 5);
  CrossVisibility vis{{kAllVisible}, {2}};
  StreamPair base = decode_bidirectional(f.fwd, f.bwd, f.enc, f.src_lens, f.params, f.config, {}, &vis);
  // Backward positions >= 2 are invisible to the forward stream, so changing
  // them leaves forward logits untouched.
  IdMatrix b2 = f.bwd;
  b2.at(0, 2) = 9;
  b2.at(0, 4) = 10;
  StreamPair out = decode_bidirectional(f.fwd, b2, f.enc, f.src_lens, f.params, f.config, {}, &vis);
  EXPECT_EQ(max_abs_diff(base.fwd, out.fwd), 0.0);
  EXPECT_GT(max_abs_diff(base.bwd, out.bwd), 1e-6);
}

TEST(DecodeBidirectional, MismatchedStreamsRejected) {
  DecodeFixture f(67, 2, 4);
  IdMatrix shorter{2, 3, std::vector<int>(6, kFirstRealId)};
  EXPECT_THROW(decode_bidirectional(f.fwd, shorter, f.enc, f.src_lens, f.params, f.config), ContractError);
}

TEST(Checkpoint, RoundTripPreservesConfigAndParams) {
  ModelConfig c = tiny_config();
  c.lambda = 0.1 + 1e-12;
  c.mode = DecoderMode::kR2L;
  Params p = init_params(c, 71);
  const auto path = std::filesystem::temp_directory_path() / "sbsg_test_roundtrip.ckpt";
  save_checkpoint(path, c, p);
  Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.config, c);
  auto a = p.named(), b = ck.params.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(max_abs_diff(a[i].second, b[i].second), 0.0);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadFiles) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto bad = dir / "sbsg_test_bad.ckpt";
  {
    std::ofstream os(bad);
    os << "NOTSBSG\n";
  }
  EXPECT_THROW(load_checkpoint(bad), IoError);
  EXPECT_THROW(load_checkpoint(dir / "sbsg_missing_file.ckpt"), IoError);

  const ModelConfig c = tiny_config();
  const auto good = dir / "sbsg_test_trunc.ckpt";
  save_checkpoint(good, c, init_params(c, 1));
  const auto size = std::filesystem::file_size(good);
  std::filesystem::resize_file(good, size - 16);
  EXPECT_THROW(load_checkpoint(good), IoError);
  std::filesystem::remove(bad);
  std::filesystem::remove(good);
}

TEST(Checkpoint, ParamsFromNamedChecksLayout) {
  const ModelConfig c = tiny_config();
  auto named = init_params(c, 1).named();
  ModelConfig wider = c;
  wider.d_ff = 32;
  EXPECT_THROW(params_from_named(wider, named), ContractError);
  named.pop_back();
  EXPECT_THROW(params_from_named(c, named), ContractError);
}

}  // namespace
}  // namespace sbsg
