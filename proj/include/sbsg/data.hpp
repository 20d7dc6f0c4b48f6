#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sbsg/model.hpp"
#include "sbsg/ops.hpp"

namespace sbsg {

// Fixed ids of the reserved tokens.
inline constexpr int kPadId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kL2RId = 3;
inline constexpr int kR2LId = 4;
inline constexpr int kNullId = 5;
inline constexpr int kFirstRealId = 6;

inline bool is_reserved(int id) { return id >= 0 && id < kFirstRealId; }

/// Token <-> id bijection. Ids 0..5 are <pad> <eos> <unk> <l2r> <r2l> <null>;
/// real tokens follow in descending corpus frequency, ties lexicographic.
class Vocabulary {
 public:
  static const std::vector<std::string>& reserved_tokens();

  // `tokens` must start with the six reserved tokens and hold no duplicates.
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary load(const std::filesystem::path& path);
  // One token per line; line number == id.
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  // <unk> for tokens outside the vocabulary.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  std::vector<int> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const int> ids) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus, std::size_t max_size);

enum class NullSide { kNone, kFwd, kBwd };

/// Halve-and-reverse form of a target: fwd = <l2r> y1..y_k <eos>,
/// bwd = <r2l> y_n..y_{k+1} <eos>, with <null> padding the shorter half of
/// odd-length targets just before its <eos>.
struct BidirectionalTarget {
  std::vector<int> fwd;
  std::vector<int> bwd;
  NullSide null_side = NullSide::kNone;
};

// For odd lengths the rng picks the <null> side with equal probability.
BidirectionalTarget split_target(std::span<const int> y, Rng& rng);
// Same construction with the <null> side fixed (ignored for even lengths).
BidirectionalTarget split_target(std::span<const int> y, NullSide odd_side);

// Truncates each half at its first <eos>, drops <l2r>/<r2l>/<pad>/<null>, and
// returns fwd ++ reverse(bwd).
std::vector<int> stitch(std::span<const int> fwd, std::span<const int> bwd);

struct Example {
  std::vector<std::string> src;
  std::vector<std::string> tgt;
};
using Dataset = std::vector<Example>;

std::vector<std::string> tokenize(const std::string& line);
std::string join_tokens(std::span<const std::string> tokens);

// UTF-8 text, one `source<TAB>target` example per line, tokens separated by spaces.
Dataset read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const Dataset& data);

struct EncodedPair {
  std::vector<int> src;
  BidirectionalTarget tgt;
};

/// Padded teacher-forcing batch. *_in drops the last target token, *_out the
/// first; loss_mask [b, q] marks real (non-pad) *_out positions. Single-stream
/// batches leave bwd_in/bwd_out empty.
struct Batch {
  IdMatrix src;
  std::vector<std::size_t> src_lengths;
  IdMatrix fwd_in, fwd_out;
  IdMatrix bwd_in, bwd_out;
  std::vector<std::size_t> tgt_lengths;
  std::vector<std::uint8_t> loss_mask;

  bool bidirectional() const { return bwd_in.rows > 0; }
  std::size_t size() const { return src.rows; }
};

Batch make_batch(std::span<const EncodedPair> pairs);
// Single-stream batch for the baselines; r2l reverses the target and starts
// it with <r2l>.
Batch make_unidirectional_batch(std::span<const std::vector<int>> sources, std::span<const std::vector<int>> targets,
                                DecoderMode direction);

enum class SynthTask { kCopy, kReverse, kSort };
std::string to_string(SynthTask task);
SynthTask parse_synth_task(const std::string& text);

// Tokens are the decimal integers 0..vocab_real_size-1.
Dataset synth_generate(SynthTask task, std::size_t count, std::size_t min_len, std::size_t max_len,
                       std::size_t vocab_real_size, std::uint64_t seed, std::size_t max_positions = 64);

}  // namespace sbsg
