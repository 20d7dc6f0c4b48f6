#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sbsg/model.hpp"

namespace sbsg {

enum class SearchMode { kBeam, kGreedy };
std::string to_string(SearchMode mode);
SearchMode parse_search_mode(const std::string& text);

struct DecodeConfig {
  std::size_t beam_size = 4;
  double alpha = 0.6;
  // Maximum number of decoder steps; a hypothesis still open at this point
  // is finished without <eos>.
  std::size_t max_len = 64;
  SearchMode mode = SearchMode::kBeam;
  // Per-stream candidates per pair in bidirectional beam search; 0 selects
  // ceil(sqrt(beam_size)).
  std::size_t candidate_width = 0;

  // Throws ConfigError; bidirectional beam search needs an even beam.
  void validate(DecoderMode mode) const;
};

// ((5 + length) / 6)^alpha
double length_penalty(std::size_t length, double alpha);

/// One decoded sentence. `fwd`/`bwd` hold the tokens each stream generated
/// (without the start label, up to and including <eos> when emitted); for
/// single-stream models only `fwd` is used, in generation order.
struct DecodeResult {
  std::vector<int> tokens;
  std::vector<int> fwd;
  std::vector<int> bwd;
  double logp = 0.0;
  double score = 0.0;  // logp / length_penalty(len_f + len_b)
  std::size_t steps = 0;  // decoder invocations spent on this sentence
};

// Tokens a decoder may never emit, as a mask over the vocabulary.
std::vector<bool> banned_tokens(std::size_t vocab_size, DecoderMode mode);

std::vector<DecodeResult> greedy_bidirectional(const Params& params, const ModelConfig& config,
                                               const std::vector<std::vector<int>>& sources, std::size_t max_len);
std::vector<DecodeResult> greedy_unidirectional(const Params& params, const ModelConfig& config,
                                                const std::vector<std::vector<int>>& sources, std::size_t max_len);

DecodeResult beam_search_bidirectional(const Params& params, const ModelConfig& config, std::span<const int> src,
                                       const DecodeConfig& cfg);
DecodeResult beam_search_unidirectional(const Params& params, const ModelConfig& config, std::span<const int> src,
                                        const DecodeConfig& cfg);

// Dispatches on config.mode and cfg.mode. Greedy decoding handles the whole
// batch in lockstep; beam search runs one sentence at a time.
std::vector<DecodeResult> decode_batch(const Params& params, const ModelConfig& config,
                                       const std::vector<std::vector<int>>& sources, const DecodeConfig& cfg);

}  // namespace sbsg
