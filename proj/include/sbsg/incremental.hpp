#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "sbsg/model.hpp"

namespace sbsg {

// Encoder output of one source sentence plus the inter-attention keys and
// values it induces in every decoder layer ([length, d_model] row-major).
struct EncoderMemory {
  std::size_t length = 0;
  std::vector<std::vector<double>> keys;
  std::vector<std::vector<double>> values;
};

// Projected intra-attention keys/values of one stream, one row per position.
struct StreamCache {
  std::vector<double> keys;
  std::vector<double> values;
};

inline constexpr std::size_t kAllVisible = std::numeric_limits<std::size_t>::max();

/// Cached decoder state for a batch of sequences decoded in lockstep with one
/// or two streams. Copying a state copies its caches; the encoder memory is
/// shared and immutable.
struct DecoderState {
  struct Item {
    std::shared_ptr<const EncoderMemory> memory;
    std::vector<std::array<StreamCache, 2>> layers;  // [layer][stream]
    // Number of positions of stream s the other stream may attend to.
    std::array<std::size_t, 2> visible{kAllVisible, kAllVisible};
  };

  std::size_t streams = 2;
  std::size_t position = 0;  // positions consumed so far
  std::size_t layers = 0;
  std::size_t d_model = 0;
  std::vector<Item> items;

  std::size_t batch() const { return items.size(); }
};

// Encodes each source (unpadded, one at a time) and returns an empty cache.
DecoderState start_decoding(const Params& params, const ModelConfig& config,
                            const std::vector<std::vector<int>>& sources, std::size_t streams);

// Stops stream `stream` of item `item` from being attended to by the other
// stream beyond its first `count` positions.
void limit_visibility(DecoderState& state, std::size_t item, std::size_t stream, std::size_t count);

struct StepLogits {
  Tensor fwd;  // [batch, vocab]
  Tensor bwd;  // [batch, vocab]; undefined for single-stream states
};

// Consumes one position per stream in place and returns next-token logits.
StepLogits advance(DecoderState& state, std::span<const int> next_f, std::span<const int> next_b,
                   const Params& params, const ModelConfig& config);

struct StepResult {
  Tensor logits_f;
  Tensor logits_b;
  DecoderState state;
};

// Pure variant of advance(): `state` is left untouched.
StepResult incremental_step(const DecoderState& state, std::span<const int> next_f, std::span<const int> next_b,
                            const Params& params, const ModelConfig& config);

}  // namespace sbsg
