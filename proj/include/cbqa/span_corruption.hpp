#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "cbqa/tokenizer.hpp"

namespace cbqa {

struct CorruptionConfig {
  double mask_rate = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

// Inputs carry one sentinel per dropped run; targets list each sentinel
// followed by its run, then a closing sentinel and eos.
struct CorruptedPair {
  TokenIds inputs;
  TokenIds targets;

  friend bool operator==(const CorruptedPair&, const CorruptedPair&) = default;
};

// Drops each token independently with probability mask_rate using a stream
// keyed by (seed, stream_index), merges consecutive drops into spans and
// replaces each span with the next sentinel. When nothing is dropped one
// uniformly chosen token is.
CorruptedPair corrupt(const Vocab& vocab, std::span<const TokenId> tokens, const CorruptionConfig& config,
                      std::uint64_t stream_index);

// Splices every target span back over its sentinel.
TokenIds decorrupt(const Vocab& vocab, const CorruptedPair& pair);

// Number of dropped (masked) ordinary tokens recorded in the targets.
std::size_t masked_token_count(const Vocab& vocab, const CorruptedPair& pair);

std::string to_json_line(const CorruptedPair& pair, std::string_view origin);
CorruptedPair parse_pair_line(std::string_view json_line);

}  // namespace cbqa
