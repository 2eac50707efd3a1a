#include "cbqa/span_corruption.hpp"

#include <json.hpp>

#include "cbqa/counter_rng.hpp"
#include "cbqa/error.hpp"

namespace cbqa {

void CorruptionConfig::validate() const {
  if (!(mask_rate > 0.0 && mask_rate < 1.0))
    throw ConfigError("mask_rate must lie in (0, 1), got " + std::to_string(mask_rate));
}

CorruptedPair corrupt(const Vocab& vocab, std::span<const TokenId> tokens, const CorruptionConfig& config,
                      std::uint64_t stream_index) {
  config.validate();
  if (tokens.empty()) throw InvalidArgument("corrupt: empty token sequence");
  for (const TokenId t : tokens)
    if (vocab.is_special(t)) throw InvalidArgument("corrupt: input contains special id " + std::to_string(t));

  const CounterRng rng(config.seed, stream_index);
  std::vector<bool> dropped(tokens.size());
  bool any = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    dropped[i] = rng.uniform(i) < config.mask_rate;
    any = any || dropped[i];
  }
  if (!any) dropped[rng.fork(1).below(tokens.size(), 0)] = true;

  std::size_t spans = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (dropped[i] && (i == 0 || !dropped[i - 1])) ++spans;
  if (spans + 1 > vocab.sentinel_count())
    throw InvalidArgument("corrupt: " + std::to_string(spans) + " spans exceed sentinel capacity " +
                          std::to_string(vocab.sentinel_count()));

  CorruptedPair pair;
  std::size_t k = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!dropped[i]) {
      pair.inputs.push_back(tokens[i]);
      continue;
    }
    if (i == 0 || !dropped[i - 1]) {
      pair.inputs.push_back(vocab.sentinel_id(k));
      pair.targets.push_back(vocab.sentinel_id(k));
      ++k;
    }
    pair.targets.push_back(tokens[i]);
  }
  pair.targets.push_back(vocab.sentinel_id(k));
  pair.targets.push_back(kEosId);
  return pair;
}

TokenIds decorrupt(const Vocab& vocab, const CorruptedPair& pair) {
  // Split targets into runs keyed by sentinel order.
  std::vector<std::span<const TokenId>> runs;
  const auto& t = pair.targets;
  std::size_t pos = 0;
  std::size_t expected = 0;
  bool closed = false;
  while (pos < t.size()) {
    if (!vocab.is_sentinel(t[pos])) throw InvalidArgument("decorrupt: targets must start each run with a sentinel");
    if (vocab.sentinel_index(t[pos]) != expected) throw InvalidArgument("decorrupt: sentinel order mismatch in targets");
    std::size_t end = pos + 1;
    while (end < t.size() && !vocab.is_sentinel(t[end]) && t[end] != kEosId) ++end;
    if (end < t.size() && t[end] == kEosId) {
      if (end != pos + 1 || end + 1 != t.size()) throw InvalidArgument("decorrupt: malformed target terminator");
      closed = true;
      break;
    }
    if (end == t.size()) throw InvalidArgument("decorrupt: targets missing closing sentinel and eos");
    runs.emplace_back(t.data() + pos + 1, end - pos - 1);
    pos = end;
    ++expected;
  }
  if (!closed) throw InvalidArgument("decorrupt: targets missing closing sentinel and eos");
  if (runs.empty()) throw InvalidArgument("decorrupt: pair has no masked span");

  TokenIds out;
  std::size_t next = 0;
  for (const TokenId id : pair.inputs) {
    if (!vocab.is_sentinel(id)) {
      out.push_back(id);
      continue;
    }
    if (vocab.sentinel_index(id) != next || next >= runs.size())
      throw InvalidArgument("decorrupt: sentinel order mismatch between inputs and targets");
    out.insert(out.end(), runs[next].begin(), runs[next].end());
    ++next;
  }
  if (next != runs.size()) throw InvalidArgument("decorrupt: inputs missing sentinels present in targets");
  return out;
}

std::size_t masked_token_count(const Vocab& vocab, const CorruptedPair& pair) {
  std::size_t n = 0;
  for (const TokenId id : pair.targets)
    if (!vocab.is_special(id)) ++n;
  return n;
}

std::string to_json_line(const CorruptedPair& pair, std::string_view origin) {
  nlohmann::ordered_json j;
  j["inputs"] = pair.inputs;
  j["targets"] = pair.targets;
  j["origin"] = origin;
  return j.dump();
}

CorruptedPair parse_pair_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  CorruptedPair pair;
  pair.inputs = j.at("inputs").get<TokenIds>();
  pair.targets = j.at("targets").get<TokenIds>();
  return pair;
}

}  // namespace cbqa
