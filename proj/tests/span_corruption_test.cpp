#include <random>

#include <gtest/gtest.h>

#include "cbqa/counter_rng.hpp"
#include "cbqa/error.hpp"
#include "cbqa/span_corruption.hpp"
#include "stats.hpp"

namespace cbqa {
namespace {

const Vocab& vocab() {
  static const Vocab v = build_vocab(std::vector<std::string>{"the quick brown fox"}, 300 + kDefaultSentinels);
  return v;
}

TokenIds random_tokens(std::mt19937_64& gen, std::size_t n) {
  TokenIds t(n);
  for (auto& id : t) id = static_cast<TokenId>(2 + gen() % (vocab().ordinary_count() - 2));
  return t;
}

// Searches stream indices for a mask dropping exactly `drops` among ten tokens.
std::uint64_t find_stream(const CorruptionConfig& cfg, const std::vector<std::size_t>& drops) {
  for (std::uint64_t s = 0; s < 5'000'000; ++s) {
    const CounterRng rng(cfg.seed, s);
    bool ok = true;
    for (std::size_t i = 0; i < 10 && ok; ++i) {
      const bool dropped = rng.uniform(i) < cfg.mask_rate;
      ok = dropped == (std::find(drops.begin(), drops.end(), i) != drops.end());
    }
    if (ok) return s;
  }
  throw std::runtime_error("no stream found");
}

TEST(Corrupt, MergesRunsAndNumbersSentinels) {
  const Vocab& v = vocab();
  const CorruptionConfig cfg{0.15, 3};
  const TokenIds t = {10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  // Drops at 1-based positions {3,4,8}.
  const auto pair = corrupt(v, t, cfg, find_stream(cfg, {2, 3, 7}));
  const TokenId s0 = v.sentinel_id(0), s1 = v.sentinel_id(1), s2 = v.sentinel_id(2);
  EXPECT_EQ(pair.inputs, (TokenIds{10, 11, s0, 14, 15, 16, s1, 18, 19}));
  EXPECT_EQ(pair.targets, (TokenIds{s0, 12, 13, s1, 17, s2, kEosId}));
  EXPECT_EQ(decorrupt(v, pair), t);
  EXPECT_EQ(masked_token_count(v, pair), 3u);
}

TEST(Corrupt, DropRateMatchesMaskRate) {
  std::mt19937_64 gen(2);
  const CorruptionConfig cfg{0.15, 11};
  std::size_t dropped = 0, total = 0;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const auto t = random_tokens(gen, 100);
    dropped += masked_token_count(vocab(), corrupt(vocab(), t, cfg, s));
    total += t.size();
  }
  const double rate = static_cast<double>(dropped) / static_cast<double>(total);
  EXPECT_NEAR(rate, 0.150, 0.005);
  EXPECT_GT(testing::binomial_two_sided_p(static_cast<double>(dropped), static_cast<double>(total), 0.15), 0.001);
}

TEST(Corrupt, DeterministicPerStreamAndFreshAcrossStreams) {
  std::mt19937_64 gen(3);
  const auto t = random_tokens(gen, 60);
  const CorruptionConfig cfg{0.15, 5};
  EXPECT_EQ(corrupt(vocab(), t, cfg, 7), corrupt(vocab(), t, cfg, 7));
  int differing = 0;
  for (std::uint64_t s = 0; s < 20; ++s) differing += corrupt(vocab(), t, cfg, s) != corrupt(vocab(), t, cfg, s + 100);
  EXPECT_GT(differing, 15);
}

TEST(Corrupt, ForcesOneDropWhenNoneSampled) {
  const CorruptionConfig cfg{1e-9, 1};
  const TokenIds t = {5, 6, 7, 8};
  const auto pair = corrupt(vocab(), t, cfg, 0);
  EXPECT_EQ(masked_token_count(vocab(), pair), 1u);
  EXPECT_EQ(pair.inputs.size(), 4u);
  EXPECT_EQ(decorrupt(vocab(), pair), t);
}

TEST(Corrupt, RoundTripOverRandomSequences) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto t = random_tokens(gen, 1 + gen() % 120);
    const CorruptionConfig cfg{0.05 + 0.3 * std::uniform_real_distribution<double>()(gen), gen()};
    const auto pair = corrupt(vocab(), t, cfg, gen());
    ASSERT_EQ(decorrupt(vocab(), pair), t);
  }
}

TEST(Corrupt, SentinelsAreUniqueAndOrdered) {
  std::mt19937_64 gen(5);
  const Vocab& v = vocab();
  for (int trial = 0; trial < 300; ++trial) {
    const auto pair = corrupt(v, random_tokens(gen, 80), {0.2, 9}, trial);
    std::vector<std::size_t> in, out;
    for (const TokenId id : pair.inputs)
      if (v.is_sentinel(id)) in.push_back(v.sentinel_index(id));
    for (const TokenId id : pair.targets)
      if (v.is_sentinel(id)) out.push_back(v.sentinel_index(id));
    for (std::size_t k = 0; k < in.size(); ++k) ASSERT_EQ(in[k], k);
    ASSERT_EQ(out.size(), in.size() + 1);
    for (std::size_t k = 0; k < out.size(); ++k) ASSERT_EQ(out[k], k);
    ASSERT_EQ(pair.targets.back(), kEosId);
  }
}

TEST(Corrupt, Errors) {
  const Vocab& v = vocab();
  EXPECT_THROW(corrupt(v, TokenIds{}, {0.15, 0}, 0), InvalidArgument);
  EXPECT_THROW(corrupt(v, TokenIds{5, v.sentinel_id(3)}, {0.15, 0}, 0), InvalidArgument);
  EXPECT_THROW(corrupt(v, TokenIds{5, kEosId}, {0.15, 0}, 0), InvalidArgument);
  EXPECT_THROW(corrupt(v, TokenIds{5, 6}, {1.5, 0}, 0), ConfigError);
  EXPECT_THROW(corrupt(v, TokenIds{5, 6}, {0.0, 0}, 0), ConfigError);
  // 400 alternating drops need far more than 100 sentinels.
  std::mt19937_64 gen(6);
  EXPECT_THROW(corrupt(v, random_tokens(gen, 2000), {0.5, 0}, 0), InvalidArgument);
}

TEST(Decorrupt, RejectsMalformedPairs) {
  const Vocab& v = vocab();
  const TokenId s0 = v.sentinel_id(0), s1 = v.sentinel_id(1);
  EXPECT_THROW(decorrupt(v, {{5, 6}, {s0, kEosId}}), InvalidArgument);
  EXPECT_THROW(decorrupt(v, {{5, s1}, {s1, 7, s0, kEosId}}), InvalidArgument);
  EXPECT_THROW(decorrupt(v, {{5, s0}, {s0, 7, kEosId}}), InvalidArgument);
}

TEST(PairJson, RoundTrip) {
  const CorruptedPair pair{{5, 6, vocab().sentinel_id(0)}, {vocab().sentinel_id(0), 7, vocab().sentinel_id(1), 1}};
  const std::string line = to_json_line(pair, "doc1");
  EXPECT_EQ(line.find("{\"inputs\":"), 0u);
  EXPECT_NE(line.find("\"origin\":\"doc1\""), std::string::npos);
  EXPECT_EQ(parse_pair_line(line), pair);
}

}  // namespace
}  // namespace cbqa
