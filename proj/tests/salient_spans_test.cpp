#include <fstream>

#include <gtest/gtest.h>

#include "cbqa/error.hpp"
#include "cbqa/salient_spans.hpp"
#include "cbqa/span_corruption.hpp"
#include "stats.hpp"

namespace cbqa {
namespace {

const std::filesystem::path kData = CBQA_TEST_DATA;

std::string spanned(std::string_view text, const SalientSpan& s) { return std::string(text.substr(s.start, s.end - s.start)); }

const Vocab& vocab() {
  static const Vocab v = [] {
    std::vector<std::string> text;
    for (const auto& d : load_corpus(kData / "ssm_corpus.jsonl")) text.push_back(d.text);
    return build_vocab(text, 600);
  }();
  return v;
}

TaggedSentence tagged(std::string text) {
  TaggedSentence t;
  t.sentence = {"d", 0, text};
  t.spans = tag_salient(text, RuleTagger{});
  return t;
}

TEST(RuleTagger, EntityAndYear) {
  const std::string text = "Charles Darwin was born in 1809.";
  const auto spans = tag_salient(text, RuleTagger{});
  ASSERT_EQ(spans.size(), 2u);
  EXPECT_EQ(spanned(text, spans[0]), "Charles Darwin");
  EXPECT_EQ(spans[0].kind, SpanKind::Entity);
  EXPECT_EQ(spanned(text, spans[1]), "1809");
  EXPECT_EQ(spans[1].kind, SpanKind::Date);
}

TEST(RuleTagger, NoSpansInLowercaseText) { EXPECT_TRUE(tag_salient("the cat sat", RuleTagger{}).empty()); }

TEST(RuleTagger, FullDatePhrase) {
  const std::string text = "April 15, 2019";
  const auto spans = tag_salient(text, RuleTagger{});
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(spanned(text, spans[0]), text);
  EXPECT_EQ(spans[0].kind, SpanKind::Date);
}

TEST(RuleTagger, DatePatterns) {
  const auto only = [](const std::string& text) {
    const auto spans = tag_salient(text, RuleTagger{});
    std::vector<std::string> out;
    for (const auto& s : spans) out.push_back(spanned(text, s) + (s.kind == SpanKind::Date ? "/D" : "/E"));
    return out;
  };
  EXPECT_EQ(only("It opened on 3 June 2021."), std::vector<std::string>{"3 June 2021/D"});
  EXPECT_EQ(only("Work ended in January 1932."), std::vector<std::string>{"January 1932/D"});
  EXPECT_EQ(only("They met in December of that year."), std::vector<std::string>{"December/D"});
  EXPECT_EQ(only("You may leave in May or stay."), std::vector<std::string>{});
  EXPECT_EQ(only("It sold 3000 copies and 999 more."), std::vector<std::string>{});
  EXPECT_EQ(only("The law took effect on July 4."), std::vector<std::string>{"July 4/D"});
}

TEST(RuleTagger, SentenceStartNeedsTwoWords) {
  EXPECT_TRUE(tag_salient("Rivers flood each season.", RuleTagger{}).empty());
  const std::string text = "Lake Victoria borders three countries.";
  const auto spans = tag_salient(text, RuleTagger{});
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(spanned(text, spans[0]), "Lake Victoria");
}

class FixedTagger final : public SpanTagger {
 public:
  explicit FixedTagger(std::vector<SalientSpan> s) : spans_(std::move(s)) {}
  std::vector<SalientSpan> candidates(std::string_view) const override { return spans_; }

 private:
  std::vector<SalientSpan> spans_;
};

class ThrowingTagger final : public SpanTagger {
 public:
  std::vector<SalientSpan> candidates(std::string_view) const override { throw std::runtime_error("model offline"); }
};

TEST(TagSalient, OverlapsResolvedLongestThenEarliest) {
  const std::string text = "aa bb cc dd ee";
  const FixedTagger tagger({{3, 8, SpanKind::Entity}, {0, 5, SpanKind::Entity}, {6, 14, SpanKind::Date},
                            {9, 11, SpanKind::Entity}});
  // [6,14) wins; [3,8) and [9,11) collide with it; [0,5) survives.
  const auto spans = tag_salient(text, tagger);
  ASSERT_EQ(spans.size(), 2u);
  EXPECT_EQ(spans[0].start, 0u);
  EXPECT_EQ(spans[1].start, 6u);
  EXPECT_EQ(spans[1].end, 14u);

  const FixedTagger tie({{3, 8, SpanKind::Entity}, {0, 5, SpanKind::Entity}});
  const auto t = tag_salient(text, tie);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].start, 0u);
}

TEST(TagSalient, TaggerFailureCarriesSentence) {
  try {
    tag_salient("Some sentence here.", ThrowingTagger{});
    FAIL() << "expected failure";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("Some sentence here."), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("model offline"), std::string::npos) << e.what();
  }
  EXPECT_THROW(tag_salient("abc def", FixedTagger({{2, 4, SpanKind::Entity}})), InvalidArgument);
  EXPECT_THROW(tag_salient("abc", FixedTagger({{1, 9, SpanKind::Entity}})), InvalidArgument);
}

TEST(MineSentences, FilterSemantics) {
  const std::vector<CorpusDocument> doc = {{"d", "The cat sat on the mat. The vote happened in 2004."}};
  const auto mined = mine_sentences(doc, RuleTagger{});
  ASSERT_EQ(mined.size(), 1u);
  EXPECT_EQ(mined[0].sentence.text, "The vote happened in 2004.");
  EXPECT_EQ(mined[0].sentence.index, 1u);
  EXPECT_TRUE(mine_sentences({}, RuleTagger{}).empty());
}

TEST(MineSentences, FixtureCorpusMatchesHandTaggedList) {
  const auto corpus = load_corpus(kData / "ssm_corpus.jsonl");
  std::vector<std::string> expected;
  std::ifstream in(kData / "ssm_expected.txt");
  for (std::string line; std::getline(in, line);) expected.push_back(line);
  ASSERT_EQ(expected.size(), 31u);

  MiningStats stats;
  const auto mined = mine_sentences(corpus, RuleTagger{}, {}, &stats);
  EXPECT_EQ(stats.documents, 10u);
  EXPECT_EQ(stats.scanned, 50u);
  EXPECT_EQ(stats.kept, 31u);
  std::vector<std::string> got;
  for (const auto& t : mined) got.push_back(t.sentence.text);
  EXPECT_EQ(got, expected);

  // Keeps a sentence iff tagging it alone yields a span.
  std::size_t streamed = 0;
  mine_sentences(corpus, RuleTagger{}, {}, [&](TaggedSentence&& t) {
    EXPECT_FALSE(tag_salient(t.sentence.text, RuleTagger{}).empty());
    ++streamed;
  });
  EXPECT_EQ(streamed, 31u);
  for (const auto& doc : corpus)
    for (const auto& s : sentence_split(doc)) {
      const bool kept = std::find(expected.begin(), expected.end(), s.text) != expected.end();
      EXPECT_EQ(kept, !tag_salient(s.text, RuleTagger{}).empty()) << s.text;
    }
}

TEST(MineSentences, LengthFilters) {
  const auto corpus = load_corpus(kData / "ssm_corpus.jsonl");
  MiningStats stats;
  const auto mined = mine_sentences(corpus, RuleTagger{}, {30, 35}, &stats);
  for (const auto& t : mined) {
    EXPECT_GE(t.sentence.text.size(), 30u);
    EXPECT_LE(t.sentence.text.size(), 35u);
  }
  EXPECT_LT(stats.kept, 31u);
}

TEST(MaskSalient, MasksTheChosenSpan) {
  const Vocab& v = vocab();
  TaggedSentence t;
  t.sentence = {"d", 0, "Charles Darwin was born in 1809."};
  t.spans = {{27, 31, SpanKind::Date}};
  const auto pair = mask_salient(t, v, 0);
  EXPECT_EQ(v.render(pair.inputs), "Charles Darwin was born in <S0>.");
  const TokenId s0 = v.sentinel_id(0);
  ASSERT_EQ(pair.targets.front(), s0);
  EXPECT_EQ(pair.targets[pair.targets.size() - 2], v.sentinel_id(1));
  EXPECT_EQ(pair.targets.back(), kEosId);
  EXPECT_EQ(v.decode(std::span(pair.targets).subspan(1, pair.targets.size() - 3)), "1809");
}

TEST(MaskSalient, SingletonAlwaysChosen) {
  const auto t = tagged("The vote happened in 2004.");
  ASSERT_EQ(t.spans.size(), 1u);
  for (std::uint64_t s = 0; s < 50; ++s) EXPECT_EQ(select_span(t, s, 3), 0u);
}

TEST(MaskSalient, RoundTripReproducesSegmentedEncoding) {
  const Vocab& v = vocab();
  for (const auto& t : mine_sentences(load_corpus(kData / "ssm_corpus.jsonl"), RuleTagger{}))
    for (std::uint64_t s = 0; s < 8; ++s) {
      const auto pair = mask_salient(t, v, s);
      const auto& span = t.spans[select_span(t, s)];
      EXPECT_EQ(decorrupt(v, pair), segmented_encoding(v, t.sentence.text, span));
      EXPECT_EQ(v.decode(decorrupt(v, pair)), t.sentence.text);
      std::size_t sentinels = 0;
      for (const TokenId id : pair.inputs) sentinels += v.is_sentinel(id);
      EXPECT_EQ(sentinels, 1u);
    }
}

TEST(MaskSalient, SelectionIsUniform) {
  const auto t = tagged("Marie Curie met Albert Einstein in Paris in 1911.");
  ASSERT_EQ(t.spans.size(), 4u);
  std::vector<double> counts(4, 0.0);
  const int n = 10000;
  for (int s = 0; s < n; ++s) counts[select_span(t, static_cast<std::uint64_t>(s))] += 1.0;
  const auto chi = testing::chi_square(counts, std::vector<double>(4, n / 4.0));
  EXPECT_GT(chi.p_value, 0.001) << chi.statistic;
}

TEST(LoadAnnotatedSpans, ValidatesAndFeedsTagger) {
  const auto path = std::filesystem::temp_directory_path() / "cbqa_annotated.jsonl";
  {
    std::ofstream out(path);
    out << R"({"text":"Ada Lovelace wrote notes.","spans":[{"start":0,"end":12,"kind":"Entity"}]})" << '\n';
    out << R"({"text":"Nothing here.","spans":[]})" << '\n';
  }
  const auto records = load_annotated_spans(path);
  ASSERT_EQ(records.size(), 2u);
  AnnotatedTagger tagger;
  for (const auto& r : records) tagger.add(r.sentence.text, r.spans);
  const auto mined = mine_sentences({{"d", "Ada Lovelace wrote notes. Nothing here."}}, tagger);
  ASSERT_EQ(mined.size(), 1u);
  EXPECT_EQ(mined[0].spans[0].end, 12u);

  {
    std::ofstream out(path);
    out << R"({"text":"short","spans":[{"start":0,"end":40,"kind":"Entity"}]})" << '\n';
  }
  EXPECT_THROW(load_annotated_spans(path), SchemaError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace cbqa
