#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cbqa/error.hpp"
#include "cbqa/metrics.hpp"

namespace cbqa {
namespace {

const std::filesystem::path kData = CBQA_TEST_DATA;

QAExample example(std::string id, std::vector<AnswerList> answers) {
  return {std::move(id), "q", std::move(answers), Dataset::NQ};
}

const AnswerList kBeatles = {"John Lennon", "Ringo Starr", "George Harrison", "Paul McCartney"};

// Reference normalizer for ASCII and Latin-1 text: separate code path from
// the library's table-driven one.
std::string reference_normalize(const std::string& s) {
  std::string lowered;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c == 0xC3 && i + 1 < s.size()) {
      auto next = static_cast<unsigned char>(s[i + 1]);
      if (next >= 0x80 && next <= 0x9E && next != 0x97) next += 0x20;
      lowered.push_back(static_cast<char>(c));
      lowered.push_back(static_cast<char>(next));
      ++i;
    } else if (c < 0x80 && std::ispunct(c) && c != '$' && c != '+' && c != '<' && c != '=' && c != '>' &&
               c != '^' && c != '`' && c != '|' && c != '~') {
      // ASCII punctuation minus the symbol categories.
    } else {
      lowered.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  std::istringstream words(lowered);
  std::string w, out;
  while (words >> w)
    if (w != "a" && w != "an" && w != "the") out += (out.empty() ? "" : " ") + w;
  return out;
}

bool reference_em(const std::string& prediction, const QAExample& e) {
  for (const auto& list : e.annotator_answers)
    for (const auto& a : list)
      if (reference_normalize(a) == reference_normalize(prediction)) return true;
  return false;
}

std::optional<bool> reference_recall(const std::string& prediction, const QAExample& e) {
  int non_null = 0;
  for (const auto& list : e.annotator_answers) non_null += !list.empty();
  if (non_null < 2) return std::nullopt;
  std::set<std::string> predicted;
  std::size_t pos = 0;
  const std::string delim = "answer:";
  std::vector<std::string> pieces;
  for (;;) {
    const std::size_t next = prediction.find(delim, pos);
    pieces.push_back(prediction.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
    if (next == std::string::npos) break;
    pos = next + delim.size();
  }
  for (const auto& p : pieces) {
    const std::string n = reference_normalize(p);
    if (!n.empty() || p.find_first_not_of(" \t\n") != std::string::npos) predicted.insert(n);
  }
  for (const auto& list : e.annotator_answers) {
    if (list.empty()) continue;
    bool all = true;
    for (const auto& a : list) all = all && predicted.count(reference_normalize(a));
    if (all) return true;
  }
  return false;
}

TEST(Normalize, RuleExamples) {
  EXPECT_EQ(normalize("The Beatles!"), "beatles");
  EXPECT_EQ(normalize("April   15"), "april 15");
  EXPECT_NE(normalize("April 15"), normalize("April 15th"));
  EXPECT_EQ(normalize("  An apple, a day; THE end.  "), "apple day end");
  EXPECT_EQ(normalize("theory"), "theory");
  EXPECT_EQ(normalize("\xc2\xbf\xc3\x89" "cole\xe2\x80\x94\xc3\x89t\xc3\xa9?"), "\xc3\xa9" "cole\xc3\xa9t\xc3\xa9");
  EXPECT_EQ(normalize(""), "");
}

TEST(Normalize, Idempotent) {
  std::mt19937_64 gen(1);
  const std::vector<std::string> atoms = {"The", " ", "a", "AN", "!", "\xc3\x89", "\xe2\x80\x9c", "x", "\t", "the.", ","};
  for (int trial = 0; trial < 5000; ++trial) {
    std::string s;
    for (std::size_t n = gen() % 12; n > 0; --n) s += atoms[gen() % atoms.size()];
    const std::string once = normalize(s);
    ASSERT_EQ(normalize(once), once) << s;
  }
}

TEST(ExactMatch, PaperTableRowsAreUnmatched) {
  EXPECT_FALSE(exact_match("confetti", example("a", {{"little warmth", "warmth"}})));
  EXPECT_FALSE(exact_match("katherine kiernan maria mulgrew", example("b", {{"kate mulgrew"}})));
  EXPECT_FALSE(exact_match("kennedy lc39b", example("c", {{"florida"}})));
  EXPECT_FALSE(exact_match("james brokenshire", example("d", {{"karen bradley"}})));
}

TEST(ExactMatch, AnyAnswerOfAnyAnnotator) {
  const auto beatles = example("b", {kBeatles});
  EXPECT_TRUE(exact_match("Ringo Starr", beatles));
  EXPECT_EQ(match_annotator("x", example("c", {{"y"}, {}, {"the X!"}})), 2u);
}

TEST(ExactMatch, SymmetricUnderNormalizationRewrites) {
  const auto e = example("e", {{"Kate Mulgrew"}});
  for (const std::string p : {"kate mulgrew", "KATE MULGREW", "the kate, mulgrew.", " kate   mulgrew "}) {
    EXPECT_TRUE(exact_match(p, e)) << p;
    EXPECT_TRUE(exact_match("Kate Mulgrew", example("f", {{p}}))) << p;
  }
}

TEST(SplitAnswers, DelimiterRule) {
  EXPECT_EQ(split_answers("answer: John Lennon answer: Ringo Starr answer: George Harrison answer: Paul McCartney"),
            kBeatles);
  EXPECT_EQ(split_answers("answer: warmth"), std::vector<std::string>{"warmth"});
  EXPECT_EQ(split_answers("no delimiter here"), std::vector<std::string>{"no delimiter here"});
  EXPECT_TRUE(split_answers("answer: answer:  ").empty());
}

TEST(SplitAnswers, InvertsMultiAnswerTarget) {
  std::mt19937_64 gen(2);
  const std::string letters = "abc XYZ.,";
  for (int trial = 0; trial < 2000; ++trial) {
    AnswerList answers;
    for (std::size_t n = 1 + gen() % 5; n > 0; --n) {
      std::string a(1, 'a' + static_cast<char>(gen() % 26));
      for (std::size_t k = gen() % 10; k > 0; --k) a.push_back(letters[gen() % letters.size()]);
      while (a.back() == ' ') a.pop_back();
      answers.push_back(a);
    }
    ASSERT_EQ(split_answers(multi_answer_target(answers)), answers);
  }
}

TEST(RecallMatch, SubsetOfSomeAnnotator) {
  const auto e = example("b", {kBeatles, {"Ringo Starr", "John Lennon", "Paul McCartney", "George Harrison"}});
  const auto full = multi_answer_recall_match(
      "answer: john lennon answer: ringo starr answer: george harrison answer: paul mccartney", e);
  ASSERT_TRUE(full.has_value());
  EXPECT_TRUE(full->matched);
  EXPECT_EQ(full->annotator, 0u);
  const auto partial = multi_answer_recall_match("answer: john lennon", e);
  ASSERT_TRUE(partial.has_value());
  EXPECT_FALSE(partial->matched);
  EXPECT_FALSE(multi_answer_recall_match("x", example("s", {{"x"}, {}})).has_value());
}

TEST(Evaluate, EmRatio) {
  const std::vector<QAExample> data = {example("1", {{"a"}}), example("2", {{"b"}}), example("3", {{"c"}}),
                                       example("4", {{"d"}})};
  const auto report = evaluate({{"1", "a"}, {"2", "x"}, {"3", "C"}, {"4", "y"}}, data, EvalMode::OpenDomainEM);
  EXPECT_EQ(report.evaluated, 4u);
  EXPECT_EQ(report.matched, 2u);
  EXPECT_DOUBLE_EQ(report.aggregate, 50.0);
  EXPECT_EQ(report.summary_line(), "EM: 50.00");
}

TEST(Evaluate, RecallDenominatorExcludesSkipped) {
  const std::vector<QAExample> data = {example("1", {{"a"}, {}}), example("2", {{"b"}, {"b"}}),
                                       example("3", {{"c"}, {"d"}})};
  const auto report = evaluate({{"1", "a"}, {"2", "answer: b"}, {"3", "e"}}, data, EvalMode::MultiAnswerRecall);
  EXPECT_EQ(report.skipped, 1u);
  EXPECT_EQ(report.evaluated, 2u);
  EXPECT_EQ(report.matched, 1u);
  EXPECT_DOUBLE_EQ(report.aggregate, 50.0);
  EXPECT_EQ(report.summary_line(), "Recall: 50.00");
  std::size_t answerable = 0;
  for (const auto& e : data) answerable += is_multi_answerable(e);
  EXPECT_EQ(report.evaluated, answerable);
}

TEST(Evaluate, MissingCountsUnmatchedAndDuplicatesThrow) {
  const std::vector<QAExample> data = {example("1", {{"a"}}), example("2", {{"b"}})};
  const auto report = evaluate({{"1", "a"}}, data, EvalMode::OpenDomainEM);
  EXPECT_EQ(report.missing, 1u);
  EXPECT_EQ(report.evaluated, 2u);
  EXPECT_TRUE(report.per_example[1].missing);
  EXPECT_FALSE(report.per_example[1].matched);
  EXPECT_THROW(evaluate({{"1", "a"}, {"1", "b"}}, data, EvalMode::OpenDomainEM), InvalidArgument);
}

TEST(Evaluate, ReportJsonRoundTrip) {
  const std::vector<QAExample> data = {example("1", {{"a"}}), example("2", {{"b"}})};
  const auto report = evaluate({{"1", "a"}}, data, EvalMode::OpenDomainEM);
  const auto j = report.to_json();
  EXPECT_TRUE(j.contains("em_percent"));
  const auto back = EvalReport::from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.to_json(), j);
}

TEST(Evaluate, HandcraftedCasesMatchReferenceMatcher) {
  std::ifstream in(kData / "metric_cases.jsonl");
  std::vector<QAExample> data;
  std::vector<Prediction> predictions;
  std::vector<nlohmann::json> rows;
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    auto e = example(j.at("id"), j.at("answers").get<std::vector<AnswerList>>());
    e.question = j.at("question");
    data.push_back(e);
    predictions.push_back({j.at("id"), j.at("prediction")});
    rows.push_back(j);
  }
  ASSERT_EQ(rows.size(), 10u);
  const auto em = evaluate(predictions, data, EvalMode::OpenDomainEM);
  const auto recall = evaluate(predictions, data, EvalMode::MultiAnswerRecall);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string& p = predictions[i].prediction;
    const bool expected_em = rows[i].at("em");
    EXPECT_EQ(reference_em(p, data[i]), expected_em) << data[i].id;
    EXPECT_EQ(em.per_example[i].matched, expected_em) << data[i].id;
    const auto ref = reference_recall(p, data[i]);
    const auto& r = recall.per_example[i];
    if (rows[i].at("recall").is_null()) {
      EXPECT_FALSE(ref.has_value()) << data[i].id;
      EXPECT_TRUE(r.skipped) << data[i].id;
    } else {
      const bool expected_recall = rows[i].at("recall");
      ASSERT_TRUE(ref.has_value()) << data[i].id;
      EXPECT_EQ(*ref, expected_recall) << data[i].id;
      EXPECT_FALSE(r.skipped) << data[i].id;
      EXPECT_EQ(r.matched, expected_recall) << data[i].id;
    }
  }
}

TEST(Predictions, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "cbqa_predictions.jsonl";
  {
    std::ofstream out(path);
    out << to_json_line(Prediction{"q1", "paris"}) << '\n' << to_json_line(Prediction{"q2", "answer: a answer: b"}) << '\n';
  }
  const auto loaded = load_predictions(path);
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[1].id, "q2");
  EXPECT_EQ(loaded[1].prediction, "answer: a answer: b");
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace cbqa
