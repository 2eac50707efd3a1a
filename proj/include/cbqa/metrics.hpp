#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cbqa/corpus.hpp"

namespace cbqa {

// Lowercase, drop Unicode punctuation (categories P*), drop the standalone
// articles a/an/the, collapse whitespace runs and trim.
std::string normalize(std::string_view text);

// Index of the first annotator holding an answer equal to the prediction
// after normalization.
std::optional<std::size_t> match_annotator(std::string_view prediction, const QAExample& example);
bool exact_match(std::string_view prediction, const QAExample& example);

// Pieces between literal "answer:" delimiters, trimmed, empties dropped. A
// prediction without the delimiter is one answer.
std::vector<std::string> split_answers(std::string_view prediction);

struct RecallMatch {
  bool matched = false;
  std::optional<std::size_t> annotator;
};

// Nothing when the example has fewer than two non-null annotations; otherwise
// matched iff some annotator's normalized answer set is a subset of the
// normalized predicted set.
std::optional<RecallMatch> multi_answer_recall_match(std::string_view prediction, const QAExample& example);

enum class EvalMode { OpenDomainEM, MultiAnswerRecall };

std::string_view to_string(EvalMode mode);
EvalMode parse_eval_mode(std::string_view name);

struct Prediction {
  std::string id;
  std::string prediction;
};

struct ExampleOutcome {
  std::string id;
  std::optional<std::string> prediction;  // empty when missing
  bool matched = false;
  std::optional<std::size_t> matched_annotator;
  bool skipped = false;
  bool missing = false;
};

struct EvalReport {
  EvalMode mode = EvalMode::OpenDomainEM;
  std::vector<ExampleOutcome> per_example;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
  std::size_t matched = 0;
  std::size_t missing = 0;
  double aggregate = 0.0;  // percent

  std::size_t unmatched() const { return evaluated - matched; }
  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  // "EM: 50.00" or "Recall: 50.00"
  std::string summary_line() const;
};

// Scores every dataset example. Missing predictions count as unmatched and
// are flagged; duplicate prediction ids throw.
EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<QAExample>& dataset, EvalMode mode);

// Predictions JSONL {"id","prediction"}.
std::vector<Prediction> load_predictions(const std::filesystem::path& path);
std::string to_json_line(const Prediction& prediction);

}  // namespace cbqa
