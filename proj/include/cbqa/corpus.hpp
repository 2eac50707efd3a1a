#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cbqa {

enum class Dataset { NQ, WQ, TQA };

std::string_view to_string(Dataset dataset);
Dataset parse_dataset(std::string_view name);

using AnswerList = std::vector<std::string>;

// One question with the gold answers of every annotator. An empty inner list
// is a null annotation. WQ and TQA are stored as a single annotator.
struct QAExample {
  std::string id;
  std::string question;
  std::vector<AnswerList> annotator_answers;
  Dataset dataset = Dataset::NQ;
};

struct CorpusDocument {
  std::string doc_id;
  std::string text;
};

struct SentenceRecord {
  std::string doc_id;
  std::size_t index = 0;
  std::string text;
};

// Reads the canonical QA JSONL schema {"id","question","answers":[[...],...]}.
// Throws SchemaError naming the line and field; IoError if the file is missing.
std::vector<QAExample> load_qa_dataset(const std::filesystem::path& path, Dataset dataset);
std::vector<CorpusDocument> load_corpus(const std::filesystem::path& path);

// Parses one line of each schema; `line` is only used in diagnostics.
QAExample parse_qa_line(std::string_view json_line, Dataset dataset, const std::string& source = "<memory>",
                        std::size_t line = 1);
CorpusDocument parse_corpus_line(std::string_view json_line, const std::string& source = "<memory>",
                                 std::size_t line = 1);
std::string to_json_line(const QAExample& example);

struct HoldoutSplit {
  std::vector<QAExample> train;
  std::vector<QAExample> validation;
};

// Deterministic partition with |validation| = round(fraction * n). Both sides
// keep the input's relative order.
HoldoutSplit make_holdout_split(const std::vector<QAExample>& examples, double fraction, std::uint64_t seed);

// First answer of the first non-null annotator, or nothing when every
// annotation is null or that answer is longer than five whitespace tokens.
std::optional<std::string> open_domain_target(const QAExample& example);

inline constexpr std::size_t kMaxOpenDomainAnswerTokens = 5;
inline constexpr std::string_view kAnswerDelimiter = "answer:";

// "answer: A1 answer: A2 ..." in the annotator's order.
std::string multi_answer_target(const QAExample& example, std::size_t annotator);
std::string multi_answer_target(const AnswerList& answers);

// At least two annotators gave a non-empty answer list.
bool is_multi_answerable(const QAExample& example);

std::size_t whitespace_token_count(std::string_view text);

// Splits on terminal punctuation (. ! ?), optionally followed by closing
// quotes or brackets, then whitespace and an uppercase ASCII letter. Tokens in
// the abbreviation list never end a sentence.
std::vector<SentenceRecord> sentence_split(const CorpusDocument& doc);

}  // namespace cbqa
