#include "cbqa/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cbqa/counter_rng.hpp"
#include "cbqa/error.hpp"

namespace cbqa {

using nlohmann::json;

std::string_view to_string(Dataset dataset) {
  switch (dataset) {
    case Dataset::NQ:
      return "NQ";
    case Dataset::WQ:
      return "WQ";
    case Dataset::TQA:
      return "TQA";
  }
  return "?";
}

Dataset parse_dataset(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "NQ") return Dataset::NQ;
  if (upper == "WQ") return Dataset::WQ;
  if (upper == "TQA") return Dataset::TQA;
  throw ConfigError("unknown dataset '" + std::string(name) + "' (expected nq, wq or tqa)");
}

namespace {

json parse_object(std::string_view line, const std::string& source, std::size_t lineno) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw SchemaError(source, lineno, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError(source, lineno, "expected a JSON object");
  return j;
}

const std::string& require_string(const json& j, const char* field, const std::string& source, std::size_t lineno) {
  const auto it = j.find(field);
  if (it == j.end()) throw SchemaError(source, lineno, std::string("missing field \"") + field + "\"");
  if (!it->is_string()) throw SchemaError(source, lineno, std::string("field \"") + field + "\" must be a string");
  return it->get_ref<const std::string&>();
}

template <typename Parse>
auto read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<decltype(parse(std::string_view{}, std::string{}, std::size_t{}))> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    out.push_back(parse(line, path.string(), lineno));
  }
  return out;
}

}  // namespace

QAExample parse_qa_line(std::string_view line, Dataset dataset, const std::string& source, std::size_t lineno) {
  const json j = parse_object(line, source, lineno);
  QAExample ex;
  ex.dataset = dataset;
  ex.id = require_string(j, "id", source, lineno);
  ex.question = require_string(j, "question", source, lineno);
  if (ex.question.empty()) throw SchemaError(source, lineno, "field \"question\" must be non-empty");

  const auto answers = j.find("answers");
  if (answers == j.end()) throw SchemaError(source, lineno, "missing field \"answers\"");
  if (!answers->is_array() || answers->empty())
    throw SchemaError(source, lineno, "field \"answers\" must be a non-empty array of answer lists");
  for (const auto& annotation : *answers) {
    if (!annotation.is_array()) throw SchemaError(source, lineno, "field \"answers\" entries must be arrays");
    AnswerList list;
    for (const auto& a : annotation) {
      if (!a.is_string()) throw SchemaError(source, lineno, "field \"answers\" must contain only strings");
      list.push_back(a.get<std::string>());
    }
    ex.annotator_answers.push_back(std::move(list));
  }
  return ex;
}

CorpusDocument parse_corpus_line(std::string_view line, const std::string& source, std::size_t lineno) {
  const json j = parse_object(line, source, lineno);
  CorpusDocument doc;
  doc.doc_id = require_string(j, "doc_id", source, lineno);
  doc.text = require_string(j, "text", source, lineno);
  if (doc.text.empty()) throw SchemaError(source, lineno, "field \"text\" must be non-empty");
  return doc;
}

std::string to_json_line(const QAExample& example) {
  json j = json::object();
  j["id"] = example.id;
  j["question"] = example.question;
  j["answers"] = example.annotator_answers;
  return j.dump();
}

std::vector<QAExample> load_qa_dataset(const std::filesystem::path& path, Dataset dataset) {
  auto examples = read_jsonl(path, [dataset](std::string_view line, const std::string& src, std::size_t n) {
    return parse_qa_line(line, dataset, src, n);
  });
  std::vector<std::string_view> ids;
  for (const auto& e : examples) ids.push_back(e.id);
  std::sort(ids.begin(), ids.end());
  if (const auto dup = std::adjacent_find(ids.begin(), ids.end()); dup != ids.end())
    throw SchemaError(path.string(), 0, "duplicate id \"" + std::string(*dup) + "\"");
  return examples;
}

std::vector<CorpusDocument> load_corpus(const std::filesystem::path& path) {
  return read_jsonl(path, [](std::string_view line, const std::string& src, std::size_t n) {
    return parse_corpus_line(line, src, n);
  });
}

HoldoutSplit make_holdout_split(const std::vector<QAExample>& examples, double fraction, std::uint64_t seed) {
  if (examples.empty()) throw InvalidArgument("make_holdout_split: empty input");
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidArgument("make_holdout_split: fraction must be in (0, 1)");
  const auto n = examples.size();
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n_val < 1) throw InvalidArgument("make_holdout_split: fraction * |examples| < 1");

  // Partial Fisher-Yates picks the held-out indices.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const CounterRng rng(seed, 0x401d07);
  for (std::size_t i = 0; i < n_val; ++i) {
    const auto j = i + rng.below(n - i, i);
    std::swap(order[i], order[j]);
  }
  std::vector<bool> held(n, false);
  for (std::size_t i = 0; i < n_val; ++i) held[order[i]] = true;

  HoldoutSplit split;
  split.train.reserve(n - n_val);
  split.validation.reserve(n_val);
  for (std::size_t i = 0; i < n; ++i) (held[i] ? split.validation : split.train).push_back(examples[i]);
  return split;
}

std::size_t whitespace_token_count(std::string_view text) {
  std::size_t count = 0;
  bool in_token = false;
  for (const char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_token) ++count;
    in_token = !space;
  }
  return count;
}

std::optional<std::string> open_domain_target(const QAExample& example) {
  for (const auto& annotation : example.annotator_answers) {
    if (annotation.empty()) continue;
    const std::string& first = annotation.front();
    if (whitespace_token_count(first) > kMaxOpenDomainAnswerTokens) return std::nullopt;
    return first;
  }
  return std::nullopt;
}

std::string multi_answer_target(const AnswerList& answers) {
  std::string out;
  for (const auto& a : answers) {
    if (!out.empty()) out += ' ';
    out += kAnswerDelimiter;
    out += ' ';
    out += a;
  }
  return out;
}

std::string multi_answer_target(const QAExample& example, std::size_t annotator) {
  if (annotator >= example.annotator_answers.size())
    throw InvalidArgument("multi_answer_target: annotator index out of range");
  const auto& answers = example.annotator_answers[annotator];
  if (answers.empty()) throw InvalidArgument("multi_answer_target: selected annotation is empty");
  return multi_answer_target(answers);
}

bool is_multi_answerable(const QAExample& example) {
  const auto non_null = std::count_if(example.annotator_answers.begin(), example.annotator_answers.end(),
                                      [](const AnswerList& a) { return !a.empty(); });
  return non_null >= 2;
}

namespace {

constexpr std::array<std::string_view, 44> kAbbreviations = {
    "Mr",   "Mrs",  "Ms",   "Dr",   "Prof", "Sr",   "Jr",   "St",   "Mt",   "Ft",   "Gen",
    "Col",  "Lt",   "Sgt",  "Capt", "Cmdr", "Adm",  "Gov",  "Sen",  "Rep",  "Rev",  "Hon",
    "Inc",  "Ltd",  "Co",   "Corp", "vs",   "etc",  "e.g",  "i.e",  "cf",   "al",   "No",
    "Jan",  "Feb",  "Mar",  "Apr",  "Aug",  "Sept", "Sep",  "Oct",  "Nov",  "Dec",  "approx"};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }

// Word immediately before position `dot` (exclusive), without leading quotes.
std::string_view word_before(std::string_view text, std::size_t dot) {
  std::size_t begin = dot;
  while (begin > 0 && !is_space(text[begin - 1])) --begin;
  while (begin < dot && (text[begin] == '"' || text[begin] == '(' || text[begin] == '\'')) ++begin;
  return text.substr(begin, dot - begin);
}

}  // namespace

std::vector<SentenceRecord> sentence_split(const CorpusDocument& doc) {
  const std::string_view text = doc.text;
  std::vector<SentenceRecord> out;
  auto emit = [&](std::size_t begin, std::size_t end) {
    while (begin < end && is_space(text[begin])) ++begin;
    while (end > begin && is_space(text[end - 1])) --end;
    if (begin < end) out.push_back({doc.doc_id, out.size(), std::string(text.substr(begin, end - begin))});
  };

  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c != '.' && c != '!' && c != '?') continue;
    std::size_t end = i + 1;
    while (end < text.size() && is_closer(text[end])) ++end;
    std::size_t next = end;
    while (next < text.size() && is_space(text[next])) ++next;
    if (next == end || next >= text.size()) continue;
    if (!std::isupper(static_cast<unsigned char>(text[next]))) continue;
    if (c == '.') {
      const auto word = word_before(text, i);
      if (std::find(kAbbreviations.begin(), kAbbreviations.end(), word) != kAbbreviations.end()) continue;
    }
    emit(start, end);
    start = end;
    i = end - 1;
  }
  emit(start, text.size());
  return out;
}

}  // namespace cbqa
