#include "cbqa/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <unordered_map>

#include "cbqa/error.hpp"
#include "cbqa/unicode.hpp"

namespace cbqa {

std::string normalize(std::string_view text) {
  const std::string lowered = unicode::to_lower(text);

  // Strip punctuation and split on whitespace in one pass.
  std::vector<std::string> tokens;
  std::string current;
  for (std::size_t pos = 0; pos < lowered.size();) {
    const auto d = unicode::decode_at(lowered, pos);
    if (d.valid && unicode::is_whitespace(d.codepoint)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else if (!(d.valid && unicode::is_punctuation(d.codepoint))) {
      current.append(lowered, pos, d.length);
    }
    pos += d.length;
  }
  if (!current.empty()) tokens.push_back(std::move(current));

  std::string out;
  for (const auto& t : tokens) {
    if (t == "a" || t == "an" || t == "the") continue;
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::optional<std::size_t> match_annotator(std::string_view prediction, const QAExample& example) {
  const std::string p = normalize(prediction);
  for (std::size_t k = 0; k < example.annotator_answers.size(); ++k)
    for (const auto& answer : example.annotator_answers[k])
      if (normalize(answer) == p) return k;
  return std::nullopt;
}

bool exact_match(std::string_view prediction, const QAExample& example) {
  return match_annotator(prediction, example).has_value();
}

namespace {

std::string_view trim(std::string_view s) {
  const auto space = [](char c) { return c == ' ' || (c >= '\t' && c <= '\r'); };
  while (!s.empty() && space(s.front())) s.remove_prefix(1);
  while (!s.empty() && space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace

std::vector<std::string> split_answers(std::string_view prediction) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = prediction.find(kAnswerDelimiter, pos);
    const auto piece = trim(prediction.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
    if (!piece.empty()) out.emplace_back(piece);
    if (next == std::string_view::npos) break;
    pos = next + kAnswerDelimiter.size();
  }
  return out;
}

std::optional<RecallMatch> multi_answer_recall_match(std::string_view prediction, const QAExample& example) {
  if (!is_multi_answerable(example)) return std::nullopt;
  std::set<std::string> predicted;
  for (const auto& a : split_answers(prediction)) predicted.insert(normalize(a));
  for (std::size_t k = 0; k < example.annotator_answers.size(); ++k) {
    const auto& answers = example.annotator_answers[k];
    if (answers.empty()) continue;
    const bool covered = std::all_of(answers.begin(), answers.end(),
                                     [&](const std::string& a) { return predicted.contains(normalize(a)); });
    if (covered) return RecallMatch{true, k};
  }
  return RecallMatch{false, std::nullopt};
}

std::string_view to_string(EvalMode mode) {
  return mode == EvalMode::OpenDomainEM ? "em" : "recall";
}

EvalMode parse_eval_mode(std::string_view name) {
  if (name == "em") return EvalMode::OpenDomainEM;
  if (name == "recall") return EvalMode::MultiAnswerRecall;
  throw ConfigError("unknown evaluation mode '" + std::string(name) + "' (expected em or recall)");
}

EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<QAExample>& dataset, EvalMode mode) {
  std::unordered_map<std::string_view, std::string_view> by_id;
  for (const auto& p : predictions)
    if (!by_id.emplace(p.id, p.prediction).second) throw InvalidArgument("duplicate prediction id \"" + p.id + "\"");

  EvalReport report;
  report.mode = mode;
  for (const auto& ex : dataset) {
    ExampleOutcome o;
    o.id = ex.id;
    const auto it = by_id.find(ex.id);
    if (it != by_id.end()) o.prediction = std::string(it->second);
    o.missing = !o.prediction.has_value();
    const std::string_view pred = o.prediction ? std::string_view(*o.prediction) : std::string_view{};

    if (mode == EvalMode::OpenDomainEM) {
      if (!o.missing) o.matched_annotator = match_annotator(pred, ex);
      o.matched = o.matched_annotator.has_value();
    } else {
      if (!is_multi_answerable(ex)) {
        o.skipped = true;
      } else if (!o.missing) {
        const auto m = multi_answer_recall_match(pred, ex);
        o.matched = m->matched;
        o.matched_annotator = m->annotator;
      }
    }
    if (o.skipped) {
      ++report.skipped;
    } else {
      ++report.evaluated;
      if (o.matched) ++report.matched;
    }
    if (o.missing) ++report.missing;
    report.per_example.push_back(std::move(o));
  }
  report.aggregate = report.evaluated == 0 ? 0.0 : 100.0 * static_cast<double>(report.matched) /
                                                       static_cast<double>(report.evaluated);
  return report;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = to_string(mode);
  j[mode == EvalMode::OpenDomainEM ? "em_percent" : "recall_percent"] = aggregate;
  j["evaluated"] = evaluated;
  j["skipped"] = skipped;
  j["matched"] = matched;
  j["missing"] = missing;
  auto& rows = j["per_example"] = nlohmann::ordered_json::array();
  for (const auto& o : per_example) {
    nlohmann::ordered_json r;
    r["id"] = o.id;
    r["prediction"] = o.prediction ? nlohmann::ordered_json(*o.prediction) : nlohmann::ordered_json(nullptr);
    r["matched"] = o.matched;
    r["matched_annotator"] =
        o.matched_annotator ? nlohmann::ordered_json(*o.matched_annotator) : nlohmann::ordered_json(nullptr);
    if (o.skipped) r["skipped"] = true;
    if (o.missing) r["missing"] = true;
    rows.push_back(std::move(r));
  }
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.mode = parse_eval_mode(j.at("mode").get<std::string>());
  r.aggregate = j.at(r.mode == EvalMode::OpenDomainEM ? "em_percent" : "recall_percent").get<double>();
  r.evaluated = j.at("evaluated").get<std::size_t>();
  r.skipped = j.at("skipped").get<std::size_t>();
  r.matched = j.at("matched").get<std::size_t>();
  r.missing = j.value("missing", std::size_t{0});
  for (const auto& row : j.at("per_example")) {
    ExampleOutcome o;
    o.id = row.at("id").get<std::string>();
    if (!row.at("prediction").is_null()) o.prediction = row.at("prediction").get<std::string>();
    o.matched = row.at("matched").get<bool>();
    if (!row.at("matched_annotator").is_null()) o.matched_annotator = row.at("matched_annotator").get<std::size_t>();
    o.skipped = row.value("skipped", false);
    o.missing = row.value("missing", false);
    r.per_example.push_back(std::move(o));
  }
  return r;
}

std::string EvalReport::summary_line() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s: %.2f", mode == EvalMode::OpenDomainEM ? "EM" : "Recall", aggregate);
  return buf;
}

std::vector<Prediction> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(path.string(), lineno, std::string("invalid JSON: ") + e.what());
    }
    for (const char* field : {"id", "prediction"})
      if (!j.contains(field) || !j[field].is_string())
        throw SchemaError(path.string(), lineno, std::string("field \"") + field + "\" must be a string");
    out.push_back({j["id"].get<std::string>(), j["prediction"].get<std::string>()});
  }
  return out;
}

std::string to_json_line(const Prediction& p) {
  nlohmann::ordered_json j;
  j["id"] = p.id;
  j["prediction"] = p.prediction;
  return j.dump();
}

}  // namespace cbqa
