#include "cbqa/audit.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "cbqa/counter_rng.hpp"
#include "cbqa/error.hpp"

namespace cbqa {
namespace {

constexpr std::array<std::string_view, 3> kFlagNames = {"HighOverlap", "GoldContainsPred", "PredContainsGold"};
constexpr std::array<std::string_view, kCategoryCount> kCategoryNames = {"TrueNegative", "PhrasingMismatch",
                                                                          "IncompleteAnnotation", "Unanswerable"};
constexpr std::uint64_t kSampleStream = 0xa0d17;

std::set<std::string> token_set(std::string_view text) {
  std::set<std::string> out;
  std::istringstream in(normalize(text));
  for (std::string tok; in >> tok;) out.insert(tok);
  return out;
}

bool contains(const std::string& haystack, const std::string& needle) {
  return !needle.empty() && haystack.find(needle) != std::string::npos;
}

std::string escape_cell(std::string_view s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_cell(std::string_view s, std::size_t line) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw SchemaError("tsv", line, "dangling escape");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      default: throw SchemaError("tsv", line, std::string("unknown escape \\") + s[i]);
    }
  }
  return out;
}

constexpr std::array<std::string_view, 7> kTsvColumns = {"example_id", "question", "targets", "prediction",
                                                         "category",   "reference", "labeled_at"};

}  // namespace

std::string_view to_string(AuditFlag flag) { return kFlagNames[static_cast<std::size_t>(flag)]; }

AuditFlag parse_audit_flag(std::string_view name) {
  for (std::size_t i = 0; i < kFlagNames.size(); ++i)
    if (kFlagNames[i] == name) return static_cast<AuditFlag>(i);
  throw InvalidArgument("unknown audit flag '" + std::string(name) + "'");
}

std::string_view to_string(FalseNegativeCategory category) {
  return kCategoryNames[static_cast<std::size_t>(category)];
}

FalseNegativeCategory parse_category(std::string_view name) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i)
    if (kCategoryNames[i] == name) return kCategories[i];
  throw InvalidArgument("unknown category '" + std::string(name) +
                        "' (expected TrueNegative, PhrasingMismatch, IncompleteAnnotation or Unanswerable)");
}

double token_jaccard(std::string_view a, std::string_view b) {
  const auto sa = token_set(a), sb = token_set(b);
  if (sa.empty() && sb.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& t : sa) common += sb.count(t);
  return static_cast<double>(common) / static_cast<double>(sa.size() + sb.size() - common);
}

std::vector<AuditFlag> audit_flags(std::string_view prediction, const std::vector<std::vector<std::string>>& gold) {
  const std::string pred = normalize(prediction);
  bool overlap = false, gold_has_pred = false, pred_has_gold = false;
  for (const auto& annotator : gold)
    for (const auto& answer : annotator) {
      const std::string g = normalize(answer);
      overlap = overlap || token_jaccard(prediction, answer) >= kHighOverlapJaccard;
      gold_has_pred = gold_has_pred || contains(g, pred);
      pred_has_gold = pred_has_gold || contains(pred, g);
    }
  std::vector<AuditFlag> out;
  if (overlap) out.push_back(AuditFlag::HighOverlap);
  if (gold_has_pred) out.push_back(AuditFlag::GoldContainsPred);
  if (pred_has_gold) out.push_back(AuditFlag::PredContainsGold);
  return out;
}

nlohmann::ordered_json AuditRecord::to_json() const {
  nlohmann::ordered_json j;
  j["example_id"] = example_id;
  j["question"] = question;
  j["gold"] = gold;
  j["normalized_gold"] = nlohmann::ordered_json::array();
  for (const auto& annotator : gold) {
    auto list = nlohmann::ordered_json::array();
    for (const auto& a : annotator) list.push_back(normalize(a));
    j["normalized_gold"].push_back(list);
  }
  j["prediction"] = prediction;
  j["normalized_prediction"] = normalize(prediction);
  j["auto_flags"] = nlohmann::json::array();
  for (const auto f : auto_flags) j["auto_flags"].push_back(to_string(f));
  j["label"] = label ? nlohmann::json(to_string(*label)) : nlohmann::json(nullptr);
  j["reference"] = reference ? nlohmann::json(*reference) : nlohmann::json(nullptr);
  j["labeled_at"] = labeled_at ? nlohmann::json(*labeled_at) : nlohmann::json(nullptr);
  return j;
}

AuditRecord AuditRecord::from_json(const nlohmann::json& j) {
  AuditRecord r;
  r.example_id = j.at("example_id").get<std::string>();
  r.question = j.at("question").get<std::string>();
  r.gold = j.at("gold").get<std::vector<std::vector<std::string>>>();
  r.prediction = j.at("prediction").get<std::string>();
  for (const auto& f : j.at("auto_flags")) r.auto_flags.push_back(parse_audit_flag(f.get<std::string>()));
  if (j.contains("label") && !j["label"].is_null()) r.label = parse_category(j["label"].get<std::string>());
  if (j.contains("reference") && !j["reference"].is_null()) r.reference = j["reference"].get<std::string>();
  if (j.contains("labeled_at") && !j["labeled_at"].is_null()) r.labeled_at = j["labeled_at"].get<std::string>();
  return r;
}

std::vector<AuditRecord> surface_candidates(const EvalReport& report, const std::vector<QAExample>& dataset,
                                            std::size_t sample_size, std::uint64_t seed) {
  std::map<std::string, const QAExample*> by_id;
  for (const auto& e : dataset) by_id[e.id] = &e;
  std::vector<const ExampleOutcome*> pool;
  for (const auto& o : report.per_example)
    if (!o.skipped && !o.matched && o.prediction) pool.push_back(&o);
  if (sample_size == 0) throw InvalidArgument("sample size must be positive");
  if (pool.size() < sample_size)
    throw InvalidArgument("report has " + std::to_string(pool.size()) + " unmatched predictions, fewer than the " +
                          std::to_string(sample_size) + " requested");

  const CounterRng rng(seed, kSampleStream);
  for (std::size_t i = 0; i < sample_size; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i, i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(sample_size);

  std::vector<AuditRecord> out;
  for (const auto* o : pool) {
    const auto it = by_id.find(o->id);
    if (it == by_id.end()) throw InvalidArgument("report example " + o->id + " is not in the dataset");
    AuditRecord r;
    r.example_id = o->id;
    r.question = it->second->question;
    r.gold = it->second->annotator_answers;
    r.prediction = *o->prediction;
    r.auto_flags = audit_flags(r.prediction, r.gold);
    out.push_back(std::move(r));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.example_id < b.example_id; });
  return out;
}

CategorySummary CategorySummary::from_counts(const std::array<std::size_t, kCategoryCount>& counts) {
  CategorySummary s;
  s.counts = counts;
  for (const std::size_t c : counts) s.labeled += c;
  return s;
}

double CategorySummary::fraction(FalseNegativeCategory c) const {
  if (labeled == 0) throw InvalidArgument("no labeled records");
  return static_cast<double>(count(c)) / static_cast<double>(labeled);
}

double CategorySummary::percentage(FalseNegativeCategory c) const {
  return std::round(1000.0 * fraction(c)) / 10.0;
}

nlohmann::ordered_json CategorySummary::to_json() const {
  nlohmann::ordered_json j;
  j["labeled"] = labeled;
  j["counts"] = nlohmann::ordered_json::object();
  j["percentages"] = nlohmann::ordered_json::object();
  for (const auto c : kCategories) {
    j["counts"][std::string(to_string(c))] = count(c);
    j["percentages"][std::string(to_string(c))] = labeled == 0 ? 0.0 : percentage(c);
  }
  return j;
}

double adjusted_accuracy(std::size_t base_correct, std::size_t base_total, const CategoryFractions& p) {
  if (base_total <= base_correct)
    throw InvalidArgument("adjusted accuracy needs base_total > base_correct");
  for (const double f : {p.phrasing, p.incomplete, p.unanswerable})
    if (!(f >= 0.0 && f <= 1.0)) throw InvalidArgument("category fractions must lie in [0, 1]");
  if (p.phrasing + p.incomplete + p.unanswerable > 1.0 + 1e-12)
    throw InvalidArgument("category fractions sum above 1");
  const double incorrect = static_cast<double>(base_total - base_correct);
  const double denominator = static_cast<double>(base_total) - incorrect * p.unanswerable;
  if (denominator <= 0.0) throw NumericError("every example removed as unanswerable");
  return 100.0 * (static_cast<double>(base_correct) + incorrect * (p.phrasing + p.incomplete)) / denominator;
}

double adjusted_accuracy(std::size_t base_correct, std::size_t base_total, const CategorySummary& summary) {
  return adjusted_accuracy(base_correct, base_total,
                           CategoryFractions{summary.fraction(FalseNegativeCategory::PhrasingMismatch),
                            summary.fraction(FalseNegativeCategory::IncompleteAnnotation),
                            summary.fraction(FalseNegativeCategory::Unanswerable)});
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

AuditStore::AuditStore() : clock_(utc_timestamp) {}

AuditStore::AuditStore(std::filesystem::path path, Clock clock)
    : path_(std::move(path)), clock_(clock ? std::move(clock) : Clock(utc_timestamp)) {
  if (!std::filesystem::exists(*path_)) return;
  std::ifstream in(*path_, std::ios::binary);
  if (!in) throw IoError("cannot read audit journal " + path_->string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t begin = 0, line = 0;
  while (begin < text.size()) {
    const std::size_t end = text.find('\n', begin);
    if (end == std::string::npos) {
      // Torn final append: drop it so later appends start on a clean line.
      std::filesystem::resize_file(*path_, begin);
      break;
    }
    ++line;
    const std::string_view body(text.data() + begin, end - begin);
    begin = end + 1;
    nlohmann::json entry;
    try {
      entry = nlohmann::json::parse(body);
      apply(entry);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(path_->string(), line, e.what());
    } catch (const Error& e) {
      throw SchemaError(path_->string(), line, e.what());
    }
  }
}

void AuditStore::set_clock(Clock clock) {
  std::unique_lock lock(mutex_);
  clock_ = std::move(clock);
}

void AuditStore::apply(const nlohmann::json& entry) {
  const auto revision = entry.at("revision").get<std::uint64_t>();
  if (revision != revision_ + 1)
    throw InvalidArgument("revision " + std::to_string(revision) + " follows " + std::to_string(revision_));
  const auto op = entry.at("op").get<std::string>();
  if (op == "add") {
    std::vector<AuditRecord> incoming;
    for (const auto& r : entry.at("records")) incoming.push_back(AuditRecord::from_json(r));
    std::set<std::string> seen;
    for (const auto& r : incoming)
      if (index_.count(r.example_id) || !seen.insert(r.example_id).second)
        throw InvalidArgument("duplicate audit record " + r.example_id);
    for (auto& r : incoming) {
      index_[r.example_id] = records_.size();
      records_.push_back(std::move(r));
    }
  } else if (op == "label") {
    const auto id = entry.at("example_id").get<std::string>();
    const auto it = index_.find(id);
    if (it == index_.end()) throw UnknownRecord(id);
    auto& r = records_[it->second];
    r.label = parse_category(entry.at("label").get<std::string>());
    r.reference = entry.at("reference").is_null() ? std::nullopt
                                                  : std::optional(entry["reference"].get<std::string>());
    r.labeled_at = entry.at("labeled_at").get<std::string>();
  } else {
    throw InvalidArgument("unknown journal op '" + op + "'");
  }
  revision_ = revision;
}

void AuditStore::append(const nlohmann::json& entry) {
  if (!path_) return;
  const std::string line = entry.dump() + "\n";
  const int fd = ::open(path_->c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
  if (fd < 0) throw IoError("cannot open audit journal " + path_->string());
  std::size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = ::write(fd, line.data() + written, line.size() - written);
    if (n <= 0) {
      ::close(fd);
      throw IoError("write to audit journal failed");
    }
    written += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (!synced) throw IoError("fsync of audit journal failed");
}

std::uint64_t AuditStore::add(const std::vector<AuditRecord>& records) {
  nlohmann::json entry;
  entry["op"] = "add";
  entry["records"] = nlohmann::json::array();
  for (const auto& r : records) entry["records"].push_back(nlohmann::json::parse(r.to_json().dump()));
  std::unique_lock lock(mutex_);
  entry["revision"] = revision_ + 1;
  auto staged_records = records_;
  auto staged_index = index_;
  const auto staged_revision = revision_;
  apply(entry);
  try {
    append(entry);
  } catch (...) {
    records_ = std::move(staged_records);
    index_ = std::move(staged_index);
    revision_ = staged_revision;
    throw;
  }
  return revision_;
}

std::uint64_t AuditStore::record_label(const std::string& example_id, FalseNegativeCategory label,
                                       std::optional<std::string> reference, bool overwrite) {
  if (reference && reference->empty()) reference.reset();
  std::unique_lock lock(mutex_);
  const auto it = index_.find(example_id);
  if (it == index_.end()) throw UnknownRecord(example_id);
  const auto& current = records_[it->second];
  if (current.label && !overwrite)
    throw LabelConflict("record " + example_id + " already labeled " + std::string(to_string(*current.label)) +
                        " at revision " + std::to_string(revision_));
  nlohmann::json entry;
  entry["revision"] = revision_ + 1;
  entry["op"] = "label";
  entry["example_id"] = example_id;
  entry["label"] = to_string(label);
  entry["reference"] = reference ? nlohmann::json(*reference) : nlohmann::json(nullptr);
  entry["labeled_at"] = clock_();
  append(entry);
  apply(entry);
  return revision_;
}

std::uint64_t AuditStore::revision() const {
  std::shared_lock lock(mutex_);
  return revision_;
}

std::optional<AuditRecord> AuditStore::get(const std::string& example_id) const {
  std::shared_lock lock(mutex_);
  const auto it = index_.find(example_id);
  if (it == index_.end()) return std::nullopt;
  return records_[it->second];
}

std::vector<AuditRecord> AuditStore::records() const {
  std::shared_lock lock(mutex_);
  return records_;
}

std::vector<AuditRecord> AuditStore::queue() const {
  std::shared_lock lock(mutex_);
  std::vector<AuditRecord> out;
  for (const auto& r : records_)
    if (!r.label) out.push_back(r);
  return out;
}

std::pair<std::uint64_t, CategorySummary> AuditStore::snapshot_counts() const {
  std::shared_lock lock(mutex_);
  std::array<std::size_t, kCategoryCount> counts{};
  for (const auto& r : records_)
    if (r.label) ++counts[static_cast<std::size_t>(*r.label)];
  return {revision_, CategorySummary::from_counts(counts)};
}

CategorySummary AuditStore::summary() const {
  auto summary = snapshot_counts().second;
  if (summary.labeled == 0) throw InvalidArgument("category summary needs at least one labeled record");
  return summary;
}

void export_audit(const AuditStore& store, const std::filesystem::path& path) {
  auto records = store.records();
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.example_id < b.example_id; });
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < kTsvColumns.size(); ++i) out << (i ? "\t" : "") << kTsvColumns[i];
  out << '\n';
  for (const auto& r : records) {
    const std::array<std::string, 7> cells = {r.example_id,
                                              r.question,
                                              nlohmann::json(r.gold).dump(),
                                              r.prediction,
                                              r.label ? std::string(to_string(*r.label)) : "",
                                              r.reference.value_or(""),
                                              r.labeled_at.value_or("")};
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "\t" : "") << escape_cell(cells[i]);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<AuditRecord> import_audit(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string header;
  std::getline(in, header);
  std::string expected;
  for (std::size_t i = 0; i < kTsvColumns.size(); ++i) expected += (i ? "\t" : "") + std::string(kTsvColumns[i]);
  if (header != expected) throw SchemaError(path.string(), 1, "unexpected header");
  std::vector<AuditRecord> out;
  std::size_t line_no = 1;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    std::vector<std::string> cells;
    std::size_t begin = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', begin);
      cells.push_back(unescape_cell(std::string_view(line).substr(begin, tab - begin), line_no));
      if (tab == std::string::npos) break;
      begin = tab + 1;
    }
    if (cells.size() != kTsvColumns.size())
      throw SchemaError(path.string(), line_no, "expected 7 cells, found " + std::to_string(cells.size()));
    AuditRecord r;
    r.example_id = cells[0];
    r.question = cells[1];
    try {
      r.gold = nlohmann::json::parse(cells[2]).get<std::vector<std::vector<std::string>>>();
      if (!cells[4].empty()) r.label = parse_category(cells[4]);
    } catch (const std::exception& e) {
      throw SchemaError(path.string(), line_no, e.what());
    }
    r.prediction = cells[3];
    if (!cells[5].empty()) r.reference = cells[5];
    if (!cells[6].empty()) r.labeled_at = cells[6];
    r.auto_flags = audit_flags(r.prediction, r.gold);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cbqa
