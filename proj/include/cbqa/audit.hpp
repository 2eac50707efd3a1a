#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cbqa/corpus.hpp"
#include "cbqa/error.hpp"
#include "cbqa/metrics.hpp"

namespace cbqa {

enum class AuditFlag { HighOverlap, GoldContainsPred, PredContainsGold };

enum class FalseNegativeCategory { TrueNegative, PhrasingMismatch, IncompleteAnnotation, Unanswerable };
inline constexpr std::size_t kCategoryCount = 4;
inline constexpr std::array<FalseNegativeCategory, kCategoryCount> kCategories = {
    FalseNegativeCategory::TrueNegative, FalseNegativeCategory::PhrasingMismatch,
    FalseNegativeCategory::IncompleteAnnotation, FalseNegativeCategory::Unanswerable};

std::string_view to_string(AuditFlag flag);
AuditFlag parse_audit_flag(std::string_view name);
std::string_view to_string(FalseNegativeCategory category);
// Throws InvalidArgument on an unknown name.
FalseNegativeCategory parse_category(std::string_view name);

inline constexpr double kHighOverlapJaccard = 0.5;

// Jaccard similarity of the normalized token sets; 0 when both are empty.
double token_jaccard(std::string_view a, std::string_view b);

// Flags against every gold answer of every annotator, in enum order.
std::vector<AuditFlag> audit_flags(std::string_view prediction, const std::vector<std::vector<std::string>>& gold);

struct AuditRecord {
  std::string example_id;
  std::string question;
  std::vector<std::vector<std::string>> gold;
  std::string prediction;
  std::vector<AuditFlag> auto_flags;
  std::optional<FalseNegativeCategory> label;
  std::optional<std::string> reference;
  std::optional<std::string> labeled_at;

  nlohmann::ordered_json to_json() const;
  static AuditRecord from_json(const nlohmann::json& j);
  bool operator==(const AuditRecord&) const = default;
};

// Uniform sample, without replacement, of the report's evaluated unmatched
// examples that carry a prediction; returned in example_id order.
std::vector<AuditRecord> surface_candidates(const EvalReport& report, const std::vector<QAExample>& dataset,
                                            std::size_t sample_size, std::uint64_t seed);

struct CategorySummary {
  std::array<std::size_t, kCategoryCount> counts{};
  std::size_t labeled = 0;

  static CategorySummary from_counts(const std::array<std::size_t, kCategoryCount>& counts);
  std::size_t count(FalseNegativeCategory c) const { return counts[static_cast<std::size_t>(c)]; }
  double fraction(FalseNegativeCategory c) const;
  // Percentage rounded to one decimal.
  double percentage(FalseNegativeCategory c) const;
  nlohmann::ordered_json to_json() const;
};

struct CategoryFractions {
  double phrasing = 0.0;
  double incomplete = 0.0;
  double unanswerable = 0.0;
};

// Counts phrasing and incomplete-annotation fractions of the incorrect
// answers as correct and removes the unanswerable fraction from the
// denominator, in percent.
double adjusted_accuracy(std::size_t base_correct, std::size_t base_total, const CategoryFractions& p);
// Uses the summary's exact count fractions.
double adjusted_accuracy(std::size_t base_correct, std::size_t base_total, const CategorySummary& summary);

class LabelConflict : public Error {
 public:
  explicit LabelConflict(const std::string& message) : Error("label_conflict", message) {}
};

class UnknownRecord : public Error {
 public:
  explicit UnknownRecord(const std::string& id) : Error("unknown_record", "no audit record " + id) {}
};

// Append-only journal of audit records and labels. Every mutation is one
// fsynced JSON line tagged with the revision it produces; opening replays the
// journal and ignores a torn final line. Readers share a lock, writers hold
// it exclusively.
class AuditStore {
 public:
  using Clock = std::function<std::string()>;

  // In-memory store.
  AuditStore();
  // Replays `path` if it exists, otherwise starts an empty journal there.
  explicit AuditStore(std::filesystem::path path, Clock clock = {});

  AuditStore(const AuditStore&) = delete;
  AuditStore& operator=(const AuditStore&) = delete;

  void set_clock(Clock clock);

  // Adds records in order; labeled records keep their labels. Rejects ids
  // already present.
  std::uint64_t add(const std::vector<AuditRecord>& records);
  std::uint64_t record_label(const std::string& example_id, FalseNegativeCategory label,
                             std::optional<std::string> reference, bool overwrite = false);

  std::uint64_t revision() const;
  std::optional<AuditRecord> get(const std::string& example_id) const;
  // Insertion order.
  std::vector<AuditRecord> records() const;
  std::vector<AuditRecord> queue() const;
  // Throws InvalidArgument when nothing is labeled.
  CategorySummary summary() const;
  // Counts as of one consistent snapshot; may be all zero.
  std::pair<std::uint64_t, CategorySummary> snapshot_counts() const;

 private:
  void apply(const nlohmann::json& entry);
  void append(const nlohmann::json& entry);

  std::optional<std::filesystem::path> path_;
  Clock clock_;
  mutable std::shared_mutex mutex_;
  std::vector<AuditRecord> records_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t revision_ = 0;
};

// Current UTC time, ISO 8601 to the second.
std::string utc_timestamp();

// Columns example_id, question, targets, prediction, category, reference,
// labeled_at; rows sorted by example_id. Targets hold the annotator lists as
// JSON. Tabs, newlines and backslashes inside cells are escaped.
void export_audit(const AuditStore& store, const std::filesystem::path& path);
std::vector<AuditRecord> import_audit(const std::filesystem::path& path);

}  // namespace cbqa
