#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cbqa/corpus.hpp"
#include "cbqa/span_corruption.hpp"
#include "cbqa/tokenizer.hpp"

namespace cbqa {

enum class SpanKind { Entity, Date };

std::string_view to_string(SpanKind kind);
SpanKind parse_span_kind(std::string_view name);

// Half-open byte range into a sentence.
struct SalientSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  SpanKind kind = SpanKind::Entity;

  friend bool operator==(const SalientSpan&, const SalientSpan&) = default;
};

struct TaggedSentence {
  SentenceRecord sentence;
  std::vector<SalientSpan> spans;
};

// Pluggable source of candidate spans. Candidates may overlap; tag_salient
// resolves conflicts.
class SpanTagger {
 public:
  virtual ~SpanTagger() = default;
  virtual std::vector<SalientSpan> candidates(std::string_view text) const = 0;
};

// Dates: standalone years 1000-2999; month names with an optional day and/or
// year ("April 15, 2019", "15 April 2019", "March 1916"); a bare month name
// except "May". Entities: maximal runs of capitalized words outside the
// stopword list and outside dates; a run starting the sentence needs at
// least two words.
class RuleTagger final : public SpanTagger {
 public:
  std::vector<SalientSpan> candidates(std::string_view text) const override;
};

// Serves spans loaded from a pre-annotated file, keyed by exact sentence text.
class AnnotatedTagger final : public SpanTagger {
 public:
  void add(std::string text, std::vector<SalientSpan> spans);
  std::vector<SalientSpan> candidates(std::string_view text) const override;

 private:
  std::unordered_map<std::string, std::vector<SalientSpan>> spans_;
};

// Non-overlapping spans sorted by start: on conflict the longer span wins,
// then the earlier start. Tagger failures are rethrown with the sentence.
std::vector<SalientSpan> tag_salient(std::string_view text, const SpanTagger& tagger);

struct MiningOptions {
  std::size_t min_bytes = 0;
  std::optional<std::size_t> max_bytes;
};

struct MiningStats {
  std::size_t documents = 0;
  std::size_t scanned = 0;
  std::size_t kept = 0;
};

// Splits every document into sentences and emits, in corpus order, each
// sentence with at least one salient span.
std::vector<TaggedSentence> mine_sentences(const std::vector<CorpusDocument>& corpus, const SpanTagger& tagger,
                                           const MiningOptions& options = {}, MiningStats* stats = nullptr);

// Same, invoking `sink` per kept sentence instead of materializing the result.
MiningStats mine_sentences(const std::vector<CorpusDocument>& corpus, const SpanTagger& tagger,
                           const MiningOptions& options, const std::function<void(TaggedSentence&&)>& sink);

// Tokenization of a sentence as three independently encoded segments around
// `span`. decorrupt(mask_salient(...)) reproduces exactly this sequence.
TokenIds segmented_encoding(const Vocab& vocab, std::string_view text, const SalientSpan& span);

// Masks one span chosen uniformly by (seed, stream_index) with sentinel 0.
CorruptedPair mask_salient(const TaggedSentence& tagged, const Vocab& vocab, std::uint64_t stream_index,
                           std::uint64_t seed = 0);
std::size_t select_span(const TaggedSentence& tagged, std::uint64_t stream_index, std::uint64_t seed = 0);

// Pre-annotated JSONL {"text", "spans":[{"start","end","kind"}]}. Spans are
// validated against the text; records without spans are kept with none.
std::vector<TaggedSentence> load_annotated_spans(const std::filesystem::path& path);
void validate_span(std::string_view text, const SalientSpan& span);

}  // namespace cbqa
