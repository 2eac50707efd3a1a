#include "cbqa/salient_spans.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>

#include <json.hpp>

#include "cbqa/counter_rng.hpp"
#include "cbqa/error.hpp"

namespace cbqa {

std::string_view to_string(SpanKind kind) { return kind == SpanKind::Entity ? "Entity" : "Date"; }

SpanKind parse_span_kind(std::string_view name) {
  if (name == "Entity") return SpanKind::Entity;
  if (name == "Date") return SpanKind::Date;
  throw InvalidArgument("unknown span kind '" + std::string(name) + "'");
}

namespace {

constexpr std::array<std::string_view, 12> kMonths = {"January", "February", "March",     "April",
                                                      "May",     "June",     "July",      "August",
                                                      "September", "October", "November", "December"};

constexpr std::array<std::string_view, 72> kStopwords = {
    "A",       "An",      "The",    "In",      "On",    "At",    "Of",     "To",     "For",   "From",  "By",
    "With",    "As",      "And",    "Or",      "But",   "If",    "When",   "While",  "After", "Before",
    "During",  "Since",   "Until",  "He",      "She",   "It",    "They",   "We",     "I",     "You",   "His",
    "Her",     "Its",     "Their",  "Our",     "My",    "Your",  "This",   "That",   "These", "Those", "There",
    "Here",    "What",    "Who",    "Whom",    "Where", "Why",   "How",    "Which",  "Some",  "Many",  "Most",
    "All",     "Each",    "Every",  "Both",    "Also",  "However", "Then",  "Thus",   "Although", "Because",
    "Despite", "Today",   "Yesterday", "Later", "Is",   "Was",   "Were"};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

struct Word {
  std::size_t start;  // core byte range within the sentence
  std::size_t end;
  bool trailing_punct;  // raw word carried trailing punctuation after the core
  std::string_view core;
};

std::vector<Word> split_words(std::string_view text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size()) break;
    std::size_t raw_end = i;
    while (raw_end < text.size() && !is_space(text[raw_end])) ++raw_end;
    std::size_t s = i;
    std::size_t e = raw_end;
    while (s < e && std::string_view("\"'([{").find(text[s]) != std::string_view::npos) ++s;
    while (e > s && std::string_view(".,;:!?\"')]}").find(text[e - 1]) != std::string_view::npos) --e;
    if (e >= s + 2 && text[e - 2] == '\'' && text[e - 1] == 's') e -= 2;
    if (e > s) words.push_back({s, e, e < raw_end, text.substr(s, e - s)});
    i = raw_end;
  }
  return words;
}

bool is_month(std::string_view w) { return std::find(kMonths.begin(), kMonths.end(), w) != kMonths.end(); }

bool is_year(std::string_view w) {
  if (w.size() != 4 || !std::all_of(w.begin(), w.end(), is_digit)) return false;
  return w[0] == '1' || w[0] == '2';
}

bool is_day(std::string_view w) {
  if (w.empty() || w.size() > 2 || !std::all_of(w.begin(), w.end(), is_digit)) return false;
  const int d = std::stoi(std::string(w));
  return d >= 1 && d <= 31;
}

bool is_capitalized(std::string_view w) {
  return !w.empty() && std::isupper(static_cast<unsigned char>(w[0])) &&
         std::find(kStopwords.begin(), kStopwords.end(), w) == kStopwords.end();
}

bool overlaps(const SalientSpan& a, const SalientSpan& b) { return a.start < b.end && b.start < a.end; }

}  // namespace

std::vector<SalientSpan> RuleTagger::candidates(std::string_view text) const {
  const auto words = split_words(text);
  std::vector<SalientSpan> spans;
  std::vector<bool> in_date(words.size(), false);

  for (std::size_t i = 0; i < words.size();) {
    std::size_t last = i;
    bool matched = false;
    if (is_month(words[i].core)) {
      // Month [Day[,]] [Year]
      std::size_t j = i;
      if (!words[i].trailing_punct && i + 1 < words.size() && is_day(words[i + 1].core)) j = i + 1;
      const bool year_follows = !words[j].trailing_punct || (j > i && text[words[j].end] == ',');
      if (year_follows && j + 1 < words.size() && is_year(words[j + 1].core)) ++j;
      last = j;
      matched = j > i || words[i].core != "May";
    } else if (is_day(words[i].core) && !words[i].trailing_punct && i + 1 < words.size() &&
               is_month(words[i + 1].core)) {
      // Day Month [Year]
      last = i + 1;
      if (last + 1 < words.size() && !words[last].trailing_punct && is_year(words[last + 1].core)) ++last;
      matched = true;
    } else if (is_year(words[i].core)) {
      matched = true;
    }
    if (matched) {
      spans.push_back({words[i].start, words[last].end, SpanKind::Date});
      for (std::size_t k = i; k <= last; ++k) in_date[k] = true;
      i = last + 1;
    } else {
      ++i;
    }
  }

  for (std::size_t i = 0; i < words.size();) {
    if (in_date[i] || !is_capitalized(words[i].core) || is_month(words[i].core)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (!words[j].trailing_punct && j + 1 < words.size() && !in_date[j + 1] && is_capitalized(words[j + 1].core) &&
           !is_month(words[j + 1].core))
      ++j;
    const std::size_t count = j - i + 1;
    if (i > 0 || count >= 2) spans.push_back({words[i].start, words[j].end, SpanKind::Entity});
    i = j + 1;
  }
  return spans;
}

void AnnotatedTagger::add(std::string text, std::vector<SalientSpan> spans) {
  spans_.insert_or_assign(std::move(text), std::move(spans));
}

std::vector<SalientSpan> AnnotatedTagger::candidates(std::string_view text) const {
  const auto it = spans_.find(std::string(text));
  return it == spans_.end() ? std::vector<SalientSpan>{} : it->second;
}

void validate_span(std::string_view text, const SalientSpan& span) {
  if (!(span.start < span.end && span.end <= text.size()))
    throw InvalidArgument("span [" + std::to_string(span.start) + ", " + std::to_string(span.end) +
                          ") out of bounds for sentence of " + std::to_string(text.size()) + " bytes");
  if (is_space(text[span.start]) || is_space(text[span.end - 1]))
    throw InvalidArgument("span [" + std::to_string(span.start) + ", " + std::to_string(span.end) +
                          ") has whitespace at a boundary");
}

std::vector<SalientSpan> tag_salient(std::string_view text, const SpanTagger& tagger) {
  std::vector<SalientSpan> candidates;
  try {
    candidates = tagger.candidates(text);
    for (const auto& s : candidates) validate_span(text, s);
  } catch (const std::exception& e) {
    throw InvalidArgument(std::string("tagger failed on sentence \"") + std::string(text) + "\": " + e.what());
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const SalientSpan& a, const SalientSpan& b) {
    const auto la = a.end - a.start;
    const auto lb = b.end - b.start;
    return la != lb ? la > lb : a.start < b.start;
  });
  std::vector<SalientSpan> kept;
  for (const auto& c : candidates)
    if (std::none_of(kept.begin(), kept.end(), [&](const SalientSpan& k) { return overlaps(k, c); })) kept.push_back(c);
  std::sort(kept.begin(), kept.end(), [](const SalientSpan& a, const SalientSpan& b) { return a.start < b.start; });
  return kept;
}

MiningStats mine_sentences(const std::vector<CorpusDocument>& corpus, const SpanTagger& tagger,
                           const MiningOptions& options, const std::function<void(TaggedSentence&&)>& sink) {
  MiningStats stats;
  for (const auto& doc : corpus) {
    ++stats.documents;
    for (auto& sentence : sentence_split(doc)) {
      ++stats.scanned;
      if (sentence.text.size() < options.min_bytes) continue;
      if (options.max_bytes && sentence.text.size() > *options.max_bytes) continue;
      std::vector<SalientSpan> spans;
      try {
        spans = tag_salient(sentence.text, tagger);
      } catch (const Error& e) {
        throw InvalidArgument("document " + doc.doc_id + ": " + e.what());
      }
      if (spans.empty()) continue;
      ++stats.kept;
      sink(TaggedSentence{std::move(sentence), std::move(spans)});
    }
  }
  return stats;
}

std::vector<TaggedSentence> mine_sentences(const std::vector<CorpusDocument>& corpus, const SpanTagger& tagger,
                                           const MiningOptions& options, MiningStats* stats) {
  std::vector<TaggedSentence> out;
  const auto s = mine_sentences(corpus, tagger, options, [&](TaggedSentence&& t) { out.push_back(std::move(t)); });
  if (stats) *stats = s;
  return out;
}

TokenIds segmented_encoding(const Vocab& vocab, std::string_view text, const SalientSpan& span) {
  validate_span(text, span);
  TokenIds ids = vocab.encode(text.substr(0, span.start));
  const auto mid = vocab.encode(text.substr(span.start, span.end - span.start));
  const auto tail = vocab.encode(text.substr(span.end));
  ids.insert(ids.end(), mid.begin(), mid.end());
  ids.insert(ids.end(), tail.begin(), tail.end());
  return ids;
}

std::size_t select_span(const TaggedSentence& tagged, std::uint64_t stream_index, std::uint64_t seed) {
  if (tagged.spans.empty()) throw InvalidArgument("mask_salient: sentence has no salient span");
  return CounterRng(seed, stream_index).fork(0x55a1).below(tagged.spans.size(), 0);
}

CorruptedPair mask_salient(const TaggedSentence& tagged, const Vocab& vocab, std::uint64_t stream_index,
                           std::uint64_t seed) {
  const auto& span = tagged.spans[select_span(tagged, stream_index, seed)];
  const std::string_view text = tagged.sentence.text;
  validate_span(text, span);
  if (vocab.sentinel_count() < 2) throw InvalidArgument("mask_salient: vocab needs at least two sentinels");

  const auto prefix = vocab.encode(text.substr(0, span.start));
  const auto masked = vocab.encode(text.substr(span.start, span.end - span.start));
  const auto suffix = vocab.encode(text.substr(span.end));
  if (vocab.decode(prefix) + vocab.decode(masked) + vocab.decode(suffix) != text)
    throw InvalidArgument("mask_salient: span not alignable to token boundaries in \"" + std::string(text) + "\"");

  CorruptedPair pair;
  pair.inputs = prefix;
  pair.inputs.push_back(vocab.sentinel_id(0));
  pair.inputs.insert(pair.inputs.end(), suffix.begin(), suffix.end());
  pair.targets.push_back(vocab.sentinel_id(0));
  pair.targets.insert(pair.targets.end(), masked.begin(), masked.end());
  pair.targets.push_back(vocab.sentinel_id(1));
  pair.targets.push_back(kEosId);
  return pair;
}

std::vector<TaggedSentence> load_annotated_spans(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TaggedSentence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TaggedSentence t;
      t.sentence = {path.filename().string(), lineno - 1, j.at("text").get<std::string>()};
      for (const auto& s : j.at("spans")) {
        SalientSpan span{s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>(),
                         parse_span_kind(s.at("kind").get<std::string>())};
        validate_span(t.sentence.text, span);
        t.spans.push_back(span);
      }
      std::sort(t.spans.begin(), t.spans.end(),
                [](const SalientSpan& a, const SalientSpan& b) { return a.start < b.start; });
      for (std::size_t k = 1; k < t.spans.size(); ++k)
        if (t.spans[k].start < t.spans[k - 1].end) throw InvalidArgument("overlapping spans");
      out.push_back(std::move(t));
    } catch (const SchemaError&) {
      throw;
    } catch (const std::exception& e) {
      throw SchemaError(path.string(), lineno, e.what());
    }
  }
  return out;
}

}  // namespace cbqa
