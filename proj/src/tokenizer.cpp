#include "cbqa/tokenizer.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "cbqa/error.hpp"

namespace cbqa {

namespace {

constexpr std::size_t kFirstByteId = 2;
constexpr std::string_view kVocabMagic = "CBQA-VOCAB v1";

bool is_ascii_space(unsigned char c) { return c == ' ' || (c >= '\t' && c <= '\r'); }

std::vector<std::string> base_pieces() {
  std::vector<std::string> pieces = {"", ""};
  for (int b = 0; b < 256; ++b) pieces.emplace_back(1, static_cast<char>(b));
  return pieces;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> pieces, std::size_t sentinels)
    : pieces_(std::move(pieces)), sentinels_(sentinels) {
  index();
}

void Vocab::index() {
  lookup_.clear();
  max_piece_bytes_ = 1;
  for (std::size_t id = kFirstByteId; id < pieces_.size(); ++id) {
    const auto [_, inserted] = lookup_.emplace(pieces_[id], static_cast<TokenId>(id));
    if (!inserted) throw InvalidArgument("vocab: duplicate piece at id " + std::to_string(id));
    max_piece_bytes_ = std::max(max_piece_bytes_, pieces_[id].size());
  }
  for (int b = 0; b < 256; ++b)
    if (!lookup_.contains(std::string(1, static_cast<char>(b))))
      throw InvalidArgument("vocab: missing single-byte piece " + std::to_string(b));
}

const std::string& Vocab::piece(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size())
    throw InvalidArgument("vocab: id " + std::to_string(id) + " is not an ordinary piece");
  return pieces_[id];
}

bool Vocab::is_sentinel(TokenId id) const {
  return id >= 0 && static_cast<std::size_t>(id) >= pieces_.size() && static_cast<std::size_t>(id) < size();
}

TokenId Vocab::sentinel_id(std::size_t k) const {
  if (k >= sentinels_)
    throw InvalidArgument("sentinel index " + std::to_string(k) + " exceeds capacity " + std::to_string(sentinels_));
  return static_cast<TokenId>(size() - 1 - k);
}

std::size_t Vocab::sentinel_index(TokenId id) const {
  if (!is_sentinel(id)) throw InvalidArgument("id " + std::to_string(id) + " is not a sentinel");
  return size() - 1 - static_cast<std::size_t>(id);
}

TokenIds Vocab::encode(std::string_view text) const {
  TokenIds ids;
  ids.reserve(text.size());
  std::string key;
  for (std::size_t pos = 0; pos < text.size();) {
    std::size_t len = std::min(max_piece_bytes_, text.size() - pos);
    for (; len > 1; --len) {
      key.assign(text.substr(pos, len));
      if (const auto it = lookup_.find(key); it != lookup_.end()) {
        ids.push_back(it->second);
        break;
      }
    }
    if (len == 1) ids.push_back(static_cast<TokenId>(kFirstByteId + static_cast<unsigned char>(text[pos])));
    pos += len;
  }
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (const TokenId id : ids) {
    if (id == kEosId) continue;
    if (id == kPadId) throw InvalidArgument("decode: pad id in sequence");
    if (is_sentinel(id)) throw InvalidArgument("decode: sentinel id " + std::to_string(id) + " in sequence");
    if (id < 0 || static_cast<std::size_t>(id) >= size())
      throw InvalidArgument("decode: id " + std::to_string(id) + " out of range");
    out += pieces_[id];
  }
  return out;
}

std::string Vocab::render(std::span<const TokenId> ids) const {
  std::string out;
  for (const TokenId id : ids) {
    if (id == kPadId) {
      out += "<pad>";
    } else if (id == kEosId) {
      out += "</s>";
    } else if (is_sentinel(id)) {
      out += "<S" + std::to_string(sentinel_index(id)) + ">";
    } else if (id >= 0 && static_cast<std::size_t>(id) < pieces_.size()) {
      out += pieces_[id];
    } else {
      out += "<?" + std::to_string(id) + ">";
    }
  }
  return out;
}

std::string escape_piece(std::string_view bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (const char ch : bytes) {
    const auto c = static_cast<unsigned char>(ch);
    if (c > 0x20 && c < 0x7F && c != '\\' && c != '<') {
      out.push_back(ch);
    } else {
      out += "\\x";
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 0xF]);
    }
  }
  return out;
}

std::string unescape_piece(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    unsigned value = 0;
    if (i + 3 >= s.size() || s[i + 1] != 'x' ||
        std::from_chars(s.data() + i + 2, s.data() + i + 4, value, 16).ptr != s.data() + i + 4)
      throw InvalidArgument("vocab: bad escape in piece '" + std::string(s) + "'");
    out.push_back(static_cast<char>(value));
    i += 3;
  }
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << kVocabMagic << " size=" << size() << " sentinels=" << sentinels_ << '\n';
  out << "<pad>\n<eos>\n";
  for (std::size_t id = kFirstByteId; id < pieces_.size(); ++id) out << escape_piece(pieces_[id]) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string header;
  std::getline(in, header);
  std::size_t size = 0;
  std::size_t sentinels = 0;
  {
    std::istringstream hs(header);
    std::string magic1, magic2, size_field, sentinel_field;
    hs >> magic1 >> magic2 >> size_field >> sentinel_field;
    if (magic1 + " " + magic2 != kVocabMagic || size_field.rfind("size=", 0) != 0 ||
        sentinel_field.rfind("sentinels=", 0) != 0)
      throw SchemaError(path.string(), 1, "bad vocab header");
    size = std::stoul(size_field.substr(5));
    sentinels = std::stoul(sentinel_field.substr(10));
  }
  std::vector<std::string> pieces;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (pieces.size() < kFirstByteId) {
      const char* expected = pieces.empty() ? "<pad>" : "<eos>";
      if (line != expected) throw SchemaError(path.string(), lineno, std::string("expected ") + expected);
      pieces.emplace_back();
      continue;
    }
    pieces.push_back(unescape_piece(line));
  }
  if (pieces.size() + sentinels != size)
    throw SchemaError(path.string(), lineno, "piece count does not match header size");
  return Vocab(std::move(pieces), sentinels);
}

Vocab build_vocab(std::span<const std::string> corpus, std::size_t size, std::size_t sentinels) {
  const std::size_t reserved = kFirstByteId + 256 + sentinels;
  if (size < reserved)
    throw ConfigError("vocab size " + std::to_string(size) + " below minimum " + std::to_string(reserved));

  std::map<std::string, std::int64_t> word_counts;
  for (const auto& text : corpus) {
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && is_ascii_space(static_cast<unsigned char>(text[i]))) ++i;
      const std::size_t begin = i;
      while (i < text.size() && !is_ascii_space(static_cast<unsigned char>(text[i]))) ++i;
      if (i > begin) ++word_counts[text.substr(begin, i - begin)];
    }
  }

  struct Word {
    std::vector<std::string> symbols;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) {
    Word word{{}, c};
    for (const char ch : w) word.symbols.emplace_back(1, ch);
    words.push_back(std::move(word));
  }

  auto pieces = base_pieces();
  std::unordered_map<std::string, TokenId> known;
  for (std::size_t id = kFirstByteId; id < pieces.size(); ++id) known.emplace(pieces[id], static_cast<TokenId>(id));

  const std::size_t ordinary_target = size - sentinels;
  while (pieces.size() < ordinary_target) {
    std::map<std::pair<std::string, std::string>, std::int64_t> pair_counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.count;

    // std::map iterates in lexicographic order, so the first maximum wins ties.
    const std::pair<std::string, std::string>* best = nullptr;
    std::int64_t best_count = 1;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      }
    }
    if (best == nullptr) break;

    const auto [left, right] = *best;
    const std::string merged = left + right;
    for (auto& w : words) {
      std::vector<std::string> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(std::move(w.symbols[i]));
        }
      }
      w.symbols = std::move(next);
    }
    if (known.emplace(merged, static_cast<TokenId>(pieces.size())).second) pieces.push_back(merged);
  }

  // A short corpus may leave the merge budget unused; the vocab is then smaller
  // than requested but keeps the full sentinel block.
  return Vocab(std::move(pieces), sentinels);
}

}  // namespace cbqa
