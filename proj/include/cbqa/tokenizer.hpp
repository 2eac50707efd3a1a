#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cbqa {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kEosId = 1;
inline constexpr std::size_t kDefaultSentinels = 100;

// Byte-level subword vocabulary. Id layout: pad, eos, the 256 single bytes,
// learned merges, then `sentinel_count` sentinel ids at the top of the range
// (sentinel 0 is the highest id). Pieces never contain ASCII whitespace.
class Vocab {
 public:
  Vocab() = default;

  std::size_t size() const { return pieces_.size() + sentinels_; }
  std::size_t sentinel_count() const { return sentinels_; }
  std::size_t ordinary_count() const { return pieces_.size(); }

  // Byte string of an ordinary id (pad and eos map to empty strings).
  const std::string& piece(TokenId id) const;
  bool is_sentinel(TokenId id) const;
  bool is_special(TokenId id) const { return id == kPadId || id == kEosId || is_sentinel(id); }

  // Fixed decreasing mapping: sentinel k is id size()-1-k.
  TokenId sentinel_id(std::size_t k) const;
  std::size_t sentinel_index(TokenId id) const;

  // Greedy longest match, left to right.
  TokenIds encode(std::string_view text) const;
  // Exact inverse of encode. Throws on pad, sentinel or out-of-range ids;
  // eos contributes nothing.
  std::string decode(std::span<const TokenId> ids) const;
  // Like decode, but renders sentinels as "<S{k}>", eos as "</s>" and pad as "<pad>".
  std::string render(std::span<const TokenId> ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend Vocab build_vocab(std::span<const std::string> corpus, std::size_t size, std::size_t sentinels);
  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.sentinels_ == b.sentinels_ && a.pieces_ == b.pieces_;
  }

 private:
  Vocab(std::vector<std::string> pieces, std::size_t sentinels);
  void index();

  std::vector<std::string> pieces_;  // ordinary ids only, including pad/eos placeholders
  std::size_t sentinels_ = 0;
  std::unordered_map<std::string, TokenId> lookup_;
  std::size_t max_piece_bytes_ = 1;
};

// Byte-pair merges over whitespace-delimited words, most frequent pair first,
// ties broken by the lexicographically smallest (left, right) pair. Stops at
// `size` ids or when no pair occurs at least twice.
Vocab build_vocab(std::span<const std::string> corpus, std::size_t size, std::size_t sentinels = kDefaultSentinels);

std::string escape_piece(std::string_view bytes);
std::string unescape_piece(std::string_view escaped);

}  // namespace cbqa
