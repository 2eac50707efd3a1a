#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace cbqa::unicode {

namespace detail {
struct CodepointRange {
  char32_t first;
  char32_t last;
};
struct LowercaseEntry {
  char32_t codepoint;
  const char* lower_utf8;
};
extern const CodepointRange kPunctuation[];
extern const std::size_t kPunctuationSize;
extern const CodepointRange kWhitespace[];
extern const std::size_t kWhitespaceSize;
extern const LowercaseEntry kLowercase[];
extern const std::size_t kLowercaseSize;
}  // namespace detail

// One decoded code point and the bytes it occupied. Invalid UTF-8 decodes one
// byte at a time with `valid == false` so callers can pass it through.
struct Decoded {
  char32_t codepoint;
  std::size_t length;
  bool valid;
};

Decoded decode_at(std::string_view text, std::size_t pos);
void append_utf8(std::string& out, char32_t codepoint);

// General category P* (Pc, Pd, Ps, Pe, Pi, Pf, Po).
bool is_punctuation(char32_t codepoint);
bool is_whitespace(char32_t codepoint);

// Full lowercase mapping, as Python's str.lower().
std::string to_lower(std::string_view text);

}  // namespace cbqa::unicode
