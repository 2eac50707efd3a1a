#include "cbqa/unicode.hpp"

#include <algorithm>

namespace cbqa::unicode {

Decoded decode_at(std::string_view text, std::size_t pos) {
  const auto byte = [&](std::size_t i) { return static_cast<unsigned char>(text[i]); };
  const unsigned char lead = byte(pos);
  if (lead < 0x80) return {lead, 1, true};

  std::size_t length = 0;
  char32_t cp = 0;
  char32_t min = 0;
  if ((lead & 0xE0) == 0xC0) {
    length = 2, cp = lead & 0x1F, min = 0x80;
  } else if ((lead & 0xF0) == 0xE0) {
    length = 3, cp = lead & 0x0F, min = 0x800;
  } else if ((lead & 0xF8) == 0xF0) {
    length = 4, cp = lead & 0x07, min = 0x10000;
  } else {
    return {lead, 1, false};
  }
  if (pos + length > text.size()) return {lead, 1, false};
  for (std::size_t i = 1; i < length; ++i) {
    const unsigned char c = byte(pos + i);
    if ((c & 0xC0) != 0x80) return {lead, 1, false};
    cp = (cp << 6) | (c & 0x3F);
  }
  if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return {lead, 1, false};
  return {cp, length, true};
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

namespace {

bool in_ranges(const detail::CodepointRange* table, std::size_t size, char32_t cp) {
  const auto* end = table + size;
  const auto* it = std::upper_bound(table, end, cp, [](char32_t value, const detail::CodepointRange& r) {
    return value < r.first;
  });
  if (it == table) return false;
  --it;
  return cp <= it->last;
}

}  // namespace

bool is_punctuation(char32_t cp) {
  return in_ranges(detail::kPunctuation, detail::kPunctuationSize, cp);
}

bool is_whitespace(char32_t cp) {
  return in_ranges(detail::kWhitespace, detail::kWhitespaceSize, cp);
}

std::string to_lower(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  const auto* table = detail::kLowercase;
  const auto* end = table + detail::kLowercaseSize;
  for (std::size_t pos = 0; pos < text.size();) {
    const Decoded d = decode_at(text, pos);
    if (!d.valid) {
      out.push_back(text[pos]);
    } else if (d.codepoint >= 'A' && d.codepoint <= 'Z') {
      out.push_back(static_cast<char>(d.codepoint + ('a' - 'A')));
    } else if (d.codepoint < 0x80) {
      out.push_back(static_cast<char>(d.codepoint));
    } else {
      const auto* it = std::lower_bound(table, end, d.codepoint,
                                        [](const detail::LowercaseEntry& e, char32_t v) { return e.codepoint < v; });
      if (it != end && it->codepoint == d.codepoint) {
        out += it->lower_utf8;
      } else {
        out.append(text.substr(pos, d.length));
      }
    }
    pos += d.length;
  }
  return out;
}

}  // namespace cbqa::unicode
