#!/usr/bin/env python3
"""Regenerates src/unicode_tables.cpp from Python's unicodedata."""
import sys
import unicodedata


def ranges(pred):
    out, start = [], None
    for cp in range(0x110000):
        hit = pred(cp)
        if hit and start is None:
            start = cp
        elif not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


def is_punct(cp):
    return unicodedata.category(chr(cp)).startswith("P")


def is_space(cp):
    return chr(cp).isspace()


def lower_pairs():
    pairs = []
    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:
            continue
        lo = chr(cp).lower()
        if lo != chr(cp):
            pairs.append((cp, lo))
    return pairs


def utf8_literal(s):
    return "".join("\\x%02x" % b for b in s.encode("utf-8"))


def main():
    w = sys.stdout.write
    w("// Generated by tools/gen_unicode_tables.py (Unicode %s). Do not edit.\n\n"
      % unicodedata.unidata_version)
    w('#include "cbqa/unicode.hpp"\n\nnamespace cbqa::unicode::detail {\n\n')
    for name, pred in (("kPunctuation", is_punct), ("kWhitespace", is_space)):
        rs = ranges(pred)
        w("const CodepointRange %s[] = {\n" % name)
        for a, b in rs:
            w("    {0x%04X, 0x%04X},\n" % (a, b))
        w("};\nconst std::size_t %sSize = %d;\n\n" % (name, len(rs)))
    pairs = lower_pairs()
    w("const LowercaseEntry kLowercase[] = {\n")
    for cp, lo in pairs:
        w('    {0x%04X, "%s"},\n' % (cp, utf8_literal(lo)))
    w("};\nconst std::size_t kLowercaseSize = %d;\n\n" % len(pairs))
    w("}  // namespace cbqa::unicode::detail\n")


if __name__ == "__main__":
    main()
