#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "htr/ctc.hpp"
#include "htr/errors.hpp"
#include "htr/unicode.hpp"

namespace htr {

/// Ordered symbol table. Class indices are positions; the CTC blank takes index size().
class Charset {
 public:
  Charset() = default;

  explicit Charset(std::u32string symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      const char32_t c = symbols_[i];
      if (nfc(std::u32string(1, c)) != std::u32string(1, c)) {
        throw ConfigError("charset symbol " + describe(c) + " is not in NFC form");
      }
      if (!index_.emplace(c, static_cast<int>(i)).second) throw ConfigError("duplicate charset symbol " + describe(c));
    }
  }

  static Charset from_utf8(std::string_view text) { return Charset(utf8_decode(text)); }

  std::size_t size() const { return symbols_.size(); }
  std::size_t classes() const { return symbols_.size() + 1; }
  int blank() const { return static_cast<int>(symbols_.size()); }
  const std::u32string& symbols() const { return symbols_; }
  std::string to_utf8() const { return utf8_encode(symbols_); }
  bool contains(char32_t c) const { return index_.count(c) != 0; }

  int lookup(char32_t c) const {
    const auto it = index_.find(c);
    return it == index_.end() ? -1 : it->second;
  }

  char32_t symbol(int index) const {
    if (index < 0 || static_cast<std::size_t>(index) >= symbols_.size()) {
      throw UsageError("class index " + std::to_string(index) + " outside charset of " +
                       std::to_string(symbols_.size()) + " symbols");
    }
    return symbols_[static_cast<std::size_t>(index)];
  }

  /// 64-bit FNV-1a over the UTF-8 symbol string, as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : to_utf8()) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  bool operator==(const Charset& o) const { return symbols_ == o.symbols_; }

  static std::string describe(char32_t c) {
    char code[16];
    std::snprintf(code, sizeof code, "U+%04X", static_cast<unsigned>(c));
    std::string s = "'";
    utf8_append(s, c);
    return s + "' (" + code + ")";
  }

 private:
  std::u32string symbols_;
  std::unordered_map<char32_t, int> index_;
};

/// NFC-normalizes `text`, then maps each code point to its class index.
inline LabelSeq encode_label(std::string_view text, const Charset& cs) {
  const std::u32string s = nfc_utf8(text);
  LabelSeq out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int k = cs.lookup(s[i]);
    if (k < 0) throw InputError("character " + Charset::describe(s[i]) + " at position " + std::to_string(i) +
                                " is not in the charset");
    out.push_back(k);
  }
  return out;
}

inline std::string decode_label(const LabelSeq& label, const Charset& cs) {
  std::string out;
  for (int k : label) utf8_append(out, cs.symbol(k));
  return out;
}

/// Russian alphabet (33) and the nine Kazakh additions, both cases, then space, digits and
/// ". , ! ? -": 100 symbols.
inline Charset default_charset() {
  const std::u32string ru_upper = U"АБВГДЕЁЖЗИЙКЛМНОПРСТУФХЦЧШЩЪЫЬЭЮЯ";
  const std::u32string ru_lower = U"абвгдеёжзийклмнопрстуфхцчшщъыьэюя";
  const std::u32string kk_upper = U"ӘҒҚҢӨҰҮҺІ";
  const std::u32string kk_lower = U"әғқңөұүһі";
  return Charset(ru_upper + ru_lower + kk_upper + kk_lower + U" 0123456789.,!?-");
}

}  // namespace htr
