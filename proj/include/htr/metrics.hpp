#pragma once

#include <algorithm>
#include <cstdio>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <unicode/uchar.h>

#include "htr/errors.hpp"
#include "htr/unicode.hpp"

namespace htr {

/// Operation breakdown of a minimal unit-cost edit script turning `ref` into `hyp`.
struct EditOps {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;

  std::size_t total() const { return substitutions + insertions + deletions; }
  bool operator==(const EditOps&) const = default;
};

/// Levenshtein distance with traceback. Ties prefer substitution (or match), then deletion,
/// then insertion.
template <typename T>
EditOps levenshtein(std::span<const T> ref, std::span<const T> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});

  EditOps ops;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++ops.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++ops.deletions;
      --i;
    } else {
      ++ops.insertions;
      --j;
    }
  }
  return ops;
}

template <typename Container>
EditOps levenshtein(const Container& ref, const Container& hyp) {
  using T = typename Container::value_type;
  return levenshtein<T>(std::span<const T>(ref.data(), ref.size()), std::span<const T>(hyp.data(), hyp.size()));
}

/// NFC plus trailing-whitespace strip: the comparison form of every metric.
inline std::u32string normalize_text(std::string_view utf8) {
  std::u32string s = nfc_utf8(utf8);
  while (!s.empty() && u_isUWhiteSpace(static_cast<UChar32>(s.back()))) s.pop_back();
  return s;
}

inline std::vector<std::u32string> split_words(const std::u32string& s) {
  std::vector<std::u32string> words;
  std::u32string cur;
  for (char32_t c : s) {
    if (u_isUWhiteSpace(static_cast<UChar32>(c))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Character- and word-level edit counts for one (reference, hypothesis) pair.
struct EditCounts {
  EditOps chars;
  EditOps words;
  std::size_t ref_chars = 0;  // N
  std::size_t ref_words = 0;  // Nw
  bool exact = true;
};

inline EditCounts count_edits(std::string_view ref, std::string_view hyp) {
  const std::u32string r = normalize_text(ref), h = normalize_text(hyp);
  const auto rw = split_words(r), hw = split_words(h);
  return EditCounts{levenshtein(r, h), levenshtein(rw, hw), r.size(), rw.size(), r == h};
}

/// (S+I+D)/N over characters.
inline double cer(std::string_view ref, std::string_view hyp) {
  const EditCounts c = count_edits(ref, hyp);
  if (c.ref_chars == 0) throw UsageError("CER undefined for an empty reference");
  return static_cast<double>(c.chars.total()) / static_cast<double>(c.ref_chars);
}

/// (Sw+Iw+Dw)/Nw over whitespace-separated words.
inline double wer(std::string_view ref, std::string_view hyp) {
  const EditCounts c = count_edits(ref, hyp);
  if (c.ref_words == 0) throw UsageError("WER undefined for a reference without words");
  return static_cast<double>(c.words.total()) / static_cast<double>(c.ref_words);
}

/// Fraction of samples not transcribed exactly.
inline double ser(std::span<const std::pair<std::string, std::string>> samples) {
  if (samples.empty()) throw UsageError("SER of an empty sample list");
  std::size_t wrong = 0;
  for (const auto& [ref, hyp] : samples) wrong += normalize_text(ref) != normalize_text(hyp);
  return static_cast<double>(wrong) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Corpus report

struct SampleResult {
  std::string id;
  std::string ref;
  std::string hyp;
  EditCounts counts;
};

/// Micro-averaged rates: total edits over total reference symbols.
struct EvalReport {
  std::vector<SampleResult> samples;
  double cer = 0.0;
  double wer = 0.0;
  double ser = 0.0;

  static EvalReport from(std::vector<SampleResult> samples) {
    if (samples.empty()) throw UsageError("evaluation report needs at least one sample");
    EvalReport r;
    std::size_t ce = 0, cn = 0, we = 0, wn = 0, wrong = 0;
    for (const auto& s : samples) {
      ce += s.counts.chars.total();
      cn += s.counts.ref_chars;
      we += s.counts.words.total();
      wn += s.counts.ref_words;
      wrong += !s.counts.exact;
    }
    // A corpus with no reference symbols divides by one so the rate stays the raw edit count.
    r.cer = static_cast<double>(ce) / static_cast<double>(std::max<std::size_t>(cn, 1));
    r.wer = static_cast<double>(we) / static_cast<double>(std::max<std::size_t>(wn, 1));
    r.ser = static_cast<double>(wrong) / static_cast<double>(samples.size());
    r.samples = std::move(samples);
    return r;
  }

  static EvalReport from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
    std::vector<SampleResult> rows;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      rows.push_back({std::to_string(i), pairs[i].first, pairs[i].second, count_edits(pairs[i].first, pairs[i].second)});
    }
    return from(std::move(rows));
  }

  /// One line in the style of a results-table row.
  std::string summary() const {
    char buf[128];
    std::snprintf(buf, sizeof buf, "CER %.4f  WER %.4f  SER %.4f  (%zu samples)", cer, wer, ser, samples.size());
    return buf;
  }
};

inline std::string format_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Tab-separated report: header, one row per sample, then `#key<TAB>value` footer lines.
inline void write_report(std::ostream& os, const EvalReport& r) {
  os << "id\tref\thyp\tS\tI\tD\tcer\n";
  for (const auto& s : r.samples) {
    const auto& c = s.counts.chars;
    os << s.id << '\t' << s.ref << '\t' << s.hyp << '\t' << c.substitutions << '\t' << c.insertions << '\t'
       << c.deletions << '\t'
       << (s.counts.ref_chars ? format_rate(static_cast<double>(c.total()) / static_cast<double>(s.counts.ref_chars))
                              : std::string("NA"))
       << '\n';
  }
  os << "#samples\t" << r.samples.size() << '\n';
  os << "#cer\t" << format_rate(r.cer) << '\n';
  os << "#wer\t" << format_rate(r.wer) << '\n';
  os << "#ser\t" << format_rate(r.ser) << '\n';
}

struct ParsedReport {
  std::vector<SampleResult> rows;  // counts recomputed from ref/hyp
  std::vector<EditOps> recorded;   // S/I/D columns as written
  double cer = 0, wer = 0, ser = 0;
  std::size_t samples = 0;
};

inline ParsedReport read_report(std::istream& is) {
  ParsedReport p;
  std::string line;
  if (!std::getline(is, line) || line.rfind("id\t", 0) != 0) throw InputError("report: missing header line");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) f.push_back(field);
    if (line.back() == '\t') f.emplace_back();
    if (!line.empty() && line[0] == '#') {
      if (f.size() != 2) throw InputError("report: malformed footer '" + line + "'");
      if (f[0] == "#samples") p.samples = std::stoul(f[1]);
      else if (f[0] == "#cer") p.cer = std::stod(f[1]);
      else if (f[0] == "#wer") p.wer = std::stod(f[1]);
      else if (f[0] == "#ser") p.ser = std::stod(f[1]);
      continue;
    }
    if (f.size() != 7) throw InputError("report: row has " + std::to_string(f.size()) + " fields: '" + line + "'");
    p.rows.push_back({f[0], f[1], f[2], count_edits(f[1], f[2])});
    p.recorded.push_back({std::stoul(f[3]), std::stoul(f[4]), std::stoul(f[5])});
  }
  return p;
}

}  // namespace htr
