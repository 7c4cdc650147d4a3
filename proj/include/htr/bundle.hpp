#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "htr/charset.hpp"
#include "htr/checkpoint.hpp"
#include "htr/config.hpp"
#include "htr/image.hpp"
#include "htr/parallel.hpp"
#include "htr/preprocess.hpp"
#include "htr/rng.hpp"

namespace htr {

struct BundleSample {
  std::string id;
  LabelSeq label;
  io::Bytes png;  // preprocessed image, exactly input_height × input_width

  bool operator==(const BundleSample&) const = default;
};

/// One split of a corpus. Layout (little-endian): "HTRB", u32 version, u32 manifest length,
/// manifest JSON (UTF-8), then per sample {u32 id length, id, u32 label length, u32 labels[],
/// u32 PNG length, PNG bytes}.
struct DatasetBundle {
  std::string split;
  Charset charset;
  std::size_t height = 0, width = 0;
  std::vector<BundleSample> samples;
  nlohmann::json extra = nlohmann::json::object();  // provenance carried in the manifest

  nlohmann::json manifest() const {
    nlohmann::json m = extra;
    m["format"] = "HTRB";
    m["version"] = 1;
    m["split"] = split;
    m["samples"] = samples.size();
    m["charset"] = charset.to_utf8();
    m["charset_hash"] = charset.hash();
    m["image"] = {{"height", height}, {"width", width}};
    return m;
  }
};

inline constexpr char kBundleMagic[4] = {'H', 'T', 'R', 'B'};
inline constexpr std::uint32_t kBundleVersion = 1;

/// Split sizes of the reference corpus, kept in every manifest for comparison with run counts.
inline nlohmann::json reference_split_counts() {
  return {{"train", 45470}, {"valid", 9359}, {"test1", 5057}, {"test2", 5057}};
}

inline io::Bytes serialize_bundle(const DatasetBundle& b) {
  io::Bytes out(kBundleMagic, kBundleMagic + 4);
  io::put_u32(out, kBundleVersion);
  io::put_string(out, b.manifest().dump());
  for (const auto& s : b.samples) {
    io::put_string(out, s.id);
    io::put_u32(out, static_cast<std::uint32_t>(s.label.size()));
    for (int k : s.label) io::put_u32(out, static_cast<std::uint32_t>(k));
    io::put_u32(out, static_cast<std::uint32_t>(s.png.size()));
    io::put_bytes(out, s.png.data(), s.png.size());
  }
  return out;
}

inline DatasetBundle deserialize_bundle(const io::Bytes& bytes, const std::string& what = "bundle") {
  io::Reader r(bytes, what);
  if (r.str(4) != std::string(kBundleMagic, 4)) throw InputError(what + ": not a bundle (bad magic)");
  if (const auto v = r.u32(); v != kBundleVersion) throw InputError(what + ": unsupported version " + std::to_string(v));
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw InputError(what + ": malformed manifest: " + e.what());
  }
  DatasetBundle b;
  std::size_t count = 0;
  try {
    b.split = m.at("split").get<std::string>();
    b.charset = Charset::from_utf8(m.at("charset").get<std::string>());
    b.height = m.at("image").at("height").get<std::size_t>();
    b.width = m.at("image").at("width").get<std::size_t>();
    count = m.at("samples").get<std::size_t>();
    if (m.at("charset_hash").get<std::string>() != b.charset.hash()) {
      throw InputError(what + ": charset hash does not match its charset");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(what + ": manifest field missing or mistyped: " + e.what());
  }
  for (const char* k : {"format", "version", "split", "samples", "charset", "charset_hash", "image"}) m.erase(k);
  b.extra = std::move(m);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < count; ++i) {
    BundleSample s;
    s.id = r.string();
    if (!ids.insert(s.id).second) throw InputError(what + ": duplicate sample id '" + s.id + "'");
    const std::uint32_t len = r.u32();
    r.need(std::size_t{4} * len);
    for (std::uint32_t j = 0; j < len; ++j) {
      const std::uint32_t k = r.u32();
      if (k >= b.charset.size()) throw InputError(what + ": sample '" + s.id + "' has label index out of range");
      s.label.push_back(static_cast<int>(k));
    }
    s.png = r.bytes(r.u32());
    b.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw InputError(what + ": trailing bytes after " + std::to_string(count) + " samples");
  return b;
}

inline void save_bundle(const std::filesystem::path& path, const DatasetBundle& b) {
  io::write_file(path.string(), serialize_bundle(b));
}

inline DatasetBundle load_bundle(const std::filesystem::path& path) {
  return deserialize_bundle(io::read_file(path.string()), path.string());
}

// ---------------------------------------------------------------------------
// Corpus → bundles

struct CorpusEntry {
  std::string id;
  std::string text;  // NFC
  std::filesystem::path image;
};

/// Reads `labels.tsv` (id TAB transcript) and resolves `<id>.png` or `<id>.pgm` next to it.
inline std::vector<CorpusEntry> read_corpus(const std::filesystem::path& dir) {
  const auto tsv = dir / "labels.tsv";
  std::ifstream in(tsv);
  if (!in) throw InputError("cannot open " + tsv.string());
  std::vector<CorpusEntry> out;
  std::set<std::string> ids;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string where = tsv.string() + ":" + std::to_string(n);
    if (tab == std::string::npos || tab == 0) throw InputError(where + ": expected id<TAB>transcript");
    CorpusEntry e{line.substr(0, tab), {}, {}};
    try {
      e.text = nfc_string(line.substr(tab + 1));
    } catch (const InputError& err) {
      throw InputError(where + ": " + err.what());
    }
    if (!ids.insert(e.id).second) throw InputError(where + ": duplicate id '" + e.id + "'");
    for (const char* ext : {".png", ".pgm"}) {
      if (std::filesystem::exists(dir / (e.id + ext))) {
        e.image = dir / (e.id + ext);
        break;
      }
    }
    if (e.image.empty()) throw InputError(where + ": no image " + (dir / (e.id + ".png")).string() + " or .pgm");
    out.push_back(std::move(e));
  }
  if (out.empty()) throw InputError(tsv.string() + ": no samples");
  return out;
}

/// Every distinct code point in the transcripts, in order of first appearance.
inline Charset corpus_charset(const std::vector<CorpusEntry>& corpus) {
  std::u32string symbols;
  std::set<char32_t> seen;
  for (const auto& e : corpus)
    for (char32_t c : utf8_decode(e.text))
      if (seen.insert(c).second) symbols.push_back(c);
  return Charset(symbols);
}

/// Sample counts per split by the largest-remainder rule; ties go to the earlier split.
inline std::vector<std::size_t> split_counts(std::size_t total, const std::vector<double>& fractions) {
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    assigned += counts[i];
    rem.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[rem[k % rem.size()].second];
  return counts;
}

/// Assigns corpus indices to splits. Seeded shuffle of ids, then contiguous slices. A
/// word-disjoint split is filled first with whole transcript groups so none of its transcripts
/// occur elsewhere.
inline std::vector<std::vector<std::size_t>> assign_splits(const std::vector<CorpusEntry>& corpus,
                                                           const std::vector<std::pair<std::string, double>>& splits,
                                                           const std::string& word_disjoint, std::uint64_t seed) {
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Sort by id first so the result depends on the id set, not on labels.tsv line order.
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return corpus[a].id < corpus[b].id; });
  Rng rng(derive_seed(seed, {0x5B117}));
  rng.shuffle(order);

  std::vector<double> fractions;
  for (const auto& s : splits) fractions.push_back(s.second);
  std::vector<std::size_t> counts = split_counts(corpus.size(), fractions);
  std::vector<std::vector<std::size_t>> out(splits.size());

  std::size_t disjoint = splits.size();
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i].first == word_disjoint) disjoint = i;
  if (disjoint < splits.size()) {
    // Groups of identical transcripts in shuffled order of first appearance.
    std::map<std::string, std::vector<std::size_t>> groups;
    std::vector<std::string> group_order;
    for (std::size_t idx : order) {
      auto& g = groups[corpus[idx].text];
      if (g.empty()) group_order.push_back(corpus[idx].text);
      g.push_back(idx);
    }
    std::set<std::size_t> taken;
    for (const auto& text : group_order) {
      const auto& g = groups[text];
      if (out[disjoint].size() + g.size() > counts[disjoint]) continue;
      out[disjoint].insert(out[disjoint].end(), g.begin(), g.end());
      taken.insert(g.begin(), g.end());
      if (out[disjoint].size() == counts[disjoint]) break;
    }
    std::vector<std::size_t> rest;
    for (std::size_t idx : order)
      if (!taken.count(idx)) rest.push_back(idx);
    order = std::move(rest);
    // The other splits share what remains in proportion to their fractions.
    std::vector<double> other;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (i != disjoint) other.push_back(fractions[i]);
    double sum = 0;
    for (double f : other) sum += f;
    for (double& f : other) f /= sum;
    const auto oc = split_counts(order.size(), other);
    for (std::size_t i = 0, k = 0; i < splits.size(); ++i)
      if (i != disjoint) counts[i] = oc[k++];
    counts[disjoint] = 0;
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    out[i].insert(out[i].end(), order.begin() + static_cast<std::ptrdiff_t>(pos),
                  order.begin() + static_cast<std::ptrdiff_t>(pos + counts[i]));
    pos += counts[i];
  }
  return out;
}

/// Charset named by the config: the built-in default, the corpus's own symbols, or a file.
inline Charset resolve_charset(const RunConfig& cfg, const std::vector<CorpusEntry>* corpus = nullptr) {
  if (cfg.charset == "default") return default_charset();
  if (cfg.charset == "corpus") {
    if (!corpus) throw ConfigError("charset = corpus needs a corpus");
    return corpus_charset(*corpus);
  }
  const io::Bytes bytes = io::read_file(cfg.charset);
  std::string text(bytes.begin(), bytes.end());
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return Charset::from_utf8(text);
}

/// Preprocesses every image of a corpus and packs the configured splits.
inline std::vector<DatasetBundle> build_bundles(const std::filesystem::path& corpus_dir, const RunConfig& cfg) {
  cfg.validate();
  const auto corpus = read_corpus(corpus_dir);
  const Charset cs = resolve_charset(cfg, &corpus);
  std::vector<LabelSeq> labels(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    try {
      labels[i] = encode_label(corpus[i].text, cs);
    } catch (const InputError& e) {
      throw InputError("sample '" + corpus[i].id + "': " + e.what());
    }
    if (labels[i].size() > cfg.max_label_len) {
      throw InputError("sample '" + corpus[i].id + "': transcript of " + std::to_string(labels[i].size()) +
                       " characters exceeds max_label_len " + std::to_string(cfg.max_label_len));
    }
  }
  const PreprocessOptions opt{cfg.input_height, cfg.input_width, cfg.illumination, cfg.deslant};
  std::vector<io::Bytes> png(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) { png[i] = encode_png(preprocess(load_image(corpus[i].image), opt)); });

  const auto splits = parse_splits(cfg.splits);
  const auto members = assign_splits(corpus, splits, cfg.word_disjoint, cfg.seed);
  std::vector<DatasetBundle> out;
  for (std::size_t s = 0; s < splits.size(); ++s) {
    DatasetBundle b;
    b.split = splits[s].first;
    b.charset = cs;
    b.height = cfg.input_height;
    b.width = cfg.input_width;
    b.extra["seed"] = cfg.seed;
    b.extra["word_disjoint"] = splits[s].first == cfg.word_disjoint;
    nlohmann::json fr = nlohmann::json::object();
    for (const auto& [name, f] : splits) fr[name] = f;
    b.extra["split_fractions"] = fr;
    b.extra["reference_split_counts"] = reference_split_counts();
    for (std::size_t idx : members[s]) b.samples.push_back({corpus[idx].id, labels[idx], png[idx]});
    out.push_back(std::move(b));
  }
  return out;
}

/// Decoded sample ready for the model.
struct LoadedSample {
  std::string id;
  LabelSeq label;
  Tensor image;  // 1×H×W
};

inline std::vector<LoadedSample> load_samples(const DatasetBundle& b, bool invert) {
  std::vector<LoadedSample> out(b.samples.size());
  parallel_for(b.samples.size(), [&](std::size_t i) {
    const RawImage img = decode_png(b.samples[i].png);
    if (img.height != b.height || img.width != b.width) {
      throw InputError("bundle sample '" + b.samples[i].id + "' is " + std::to_string(img.height) + "x" +
                       std::to_string(img.width) + ", manifest says " + std::to_string(b.height) + "x" +
                       std::to_string(b.width));
    }
    out[i] = {b.samples[i].id, b.samples[i].label, to_tensor(img, invert)};
  });
  return out;
}

}  // namespace htr
