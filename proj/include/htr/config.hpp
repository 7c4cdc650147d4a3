#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "htr/errors.hpp"
#include "htr/tensor.hpp"

namespace htr {

/// Every knob of a run. Parsed from flat `key = value` text; unknown keys are rejected.
struct RunConfig {
  // Input and preprocessing
  std::size_t input_height = 128;
  std::size_t input_width = 1024;
  bool invert = false;
  bool illumination = true;
  bool deslant = true;

  // Encoder
  std::vector<std::size_t> enc_channels{16, 32, 40, 48, 64};
  std::vector<Extent2> enc_kernels{{3, 3}, {3, 3}, {2, 4}, {3, 3}, {2, 4}};
  std::vector<Extent2> enc_strides{{2, 2}, {2, 1}, {2, 2}, {2, 1}, {2, 2}};
  std::vector<Extent2> enc_padding{{1, 1}, {1, 1}, {0, 1}, {1, 1}, {0, 1}};
  std::vector<std::size_t> gates{2, 4};  // 1-based block numbers followed by a gated layer
  Extent2 gate_kernel{3, 3};
  double dropout = 0.2;
  std::vector<std::size_t> dropout_blocks{1, 2, 3, 4, 5};
  std::size_t feature_dim = 256;

  // Attention and decoder
  std::size_t attention_dim = 256;
  std::size_t attention_out = 256;
  bool tied_projections = false;
  std::size_t gru_hidden = 128;
  std::size_t gru_layers = 2;
  std::size_t max_label_len = 96;

  // Optimization
  double learning_rate = 1e-3;
  double rho = 0.9;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // 0 disables clipping
  std::size_t batch_size = 32;
  std::size_t patience = 20;
  std::size_t max_epochs = 400;
  double max_seconds = 0.0;  // 0 disables the wall-clock cap
  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0 uses every available core

  // Data and decoding
  std::string charset = "default";
  std::string splits = "train:0.7,valid:0.15,test:0.15";
  std::string word_disjoint;
  std::string decode = "greedy";
  std::size_t beam_width = 16;

  bool operator==(const RunConfig&) const = default;

  /// (height, width) of the final feature map; throws ConfigError on an impossible schedule.
  Extent2 feature_map_extent() const;
  void validate() const;
  std::string dump() const;
  static RunConfig parse(const std::string& text);
  static std::string help();
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, sep)) out.push_back(trim(cur));
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected a finite number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline Extent2 parse_extent(const std::string& key, const std::string& v) {
  const auto x = v.find('x');
  if (x == std::string::npos) throw ConfigError("config key '" + key + "': expected HxW, got '" + v + "'");
  return {parse_uint(key, v.substr(0, x)), parse_uint(key, v.substr(x + 1))};
}

inline std::string format_real(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string format_extent(Extent2 e) { return std::to_string(e.h) + "x" + std::to_string(e.w); }

template <typename T, typename Fmt>
std::string join(const std::vector<T>& xs, Fmt fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

struct Key {
  const char* name;
  const char* help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Key uint_key(const char* name, const char* help, T RunConfig::*m) {
  return {name, help, [m](const RunConfig& c) { return std::to_string(c.*m); },
          [m, name](RunConfig& c, const std::string& v) { c.*m = static_cast<T>(parse_uint(name, v)); }};
}

inline Key real_key(const char* name, const char* help, double RunConfig::*m) {
  return {name, help, [m](const RunConfig& c) { return format_real(c.*m); },
          [m, name](RunConfig& c, const std::string& v) { c.*m = parse_real(name, v); }};
}

inline Key bool_key(const char* name, const char* help, bool RunConfig::*m) {
  return {name, help, [m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); },
          [m, name](RunConfig& c, const std::string& v) { c.*m = parse_bool(name, v); }};
}

inline Key string_key(const char* name, const char* help, std::string RunConfig::*m) {
  return {name, help, [m](const RunConfig& c) { return c.*m; },
          [m](RunConfig& c, const std::string& v) { c.*m = v; }};
}

inline Key uint_list_key(const char* name, const char* help, std::vector<std::size_t> RunConfig::*m) {
  return {name, help,
          [m](const RunConfig& c) { return join(c.*m, [](std::size_t v) { return std::to_string(v); }); },
          [m, name](RunConfig& c, const std::string& v) {
            (c.*m).clear();
            if (v.empty()) return;
            for (const auto& part : split(v, ',')) (c.*m).push_back(parse_uint(name, part));
          }};
}

inline Key extent_list_key(const char* name, const char* help, std::vector<Extent2> RunConfig::*m) {
  return {name, help, [m](const RunConfig& c) { return join(c.*m, format_extent); },
          [m, name](RunConfig& c, const std::string& v) {
            (c.*m).clear();
            if (v.empty()) return;
            for (const auto& part : split(v, ',')) (c.*m).push_back(parse_extent(name, part));
          }};
}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> k{
      uint_key("input_height", "model input height in pixels", &RunConfig::input_height),
      uint_key("input_width", "model input width in pixels", &RunConfig::input_width),
      bool_key("invert", "treat images as light ink on dark background", &RunConfig::invert),
      bool_key("illumination", "apply 31x31 median illumination compensation", &RunConfig::illumination),
      bool_key("deslant", "apply projection-based shear correction", &RunConfig::deslant),
      uint_list_key("enc_channels", "output channels per encoder block", &RunConfig::enc_channels),
      extent_list_key("enc_kernels", "kernel HxW per encoder block", &RunConfig::enc_kernels),
      extent_list_key("enc_strides", "stride HxW per encoder block", &RunConfig::enc_strides),
      extent_list_key("enc_padding", "zero padding HxW per encoder block", &RunConfig::enc_padding),
      uint_list_key("gates", "1-based blocks followed by a gated layer (may be empty)", &RunConfig::gates),
      {"gate_kernel", "gate convolution kernel HxW (odd extents)",
       [](const RunConfig& c) { return format_extent(c.gate_kernel); },
       [](RunConfig& c, const std::string& v) { c.gate_kernel = parse_extent("gate_kernel", v); }},
      real_key("dropout", "dropout probability inside encoder blocks, in [0, 1)", &RunConfig::dropout),
      uint_list_key("dropout_blocks", "1-based blocks that apply dropout", &RunConfig::dropout_blocks),
      uint_key("feature_dim", "features per time step; must equal channels x height of the last map",
               &RunConfig::feature_dim),
      uint_key("attention_dim", "additive-attention score dimension", &RunConfig::attention_dim),
      uint_key("attention_out", "width of the attention vector fed to the decoder", &RunConfig::attention_out),
      bool_key("tied_projections", "share one matrix for query and key projections", &RunConfig::tied_projections),
      uint_key("gru_hidden", "GRU hidden size per direction", &RunConfig::gru_hidden),
      uint_key("gru_layers", "stacked bidirectional GRU layers", &RunConfig::gru_layers),
      uint_key("max_label_len", "longest transcript accepted, in characters", &RunConfig::max_label_len),
      real_key("learning_rate", "RMSProp learning rate", &RunConfig::learning_rate),
      real_key("rho", "RMSProp squared-gradient decay", &RunConfig::rho),
      real_key("epsilon", "RMSProp denominator offset", &RunConfig::epsilon),
      real_key("clip_norm", "global gradient-norm clip, 0 disables", &RunConfig::clip_norm),
      uint_key("batch_size", "samples per mini-batch", &RunConfig::batch_size),
      uint_key("patience", "epochs without validation improvement before stopping", &RunConfig::patience),
      uint_key("max_epochs", "hard cap on epochs", &RunConfig::max_epochs),
      real_key("max_seconds", "wall-clock cap on training, 0 disables", &RunConfig::max_seconds),
      uint_key("seed", "master seed for every random choice", &RunConfig::seed),
      uint_key("threads", "worker threads, 0 uses all cores", &RunConfig::threads),
      string_key("charset", "'default', 'corpus' (symbols seen in labels.tsv), or a UTF-8 file path",
                 &RunConfig::charset),
      string_key("splits", "name:fraction list for preprocess; fractions sum to 1", &RunConfig::splits),
      string_key("word_disjoint", "split whose transcripts never occur in any other split (may be empty)",
                 &RunConfig::word_disjoint),
      string_key("decode", "'greedy' or 'beam'", &RunConfig::decode),
      uint_key("beam_width", "prefix beam width for decode = beam", &RunConfig::beam_width),
  };
  return k;
}

}  // namespace config_detail

/// Parsed `name:fraction` list.
inline std::vector<std::pair<std::string, double>> parse_splits(const std::string& text) {
  std::vector<std::pair<std::string, double>> out;
  std::set<std::string> seen;
  double total = 0;
  for (const auto& part : config_detail::split(text, ',')) {
    const auto colon = part.find(':');
    if (colon == std::string::npos || colon == 0) throw ConfigError("splits: expected name:fraction, got '" + part + "'");
    const std::string name = config_detail::trim(part.substr(0, colon));
    const double f = config_detail::parse_real("splits", config_detail::trim(part.substr(colon + 1)));
    if (!(f > 0 && f <= 1)) throw ConfigError("splits: fraction of '" + name + "' must lie in (0, 1]");
    if (!seen.insert(name).second) throw ConfigError("splits: duplicate split '" + name + "'");
    out.emplace_back(name, f);
    total += f;
  }
  if (out.empty()) throw ConfigError("splits: no splits given");
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("splits: fractions sum to " + config_detail::format_real(total) + ", expected 1");
  }
  return out;
}

inline Extent2 RunConfig::feature_map_extent() const {
  std::size_t h = input_height, w = input_width;
  for (std::size_t i = 0; i < enc_channels.size(); ++i) {
    const Extent2 k = enc_kernels[i], s = enc_strides[i], p = enc_padding[i];
    if (k.h == 0 || k.w == 0 || s.h == 0 || s.w == 0) throw ConfigError("encoder block " + std::to_string(i + 1) +
                                                                        ": kernel and stride extents must be positive");
    if (k.h > h + 2 * p.h || k.w > w + 2 * p.w) {
      throw ConfigError("encoder block " + std::to_string(i + 1) + ": kernel " + config_detail::format_extent(k) +
                        " exceeds padded input " + std::to_string(h + 2 * p.h) + "x" + std::to_string(w + 2 * p.w));
    }
    h = (h + 2 * p.h - k.h) / s.h + 1;
    w = (w + 2 * p.w - k.w) / s.w + 1;
  }
  return {h, w};
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (input_height == 0 || input_width == 0) fail("input_height and input_width must be positive");
  const std::size_t blocks = enc_channels.size();
  if (blocks == 0) fail("enc_channels: at least one encoder block is required");
  if (enc_kernels.size() != blocks || enc_strides.size() != blocks || enc_padding.size() != blocks) {
    fail("enc_channels, enc_kernels, enc_strides and enc_padding must list the same number of blocks (" +
         std::to_string(blocks) + ")");
  }
  for (std::size_t c : enc_channels)
    if (c == 0) fail("enc_channels: channel counts must be positive");
  std::set<std::size_t> seen;
  for (std::size_t g : gates) {
    if (g < 1 || g > blocks) fail("gates: block " + std::to_string(g) + " outside 1.." + std::to_string(blocks));
    if (!seen.insert(g).second) fail("gates: block " + std::to_string(g) + " listed twice");
  }
  if (gate_kernel.h % 2 == 0 || gate_kernel.w % 2 == 0) fail("gate_kernel: extents must be odd for same padding");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must lie in [0, 1)");
  for (std::size_t b : dropout_blocks)
    if (b < 1 || b > blocks) fail("dropout_blocks: block " + std::to_string(b) + " outside 1.." + std::to_string(blocks));
  const Extent2 fm = feature_map_extent();
  if (enc_channels.back() * fm.h != feature_dim) {
    fail("feature_dim " + std::to_string(feature_dim) + " does not match the final feature map: " +
         std::to_string(enc_channels.back()) + " channels x height " + std::to_string(fm.h) + " = " +
         std::to_string(enc_channels.back() * fm.h));
  }
  if (attention_dim == 0 || attention_out == 0) fail("attention_dim and attention_out must be positive");
  if (tied_projections && feature_dim == 0) fail("tied_projections needs a positive feature_dim");
  if (gru_hidden == 0 || gru_layers == 0) fail("gru_hidden and gru_layers must be positive");
  if (max_label_len == 0) fail("max_label_len must be positive");
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (!(rho > 0 && rho < 1)) fail("rho must lie in (0, 1)");
  if (!(epsilon > 0)) fail("epsilon must be positive");
  if (!(clip_norm >= 0)) fail("clip_norm must be non-negative");
  if (batch_size == 0) fail("batch_size must be positive");
  if (patience == 0) fail("patience must be positive");
  if (max_epochs == 0) fail("max_epochs must be positive");
  if (!(max_seconds >= 0)) fail("max_seconds must be non-negative");
  if (charset.empty()) fail("charset must name 'default', 'corpus' or a file");
  const auto sp = parse_splits(splits);
  if (!word_disjoint.empty() &&
      std::none_of(sp.begin(), sp.end(), [&](const auto& s) { return s.first == word_disjoint; })) {
    fail("word_disjoint names unknown split '" + word_disjoint + "'");
  }
  if (decode != "greedy" && decode != "beam") fail("decode must be 'greedy' or 'beam', got '" + decode + "'");
  if (beam_width == 0) fail("beam_width must be positive");
}

inline std::string RunConfig::dump() const {
  std::string out;
  for (const auto& k : config_detail::keys()) out += std::string(k.name) + " = " + k.get(*this) + "\n";
  return out;
}

inline RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  for (std::size_t n = 1; std::getline(ss, line); ++n) {
    const std::string body = config_detail::trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    const std::string key = config_detail::trim(body.substr(0, eq));
    const std::string value = config_detail::trim(body.substr(eq + 1));
    const auto& ks = config_detail::keys();
    const auto it = std::find_if(ks.begin(), ks.end(), [&](const auto& k) { return key == k.name; });
    if (it == ks.end()) throw ConfigError("config line " + std::to_string(n) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(n) + ": key '" + key + "' repeated");
    it->set(c, value);
  }
  c.validate();
  return c;
}

inline std::string RunConfig::help() {
  const RunConfig defaults;
  std::string out = "Config keys (key = value, '#' starts a comment):\n";
  for (const auto& k : config_detail::keys()) {
    out += "  " + std::string(k.name) + " = " + k.get(defaults) + "\n      " + k.help + "\n";
  }
  return out;
}

/// Reduced model for the procedurally rendered 12-symbol corpus: 32×256 input, 32 time steps.
inline RunConfig toy_config() {
  RunConfig c;
  c.input_height = 32;
  c.input_width = 256;
  c.illumination = false;
  c.deslant = false;
  c.enc_channels = {8, 16, 16, 24, 32};
  c.gates = {2, 4};
  c.dropout = 0.0;
  c.dropout_blocks = {};
  c.feature_dim = 32;
  c.attention_dim = 32;
  c.attention_out = 32;
  c.gru_hidden = 32;
  c.gru_layers = 2;
  c.max_label_len = 8;
  c.splits = "train:0.8333333333333334,valid:0.08333333333333333,test:0.08333333333333333";
  c.max_epochs = 60;
  c.max_seconds = 1500;
  c.charset = "corpus";
  return c;
}

}  // namespace htr
