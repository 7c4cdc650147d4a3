#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "htr/image.hpp"
#include "htr/rng.hpp"
#include "htr/unicode.hpp"

namespace htr {

// 5×7 bitmaps for a 12-letter Cyrillic toy alphabet.
inline constexpr char32_t kToyAlphabet[] = U"АБВГДЕЖЗИКЛМ";
inline constexpr std::size_t kToySymbols = 12;

inline const std::array<std::array<const char*, 7>, kToySymbols>& toy_glyphs() {
  static const std::array<std::array<const char*, 7>, kToySymbols> g{{
      {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},  // А
      {"#####", "#....", "#....", "####.", "#...#", "#...#", "####."},  // Б
      {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."},  // В
      {"#####", "#....", "#....", "#....", "#....", "#....", "#...."},  // Г
      {"..##.", ".#.#.", ".#.#.", ".#.#.", ".#.#.", "#####", "#...#"},  // Д
      {"#####", "#....", "#....", "####.", "#....", "#....", "#####"},  // Е
      {"#.#.#", "#.#.#", ".###.", "..#..", ".###.", "#.#.#", "#.#.#"},  // Ж
      {".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."},  // З
      {"#...#", "#...#", "#..##", "#.#.#", "##..#", "#...#", "#...#"},  // И
      {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"},  // К
      {"..###", ".#..#", ".#..#", ".#..#", ".#..#", ".#..#", "#...#"},  // Л
      {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"},  // М
  }};
  return g;
}

inline std::u32string toy_alphabet() { return std::u32string(kToyAlphabet, kToySymbols); }

/// Renders symbol indices as dark strokes on a light, noisy 32-pixel-high canvas. Cell size,
/// spacing, baseline jitter, ink and background tone vary per call.
inline RawImage render_toy_word(const std::vector<int>& symbols, Rng& rng) {
  const std::size_t cell = static_cast<std::size_t>(rng.uniform_int(3, 4));
  const std::size_t margin = static_cast<std::size_t>(rng.uniform_int(2, 8));
  std::vector<std::size_t> gaps;
  std::size_t width = 2 * margin;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    gaps.push_back(i == 0 ? 0 : static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cell), static_cast<int>(2 * cell))));
    width += gaps.back() + 5 * cell;
  }
  const double background = rng.uniform(200, 250), ink = rng.uniform(0, 70);
  std::vector<double> canvas(32 * width, background);
  std::size_t x0 = margin;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    x0 += gaps[i];
    const int top = static_cast<int>((32 - 7 * cell) / 2) + rng.uniform_int(-2, 2);
    const auto& glyph = toy_glyphs().at(static_cast<std::size_t>(symbols[i]));
    for (std::size_t r = 0; r < 7; ++r)
      for (std::size_t c = 0; c < 5; ++c) {
        if (glyph[r][c] != '#') continue;
        for (std::size_t dy = 0; dy < cell; ++dy)
          for (std::size_t dx = 0; dx < cell; ++dx) {
            const int y = top + static_cast<int>(r * cell + dy);
            if (y >= 0 && y < 32) canvas[static_cast<std::size_t>(y) * width + x0 + c * cell + dx] = ink;
          }
      }
    x0 += 5 * cell;
  }
  RawImage img(32, width);
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double v = canvas[i] + 12.0 * rng.normal();
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  return img;
}

/// Writes `count` rendered words of 1 to 5 symbols as `<id>.png` plus `labels.tsv`.
inline void write_toy_corpus(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  Rng rng(derive_seed(seed, {0x70F}));
  std::string tsv;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> symbols(static_cast<std::size_t>(rng.uniform_int(1, 5)));
    for (int& s : symbols) s = rng.uniform_int(0, static_cast<int>(kToySymbols) - 1);
    char id[32];
    std::snprintf(id, sizeof id, "toy%05zu", i);
    save_png(dir / (std::string(id) + ".png"), render_toy_word(symbols, rng));
    std::u32string text;
    for (int s : symbols) text.push_back(kToyAlphabet[s]);
    tsv += std::string(id) + "\t" + utf8_encode(text) + "\n";
  }
  io::write_file((dir / "labels.tsv").string(), io::Bytes(tsv.begin(), tsv.end()));
}

}  // namespace htr
