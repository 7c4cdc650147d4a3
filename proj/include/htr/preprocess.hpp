#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "htr/image.hpp"
#include "htr/tensor.hpp"

namespace htr {

/// Lower median of the outermost ring of pixels: the background estimate used for padding.
inline std::uint8_t border_median(const RawImage& img) {
  std::vector<std::uint8_t> ring;
  for (std::size_t x = 0; x < img.width; ++x) {
    ring.push_back(img.at(0, x));
    if (img.height > 1) ring.push_back(img.at(img.height - 1, x));
  }
  for (std::size_t y = 1; y + 1 < img.height; ++y) {
    ring.push_back(img.at(y, 0));
    if (img.width > 1) ring.push_back(img.at(y, img.width - 1));
  }
  auto mid = ring.begin() + static_cast<std::ptrdiff_t>((ring.size() - 1) / 2);
  std::nth_element(ring.begin(), mid, ring.end());
  return *mid;
}

/// Bilinear resampling with half-pixel centres. Same-size requests copy exactly.
inline RawImage resample(const RawImage& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == img.height && out_w == img.width) return img;
  RawImage out(out_h, out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = img.at(y0, x0) * (1 - wx) + img.at(y0, x1) * wx;
      const double bot = img.at(y1, x0) * (1 - wx) + img.at(y1, x1) * wx;
      out.at(y, x) = static_cast<std::uint8_t>(std::lround(top * (1 - wy) + bot * wy));
    }
  }
  return out;
}

/// Aspect-preserving fit into target_h × target_w; content left-anchored and vertically centred,
/// the rest filled with the border-median background.
inline RawImage resize_with_padding(const RawImage& img, std::size_t target_h, std::size_t target_w) {
  if (img.empty()) throw UsageError("resize_with_padding: empty image");
  const double scale = std::min(static_cast<double>(target_w) / static_cast<double>(img.width),
                                static_cast<double>(target_h) / static_cast<double>(img.height));
  const auto fit = [scale](std::size_t n, std::size_t limit) {
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(static_cast<double>(n) * scale)), 1, limit);
  };
  const std::size_t h = fit(img.height, target_h), w = fit(img.width, target_w);
  const RawImage scaled = resample(img, h, w);
  if (h == target_h && w == target_w) return scaled;
  RawImage out(target_h, target_w, border_median(img));
  const std::size_t top = (target_h - h) / 2;
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(scaled.pixels.begin() + static_cast<std::ptrdiff_t>(y * w), w,
                out.pixels.begin() + static_cast<std::ptrdiff_t>((top + y) * target_w));
  return out;
}

/// Index into [0, n) under symmetric reflection (… c b a | a b c … ), any offset.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - 1 - m);
}

/// Median over a (2r+1)² window with reflected borders, via a sliding column histogram.
inline RawImage median_filter(const RawImage& img, std::size_t radius) {
  const auto r = static_cast<std::ptrdiff_t>(radius);
  RawImage out(img.height, img.width);
  const std::size_t count = (2 * radius + 1) * (2 * radius + 1);
  std::array<std::size_t, 256> hist{};
  for (std::size_t y = 0; y < img.height; ++y) {
    std::vector<std::size_t> rows;
    for (std::ptrdiff_t dy = -r; dy <= r; ++dy) rows.push_back(reflect_index(static_cast<std::ptrdiff_t>(y) + dy, img.height));
    auto column = [&](std::ptrdiff_t x, bool add) {
      const std::size_t xx = reflect_index(x, img.width);
      for (std::size_t yy : rows) {
        if (add) ++hist[img.at(yy, xx)];
        else --hist[img.at(yy, xx)];
      }
    };
    hist.fill(0);
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) column(dx, true);
    for (std::size_t x = 0; x < img.width; ++x) {
      if (x > 0) {
        column(static_cast<std::ptrdiff_t>(x) + r, true);
        column(static_cast<std::ptrdiff_t>(x) - r - 1, false);
      }
      std::size_t rank = (count - 1) / 2, v = 0;
      while (hist[v] <= rank) rank -= hist[v++];
      out.at(y, x) = static_cast<std::uint8_t>(v);
    }
  }
  return out;
}

/// Divides out a smooth background estimated by a 31×31 median; flat backgrounds pass through.
inline RawImage illumination_compensate(const RawImage& img) {
  const RawImage bg = median_filter(img, 15);
  RawImage out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = 255.0 * img.pixels[i] / std::max<double>(bg.pixels[i], 1.0);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::min(v, 255.0)));
  }
  return out;
}

/// Otsu threshold; pixels ≤ threshold are ink. Empty when the image has a single intensity.
inline std::optional<int> otsu_threshold(const RawImage& img) {
  std::array<double, 256> hist{};
  for (auto p : img.pixels) hist[p] += 1;
  if (std::count_if(hist.begin(), hist.end(), [](double h) { return h > 0; }) < 2) return std::nullopt;
  const double total = static_cast<double>(img.pixels.size());
  double sum_all = 0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];
  double w0 = 0, sum0 = 0, best = -1;
  int threshold = 0;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      threshold = t;
    }
  }
  return threshold;
}

namespace preprocess_detail {

inline double tan_deg(double deg) { return std::tan(deg * std::numbers::pi / 180.0); }

// Horizontal margin that keeps every sheared row inside the widened canvas.
inline std::size_t shear_pad(std::size_t height, double t) {
  return static_cast<std::size_t>(std::ceil(std::abs(t) * static_cast<double>(height - 1) / 2.0));
}

}  // namespace preprocess_detail

/// Horizontal shear x' = x + (y − y_c)·tan θ about the middle row, widening the canvas so no
/// content is lost. Positive θ leans the top of the content to the left.
inline RawImage shear_image(const RawImage& img, double degrees) {
  if (degrees == 0.0) return img;
  const double t = preprocess_detail::tan_deg(degrees);
  const std::size_t pad = preprocess_detail::shear_pad(img.height, t);
  const double cy = static_cast<double>(img.height - 1) / 2.0;
  RawImage out(img.height, img.width + 2 * pad, border_median(img));
  for (std::size_t y = 0; y < img.height; ++y) {
    const double shift = (static_cast<double>(y) - cy) * t + static_cast<double>(pad);
    for (std::size_t x = 0; x < out.width; ++x) {
      const double sx = static_cast<double>(x) - shift;
      if (sx < -0.5 || sx > static_cast<double>(img.width) - 0.5) continue;
      const double fx = std::clamp(sx, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double w = fx - static_cast<double>(x0);
      out.at(y, x) = static_cast<std::uint8_t>(std::lround(img.at(y, x0) * (1 - w) + img.at(y, x1) * w));
    }
  }
  return out;
}

/// Shear angle in {−45°, …, 45°} (3° grid) whose sheared ink has the sharpest vertical projection
/// (largest Σ hist²). Ties go to the smallest |θ|. Empty when the image cannot be binarized.
inline std::optional<double> estimate_slant(const RawImage& img) {
  const auto threshold = otsu_threshold(img);
  if (!threshold) return std::nullopt;
  std::vector<std::pair<std::size_t, std::size_t>> ink;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      if (img.at(y, x) <= *threshold) ink.emplace_back(y, x);
  const double cy = static_cast<double>(img.height - 1) / 2.0;
  auto sharpness = [&](double deg) {
    const double t = preprocess_detail::tan_deg(deg);
    const std::size_t pad = preprocess_detail::shear_pad(img.height, t);
    std::vector<std::uint64_t> hist(img.width + 2 * pad + 2, 0);
    for (auto [y, x] : ink) {
      const long col = std::lround(static_cast<double>(x) + (static_cast<double>(y) - cy) * t + static_cast<double>(pad));
      ++hist[static_cast<std::size_t>(std::clamp<long>(col, 0, static_cast<long>(hist.size()) - 1))];
    }
    std::uint64_t s = 0;
    for (auto h : hist) s += h * h;
    return s;
  };
  double best_deg = 0;
  std::uint64_t best = sharpness(0);
  for (int step = 3; step <= 45; step += 3) {
    for (int sign : {1, -1}) {
      const std::uint64_t s = sharpness(sign * step);
      if (s > best) {
        best = s;
        best_deg = sign * step;
      }
    }
  }
  return best_deg;
}

/// Shears by the estimated slant; degenerate or already-upright images come back unchanged.
inline RawImage deslant(const RawImage& img) {
  const auto angle = estimate_slant(img);
  if (!angle || *angle == 0.0) return img;
  return shear_image(img, *angle);
}

struct PreprocessOptions {
  std::size_t height = 128;
  std::size_t width = 1024;
  bool illumination = true;
  bool deslant = true;
};

/// Illumination compensation, deslanting, then resize-with-padding to the model input.
inline RawImage preprocess(const RawImage& img, const PreprocessOptions& opt) {
  RawImage cur = opt.illumination ? illumination_compensate(img) : img;
  if (opt.deslant) cur = deslant(cur);
  return resize_with_padding(cur, opt.height, opt.width);
}

/// 1×H×W tensor in [0, 1]; ink maps to 1 on white-background images, or the reverse with `invert`.
inline Tensor to_tensor(const RawImage& img, bool invert = false) {
  Tensor out({1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = img.pixels[i] / 255.0;
    out[i] = invert ? v : 1.0 - v;
  }
  return out;
}

}  // namespace htr
