#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "htr/errors.hpp"
#include "htr/parallel.hpp"
#include "htr/rng.hpp"
#include "htr/tensor.hpp"

namespace htr {

enum class Mode { train, infer };

/// Feature maps flow through the encoder as N×C×H×W; a single C×H×W map is treated as N = 1.
struct MapDims {
  std::size_t n, c, h, w;
  std::size_t per_sample() const { return c * h * w; }
};

inline MapDims map_dims(const Tensor& x, const char* where) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw DimensionError(std::string(where) + ": expected C×H×W or N×C×H×W, got " + to_string(x.shape()));
}

inline Shape map_shape(const MapDims& d, bool batched) {
  return batched ? Shape{d.n, d.c, d.h, d.w} : Shape{d.c, d.h, d.w};
}

// ---------------------------------------------------------------------------
// Gated convolution: y = tanh(conv(x; W)) ⊙ x, same padding, stride 1.

struct GateParams {
  Tensor kernels;  // C×C×kh×kw, kh and kw odd
};

struct GateCache {
  Tensor input;
  Tensor gate;  // tanh(conv(x; W)), same shape as input
};

struct GateGrads {
  Tensor input;
  Tensor kernels;
};

inline ConvGeometry gate_geometry(const MapDims& d, const GateParams& p) {
  const Tensor& k = p.kernels;
  if (k.rank() != 4 || k.dim(0) != d.c || k.dim(1) != d.c) {
    throw DimensionError("gate kernels " + to_string(k.shape()) + " do not match " + std::to_string(d.c) +
                         " input channels");
  }
  ConvGeometry g{d.c, d.h, d.w, d.c, k.dim(2), k.dim(3), {1, 1}, {k.dim(2) / 2, k.dim(3) / 2}};
  g.validate();
  if (g.out_h() != d.h || g.out_w() != d.w) {
    throw DimensionError("gate convolution changes the map from " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                         " to " + std::to_string(g.out_h()) + "x" + std::to_string(g.out_w()) +
                         "; gate kernels need odd extents");
  }
  return g;
}

inline Tensor gated_forward(const Tensor& x, const GateParams& p, GateCache* cache = nullptr) {
  const MapDims d = map_dims(x, "gated_forward");
  const ConvGeometry g = gate_geometry(d, p);
  Tensor gate(x.shape());
  parallel_for(d.n, [&](std::size_t i) {
    kernel::ConvScratch scratch;
    double* gi = gate.raw() + i * d.per_sample();
    kernel::conv2d_forward(g, x.raw() + i * d.per_sample(), p.kernels.raw(), gi, scratch);
    for (std::size_t j = 0; j < d.per_sample(); ++j) gi[j] = std::tanh(gi[j]);
  });
  Tensor y(x.shape());
  for (std::size_t j = 0; j < y.size(); ++j) y[j] = gate[j] * x[j];
  require_finite(y, "gated_forward");
  if (cache) *cache = GateCache{x, std::move(gate)};
  return y;
}

inline GateGrads gated_backward(const GateCache& cache, const GateParams& p, const Tensor& grad_out) {
  if (cache.input.empty() || cache.gate.empty()) throw UsageError("gated_backward: no cached forward state");
  if (!same_shape(grad_out, cache.input)) {
    throw DimensionError("gated_backward: grad_out " + to_string(grad_out.shape()) + " vs input " +
                         to_string(cache.input.shape()));
  }
  const MapDims d = map_dims(cache.input, "gated_backward");
  const ConvGeometry g = gate_geometry(d, p);
  GateGrads grads{Tensor(cache.input.shape()), Tensor(p.kernels.shape())};
  // Pre-activation gradient of the gate convolution.
  Tensor grad_pre(cache.input.shape());
  for (std::size_t j = 0; j < grad_pre.size(); ++j) {
    const double gv = cache.gate[j];
    grads.input[j] = grad_out[j] * gv;
    grad_pre[j] = grad_out[j] * cache.input[j] * (1.0 - gv * gv);
  }
  std::vector<Tensor> kernel_parts(d.n, Tensor(p.kernels.shape()));
  parallel_for(d.n, [&](std::size_t i) {
    kernel::ConvScratch scratch;
    const std::size_t off = i * d.per_sample();
    kernel::conv2d_backward(g, cache.input.raw() + off, p.kernels.raw(), grad_pre.raw() + off,
                            grads.input.raw() + off, kernel_parts[i].raw(), scratch, true);
  });
  for (const auto& part : kernel_parts)
    for (std::size_t j = 0; j < part.size(); ++j) grads.kernels[j] += part[j];
  return grads;
}

// ---------------------------------------------------------------------------
// Convolutional block: conv → PReLU → batch norm → inverted dropout.

struct ConvBlockParams {
  Tensor kernels;      // C_out×C_in×kh×kw
  Tensor prelu_alpha;  // C_out
  Tensor bn_gamma;     // C_out
  Tensor bn_beta;      // C_out
  Tensor bn_running_mean;
  Tensor bn_running_var;
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  double dropout_p = 0.0;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;

  std::size_t out_channels() const { return kernels.dim(0); }

  /// Fresh block: unit BN scale, zero shift, running stats (0, 1), PReLU slope 0.25.
  static ConvBlockParams make(std::size_t in_channels, std::size_t out_channels, Extent2 kernel, Extent2 stride,
                              Extent2 padding, double dropout_p) {
    ConvBlockParams p;
    p.kernels = Tensor({out_channels, in_channels, kernel.h, kernel.w});
    p.prelu_alpha = Tensor({out_channels}, 0.25);
    p.bn_gamma = Tensor({out_channels}, 1.0);
    p.bn_beta = Tensor({out_channels}, 0.0);
    p.bn_running_mean = Tensor({out_channels}, 0.0);
    p.bn_running_var = Tensor({out_channels}, 1.0);
    p.stride = stride;
    p.padding = padding;
    p.dropout_p = dropout_p;
    return p;
  }

  void validate() const {
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
    const std::size_t c = out_channels();
    for (const Tensor* t : {&prelu_alpha, &bn_gamma, &bn_beta, &bn_running_mean, &bn_running_var}) {
      if (t->shape() != Shape{c}) throw DimensionError("conv block per-channel vector has shape " + to_string(t->shape()));
    }
    for (double v : bn_running_var.data())
      if (v < 0) throw NumericError("batch-norm running variance is negative");
  }
};

struct ConvBlockCache {
  Tensor input;
  Tensor conv_out;    // before PReLU
  Tensor normalized;  // x̂ after PReLU and standardization
  std::vector<double> inv_std;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased
  Tensor mask;                    // inverted-dropout multipliers; empty when no dropout applied
  Mode mode = Mode::infer;
};

struct ConvBlockGrads {
  Tensor input;
  Tensor kernels;
  Tensor prelu_alpha;
  Tensor bn_gamma;
  Tensor bn_beta;
};

inline ConvGeometry block_geometry(const MapDims& d, const ConvBlockParams& p) {
  const Tensor& k = p.kernels;
  if (k.rank() != 4 || k.dim(1) != d.c) {
    throw DimensionError("conv block kernels " + to_string(k.shape()) + " do not match " + std::to_string(d.c) +
                         " input channels");
  }
  ConvGeometry g{d.c, d.h, d.w, k.dim(0), k.dim(2), k.dim(3), p.stride, p.padding};
  g.validate();
  return g;
}

/// Inverted-dropout multipliers: 0 with probability p, 1/(1-p) otherwise.
inline Tensor dropout_mask(const Shape& shape, double p, std::uint64_t seed) {
  Tensor mask(shape);
  Rng rng(seed);
  const double keep = 1.0 / (1.0 - p);
  for (double& m : mask.data()) m = rng.uniform() < p ? 0.0 : keep;
  return mask;
}

inline Tensor conv_block_forward(const Tensor& x, const ConvBlockParams& p, Mode mode, std::uint64_t rng_seed = 0,
                                 ConvBlockCache* cache = nullptr) {
  p.validate();
  const MapDims d = map_dims(x, "conv_block_forward");
  const ConvGeometry g = block_geometry(d, p);
  const MapDims od{d.n, g.out_channels, g.out_h(), g.out_w()};
  const std::size_t positions = od.h * od.w;
  const bool batched = x.rank() == 4;

  Tensor conv_out(map_shape(od, batched));
  parallel_for(d.n, [&](std::size_t i) {
    kernel::ConvScratch scratch;
    kernel::conv2d_forward(g, x.raw() + i * d.per_sample(), p.kernels.raw(), conv_out.raw() + i * od.per_sample(),
                           scratch);
  });

  Tensor act = conv_out;
  for (std::size_t i = 0; i < od.n; ++i)
    for (std::size_t c = 0; c < od.c; ++c) {
      double* v = act.raw() + i * od.per_sample() + c * positions;
      const double a = p.prelu_alpha[c];
      for (std::size_t j = 0; j < positions; ++j) v[j] = prelu(v[j], a);
    }

  std::vector<double> mean(od.c), var(od.c), inv_std(od.c);
  const double count = static_cast<double>(od.n * positions);
  for (std::size_t c = 0; c < od.c; ++c) {
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t i = 0; i < od.n; ++i) {
        const double* v = act.raw() + i * od.per_sample() + c * positions;
        for (std::size_t j = 0; j < positions; ++j) s += v[j];
      }
      mean[c] = s / count;
      double ss = 0.0;
      for (std::size_t i = 0; i < od.n; ++i) {
        const double* v = act.raw() + i * od.per_sample() + c * positions;
        for (std::size_t j = 0; j < positions; ++j) ss += (v[j] - mean[c]) * (v[j] - mean[c]);
      }
      var[c] = ss / count;
    } else {
      mean[c] = p.bn_running_mean[c];
      var[c] = p.bn_running_var[c];
    }
    const double denom = var[c] + p.bn_epsilon;
    if (!(denom > 0)) throw NumericError("batch norm: zero variance with zero epsilon");
    inv_std[c] = 1.0 / std::sqrt(denom);
  }

  Tensor normalized(act.shape());
  Tensor y(act.shape());
  for (std::size_t i = 0; i < od.n; ++i)
    for (std::size_t c = 0; c < od.c; ++c) {
      const std::size_t off = i * od.per_sample() + c * positions;
      for (std::size_t j = 0; j < positions; ++j) {
        const double xh = (act[off + j] - mean[c]) * inv_std[c];
        normalized[off + j] = xh;
        y[off + j] = p.bn_gamma[c] * xh + p.bn_beta[c];
      }
    }

  Tensor mask;
  if (mode == Mode::train && p.dropout_p > 0) {
    mask = dropout_mask(y.shape(), p.dropout_p, rng_seed);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] *= mask[j];
  }
  require_finite(y, "conv_block_forward");
  if (cache) {
    *cache = ConvBlockCache{x,       std::move(conv_out), std::move(normalized), std::move(inv_std),
                            std::move(mean), std::move(var), std::move(mask), mode};
  }
  return y;
}

/// Folds the batch statistics of a train-mode forward into the running estimates.
inline void update_running_stats(ConvBlockParams& p, const ConvBlockCache& cache) {
  if (cache.mode != Mode::train || cache.batch_mean.empty()) {
    throw UsageError("update_running_stats: needs the cache of a train-mode forward");
  }
  const MapDims od = map_dims(cache.conv_out, "update_running_stats");
  const double count = static_cast<double>(od.n * od.h * od.w);
  const double unbias = count > 1 ? count / (count - 1) : 1.0;
  for (std::size_t c = 0; c < p.out_channels(); ++c) {
    p.bn_running_mean[c] = p.bn_momentum * p.bn_running_mean[c] + (1 - p.bn_momentum) * cache.batch_mean[c];
    p.bn_running_var[c] = p.bn_momentum * p.bn_running_var[c] + (1 - p.bn_momentum) * cache.batch_var[c] * unbias;
  }
}

inline ConvBlockGrads conv_block_backward(const ConvBlockCache& cache, const ConvBlockParams& p,
                                          const Tensor& grad_out) {
  if (cache.input.empty() || cache.conv_out.empty()) throw UsageError("conv_block_backward: no cached forward state");
  if (!same_shape(grad_out, cache.conv_out)) {
    throw DimensionError("conv_block_backward: grad_out " + to_string(grad_out.shape()) + " vs output " +
                         to_string(cache.conv_out.shape()));
  }
  const MapDims d = map_dims(cache.input, "conv_block_backward");
  const ConvGeometry g = block_geometry(d, p);
  const MapDims od = map_dims(cache.conv_out, "conv_block_backward");
  const std::size_t positions = od.h * od.w;
  const double count = static_cast<double>(od.n * positions);

  ConvBlockGrads grads{Tensor(cache.input.shape()), Tensor(p.kernels.shape()), Tensor({od.c}), Tensor({od.c}),
                       Tensor({od.c})};

  Tensor gy = grad_out;
  if (!cache.mask.empty())
    for (std::size_t j = 0; j < gy.size(); ++j) gy[j] *= cache.mask[j];

  // Batch norm.
  Tensor g_act(gy.shape());
  for (std::size_t c = 0; c < od.c; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t i = 0; i < od.n; ++i) {
      const std::size_t off = i * od.per_sample() + c * positions;
      for (std::size_t j = 0; j < positions; ++j) {
        sum_g += gy[off + j];
        sum_gx += gy[off + j] * cache.normalized[off + j];
      }
    }
    grads.bn_beta[c] = sum_g;
    grads.bn_gamma[c] = sum_gx;
    const double scale = p.bn_gamma[c] * cache.inv_std[c];
    for (std::size_t i = 0; i < od.n; ++i) {
      const std::size_t off = i * od.per_sample() + c * positions;
      for (std::size_t j = 0; j < positions; ++j) {
        if (cache.mode == Mode::train) {
          g_act[off + j] = scale * (gy[off + j] - sum_g / count - cache.normalized[off + j] * sum_gx / count);
        } else {
          g_act[off + j] = scale * gy[off + j];
        }
      }
    }
  }

  // PReLU.
  Tensor g_conv(gy.shape());
  for (std::size_t c = 0; c < od.c; ++c) {
    const double a = p.prelu_alpha[c];
    double ga = 0.0;
    for (std::size_t i = 0; i < od.n; ++i) {
      const std::size_t off = i * od.per_sample() + c * positions;
      for (std::size_t j = 0; j < positions; ++j) {
        const double v = cache.conv_out[off + j];
        if (v > 0) {
          g_conv[off + j] = g_act[off + j];
        } else {
          g_conv[off + j] = a * g_act[off + j];
          ga += g_act[off + j] * v;
        }
      }
    }
    grads.prelu_alpha[c] = ga;
  }

  std::vector<Tensor> kernel_parts(d.n, Tensor(p.kernels.shape()));
  parallel_for(d.n, [&](std::size_t i) {
    kernel::ConvScratch scratch;
    kernel::conv2d_backward(g, cache.input.raw() + i * d.per_sample(), p.kernels.raw(),
                            g_conv.raw() + i * od.per_sample(), grads.input.raw() + i * d.per_sample(),
                            kernel_parts[i].raw(), scratch);
  });
  for (const auto& part : kernel_parts)
    for (std::size_t j = 0; j < part.size(); ++j) grads.kernels[j] += part[j];
  return grads;
}

// ---------------------------------------------------------------------------
// Map-to-sequence: C×H×W → W steps of C·H features, left to right.

inline Tensor map_to_sequence(const Tensor& feature_map, std::size_t feature_width) {
  if (feature_map.rank() != 3) {
    throw DimensionError("map_to_sequence expects C×H×W, got " + to_string(feature_map.shape()));
  }
  const std::size_t c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
  if (c * h != feature_width) {
    throw ConfigError("map_to_sequence: channels×height = " + std::to_string(c) + "×" + std::to_string(h) + " = " +
                      std::to_string(c * h) + " but the configured feature width is " +
                      std::to_string(feature_width));
  }
  Tensor seq({w, feature_width});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t hi = 0; hi < h; ++hi)
      for (std::size_t t = 0; t < w; ++t) seq(t, ci * h + hi) = feature_map(ci, hi, t);
  return seq;
}

/// Adjoint of map_to_sequence.
inline Tensor sequence_to_map(const Tensor& seq, std::size_t channels, std::size_t height) {
  if (seq.rank() != 2 || seq.dim(1) != channels * height) {
    throw DimensionError("sequence_to_map: sequence " + to_string(seq.shape()) + " cannot fold into " +
                         std::to_string(channels) + " channels of height " + std::to_string(height));
  }
  const std::size_t w = seq.dim(0);
  Tensor map({channels, height, w});
  for (std::size_t ci = 0; ci < channels; ++ci)
    for (std::size_t hi = 0; hi < height; ++hi)
      for (std::size_t t = 0; t < w; ++t) map(ci, hi, t) = seq(t, ci * height + hi);
  return map;
}

}  // namespace htr
