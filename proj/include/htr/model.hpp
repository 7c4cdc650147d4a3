#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "htr/attention.hpp"
#include "htr/charset.hpp"
#include "htr/checkpoint.hpp"
#include "htr/config.hpp"
#include "htr/layers.hpp"
#include "htr/parallel.hpp"
#include "htr/recurrent.hpp"
#include "htr/rng.hpp"

namespace htr {

/// Every weight of the encoder → attention → BiGRU → projection stack.
struct ModelParams {
  std::vector<ConvBlockParams> blocks;
  std::map<std::size_t, GateParams> gates;  // keyed by the 1-based block each one follows
  AttentionParams attn;
  DecoderParams dec;

  /// fn(name, tensor, trainable) over every tensor in a fixed order. BN running statistics are
  /// state, not trainable parameters.
  template <typename Fn>
  void for_each(Fn&& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string b = "enc.block" + std::to_string(i + 1) + ".";
      ConvBlockParams& p = blocks[i];
      fn(b + "kernels", p.kernels, true);
      fn(b + "prelu_alpha", p.prelu_alpha, true);
      fn(b + "bn_gamma", p.bn_gamma, true);
      fn(b + "bn_beta", p.bn_beta, true);
      fn(b + "bn_running_mean", p.bn_running_mean, false);
      fn(b + "bn_running_var", p.bn_running_var, false);
      if (auto it = gates.find(i + 1); it != gates.end()) {
        fn("enc.gate" + std::to_string(i + 1) + ".kernels", it->second.kernels, true);
      }
    }
    fn("attn.W1", attn.W1, true);
    if (!attn.tied) fn("attn.W2", attn.W2, true);
    fn("attn.v", attn.v, true);
    fn("attn.Wc", attn.Wc, true);
    for (std::size_t l = 0; l < dec.layers.size(); ++l) {
      const std::string base = "dec.l" + std::to_string(l + 1) + ".";
      dec.layers[l].fwd.for_each([&](const char* n, Tensor& t) { fn(base + "fwd." + n, t, true); });
      dec.layers[l].bwd.for_each([&](const char* n, Tensor& t) { fn(base + "bwd." + n, t, true); });
    }
    fn("dec.proj", dec.proj, true);
    fn("dec.proj_bias", dec.proj_bias, true);
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& n, Tensor& t, bool trainable) { fn(n, static_cast<const Tensor&>(t), trainable); });
  }

  /// Same structure, every tensor zero.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.for_each([](const std::string&, Tensor& t, bool) { t = Tensor(t.shape()); });
    return z;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t, bool trainable) { n += trainable ? t.size() : 0; });
    return n;
  }
};

/// Zero-initialized parameters with the shapes the configuration implies.
inline ModelParams build_params(const RunConfig& cfg, std::size_t classes) {
  cfg.validate();
  ModelParams p;
  std::size_t in = 1;
  for (std::size_t i = 0; i < cfg.enc_channels.size(); ++i) {
    const bool drop = std::find(cfg.dropout_blocks.begin(), cfg.dropout_blocks.end(), i + 1) != cfg.dropout_blocks.end();
    p.blocks.push_back(ConvBlockParams::make(in, cfg.enc_channels[i], cfg.enc_kernels[i], cfg.enc_strides[i],
                                             cfg.enc_padding[i], drop ? cfg.dropout : 0.0));
    in = cfg.enc_channels[i];
    if (std::find(cfg.gates.begin(), cfg.gates.end(), i + 1) != cfg.gates.end()) {
      p.gates[i + 1] = GateParams{Tensor({in, in, cfg.gate_kernel.h, cfg.gate_kernel.w})};
    }
  }
  const std::size_t d = cfg.feature_dim, a = cfg.attention_dim;
  p.attn.W1 = Tensor({a, d});
  p.attn.tied = cfg.tied_projections;
  if (!p.attn.tied) p.attn.W2 = Tensor({a, d});
  p.attn.v = Tensor({a});
  p.attn.Wc = Tensor({cfg.attention_out, 2 * d});
  std::size_t dec_in = cfg.attention_out;
  for (std::size_t l = 0; l < cfg.gru_layers; ++l) {
    p.dec.layers.push_back({GruParams::zeros(dec_in, cfg.gru_hidden), GruParams::zeros(dec_in, cfg.gru_hidden)});
    dec_in = 2 * cfg.gru_hidden;
  }
  p.dec.proj = Tensor({classes, dec_in});
  p.dec.proj_bias = Tensor({classes});
  return p;
}

namespace init_detail {

inline void glorot(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
}

/// Rows of a Gaussian matrix orthonormalized by modified Gram-Schmidt.
inline void orthogonal(Tensor& t, Rng& rng) {
  const std::size_t n = t.dim(0);
  for (double& v : t.data()) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    auto ri = t.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      const auto rj = t.row(j);
      double d = 0;
      for (std::size_t k = 0; k < n; ++k) d += ri[k] * rj[k];
      for (std::size_t k = 0; k < n; ++k) ri[k] -= d * rj[k];
    }
    double norm = 0;
    for (double v : ri) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : ri) v /= norm;
  }
}

}  // namespace init_detail

/// Glorot-uniform projections and kernels, orthogonal recurrent matrices, zero biases.
inline void initialize(ModelParams& p, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x1417}));
  p.for_each([&](const std::string& name, Tensor& t, bool trainable) {
    if (!trainable) return;
    const auto leaf = name.substr(name.rfind('.') + 1);
    if (leaf == "kernels") {
      const std::size_t area = t.dim(2) * t.dim(3);
      init_detail::glorot(t, t.dim(1) * area, t.dim(0) * area, rng);
    } else if (leaf.rfind("U_", 0) == 0) {
      init_detail::orthogonal(t, rng);
    } else if (leaf.rfind("W", 0) == 0 || leaf == "proj") {
      init_detail::glorot(t, t.dim(1), t.dim(0), rng);
    } else if (leaf == "v") {
      init_detail::glorot(t, t.dim(0), 1, rng);
    }
    // prelu_alpha, bn_gamma, bn_beta and biases keep the values build_params gave them.
  });
}

/// Architecture, charset and weights: everything needed to transcribe.
struct Model {
  RunConfig config;
  Charset charset;
  ModelParams params;

  static Model create(const RunConfig& cfg, const Charset& cs, std::uint64_t seed) {
    if (cs.size() == 0) throw ConfigError("charset is empty");
    Model m{cfg, cs, build_params(cfg, cs.classes())};
    initialize(m.params, seed);
    return m;
  }

  std::size_t classes() const { return charset.classes(); }
  std::size_t time_steps() const { return config.feature_map_extent().w; }

  /// Weights plus `meta.config` (config text as bytes) and `meta.charset` (code points).
  TensorMap state() const {
    TensorMap out;
    params.for_each([&](const std::string& n, const Tensor& t, bool) { out.emplace(n, t); });
    const std::string text = config.dump();
    Tensor cfg({text.size()});
    for (std::size_t i = 0; i < text.size(); ++i) cfg[i] = static_cast<unsigned char>(text[i]);
    out.emplace("meta.config", std::move(cfg));
    Tensor cs({charset.size()});
    for (std::size_t i = 0; i < charset.size(); ++i) cs[i] = static_cast<double>(charset.symbols()[i]);
    out.emplace("meta.charset", std::move(cs));
    return out;
  }

  /// Inverse of state(). Tensors outside the model namespace (meta., opt., train.) are ignored.
  static Model from_state(const TensorMap& state) {
    const auto need = [&](const std::string& n) -> const Tensor& {
      const auto it = state.find(n);
      if (it == state.end()) throw MismatchError("checkpoint lacks tensor '" + n + "'");
      return it->second;
    };
    std::string text;
    for (double v : need("meta.config").data()) text.push_back(static_cast<char>(static_cast<int>(v)));
    std::u32string symbols;
    for (double v : need("meta.charset").data()) symbols.push_back(static_cast<char32_t>(v));
    Model m{RunConfig::parse(text), Charset(symbols), {}};
    m.params = build_params(m.config, m.charset.classes());
    std::size_t used = 0;
    m.params.for_each([&](const std::string& n, Tensor& t, bool) {
      const Tensor& src = need(n);
      if (src.shape() != t.shape()) {
        throw MismatchError("checkpoint tensor '" + n + "' has shape " + to_string(src.shape()) + ", model expects " +
                            to_string(t.shape()));
      }
      t = src;
      ++used;
    });
    for (const auto& [name, t] : state) {
      const bool aux = name.rfind("meta.", 0) == 0 || name.rfind("opt.", 0) == 0 || name.rfind("train.", 0) == 0;
      if (!aux) --used;
    }
    if (used != 0) throw MismatchError("checkpoint holds weights this architecture does not use");
    return m;
  }
};

// ---------------------------------------------------------------------------
// Forward / backward over a batch

struct ForwardCache {
  std::vector<ConvBlockCache> blocks;
  std::map<std::size_t, GateCache> gates;
  std::size_t channels = 0, height = 0;  // final feature map
  std::vector<AttentionCache> attn;
  std::vector<BiGruCache> dec;
};

namespace model_detail {

template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const DimensionError& e) {
    throw DimensionError(name + ": " + e.what());
  }
}

inline void accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.raw();
  const double* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace model_detail

/// Logits (T × classes) per batch element. `batch` is N×1×H×W; dropout masks derive from
/// `dropout_seed` and only apply in train mode.
inline std::vector<Tensor> forward(const Model& m, const Tensor& batch, Mode mode, std::uint64_t dropout_seed = 0,
                                   ForwardCache* cache = nullptr) {
  const RunConfig& cfg = m.config;
  if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != cfg.input_height || batch.dim(3) != cfg.input_width) {
    throw DimensionError("input: batch shape " + to_string(batch.shape()) + ", expected Nx1x" +
                         std::to_string(cfg.input_height) + "x" + std::to_string(cfg.input_width));
  }
  const std::size_t n = batch.dim(0);
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c = ForwardCache{};
  const bool keep = cache != nullptr;
  if (keep) c.blocks.resize(m.params.blocks.size());

  Tensor x = batch;
  for (std::size_t i = 0; i < m.params.blocks.size(); ++i) {
    const std::string where = "encoder block " + std::to_string(i + 1);
    x = model_detail::stage(where, [&] {
      return conv_block_forward(x, m.params.blocks[i], mode, derive_seed(dropout_seed, {i + 1}),
                                keep ? &c.blocks[i] : nullptr);
    });
    if (auto it = m.params.gates.find(i + 1); it != m.params.gates.end()) {
      x = model_detail::stage("gate after block " + std::to_string(i + 1),
                              [&] { return gated_forward(x, it->second, keep ? &c.gates[i + 1] : nullptr); });
    }
  }
  c.channels = x.dim(1);
  c.height = x.dim(2);
  const std::size_t width = x.dim(3), per = c.channels * c.height * width;

  std::vector<Tensor> logits(n);
  if (keep) {
    c.attn.resize(n);
    c.dec.resize(n);
  }
  parallel_for(n, [&](std::size_t s) {
    const Tensor fm({c.channels, c.height, width},
                    std::vector<double>(x.raw() + s * per, x.raw() + (s + 1) * per));
    const Tensor seq = map_to_sequence(fm, cfg.feature_dim);
    const Tensor att = model_detail::stage("attention", [&] {
      return self_attend(seq, m.params.attn, keep ? &c.attn[s] : nullptr);
    });
    logits[s] = model_detail::stage("decoder", [&] { return bigru_forward(att, m.params.dec, keep ? &c.dec[s] : nullptr); });
  });
  return logits;
}

/// Gradients of Σ_s ⟨grad_logits[s], logits[s]⟩ with respect to every trainable tensor.
inline ModelParams backward(const Model& m, const ForwardCache& c, const std::vector<Tensor>& grad_logits) {
  const std::size_t n = grad_logits.size();
  if (c.dec.size() != n || c.blocks.size() != m.params.blocks.size()) {
    throw UsageError("backward: cache does not match the forward pass");
  }
  ModelParams g = m.params.zeros_like();

  // Per-sample head gradients, reduced afterwards in sample order.
  std::vector<AttentionGrads> ag(n);
  std::vector<DecoderGrads> dg(n);
  std::vector<Tensor> gseq(n);
  parallel_for(n, [&](std::size_t s) {
    dg[s] = bigru_backward(c.dec[s], m.params.dec, grad_logits[s]);
    ag[s] = attention_backward(c.attn[s], m.params.attn, dg[s].input);
    gseq[s] = add(ag[s].queries, ag[s].keys);
  });
  using model_detail::accumulate;
  for (std::size_t s = 0; s < n; ++s) {
    accumulate(g.attn.W1, ag[s].W1);
    if (!g.attn.tied) accumulate(g.attn.W2, ag[s].W2);
    accumulate(g.attn.v, ag[s].v);
    accumulate(g.attn.Wc, ag[s].Wc);
    for (std::size_t l = 0; l < g.dec.layers.size(); ++l) {
      for (int dir = 0; dir < 2; ++dir) {
        GruParams& dst = dir == 0 ? g.dec.layers[l].fwd : g.dec.layers[l].bwd;
        GruParams src = dir == 0 ? dg[s].layers[l].fwd : dg[s].layers[l].bwd;
        std::vector<Tensor*> srcs;
        src.for_each([&](const char*, Tensor& t) { srcs.push_back(&t); });
        std::size_t k = 0;
        dst.for_each([&](const char*, Tensor& t) { accumulate(t, *srcs[k++]); });
      }
    }
    accumulate(g.dec.proj, dg[s].proj);
    accumulate(g.dec.proj_bias, dg[s].proj_bias);
  }

  // Fold sequence gradients back into the final N×C×H'×W' map.
  const std::size_t width = gseq.empty() ? 0 : gseq[0].dim(0);
  Tensor gx({n, c.channels, c.height, width});
  const std::size_t per = c.channels * c.height * width;
  for (std::size_t s = 0; s < n; ++s) {
    const Tensor fm = sequence_to_map(gseq[s], c.channels, c.height);
    std::copy(fm.raw(), fm.raw() + per, gx.raw() + s * per);
  }

  for (std::size_t i = m.params.blocks.size(); i-- > 0;) {
    if (auto it = m.params.gates.find(i + 1); it != m.params.gates.end()) {
      GateGrads gg = gated_backward(c.gates.at(i + 1), it->second, gx);
      g.gates.at(i + 1).kernels = std::move(gg.kernels);
      gx = std::move(gg.input);
    }
    ConvBlockGrads bg = conv_block_backward(c.blocks[i], m.params.blocks[i], gx);
    ConvBlockParams& gb = g.blocks[i];
    gb.kernels = std::move(bg.kernels);
    gb.prelu_alpha = std::move(bg.prelu_alpha);
    gb.bn_gamma = std::move(bg.bn_gamma);
    gb.bn_beta = std::move(bg.bn_beta);
    gx = std::move(bg.input);
  }
  return g;
}

/// Batch of preprocessed images (each 1×H×W) stacked into N×1×H×W.
inline Tensor stack_images(const std::vector<const Tensor*>& images) {
  if (images.empty()) throw UsageError("stack_images: empty batch");
  const Shape s = images.front()->shape();
  Tensor out({images.size(), s[0], s[1], s[2]});
  const std::size_t per = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw DimensionError("stack_images: image " + std::to_string(i) + " has shape " +
                                                      to_string(images[i]->shape()) + ", expected " + to_string(s));
    std::copy(images[i]->raw(), images[i]->raw() + per, out.raw() + i * per);
  }
  return out;
}

}  // namespace htr
