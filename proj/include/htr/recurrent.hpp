#pragma once

#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "htr/errors.hpp"
#include "htr/tensor.hpp"

namespace htr {

/// GRU cell (Cho et al. 2014 convention):
///   z = σ(Wz x + Uz h + bz), r = σ(Wr x + Ur h + br),
///   h̃ = tanh(Wh x + Uh (r ⊙ h) + bh), h' = (1 − z) ⊙ h + z ⊙ h̃.
struct GruParams {
  Tensor Wz, Wr, Wh;  // H×In
  Tensor Uz, Ur, Uh;  // H×H
  Tensor bz, br, bh;  // H

  static GruParams zeros(std::size_t input, std::size_t hidden) {
    GruParams p;
    for (Tensor* w : {&p.Wz, &p.Wr, &p.Wh}) *w = Tensor({hidden, input});
    for (Tensor* u : {&p.Uz, &p.Ur, &p.Uh}) *u = Tensor({hidden, hidden});
    for (Tensor* b : {&p.bz, &p.br, &p.bh}) *b = Tensor({hidden});
    return p;
  }

  std::size_t hidden() const { return Uz.dim(0); }
  std::size_t input() const { return Wz.dim(1); }

  void validate() const {
    const std::size_t h = Uz.rank() == 2 ? Uz.dim(0) : 0;
    const std::size_t in = Wz.rank() == 2 ? Wz.dim(1) : 0;
    for (const Tensor* w : {&Wz, &Wr, &Wh})
      if (w->shape() != Shape{h, in}) throw DimensionError("GRU input projection has shape " + to_string(w->shape()));
    for (const Tensor* u : {&Uz, &Ur, &Uh})
      if (u->shape() != Shape{h, h}) throw DimensionError("GRU recurrent matrix has shape " + to_string(u->shape()));
    for (const Tensor* b : {&bz, &br, &bh})
      if (b->shape() != Shape{h}) throw DimensionError("GRU bias has shape " + to_string(b->shape()));
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn("W_z", Wz); fn("W_r", Wr); fn("W_h", Wh);
    fn("U_z", Uz); fn("U_r", Ur); fn("U_h", Uh);
    fn("b_z", bz); fn("b_r", br); fn("b_h", bh);
  }
};

inline std::vector<double> gru_step(std::span<const double> x, std::span<const double> h_prev, const GruParams& p) {
  p.validate();
  const std::size_t h = p.hidden(), in = p.input();
  if (x.size() != in || h_prev.size() != h) {
    throw DimensionError("gru_step: x/h lengths " + std::to_string(x.size()) + "/" + std::to_string(h_prev.size()) +
                         " vs params " + std::to_string(in) + "/" + std::to_string(h));
  }
  std::vector<double> z(h), r(h), rh(h), c(h), out(h);
  kernel::matvec(h, in, p.Wz.raw(), x.data(), z.data(), false);
  kernel::matvec(h, h, p.Uz.raw(), h_prev.data(), z.data(), true);
  kernel::matvec(h, in, p.Wr.raw(), x.data(), r.data(), false);
  kernel::matvec(h, h, p.Ur.raw(), h_prev.data(), r.data(), true);
  for (std::size_t i = 0; i < h; ++i) {
    z[i] = sigmoid(z[i] + p.bz[i]);
    r[i] = sigmoid(r[i] + p.br[i]);
    rh[i] = r[i] * h_prev[i];
  }
  kernel::matvec(h, in, p.Wh.raw(), x.data(), c.data(), false);
  kernel::matvec(h, h, p.Uh.raw(), rh.data(), c.data(), true);
  for (std::size_t i = 0; i < h; ++i) {
    c[i] = std::tanh(c[i] + p.bh[i]);
    out[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];
  }
  return out;
}

/// Per-time-step intermediates of one directional pass, indexed by original time.
struct GruCache {
  Tensor input;   // T×In
  Tensor h_prev;  // T×H, state entering step t
  Tensor z, r, candidate, reset_state;  // T×H
  bool reverse = false;
};

/// Runs the cell over the sequence (right-to-left when `reverse`), h_0 = 0. Returns T×H states.
inline Tensor gru_sequence(const Tensor& seq, const GruParams& p, bool reverse, GruCache* cache = nullptr) {
  p.validate();
  if (seq.rank() != 2 || seq.empty()) throw UsageError("GRU over an empty sequence");
  const std::size_t len = seq.dim(0), h = p.hidden(), in = p.input();
  if (seq.dim(1) != in) {
    throw DimensionError("GRU input width " + std::to_string(seq.dim(1)) + " vs parameters " + std::to_string(in));
  }
  std::vector<double> scratch;
  Tensor xz({len, h}), xr({len, h}), xh({len, h});
  kernel::gemm_nt(len, h, in, seq.raw(), p.Wz.raw(), xz.raw(), false, scratch);
  kernel::gemm_nt(len, h, in, seq.raw(), p.Wr.raw(), xr.raw(), false, scratch);
  kernel::gemm_nt(len, h, in, seq.raw(), p.Wh.raw(), xh.raw(), false, scratch);

  Tensor states({len, h}), hp({len, h}), zs({len, h}), rs({len, h}), cs({len, h}), rhs({len, h});
  std::vector<double> state(h, 0.0), tmp(h);
  for (std::size_t k = 0; k < len; ++k) {
    const std::size_t t = reverse ? len - 1 - k : k;
    double* z = zs.raw() + t * h;
    double* r = rs.raw() + t * h;
    double* c = cs.raw() + t * h;
    double* rh = rhs.raw() + t * h;
    std::copy(state.begin(), state.end(), hp.raw() + t * h);
    kernel::matvec(h, h, p.Uz.raw(), state.data(), z, false);
    kernel::matvec(h, h, p.Ur.raw(), state.data(), r, false);
    for (std::size_t i = 0; i < h; ++i) {
      z[i] = sigmoid(z[i] + xz(t, i) + p.bz[i]);
      r[i] = sigmoid(r[i] + xr(t, i) + p.br[i]);
      rh[i] = r[i] * state[i];
    }
    kernel::matvec(h, h, p.Uh.raw(), rh, c, false);
    for (std::size_t i = 0; i < h; ++i) {
      c[i] = std::tanh(c[i] + xh(t, i) + p.bh[i]);
      state[i] = (1.0 - z[i]) * state[i] + z[i] * c[i];
    }
    std::copy(state.begin(), state.end(), states.raw() + t * h);
  }
  require_finite(states, "gru_sequence");
  if (cache) *cache = GruCache{seq, std::move(hp), std::move(zs), std::move(rs), std::move(cs), std::move(rhs), reverse};
  return states;
}

struct GruGrads {
  Tensor input;
  GruParams params;
};

/// BPTT for gru_sequence given dLoss/dstate for every output step.
inline GruGrads gru_sequence_backward(const GruCache& cache, const GruParams& p, const Tensor& grad_states) {
  if (cache.input.empty() || cache.z.empty()) throw UsageError("gru_sequence_backward: no cached forward state");
  const std::size_t len = cache.input.dim(0), h = p.hidden(), in = p.input();
  if (grad_states.shape() != Shape{len, h}) {
    throw DimensionError("gru_sequence_backward: grad " + to_string(grad_states.shape()) + ", expected " +
                         to_string(Shape{len, h}));
  }
  GruGrads g{Tensor(cache.input.shape()), GruParams::zeros(in, h)};
  Tensor daz({len, h}), dar({len, h}), dah({len, h});
  std::vector<double> dh_next(h, 0.0), dh(h), drh(h), dhp(h);
  for (std::size_t k = len; k-- > 0;) {
    const std::size_t t = cache.reverse ? len - 1 - k : k;
    const double* z = cache.z.raw() + t * h;
    const double* r = cache.r.raw() + t * h;
    const double* c = cache.candidate.raw() + t * h;
    const double* hp = cache.h_prev.raw() + t * h;
    double* az = daz.raw() + t * h;
    double* ar = dar.raw() + t * h;
    double* ah = dah.raw() + t * h;
    for (std::size_t i = 0; i < h; ++i) {
      dh[i] = grad_states(t, i) + dh_next[i];
      ah[i] = dh[i] * z[i] * (1.0 - c[i] * c[i]);
      dhp[i] = dh[i] * (1.0 - z[i]);
    }
    kernel::matvec_t(h, h, p.Uh.raw(), ah, drh.data(), false);
    for (std::size_t i = 0; i < h; ++i) {
      const double dz = dh[i] * (c[i] - hp[i]);
      const double dr = drh[i] * hp[i];
      dhp[i] += drh[i] * r[i];
      az[i] = dz * z[i] * (1.0 - z[i]);
      ar[i] = dr * r[i] * (1.0 - r[i]);
    }
    kernel::matvec_t(h, h, p.Uz.raw(), az, dhp.data(), true);
    kernel::matvec_t(h, h, p.Ur.raw(), ar, dhp.data(), true);
    dh_next = dhp;
  }
  const double* x = cache.input.raw();
  kernel::gemm_tn(h, in, len, daz.raw(), x, g.params.Wz.raw(), true);
  kernel::gemm_tn(h, in, len, dar.raw(), x, g.params.Wr.raw(), true);
  kernel::gemm_tn(h, in, len, dah.raw(), x, g.params.Wh.raw(), true);
  kernel::gemm_tn(h, h, len, daz.raw(), cache.h_prev.raw(), g.params.Uz.raw(), true);
  kernel::gemm_tn(h, h, len, dar.raw(), cache.h_prev.raw(), g.params.Ur.raw(), true);
  kernel::gemm_tn(h, h, len, dah.raw(), cache.reset_state.raw(), g.params.Uh.raw(), true);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t i = 0; i < h; ++i) {
      g.params.bz[i] += daz(t, i);
      g.params.br[i] += dar(t, i);
      g.params.bh[i] += dah(t, i);
    }
  kernel::gemm_nn(len, in, h, daz.raw(), p.Wz.raw(), g.input.raw(), true);
  kernel::gemm_nn(len, in, h, dar.raw(), p.Wr.raw(), g.input.raw(), true);
  kernel::gemm_nn(len, in, h, dah.raw(), p.Wh.raw(), g.input.raw(), true);
  return g;
}

// ---------------------------------------------------------------------------
// Bidirectional stack with a linear projection to per-step class logits.

struct BiGruLayer {
  GruParams fwd;
  GruParams bwd;
};

struct DecoderParams {
  std::vector<BiGruLayer> layers;
  Tensor proj;       // K×2H
  Tensor proj_bias;  // K

  std::size_t classes() const { return proj.dim(0); }
};

struct BiGruCache {
  std::vector<GruCache> fwd, bwd;
  Tensor top;  // T×2H states feeding the projection
};

/// Concatenates forward and backward states per step: T×(Hf+Hb).
inline Tensor concat_states(const Tensor& f, const Tensor& b) {
  const std::size_t len = f.dim(0), hf = f.dim(1), hb = b.dim(1);
  Tensor out({len, hf + hb});
  for (std::size_t t = 0; t < len; ++t) {
    std::copy(f.raw() + t * hf, f.raw() + (t + 1) * hf, out.raw() + t * (hf + hb));
    std::copy(b.raw() + t * hb, b.raw() + (t + 1) * hb, out.raw() + t * (hf + hb) + hf);
  }
  return out;
}

/// States of the last bidirectional layer before projection.
inline Tensor bigru_states(const Tensor& seq, const std::vector<BiGruLayer>& layers, BiGruCache* cache = nullptr) {
  if (seq.rank() != 2 || seq.empty()) throw UsageError("bidirectional GRU over an empty sequence");
  if (layers.empty()) throw ConfigError("bidirectional GRU needs at least one layer");
  if (cache) {
    cache->fwd.assign(layers.size(), {});
    cache->bwd.assign(layers.size(), {});
  }
  Tensor x = seq;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Tensor f = gru_sequence(x, layers[l].fwd, false, cache ? &cache->fwd[l] : nullptr);
    Tensor b = gru_sequence(x, layers[l].bwd, true, cache ? &cache->bwd[l] : nullptr);
    x = concat_states(f, b);
  }
  if (cache) cache->top = x;
  return x;
}

inline Tensor project_logits(const Tensor& states, const Tensor& proj, const Tensor& bias) {
  if (proj.rank() != 2 || proj.dim(1) != states.dim(1) || bias.shape() != Shape{proj.dim(0)}) {
    throw DimensionError("projection " + to_string(proj.shape()) + " / bias " + to_string(bias.shape()) +
                         " does not fit states " + to_string(states.shape()));
  }
  const std::size_t len = states.dim(0), k = proj.dim(0);
  Tensor logits({len, k});
  std::vector<double> scratch;
  kernel::gemm_nt(len, k, states.dim(1), states.raw(), proj.raw(), logits.raw(), false, scratch);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t j = 0; j < k; ++j) logits(t, j) += bias[j];
  require_finite(logits, "bigru_forward");
  return logits;
}

inline Tensor bigru_forward(const Tensor& seq, const DecoderParams& p, BiGruCache* cache = nullptr) {
  return project_logits(bigru_states(seq, p.layers, cache), p.proj, p.proj_bias);
}

/// Single-layer convenience form.
inline Tensor bigru_forward(const Tensor& seq, const GruParams& fwd, const GruParams& bwd, const Tensor& proj,
                            const Tensor& proj_bias) {
  return project_logits(bigru_states(seq, {BiGruLayer{fwd, bwd}}), proj, proj_bias);
}

struct DecoderGrads {
  Tensor input;
  std::vector<BiGruLayer> layers;
  Tensor proj;
  Tensor proj_bias;
};

inline DecoderGrads bigru_backward(const BiGruCache& cache, const DecoderParams& p, const Tensor& grad_logits) {
  if (cache.top.empty() || cache.fwd.size() != p.layers.size()) {
    throw UsageError("bigru_backward: no cached forward state");
  }
  const std::size_t len = cache.top.dim(0), k = p.classes(), width = cache.top.dim(1);
  if (grad_logits.shape() != Shape{len, k}) {
    throw DimensionError("bigru_backward: grad " + to_string(grad_logits.shape()) + ", expected " +
                         to_string(Shape{len, k}));
  }
  DecoderGrads g;
  g.proj = Tensor(p.proj.shape());
  g.proj_bias = Tensor(p.proj_bias.shape());
  kernel::gemm_tn(k, width, len, grad_logits.raw(), cache.top.raw(), g.proj.raw(), true);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t j = 0; j < k; ++j) g.proj_bias[j] += grad_logits(t, j);
  Tensor grad({len, width});
  kernel::gemm_nn(len, width, k, grad_logits.raw(), p.proj.raw(), grad.raw(), false);

  g.layers.resize(p.layers.size());
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const std::size_t hf = p.layers[l].fwd.hidden(), hb = p.layers[l].bwd.hidden();
    Tensor gf({len, hf}), gb({len, hb});
    for (std::size_t t = 0; t < len; ++t) {
      std::copy(grad.raw() + t * (hf + hb), grad.raw() + t * (hf + hb) + hf, gf.raw() + t * hf);
      std::copy(grad.raw() + t * (hf + hb) + hf, grad.raw() + (t + 1) * (hf + hb), gb.raw() + t * hb);
    }
    GruGrads f = gru_sequence_backward(cache.fwd[l], p.layers[l].fwd, gf);
    GruGrads b = gru_sequence_backward(cache.bwd[l], p.layers[l].bwd, gb);
    g.layers[l] = BiGruLayer{std::move(f.params), std::move(b.params)};
    grad = std::move(f.input);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += b.input[i];
  }
  g.input = std::move(grad);
  return g;
}

}  // namespace htr
