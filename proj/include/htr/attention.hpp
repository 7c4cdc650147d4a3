#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "htr/errors.hpp"
#include "htr/tensor.hpp"

namespace htr {

/// Additive attention parameters.
///
/// score(q, k) = vᵀ tanh(W1·q + W2·k); α = softmax over keys; c = Σ α_s k_s;
/// output a = tanh(Wc·[c; q]). With `tied` set the key projection reuses W1 and W2 is empty.
struct AttentionParams {
  Tensor W1;  // A×Dq
  Tensor W2;  // A×D
  Tensor v;   // A
  Tensor Wc;  // D'×(D+Dq)
  bool tied = false;

  const Tensor& key_projection() const { return tied ? W1 : W2; }
  std::size_t score_dim() const { return W1.dim(0); }
  std::size_t query_dim() const { return W1.dim(1); }
  std::size_t key_dim() const { return key_projection().dim(1); }
  std::size_t output_dim() const { return Wc.dim(0); }

  void validate() const {
    if (W1.rank() != 2 || v.rank() != 1 || Wc.rank() != 2) throw DimensionError("attention parameters have wrong rank");
    const Tensor& k = key_projection();
    if (k.rank() != 2 || k.dim(0) != W1.dim(0)) {
      throw DimensionError("attention projections map to different score dims: W1 " + to_string(W1.shape()) +
                           ", W2 " + to_string(k.shape()));
    }
    if (v.dim(0) != W1.dim(0)) {
      throw DimensionError("attention v has length " + std::to_string(v.dim(0)) + ", score dim is " +
                           std::to_string(W1.dim(0)));
    }
    if (Wc.dim(1) != key_dim() + query_dim()) {
      throw DimensionError("attention Wc " + to_string(Wc.shape()) + " does not take [context; query] of width " +
                           std::to_string(key_dim() + query_dim()));
    }
  }
};

/// Additive-attention energy between one query and one key.
inline double score(std::span<const double> h_t, std::span<const double> h_s, const AttentionParams& p) {
  p.validate();
  const Tensor& W2 = p.key_projection();
  if (h_t.size() != p.query_dim() || h_s.size() != p.key_dim()) {
    throw DimensionError("score: query/key lengths " + std::to_string(h_t.size()) + "/" +
                         std::to_string(h_s.size()) + " do not match parameters " + std::to_string(p.query_dim()) +
                         "/" + std::to_string(p.key_dim()));
  }
  const std::size_t a = p.score_dim();
  std::vector<double> u(a);
  kernel::matvec(a, p.query_dim(), p.W1.raw(), h_t.data(), u.data(), false);
  kernel::matvec(a, p.key_dim(), W2.raw(), h_s.data(), u.data(), true);
  double e = 0.0;
  for (std::size_t i = 0; i < a; ++i) e += p.v[i] * std::tanh(u[i]);
  return e;
}

/// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> scores) {
  if (scores.empty()) throw UsageError("softmax of an empty vector");
  const double m = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) z += (out[i] = std::exp(scores[i] - m));
  for (double& o : out) o /= z;
  return out;
}

struct AttentionOutput {
  std::vector<double> weights;  // α over source positions
  std::vector<double> context;  // c_t
  std::vector<double> vector;   // a_t
};

struct AttentionCache {
  Tensor queries;      // Tq×Dq
  Tensor keys;         // Ts×D
  Tensor activations;  // Tq×Ts×A, tanh(W1 q_t + W2 k_s)
  Tensor weights;      // Tq×Ts
  Tensor contexts;     // Tq×D
  Tensor outputs;      // Tq×D'
};

/// Attends every query row over the key rows; returns Tq×D' attention vectors.
inline Tensor attend_all(const Tensor& queries, const Tensor& keys, const AttentionParams& p,
                         AttentionCache* cache = nullptr) {
  p.validate();
  if (keys.rank() != 2 || keys.empty()) throw UsageError("attend: empty source sequence");
  if (queries.rank() != 2 || queries.dim(1) != p.query_dim() || keys.dim(1) != p.key_dim()) {
    throw DimensionError("attend: queries " + to_string(queries.shape()) + " / keys " + to_string(keys.shape()) +
                         " do not match parameters");
  }
  const std::size_t tq = queries.dim(0), ts = keys.dim(0), a = p.score_dim();
  const std::size_t d = p.key_dim(), dq = p.query_dim(), dout = p.output_dim();
  std::vector<double> scratch;
  Tensor qp({tq, a}), kp({ts, a});
  kernel::gemm_nt(tq, a, dq, queries.raw(), p.W1.raw(), qp.raw(), false, scratch);
  kernel::gemm_nt(ts, a, d, keys.raw(), p.key_projection().raw(), kp.raw(), false, scratch);

  Tensor act({tq, ts, a});
  Tensor weights({tq, ts});
  Tensor contexts({tq, d});
  Tensor outputs({tq, dout});
  std::vector<double> scores(ts), concat(d + dq);
  for (std::size_t t = 0; t < tq; ++t) {
    const double* q = qp.raw() + t * a;
    for (std::size_t s = 0; s < ts; ++s) {
      double* u = act.raw() + (t * ts + s) * a;
      const double* k = kp.raw() + s * a;
      double e = 0.0;
      for (std::size_t i = 0; i < a; ++i) {
        u[i] = std::tanh(q[i] + k[i]);
        e += p.v[i] * u[i];
      }
      scores[s] = e;
    }
    const std::vector<double> alpha = softmax(scores);
    double* c = contexts.raw() + t * d;
    for (std::size_t s = 0; s < ts; ++s) {
      weights(t, s) = alpha[s];
      const double* k = keys.raw() + s * d;
      for (std::size_t j = 0; j < d; ++j) c[j] += alpha[s] * k[j];
    }
    std::copy(c, c + d, concat.begin());
    std::copy(queries.raw() + t * dq, queries.raw() + (t + 1) * dq, concat.begin() + static_cast<std::ptrdiff_t>(d));
    double* o = outputs.raw() + t * dout;
    kernel::matvec(dout, d + dq, p.Wc.raw(), concat.data(), o, false);
    for (std::size_t j = 0; j < dout; ++j) o[j] = std::tanh(o[j]);
  }
  require_finite(outputs, "attention");
  if (cache) {
    *cache = AttentionCache{queries, keys, std::move(act), std::move(weights), std::move(contexts), outputs};
  }
  return outputs;
}

/// Single-query form.
inline AttentionOutput attend(std::span<const double> h_t, const Tensor& encoder_states, const AttentionParams& p) {
  if (encoder_states.rank() != 2 || encoder_states.empty()) throw UsageError("attend: empty source sequence");
  Tensor q({1, h_t.size()}, std::vector<double>(h_t.begin(), h_t.end()));
  AttentionCache cache;
  attend_all(q, encoder_states, p, &cache);
  return {cache.weights.values(), cache.contexts.values(), cache.outputs.values()};
}

/// Queries are the encoder steps themselves: T×D in, T×D' out.
inline Tensor self_attend(const Tensor& sequence, const AttentionParams& p, AttentionCache* cache = nullptr) {
  return attend_all(sequence, sequence, p, cache);
}

struct AttentionGrads {
  Tensor queries;
  Tensor keys;
  Tensor W1;
  Tensor W2;  // empty when tied
  Tensor v;
  Tensor Wc;
};

/// Backward of attend_all. `grad_context` (Tq×D) is optional extra gradient on c_t.
inline AttentionGrads attention_backward(const AttentionCache& cache, const AttentionParams& p,
                                         const Tensor& grad_out, const Tensor* grad_context = nullptr) {
  if (cache.queries.empty() || cache.weights.empty()) throw UsageError("attention_backward: no cached forward state");
  const std::size_t tq = cache.queries.dim(0), ts = cache.keys.dim(0), a = p.score_dim();
  const std::size_t d = p.key_dim(), dq = p.query_dim(), dout = p.output_dim();
  if (grad_out.shape() != Shape{tq, dout}) {
    throw DimensionError("attention_backward: grad_out " + to_string(grad_out.shape()) + ", expected " +
                         to_string(Shape{tq, dout}));
  }
  if (grad_context && grad_context->shape() != Shape{tq, d}) {
    throw DimensionError("attention_backward: grad_context " + to_string(grad_context->shape()));
  }
  AttentionGrads g{Tensor(cache.queries.shape()), Tensor(cache.keys.shape()), Tensor(p.W1.shape()),
                   p.tied ? Tensor() : Tensor(p.W2.shape()), Tensor(p.v.shape()), Tensor(p.Wc.shape())};
  Tensor g_qp({tq, a}), g_kp({ts, a});
  std::vector<double> g_pre(dout), concat(d + dq), g_concat(d + dq), g_alpha(ts), g_score(ts);

  for (std::size_t t = 0; t < tq; ++t) {
    const double* o = cache.outputs.raw() + t * dout;
    for (std::size_t j = 0; j < dout; ++j) g_pre[j] = grad_out(t, j) * (1.0 - o[j] * o[j]);
    std::copy(cache.contexts.raw() + t * d, cache.contexts.raw() + (t + 1) * d, concat.begin());
    std::copy(cache.queries.raw() + t * dq, cache.queries.raw() + (t + 1) * dq,
              concat.begin() + static_cast<std::ptrdiff_t>(d));
    kernel::outer_acc(dout, d + dq, g_pre.data(), concat.data(), g.Wc.raw());
    kernel::matvec_t(dout, d + dq, p.Wc.raw(), g_pre.data(), g_concat.data(), false);
    if (grad_context)
      for (std::size_t j = 0; j < d; ++j) g_concat[j] += (*grad_context)(t, j);
    double* gq = g.queries.raw() + t * dq;
    for (std::size_t j = 0; j < dq; ++j) gq[j] += g_concat[d + j];

    // Context path: c = Σ α_s k_s.
    double weighted = 0.0;
    for (std::size_t s = 0; s < ts; ++s) {
      const double alpha = cache.weights(t, s);
      const double* k = cache.keys.raw() + s * d;
      double* gk = g.keys.raw() + s * d;
      double ga = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        ga += g_concat[j] * k[j];
        gk[j] += alpha * g_concat[j];
      }
      g_alpha[s] = ga;
      weighted += alpha * ga;
    }
    // Softmax Jacobian.
    for (std::size_t s = 0; s < ts; ++s) g_score[s] = cache.weights(t, s) * (g_alpha[s] - weighted);

    double* gqp = g_qp.raw() + t * a;
    for (std::size_t s = 0; s < ts; ++s) {
      const double gs = g_score[s];
      if (gs == 0.0) continue;
      const double* u = cache.activations.raw() + (t * ts + s) * a;
      double* gkp = g_kp.raw() + s * a;
      for (std::size_t i = 0; i < a; ++i) {
        g.v[i] += gs * u[i];
        const double gu = gs * p.v[i] * (1.0 - u[i] * u[i]);
        gqp[i] += gu;
        gkp[i] += gu;
      }
    }
  }

  // Projections: qp = Q·W1ᵀ, kp = K·W2ᵀ.
  kernel::gemm_tn(a, dq, tq, g_qp.raw(), cache.queries.raw(), g.W1.raw(), true);
  kernel::gemm_nn(tq, dq, a, g_qp.raw(), p.W1.raw(), g.queries.raw(), true);
  Tensor& g_key_proj = p.tied ? g.W1 : g.W2;
  kernel::gemm_tn(a, d, ts, g_kp.raw(), cache.keys.raw(), g_key_proj.raw(), true);
  kernel::gemm_nn(ts, d, a, g_kp.raw(), p.key_projection().raw(), g.keys.raw(), true);
  return g;
}

}  // namespace htr
