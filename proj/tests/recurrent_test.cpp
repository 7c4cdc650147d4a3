#include <cmath>

#include <gtest/gtest.h>

#include "htr/recurrent.hpp"
#include "test_util.hpp"

namespace htr {
namespace {

using testing::random_tensor;

GruParams random_gru(Rng& rng, std::size_t in, std::size_t h, double scale = 1.0) {
  GruParams p = GruParams::zeros(in, h);
  p.for_each([&](const char*, Tensor& t) { t = random_tensor(t.shape(), rng, -scale, scale); });
  return p;
}

DecoderParams random_decoder(Rng& rng, std::size_t in, std::size_t h, std::size_t layers, std::size_t classes) {
  DecoderParams d;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t width = l == 0 ? in : 2 * h;
    d.layers.push_back({random_gru(rng, width, h), random_gru(rng, width, h)});
  }
  d.proj = random_tensor({classes, 2 * h}, rng);
  d.proj_bias = random_tensor({classes}, rng);
  return d;
}

/// Independent scalar expansion of the three cell equations.
std::vector<double> gru_oracle(const std::vector<double>& x, const std::vector<double>& h, const GruParams& p) {
  const std::size_t n = h.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double az = p.bz[i], ar = p.br[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      az += p.Wz(i, j) * x[j];
      ar += p.Wr(i, j) * x[j];
    }
    for (std::size_t j = 0; j < n; ++j) az += p.Uz(i, j) * h[j];
    (void)ar;
    const double z = 1.0 / (1.0 + std::exp(-az));
    double ah = p.bh[i];
    for (std::size_t j = 0; j < x.size(); ++j) ah += p.Wh(i, j) * x[j];
    for (std::size_t j = 0; j < n; ++j) {
      double arj = p.br[j];
      for (std::size_t k = 0; k < x.size(); ++k) arj += p.Wr(j, k) * x[k];
      for (std::size_t k = 0; k < n; ++k) arj += p.Ur(j, k) * h[k];
      const double rj = 1.0 / (1.0 + std::exp(-arj));
      ah += p.Uh(i, j) * rj * h[j];
    }
    out[i] = (1.0 - z) * h[i] + z * std::tanh(ah);
  }
  return out;
}

TEST(GruStep, ZeroParamsHalveTheState) {
  const GruParams p = GruParams::zeros(2, 3);
  const std::vector<double> x{0.3, -0.4}, h{1.0, -2.0, 0.5};
  const auto out = gru_step(x, h, p);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(out[i], 0.5 * h[i]);
}

TEST(GruStep, ClosedUpdateGateCopiesState) {
  Rng rng(1);
  GruParams p = random_gru(rng, 2, 3);
  p.bz.fill(-50.0);
  const std::vector<double> x{0.3, -0.4}, h{0.7, -0.2, 0.5};
  const auto out = gru_step(x, h, p);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out[i], h[i], 1e-15);
}

TEST(GruStep, MatchesScalarExpansion) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const GruParams p = random_gru(rng, 3, 3);
    std::vector<double> x(3), h(3);
    for (auto& v : x) v = rng.uniform(-1, 1);
    for (auto& v : h) v = rng.uniform(-1, 1);
    const auto got = gru_step(x, h, p), want = gru_oracle(x, h, p);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], want[i], 1e-14);
  }
}

TEST(GruStep, DimensionMismatch) {
  const GruParams p = GruParams::zeros(2, 3);
  const std::vector<double> x{1.0}, h{0, 0, 0};
  EXPECT_THROW(gru_step(x, h, p), DimensionError);
}

TEST(GruStep, StateIsConvexCombinationAndBounded) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const GruParams p = random_gru(rng, 2, 4, 2.0);
    std::vector<double> x(2), h(4);
    for (auto& v : x) v = rng.uniform(-3, 3);
    for (auto& v : h) v = rng.uniform(-3, 3);
    const auto out = gru_step(x, h, p);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_LE(std::abs(out[i]), std::max(std::abs(h[i]), 1.0) + 1e-15);
      // h' lies between h and a candidate in [-1, 1].
      EXPECT_LE(out[i], std::max(h[i], 1.0) + 1e-15);
      EXPECT_GE(out[i], std::min(h[i], -1.0) - 1e-15);
    }
  }
}

TEST(GruSequence, ConvexCombinationOfPreviousAndCandidate) {
  Rng rng(4);
  const GruParams p = random_gru(rng, 3, 4, 2.0);
  const Tensor seq = random_tensor({6, 3}, rng, -2, 2);
  GruCache cache;
  const Tensor states = gru_sequence(seq, p, false, &cache);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t i = 0; i < 4; ++i) {
      const double a = cache.h_prev(t, i), b = cache.candidate(t, i);
      EXPECT_GE(states(t, i), std::min(a, b) - 1e-15);
      EXPECT_LE(states(t, i), std::max(a, b) + 1e-15);
    }
}

TEST(BiGru, SingleStep) {
  Rng rng(5);
  const DecoderParams d = random_decoder(rng, 3, 2, 1, 4);
  const Tensor seq = random_tensor({1, 3}, rng);
  const Tensor logits = bigru_forward(seq, d.layers[0].fwd, d.layers[0].bwd, d.proj, d.proj_bias);
  const std::vector<double> zero(2, 0.0);
  const auto hf = gru_step(seq.row(0), zero, d.layers[0].fwd), hb = gru_step(seq.row(0), zero, d.layers[0].bwd);
  for (std::size_t k = 0; k < 4; ++k) {
    double want = d.proj_bias[k];
    for (std::size_t j = 0; j < 2; ++j) want += d.proj(k, j) * hf[j] + d.proj(k, 2 + j) * hb[j];
    EXPECT_NEAR(logits(0, k), want, 1e-14);
  }
}

TEST(BiGru, PalindromeSymmetry) {
  Rng rng(6);
  const GruParams g = random_gru(rng, 3, 4);
  Tensor seq({5, 3});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 3; ++j) seq(t, j) = seq(4 - t, j) = rng.uniform(-1, 1);
  const Tensor f = gru_sequence(seq, g, false), b = gru_sequence(seq, g, true);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(f(t, i), b(4 - t, i));
}

TEST(BiGru, ReversalSwapsDirections) {
  Rng rng(7);
  DecoderParams d = random_decoder(rng, 3, 4, 2, 5);
  const Tensor seq = random_tensor({6, 3}, rng);
  Tensor rev({6, 3});
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 3; ++j) rev(t, j) = seq(5 - t, j);
  std::vector<BiGruLayer> swapped;
  for (const auto& l : d.layers) swapped.push_back({l.bwd, l.fwd});
  // Layer 2 consumes [fwd; bwd] concatenations, so its input columns swap halves as well.
  for (GruParams* g : {&swapped[1].fwd, &swapped[1].bwd})
    for (Tensor* w : {&g->Wz, &g->Wr, &g->Wh}) {
      Tensor s(w->shape());
      for (std::size_t i = 0; i < w->dim(0); ++i)
        for (std::size_t j = 0; j < 8; ++j) s(i, (j + 4) % 8) = (*w)(i, j);
      *w = s;
    }
  const Tensor a = bigru_states(seq, d.layers), b = bigru_states(rev, swapped);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_NEAR(a(t, i), b(5 - t, 4 + i), 1e-12);
      EXPECT_NEAR(a(t, 4 + i), b(5 - t, i), 1e-12);
    }
}

TEST(BiGru, DefaultShape) {
  Rng rng(8);
  const DecoderParams d = random_decoder(rng, 256, 128, 2, 101);
  EXPECT_EQ(bigru_forward(random_tensor({128, 256}, rng), d).shape(), (Shape{128, 101}));
}

TEST(BiGru, EmptySequence) {
  Rng rng(9);
  const DecoderParams d = random_decoder(rng, 3, 2, 1, 4);
  EXPECT_THROW(bigru_forward(Tensor(), d), UsageError);
}

TEST(BiGruBackward, ZeroUpstreamGradient) {
  Rng rng(10);
  const DecoderParams d = random_decoder(rng, 3, 2, 2, 4);
  BiGruCache cache;
  bigru_forward(random_tensor({4, 3}, rng), d, &cache);
  const DecoderGrads g = bigru_backward(cache, d, Tensor({4, 4}));
  EXPECT_EQ(g.input, Tensor({4, 3}));
  EXPECT_EQ(g.proj, Tensor(d.proj.shape()));
  for (auto& l : g.layers) {
    GruParams f = l.fwd;
    f.for_each([](const char*, Tensor& t) { EXPECT_EQ(sum(mul(t, t)), 0.0); });
  }
}

TEST(BiGruBackward, MissingCache) {
  Rng rng(11);
  const DecoderParams d = random_decoder(rng, 3, 2, 1, 4);
  EXPECT_THROW(bigru_backward(BiGruCache{}, d, Tensor({1, 4})), UsageError);
}

void check_decoder_gradients(Rng& rng, std::size_t len, std::size_t in, std::size_t h, std::size_t layers) {
  const DecoderParams d = random_decoder(rng, in, h, layers, 3);
  const Tensor seq = random_tensor({len, in}, rng);
  const Tensor w = random_tensor({len, 3}, rng);
  BiGruCache cache;
  bigru_forward(seq, d, &cache);
  DecoderGrads g = bigru_backward(cache, d, w);
  auto loss = [&](const Tensor& s, const DecoderParams& p) { return sum(mul(bigru_forward(s, p), w)); };
  EXPECT_LT(relative_error(g.input, finite_diff_grad([&](const Tensor& s) { return loss(s, d); }, seq)), 1e-4);
  EXPECT_LT(relative_error(g.proj, finite_diff_grad(
                                       [&](const Tensor& x) {
                                         DecoderParams q = d;
                                         q.proj = x;
                                         return loss(seq, q);
                                       },
                                       d.proj)),
            1e-4);
  for (std::size_t l = 0; l < layers; ++l) {
    for (bool forward : {true, false}) {
      GruParams& grads = forward ? g.layers[l].fwd : g.layers[l].bwd;
      std::vector<std::pair<std::string, Tensor*>> gs;
      grads.for_each([&](const char* name, Tensor& t) { gs.emplace_back(name, &t); });
      std::size_t idx = 0;
      DecoderParams base = d;
      GruParams& target = forward ? base.layers[l].fwd : base.layers[l].bwd;
      target.for_each([&](const char* name, Tensor& t) {
        const Tensor orig = t;
        const Tensor numeric = finite_diff_grad(
            [&](const Tensor& x) {
              t = x;
              return loss(seq, base);
            },
            orig);
        t = orig;
        EXPECT_LT(relative_error(*gs[idx].second, numeric), 1e-4) << "layer " << l << " " << name;
        ++idx;
      });
    }
  }
}

TEST(BiGruBackward, SingleStepMatchesFiniteDifferences) {
  Rng rng(12);
  check_decoder_gradients(rng, 1, 3, 2, 1);
}

TEST(BiGruBackward, MatchesFiniteDifferences) {
  Rng rng(13);
  check_decoder_gradients(rng, 4, 3, 5, 1);
  check_decoder_gradients(rng, 6, 2, 3, 2);
}

}  // namespace
}  // namespace htr
