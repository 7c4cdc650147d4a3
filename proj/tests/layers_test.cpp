#include <cmath>

#include <gtest/gtest.h>

#include "htr/layers.hpp"
#include "test_util.hpp"

namespace htr {
namespace {

using testing::random_tensor;

TEST(Gated, ZeroKernelsKillEveryFeature) {
  Rng rng(1);
  const Tensor x = random_tensor({2, 4, 5}, rng);
  EXPECT_EQ(gated_forward(x, {Tensor({2, 2, 3, 3})}), Tensor(x.shape()));
}

TEST(Gated, ZeroInputGivesZeroOutput) {
  Rng rng(2);
  EXPECT_EQ(gated_forward(Tensor({2, 4, 5}), {random_tensor({2, 2, 3, 3}, rng)}), Tensor({2, 4, 5}));
}

TEST(Gated, ScalarEvaluation) {
  const Tensor y = gated_forward(Tensor({1, 1, 1}, 2.0), {Tensor({1, 1, 1, 1}, 10.0)});
  EXPECT_DOUBLE_EQ(y[0], 2.0 * std::tanh(20.0));
  EXPECT_GT(y[0], 1.99999);
}

TEST(Gated, EvenKernelIsRejected) {
  EXPECT_THROW(gated_forward(Tensor({1, 4, 4}), {Tensor({1, 1, 2, 2})}), DimensionError);
}

TEST(Gated, OutputNeverExceedsInputMagnitude) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({3, 4, 6}, rng, -3, 3);
    const Tensor y = gated_forward(x, {random_tensor({3, 3, 3, 3}, rng, -2, 2)});
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
  }
}

TEST(GatedBackward, ZeroUpstreamGradient) {
  Rng rng(4);
  GateCache cache;
  const GateParams p{random_tensor({2, 2, 3, 3}, rng)};
  gated_forward(random_tensor({2, 3, 3}, rng), p, &cache);
  const GateGrads g = gated_backward(cache, p, Tensor({2, 3, 3}));
  EXPECT_EQ(g.input, Tensor({2, 3, 3}));
  EXPECT_EQ(g.kernels, Tensor({2, 2, 3, 3}));
}

TEST(GatedBackward, MissingCache) {
  EXPECT_THROW(gated_backward(GateCache{}, {Tensor({1, 1, 1, 1})}, Tensor({1, 1, 1})), UsageError);
}

TEST(GatedBackward, SaturatedGatePassesGradientStraightThrough) {
  // 1×1 kernel of 50 on inputs of magnitude ≥ 0.5: tanh(±25) is ±1 to machine precision.
  const Tensor x = Tensor({1, 1, 3}, std::vector<double>{0.5, -0.7, 0.9});
  const GateParams p{Tensor({1, 1, 1, 1}, 50.0)};
  GateCache cache;
  gated_forward(x, p, &cache);
  const Tensor up = Tensor({1, 1, 3}, std::vector<double>{1.0, 2.0, -3.0});
  const GateGrads g = gated_backward(cache, p, up);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g.input[i], up[i] * (x[i] > 0 ? 1.0 : -1.0), 1e-12);
  EXPECT_NEAR(g.kernels[0], 0.0, 1e-12);
}

TEST(GatedBackward, MatchesFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({1, 3, 3}, rng);
    const GateParams p{random_tensor({1, 1, 3, 3}, rng)};
    const Tensor w = random_tensor(x.shape(), rng);
    GateCache cache;
    gated_forward(x, p, &cache);
    const GateGrads g = gated_backward(cache, p, w);
    auto fx = [&](const Tensor& xi) { return sum(mul(gated_forward(xi, p), w)); };
    auto fk = [&](const Tensor& k) { return sum(mul(gated_forward(x, {k}), w)); };
    EXPECT_LT(relative_error(g.input, finite_diff_grad(fx, x)), 1e-4);
    EXPECT_LT(relative_error(g.kernels, finite_diff_grad(fk, p.kernels)), 1e-4);
  }
}

ConvBlockParams random_block(Rng& rng, std::size_t cin, std::size_t cout, double dropout) {
  ConvBlockParams p = ConvBlockParams::make(cin, cout, {3, 3}, {2, 1}, {1, 1}, dropout);
  p.kernels = random_tensor(p.kernels.shape(), rng);
  p.prelu_alpha = random_tensor({cout}, rng, 0.05, 0.5);
  p.bn_gamma = random_tensor({cout}, rng, 0.5, 1.5);
  p.bn_beta = random_tensor({cout}, rng, -0.5, 0.5);
  p.bn_running_mean = random_tensor({cout}, rng, -0.2, 0.2);
  p.bn_running_var = random_tensor({cout}, rng, 0.5, 1.5);
  return p;
}

TEST(ConvBlock, NoDropoutTrainEqualsInferWithMatchingStats) {
  Rng rng(6);
  ConvBlockParams p = random_block(rng, 2, 3, 0.0);
  const Tensor x = random_tensor({4, 2, 5, 6}, rng);
  ConvBlockCache cache;
  const Tensor train = conv_block_forward(x, p, Mode::train, 11, &cache);
  for (std::size_t c = 0; c < 3; ++c) {
    p.bn_running_mean[c] = cache.batch_mean[c];
    p.bn_running_var[c] = cache.batch_var[c];
  }
  EXPECT_LT(max_abs_diff(train, conv_block_forward(x, p, Mode::infer)), 1e-12);
}

TEST(ConvBlock, UnitSlopePReLUAndUnitBatchIsFixedPoint) {
  // 1×1 identity kernel, α = 1, γ = 1, β = 0 on a batch with mean 0 and variance 1.
  ConvBlockParams p = ConvBlockParams::make(1, 1, {1, 1}, {1, 1}, {0, 0}, 0.0);
  p.kernels.fill(1.0);
  p.prelu_alpha.fill(1.0);
  const Tensor x = Tensor({1, 1, 2, 2}, std::vector<double>{1, -1, -1, 1});
  const double scale = 1.0 / std::sqrt(1.0 + p.bn_epsilon);
  const Tensor y = conv_block_forward(x, p, Mode::train, 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i] * scale, 1e-15);
  const Tensor yi = conv_block_forward(x, p, Mode::infer);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(yi[i], x[i] * scale, 1e-15);
}

TEST(ConvBlock, InferIsDeterministicAndSeedIndependent) {
  Rng rng(7);
  const ConvBlockParams p = random_block(rng, 1, 2, 0.2);
  const Tensor x = random_tensor({2, 1, 6, 6}, rng);
  EXPECT_EQ(conv_block_forward(x, p, Mode::infer, 1), conv_block_forward(x, p, Mode::infer, 999));
}

TEST(ConvBlock, InvertedDropoutPreservesExpectation) {
  Rng rng(8);
  ConvBlockParams p = random_block(rng, 1, 1, 0.2);
  const Tensor x = random_tensor({1, 1, 4, 4}, rng);
  ConvBlockCache cache;
  conv_block_forward(x, p, Mode::train, 0, &cache);
  p.bn_running_mean[0] = cache.batch_mean[0];
  p.bn_running_var[0] = cache.batch_var[0];
  const Tensor infer = conv_block_forward(x, p, Mode::infer);
  constexpr int kMasks = 10000;
  std::vector<double> mean(infer.size()), sq(infer.size());
  for (int s = 0; s < kMasks; ++s) {
    const Tensor y = conv_block_forward(x, p, Mode::train, derive_seed(42, {static_cast<std::uint64_t>(s)}));
    for (std::size_t i = 0; i < y.size(); ++i) {
      mean[i] += y[i];
      sq[i] += y[i] * y[i];
    }
  }
  for (std::size_t i = 0; i < infer.size(); ++i) {
    const double m = mean[i] / kMasks;
    const double var = sq[i] / kMasks - m * m;
    const double se = std::sqrt(var / kMasks);
    EXPECT_LE(std::abs(m - infer[i]), 3 * se + 1e-12) << "element " << i;
  }
}

TEST(ConvBlock, BackwardMatchesFiniteDifferences) {
  Rng rng(9);
  for (Mode mode : {Mode::train, Mode::infer}) {
    const ConvBlockParams p = random_block(rng, 2, 3, mode == Mode::train ? 0.3 : 0.0);
    const Tensor x = random_tensor({3, 2, 4, 5}, rng);
    ConvBlockCache cache;
    const Tensor y = conv_block_forward(x, p, mode, 77, &cache);
    const Tensor w = random_tensor(y.shape(), rng);
    const ConvBlockGrads g = conv_block_backward(cache, p, w);
    auto with = [&](auto mutate) {
      return [&, mutate](const Tensor& t) {
        ConvBlockParams q = p;
        Tensor xi = x;
        mutate(q, xi, t);
        return sum(mul(conv_block_forward(xi, q, mode, 77), w));
      };
    };
    EXPECT_LT(relative_error(g.input, finite_diff_grad(with([](auto&, Tensor& xi, const Tensor& t) { xi = t; }), x)),
              1e-4);
    EXPECT_LT(relative_error(g.kernels, finite_diff_grad(with([](ConvBlockParams& q, auto&, const Tensor& t) {
                                                           q.kernels = t;
                                                         }),
                                                         p.kernels)),
              1e-4);
    EXPECT_LT(relative_error(g.prelu_alpha, finite_diff_grad(with([](ConvBlockParams& q, auto&, const Tensor& t) {
                                                               q.prelu_alpha = t;
                                                             }),
                                                             p.prelu_alpha)),
              1e-4);
    EXPECT_LT(relative_error(g.bn_gamma, finite_diff_grad(with([](ConvBlockParams& q, auto&, const Tensor& t) {
                                                            q.bn_gamma = t;
                                                          }),
                                                          p.bn_gamma)),
              1e-4);
    EXPECT_LT(relative_error(g.bn_beta, finite_diff_grad(with([](ConvBlockParams& q, auto&, const Tensor& t) {
                                                           q.bn_beta = t;
                                                         }),
                                                         p.bn_beta)),
              1e-4);
  }
}

TEST(ConvBlock, RunningStatsNeedTrainCache) {
  Rng rng(10);
  ConvBlockParams p = random_block(rng, 1, 1, 0.0);
  ConvBlockCache cache;
  conv_block_forward(random_tensor({1, 1, 4, 4}, rng), p, Mode::infer, 0, &cache);
  EXPECT_THROW(update_running_stats(p, cache), UsageError);
  conv_block_forward(random_tensor({1, 1, 4, 4}, rng), p, Mode::train, 0, &cache);
  const double before = p.bn_running_mean[0];
  update_running_stats(p, cache);
  EXPECT_DOUBLE_EQ(p.bn_running_mean[0], 0.9 * before + 0.1 * cache.batch_mean[0]);
}

TEST(ConvBlock, DropoutProbabilityValidated) {
  ConvBlockParams p = ConvBlockParams::make(1, 1, {1, 1}, {1, 1}, {0, 0}, 1.0);
  EXPECT_THROW(conv_block_forward(Tensor({1, 2, 2}), p, Mode::train), ConfigError);
}

TEST(MapToSequence, DefaultShape) {
  const Tensor seq = map_to_sequence(Tensor({256, 1, 128}), 256);
  EXPECT_EQ(seq.shape(), (Shape{128, 256}));
}

TEST(MapToSequence, SingleStep) {
  EXPECT_EQ(map_to_sequence(Tensor({1, 1, 1}, 3.0), 1), Tensor({1, 1}, 3.0));
}

TEST(MapToSequence, ColumnsFlattenLeftToRight) {
  Rng rng(11);
  const Tensor m = random_tensor({3, 2, 5}, rng);
  const Tensor seq = map_to_sequence(m, 6);
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(seq(k, c * 2 + h), m(c, h, k));
  EXPECT_EQ(sequence_to_map(seq, 3, 2), m);
  EXPECT_THROW(map_to_sequence(m, 5), ConfigError);
}

}  // namespace
}  // namespace htr
