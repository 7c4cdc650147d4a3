#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "htr/ctc.hpp"
#include "test_util.hpp"

namespace htr {
namespace {

using testing::random_distribution;
using testing::random_tensor;

Tensor log_of(const Tensor& dist) {
  Tensor out(dist.shape());
  for (std::size_t i = 0; i < dist.size(); ++i) out[i] = std::log(dist[i]);
  return out;
}

/// p(L|x) for every label reachable from some path, by enumeration.
std::map<LabelSeq, double> label_distribution(const Tensor& dist) {
  const std::size_t len = dist.dim(0), k = dist.dim(1);
  std::map<LabelSeq, double> out;
  std::vector<int> path(len, 0);
  while (true) {
    double prod = 1.0;
    for (std::size_t t = 0; t < len; ++t) prod *= dist(t, path[t]);
    out[collapse(path, k)] += prod;
    std::size_t t = 0;
    while (t < len && ++path[t] == static_cast<int>(k)) path[t++] = 0;
    if (t == len) break;
  }
  return out;
}

LabelSeq random_label(Rng& rng, std::size_t max_len, std::size_t symbols) {
  LabelSeq l(rng.uniform_int(0, static_cast<int>(max_len)));
  for (int& v : l) v = rng.uniform_int(0, static_cast<int>(symbols) - 1);
  return l;
}

// Alphabet for the examples: a = 0, b = 1, blank = 2 (or 1 when only "a" exists).
TEST(Collapse, Examples) {
  EXPECT_EQ(collapse(std::vector<int>{0, 0, 2, 1}, 3), (LabelSeq{0, 1}));
  EXPECT_EQ(collapse(std::vector<int>{2, 2, 2}, 3), LabelSeq{});
  EXPECT_EQ(collapse(std::vector<int>{0, 2, 0}, 3), (LabelSeq{0, 0}));
  EXPECT_THROW(collapse(std::vector<int>{0, 3}, 3), UsageError);
}

TEST(CtcLoss, SinglePath) {
  const Tensor logits = log_of(Tensor::matrix({{0.6, 0.4}}));
  EXPECT_NEAR(ctc_loss(logits, {0}).loss, -std::log(0.6), 1e-14);
  EXPECT_NEAR(ctc_loss(logits, {0}).loss, 0.5108, 1e-4);
}

TEST(CtcLoss, TwoFramesUniform) {
  const Tensor dist = Tensor::matrix({{0.5, 0.5}, {0.5, 0.5}});
  EXPECT_NEAR(ctc_loss(log_of(dist), {0}).loss, -std::log(0.75), 1e-14);
  EXPECT_NEAR(ctc_bruteforce(dist, {0}), 0.75, 1e-15);
}

TEST(CtcLoss, MatchesBruteForce) {
  Rng rng(1);
  int checked = 0;
  while (checked < 200) {
    const std::size_t t = rng.uniform_int(1, 6), a = rng.uniform_int(1, 4);
    const LabelSeq label = random_label(rng, 3, a);
    if (ctc_min_frames(label) > t) continue;
    const Tensor logits = random_tensor({t, a + 1}, rng, -2, 2);
    const double brute = ctc_bruteforce(softmax_rows(logits), label);
    EXPECT_NEAR(std::exp(-ctc_loss(logits, label).loss), brute, 1e-10 * brute);
    ++checked;
  }
}

TEST(CtcLoss, InfeasibleLabelIsAnError) {
  EXPECT_THROW(ctc_loss(Tensor({2, 2}), {0, 0}), InfeasibleLabelError);
  EXPECT_NO_THROW(ctc_loss(Tensor({3, 2}), {0, 0}));
  EXPECT_THROW(ctc_loss(Tensor({1, 3}), {0, 1}), InfeasibleLabelError);
  EXPECT_THROW(ctc_loss(Tensor({3, 3}), {2}), UsageError);  // blank is not a label symbol
}

TEST(CtcLoss, GradientMatchesFiniteDifferencesAndRowsSumToZero) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t t = rng.uniform_int(2, 6), a = rng.uniform_int(1, 4);
    LabelSeq label = random_label(rng, 3, a);
    if (ctc_min_frames(label) > t) label.clear();
    const Tensor logits = random_tensor({t, a + 1}, rng, -2, 2);
    const CtcLossResult r = ctc_loss(logits, label);
    EXPECT_GE(r.loss, 0.0);
    const Tensor numeric = finite_diff_grad([&](const Tensor& x) { return ctc_loss(x, label).loss; }, logits);
    EXPECT_LT(relative_error(r.grad, numeric), 1e-4);
    for (std::size_t i = 0; i < t; ++i) {
      double s = 0;
      for (double v : r.grad.row(i)) s += v;
      EXPECT_NEAR(s, 0.0, 1e-12);
    }
  }
}

TEST(CtcLoss, RaisingAlignedSymbolProbabilityNeverRaisesLoss) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = rng.uniform_int(1, 5), a = rng.uniform_int(1, 3);
    const LabelSeq label = random_label(rng, 3, a);
    if (label.empty() || ctc_min_frames(label) > t) continue;
    const Tensor dist = random_distribution(t, a + 1, rng);
    const double before = ctc_neg_log_likelihood(dist, label);
    Tensor bumped = dist;
    bumped(rng.uniform_int(0, static_cast<int>(t) - 1), label[rng.uniform_int(0, static_cast<int>(label.size()) - 1)]) +=
        0.1;
    EXPECT_LE(ctc_neg_log_likelihood(bumped, label), before + 1e-12);
    EXPECT_LE(-std::log(ctc_bruteforce(bumped, label)), before + 1e-12);
  }
}

TEST(CtcBruteForce, LabelProbabilitiesPartitionPathSpace) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = rng.uniform_int(1, 5), a = rng.uniform_int(1, 3);
    const Tensor dist = random_distribution(t, a + 1, rng);
    double total = 0, total_fb = 0;
    for (const auto& [label, p] : label_distribution(dist)) {
      total += ctc_bruteforce(dist, label);
      total_fb += std::exp(-ctc_neg_log_likelihood(dist, label));
      EXPECT_NEAR(p, ctc_bruteforce(dist, label), 1e-14);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_NEAR(total_fb, 1.0, 1e-12);
  }
}

TEST(CtcBruteForce, DeterministicDistribution) {
  // One-hot rows spelling a, blank, b.
  const Tensor dist = Tensor::matrix({{1, 0, 0}, {0, 0, 1}, {0, 1, 0}});
  EXPECT_EQ(ctc_bruteforce(dist, {0, 1}), 1.0);
}

TEST(CtcBruteForce, GuardTrips) {
  EXPECT_THROW(ctc_bruteforce(Tensor({21, 2}, 0.5), {0}), SizeError);
}

TEST(CtcLoss, LogSpaceSurvivesTinyProbabilities) {
  Tensor dist({4, 3});
  for (std::size_t t = 0; t < 4; ++t) {
    dist(t, 0) = 1e-300;
    dist(t, 1) = 1e-300;
    dist(t, 2) = 1.0;
  }
  const double nll = ctc_neg_log_likelihood(dist, {0, 1});
  EXPECT_TRUE(std::isfinite(nll));
  EXPECT_NEAR(nll, -std::log(6.0) + 600 * std::log(10.0), 1e-9);  // 6 alignments of two 1e-300 frames
  Tensor logits(dist.shape());
  for (std::size_t i = 0; i < dist.size(); ++i) logits[i] = std::log(dist[i]);
  const CtcLossResult r = ctc_loss(logits, {0, 1});
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_TRUE(r.grad.all_finite());
}

TEST(DecodeGreedy, Examples) {
  // h = 0, i = 1, blank = 2; path "h − i i".
  const Tensor dist = Tensor::matrix({{0.9, 0.05, 0.05}, {0.1, 0.1, 0.8}, {0.1, 0.8, 0.1}, {0.2, 0.7, 0.1}});
  EXPECT_EQ(decode_greedy(dist), (LabelSeq{0, 1}));
  EXPECT_EQ(decode_greedy(Tensor::matrix({{0.1, 0.2, 0.7}, {0.3, 0.3, 0.4}})), LabelSeq{});
}

TEST(DecodeGreedy, TiesGoToLowestIndex) {
  EXPECT_EQ(decode_greedy(Tensor::matrix({{0.4, 0.4, 0.2}})), LabelSeq{0});
}

TEST(DecodeGreedy, EqualsCollapsedIndependentArgmax) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = rng.uniform_int(1, 10), k = rng.uniform_int(2, 6);
    const Tensor dist = random_distribution(t, k, rng);
    std::vector<int> path;
    for (std::size_t i = 0; i < t; ++i) {
      int best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (dist(i, j) > dist(i, best)) best = static_cast<int>(j);
      path.push_back(best);
    }
    EXPECT_EQ(decode_greedy(dist), collapse(path, k));
  }
}

TEST(DecodeBeam, WidthOneOnPeakedDistributionEqualsGreedy) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = rng.uniform_int(1, 8), k = rng.uniform_int(2, 5);
    Tensor dist({t, k}, 0.02 / static_cast<double>(k - 1));
    for (std::size_t i = 0; i < t; ++i) dist(i, rng.uniform_int(0, static_cast<int>(k) - 1)) = 0.98;
    EXPECT_EQ(decode_beam(dist, 1), decode_greedy(dist));
  }
}

TEST(DecodeBeam, ExhaustiveBeamFindsMostProbableLabel) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = rng.uniform_int(1, 5), a = rng.uniform_int(1, 3);
    const Tensor dist = random_distribution(t, a + 1, rng);
    const auto labels = label_distribution(dist);
    auto best = labels.begin();
    for (auto it = labels.begin(); it != labels.end(); ++it)
      if (it->second > best->second) best = it;
    const auto hyps = beam_search(dist, 100000);
    EXPECT_EQ(hyps.front().label, best->first);
    EXPECT_NEAR(std::exp(hyps.front().log_prob), best->second, 1e-12);
  }
}

TEST(DecodeBeam, BeatsGreedyWhenMassSplitsAcrossPaths) {
  // Two frames over {a, blank}: best path is "− −" (0.6·0.6 = 0.36) but "a" collects 0.64.
  const Tensor dist = Tensor::matrix({{0.4, 0.6}, {0.4, 0.6}});
  EXPECT_EQ(decode_greedy(dist), LabelSeq{});
  EXPECT_EQ(decode_beam(dist, 4), LabelSeq{0});
  EXPECT_NEAR(ctc_bruteforce(dist, {0}), 0.64, 1e-15);
  EXPECT_NEAR(ctc_bruteforce(dist, {}), 0.36, 1e-15);
}

TEST(DecodeBeam, RandomDivergenceCasesFavourHigherLabelProbability) {
  Rng rng(8);
  int found = 0;
  for (int trial = 0; trial < 2000 && found < 10; ++trial) {
    const Tensor dist = random_distribution(rng.uniform_int(2, 5), rng.uniform_int(2, 3) + 1, rng);
    const LabelSeq greedy = decode_greedy(dist), beam = decode_beam(dist, 100000);
    if (greedy == beam) continue;
    ++found;
    EXPECT_GT(ctc_bruteforce(dist, beam), ctc_bruteforce(dist, greedy));
  }
  EXPECT_GT(found, 0);
}

TEST(DecodeBeam, WidthMustBePositive) {
  EXPECT_THROW(decode_beam(Tensor({2, 2}, 0.5), 0), UsageError);
}

}  // namespace
}  // namespace htr
