#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "htr/errors.hpp"
#include "htr/tensor.hpp"

namespace htr {

/// Class indices into a charset, blanks excluded.
using LabelSeq = std::vector<int>;

namespace ctc_detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline void check_distribution(const Tensor& dist, const char* where) {
  if (dist.rank() != 2) throw DimensionError(std::string(where) + ": expected T×K, got " + to_string(dist.shape()));
  if (dist.dim(1) < 2) throw DimensionError(std::string(where) + ": need at least one symbol plus blank");
}

inline void check_label(const LabelSeq& label, std::size_t classes, const char* where) {
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (label[i] < 0 || static_cast<std::size_t>(label[i]) + 1 >= classes) {
      throw UsageError(std::string(where) + ": label index " + std::to_string(label[i]) + " at position " +
                       std::to_string(i) + " is not a symbol of a " + std::to_string(classes) + "-class alphabet");
    }
  }
}

/// Forward–backward over the blank-augmented label; returns log p(label) and, when requested,
/// the log occupancy log Σ_{s: l'_s = k} α_t(s)β_t(s)/y_t(k) per (t, k).
inline double forward_backward(const Tensor& log_probs, const LabelSeq& label, Tensor* log_occupancy) {
  const std::size_t len = log_probs.dim(0), classes = log_probs.dim(1);
  const int blank = static_cast<int>(classes) - 1;
  const std::size_t s_len = 2 * label.size() + 1;
  std::vector<int> ext(s_len, blank);
  for (std::size_t i = 0; i < label.size(); ++i) ext[2 * i + 1] = label[i];

  auto lp = [&](std::size_t t, std::size_t s) { return log_probs(t, static_cast<std::size_t>(ext[s])); };
  auto skip_ok = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(len * s_len, kNegInf), beta(len * s_len, kNegInf);
  alpha[0] = lp(0, 0);
  if (s_len > 1) alpha[1] = lp(0, 1);
  for (std::size_t t = 1; t < len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double a = alpha[(t - 1) * s_len + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
      if (skip_ok(s)) a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
      alpha[t * s_len + s] = a == kNegInf ? kNegInf : a + lp(t, s);
    }
  }
  double log_p = alpha[(len - 1) * s_len + s_len - 1];
  if (s_len > 1) log_p = log_add(log_p, alpha[(len - 1) * s_len + s_len - 2]);
  if (!log_occupancy) return log_p;

  beta[(len - 1) * s_len + s_len - 1] = lp(len - 1, s_len - 1);
  if (s_len > 1) beta[(len - 1) * s_len + s_len - 2] = lp(len - 1, s_len - 2);
  for (std::size_t t = len - 1; t-- > 0;) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double b = beta[(t + 1) * s_len + s];
      if (s + 1 < s_len) b = log_add(b, beta[(t + 1) * s_len + s + 1]);
      if (s + 2 < s_len && skip_ok(s + 2)) b = log_add(b, beta[(t + 1) * s_len + s + 2]);
      beta[t * s_len + s] = b == kNegInf ? kNegInf : b + lp(t, s);
    }
  }
  *log_occupancy = Tensor({len, classes}, kNegInf);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      const double ab = alpha[t * s_len + s] + beta[t * s_len + s];
      if (ab == kNegInf || std::isnan(ab)) continue;
      double& occ = (*log_occupancy)(t, static_cast<std::size_t>(ext[s]));
      occ = log_add(occ, ab - lp(t, s));
    }
  }
  return log_p;
}

}  // namespace ctc_detail

/// Row-wise log-softmax with max subtraction.
inline Tensor log_softmax_rows(const Tensor& logits) {
  ctc_detail::check_distribution(logits, "log_softmax_rows");
  Tensor out(logits.shape());
  const std::size_t k = logits.dim(1);
  for (std::size_t t = 0; t < logits.dim(0); ++t) {
    const auto row = logits.row(t);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    const double lz = m + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out(t, j) = row[j] - lz;
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& logits) {
  Tensor out = log_softmax_rows(logits);
  for (double& v : out.data()) v = std::exp(v);
  return out;
}

/// Merge adjacent duplicates, then drop blanks. The blank is the last class.
inline LabelSeq collapse(std::span<const int> path, std::size_t classes) {
  const int blank = static_cast<int>(classes) - 1;
  LabelSeq out;
  int prev = -1;
  for (std::size_t t = 0; t < path.size(); ++t) {
    const int k = path[t];
    if (k < 0 || k > blank) {
      throw UsageError("collapse: path entry " + std::to_string(k) + " at step " + std::to_string(t) +
                       " outside a " + std::to_string(classes) + "-class alphabet");
    }
    if (k != prev && k != blank) out.push_back(k);
    prev = k;
  }
  return out;
}

/// Minimum number of frames needed to emit `label`: one per symbol plus a blank between repeats.
inline std::size_t ctc_min_frames(const LabelSeq& label) {
  std::size_t need = label.size();
  for (std::size_t i = 1; i < label.size(); ++i)
    if (label[i] == label[i - 1]) ++need;
  return need;
}

inline void check_feasible(std::size_t frames, const LabelSeq& label) {
  if (frames < ctc_min_frames(label)) {
    throw InfeasibleLabelError("CTC label of length " + std::to_string(label.size()) + " needs " +
                               std::to_string(ctc_min_frames(label)) + " frames, only " + std::to_string(frames) +
                               " available");
  }
}

struct CtcLossResult {
  double loss = 0.0;  // −ln p(label | x), nats
  Tensor grad;        // ∂loss/∂logits, T×K
};

/// CTC negative log-likelihood of `label` and its gradient with respect to the pre-softmax logits.
inline CtcLossResult ctc_loss(const Tensor& logits, const LabelSeq& label) {
  ctc_detail::check_distribution(logits, "ctc_loss");
  ctc_detail::check_label(label, logits.dim(1), "ctc_loss");
  check_feasible(logits.dim(0), label);
  const Tensor log_probs = log_softmax_rows(logits);
  Tensor log_occ;
  const double log_p = ctc_detail::forward_backward(log_probs, label, &log_occ);
  if (!std::isfinite(log_p)) throw NumericError("ctc_loss: label probability underflowed to zero");
  CtcLossResult result{-log_p, Tensor(logits.shape())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double occ = log_occ[i] == ctc_detail::kNegInf ? 0.0 : std::exp(log_occ[i] - log_p);
    result.grad[i] = std::exp(log_probs[i]) - occ;
  }
  return result;
}

/// −ln p(label | x) for an already-normalized T×K distribution.
inline double ctc_neg_log_likelihood(const Tensor& dist, const LabelSeq& label) {
  ctc_detail::check_distribution(dist, "ctc_neg_log_likelihood");
  ctc_detail::check_label(label, dist.dim(1), "ctc_neg_log_likelihood");
  check_feasible(dist.dim(0), label);
  Tensor log_probs(dist.shape());
  for (std::size_t i = 0; i < dist.size(); ++i) {
    log_probs[i] = dist[i] > 0 ? std::log(dist[i]) : ctc_detail::kNegInf;
  }
  return -ctc_detail::forward_backward(log_probs, label, nullptr);
}

inline constexpr double kBruteForcePathLimit = 1e6;

/// p(label | x) by enumerating every path in A'^T.
inline double ctc_bruteforce(const Tensor& dist, const LabelSeq& label) {
  ctc_detail::check_distribution(dist, "ctc_bruteforce");
  const std::size_t len = dist.dim(0), k = dist.dim(1);
  if (std::pow(static_cast<double>(k), static_cast<double>(len)) > kBruteForcePathLimit) {
    throw SizeError("ctc_bruteforce: " + std::to_string(k) + "^" + std::to_string(len) + " paths exceed the 1e6 guard");
  }
  std::vector<int> path(len, 0);
  double total = 0.0;
  while (true) {
    if (collapse(path, k) == label) {
      double prod = 1.0;
      for (std::size_t t = 0; t < len; ++t) prod *= dist(t, static_cast<std::size_t>(path[t]));
      total += prod;
    }
    std::size_t t = 0;
    while (t < len && ++path[t] == static_cast<int>(k)) path[t++] = 0;
    if (t == len) break;
  }
  return total;
}

/// Best-path decoding: per-step argmax (lowest index wins ties), then collapse.
inline LabelSeq decode_greedy(const Tensor& dist) {
  ctc_detail::check_distribution(dist, "decode_greedy");
  std::vector<int> path(dist.dim(0));
  for (std::size_t t = 0; t < dist.dim(0); ++t) {
    const auto row = dist.row(t);
    path[t] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return collapse(path, dist.dim(1));
}

struct BeamHypothesis {
  LabelSeq label;
  double log_prob = 0.0;  // ln p(label | x) restricted to surviving paths
};

/// CTC prefix beam search over a T×K distribution, keeping blank- and non-blank-ending
/// probabilities per prefix. Returns surviving hypotheses, best first.
inline std::vector<BeamHypothesis> beam_search(const Tensor& dist, std::size_t beam_width) {
  using ctc_detail::kNegInf;
  using ctc_detail::log_add;
  ctc_detail::check_distribution(dist, "decode_beam");
  if (beam_width < 1) throw UsageError("decode_beam: beam width must be at least 1");
  const std::size_t len = dist.dim(0), k = dist.dim(1);
  const int blank = static_cast<int>(k) - 1;
  struct Mass {
    double blank = kNegInf;
    double symbol = kNegInf;
    double total() const { return log_add(blank, symbol); }
  };
  std::map<LabelSeq, Mass> beams;
  beams[{}] = Mass{0.0, kNegInf};
  std::vector<double> lp(k);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t j = 0; j < k; ++j) lp[j] = dist(t, j) > 0 ? std::log(dist(t, j)) : kNegInf;
    std::map<LabelSeq, Mass> next;
    for (const auto& [prefix, mass] : beams) {
      const double total = mass.total();
      Mass& stay = next[prefix];
      stay.blank = log_add(stay.blank, total + lp[static_cast<std::size_t>(blank)]);
      if (!prefix.empty()) stay.symbol = log_add(stay.symbol, mass.symbol + lp[static_cast<std::size_t>(prefix.back())]);
      for (int c = 0; c < blank; ++c) {
        if (lp[static_cast<std::size_t>(c)] == kNegInf) continue;
        LabelSeq extended = prefix;
        extended.push_back(c);
        Mass& m = next[extended];
        const double from = (!prefix.empty() && prefix.back() == c) ? mass.blank : total;
        m.symbol = log_add(m.symbol, from + lp[static_cast<std::size_t>(c)]);
      }
    }
    std::vector<std::pair<LabelSeq, Mass>> ranked(next.begin(), next.end());
    // std::map iteration is lexicographic, so stable_sort keeps ties deterministic.
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second.total() > b.second.total(); });
    if (ranked.size() > beam_width) ranked.resize(beam_width);
    beams = std::map<LabelSeq, Mass>(ranked.begin(), ranked.end());
  }
  std::vector<BeamHypothesis> out;
  out.reserve(beams.size());
  for (const auto& [prefix, mass] : beams) out.push_back({prefix, mass.total()});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.log_prob > b.log_prob; });
  return out;
}

inline LabelSeq decode_beam(const Tensor& dist, std::size_t beam_width) {
  return beam_search(dist, beam_width).front().label;
}

}  // namespace htr
