#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "htr/model.hpp"

namespace htr {

/// acc ← ρ·acc + (1−ρ)·g²;  w ← w − lr·g / (√acc + ε).
inline void rmsprop_update(Tensor& w, const Tensor& g, Tensor& acc, double lr, double rho, double eps) {
  if (w.shape() != g.shape() || w.shape() != acc.shape()) {
    throw DimensionError("rmsprop: parameter " + to_string(w.shape()) + ", gradient " + to_string(g.shape()) +
                         ", accumulator " + to_string(acc.shape()));
  }
  double* wp = w.raw();
  double* ap = acc.raw();
  const double* gp = g.raw();
  for (std::size_t i = 0; i < w.size(); ++i) {
    ap[i] = rho * ap[i] + (1.0 - rho) * gp[i] * gp[i];
    wp[i] -= lr * gp[i] / (std::sqrt(ap[i]) + eps);
  }
}

struct RmsProp {
  double learning_rate = 1e-3;
  double rho = 0.9;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // global L2 norm cap; 0 disables
  std::map<std::string, Tensor> acc;
  std::size_t steps = 0;

  static RmsProp from_config(const RunConfig& c) { return {c.learning_rate, c.rho, c.epsilon, c.clip_norm, {}, 0}; }

  /// One update of every trainable tensor. Returns the pre-clipping global gradient norm.
  double step(ModelParams& params, const ModelParams& grads) {
    std::map<std::string, const Tensor*> g;
    double sq = 0;
    grads.for_each([&](const std::string& name, const Tensor& t, bool trainable) {
      if (!trainable) return;
      if (!t.all_finite()) throw NumericError("rmsprop: non-finite gradient in '" + name + "'");
      for (double v : t.data()) sq += v * v;
      g[name] = &t;
    });
    const double norm = std::sqrt(sq);
    const double scale = clip_norm > 0 && norm > clip_norm ? clip_norm / norm : 1.0;
    params.for_each([&](const std::string& name, Tensor& w, bool trainable) {
      if (!trainable) return;
      auto [it, fresh] = acc.try_emplace(name, Tensor(w.shape()));
      (void)fresh;
      if (scale != 1.0) {
        rmsprop_update(w, mul(*g.at(name), scale), it->second, learning_rate, rho, epsilon);
      } else {
        rmsprop_update(w, *g.at(name), it->second, learning_rate, rho, epsilon);
      }
    });
    ++steps;
    return norm;
  }
};

/// Stops once `patience` consecutive epochs fail to improve on the best validation loss.
struct EarlyStopping {
  std::size_t patience = 20;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t since = 0;

  /// Records an epoch; true when it set a new best.
  bool update(std::size_t epoch, double val_loss) {
    if (val_loss < best) {
      best = val_loss;
      best_epoch = epoch;
      since = 0;
      return true;
    }
    ++since;
    return false;
  }

  bool should_stop() const { return since >= patience; }
};

}  // namespace htr
