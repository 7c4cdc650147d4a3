#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "htr/bundle.hpp"
#include "htr/ctc.hpp"
#include "htr/metrics.hpp"
#include "htr/model.hpp"
#include "htr/optim.hpp"

namespace htr {

struct TrainLogRow {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double seconds = 0;
};

struct TrainLog {
  std::uint64_t seed = 0;
  std::vector<TrainLogRow> rows;

  /// TSV with a `#seed` line, a header, then one row per epoch. Losses use 17 significant digits.
  std::string to_tsv() const {
    std::string out = "#seed\t" + std::to_string(seed) + "\nepoch\ttrain_loss\tval_loss\tseconds\n";
    char buf[128];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.3f\n", r.epoch, r.train_loss, r.val_loss, r.seconds);
      out += buf;
    }
    return out;
  }

  static TrainLog from_tsv(const std::string& text) {
    TrainLog log;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      if (line.rfind("#seed\t", 0) == 0) {
        log.seed = std::stoull(line.substr(6));
        continue;
      }
      if (line.empty() || line.rfind("epoch", 0) == 0) continue;
      TrainLogRow r;
      if (std::sscanf(line.c_str(), "%zu\t%lf\t%lf\t%lf", &r.epoch, &r.train_loss, &r.val_loss, &r.seconds) != 4) {
        throw InputError("train log: malformed row '" + line + "'");
      }
      log.rows.push_back(r);
    }
    return log;
  }
};

// ---------------------------------------------------------------------------

/// Mean per-sample CTC loss over `samples` (infer mode, fixed batches).
inline double mean_ctc_loss(const Model& m, const std::vector<LoadedSample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw InputError("cannot compute a loss over an empty sample set");
  double total = 0;
  for (std::size_t b = 0; b < samples.size(); b += batch_size) {
    const std::size_t e = std::min(samples.size(), b + batch_size);
    std::vector<const Tensor*> imgs;
    for (std::size_t i = b; i < e; ++i) imgs.push_back(&samples[i].image);
    const auto logits = forward(m, stack_images(imgs), Mode::infer);
    std::vector<double> losses(e - b);
    parallel_for(e - b, [&](std::size_t i) { losses[i] = ctc_loss(logits[i], samples[b + i].label).loss; });
    for (double l : losses) total += l;
  }
  return total / static_cast<double>(samples.size());
}

struct BatchResult {
  double loss = 0;  // mean over samples
  double grad_norm = 0;
};

/// Forward, CTC, backward and one optimizer update on a mini-batch.
inline BatchResult train_batch(Model& m, RmsProp& opt, const std::vector<const LoadedSample*>& batch,
                               std::uint64_t dropout_seed) {
  std::vector<const Tensor*> imgs;
  for (const auto* s : batch) imgs.push_back(&s->image);
  ForwardCache cache;
  const auto logits = forward(m, stack_images(imgs), Mode::train, dropout_seed, &cache);
  const std::size_t n = batch.size();
  std::vector<CtcLossResult> ctc(n);
  parallel_for(n, [&](std::size_t i) { ctc[i] = ctc_loss(logits[i], batch[i]->label); });
  BatchResult r;
  std::vector<Tensor> grads(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(ctc[i].loss)) throw NumericError("non-finite CTC loss on sample '" + batch[i]->id + "'");
    r.loss += ctc[i].loss / static_cast<double>(n);
    grads[i] = mul(ctc[i].grad, 1.0 / static_cast<double>(n));
  }
  const ModelParams g = backward(m, cache, grads);
  for (std::size_t i = 0; i < m.params.blocks.size(); ++i) update_running_stats(m.params.blocks[i], cache.blocks[i]);
  r.grad_norm = opt.step(m.params, g);
  return r;
}

struct TrainOptions {
  std::filesystem::path out_dir;           // receives best.htrf, last.htrf, train_log.tsv
  std::filesystem::path resume;            // checkpoint to continue from; empty starts fresh
  std::function<void(const TrainLogRow&, bool improved)> on_epoch;
};

struct TrainResult {
  TrainLog log;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  std::string stop_reason;  // "patience", "max_epochs" or "max_seconds"
  Model best;
};

namespace train_detail {

inline Tensor scalar(double v) { return Tensor({1}, v); }

inline TensorMap checkpoint_state(const Model& m, const RmsProp& opt, const EarlyStopping& es, std::size_t epoch) {
  TensorMap st = m.state();
  for (const auto& [name, a] : opt.acc) st.emplace("opt.acc." + name, a);
  st.emplace("opt.steps", scalar(static_cast<double>(opt.steps)));
  st.emplace("train.epoch", scalar(static_cast<double>(epoch)));
  st.emplace("train.best_val", scalar(es.best));
  st.emplace("train.best_epoch", scalar(static_cast<double>(es.best_epoch)));
  st.emplace("train.since", scalar(static_cast<double>(es.since)));
  return st;
}

inline void check_split(const Model& m, const DatasetBundle& b) {
  if (b.samples.empty()) throw InputError("bundle '" + b.split + "' is empty");
  if (b.charset.hash() != m.charset.hash()) {
    throw MismatchError("bundle '" + b.split + "' charset " + b.charset.hash() + " differs from model charset " +
                        m.charset.hash());
  }
  if (b.height != m.config.input_height || b.width != m.config.input_width) {
    throw MismatchError("bundle '" + b.split + "' images are " + std::to_string(b.height) + "x" +
                        std::to_string(b.width) + ", model expects " + std::to_string(m.config.input_height) + "x" +
                        std::to_string(m.config.input_width));
  }
  const std::size_t t = m.time_steps();
  for (const auto& s : b.samples) {
    if (ctc_min_frames(s.label) > t) {
      throw InputError("sample '" + s.id + "' needs " + std::to_string(ctc_min_frames(s.label)) +
                       " frames but the model emits " + std::to_string(t));
    }
  }
}

}  // namespace train_detail

/// Mini-batch RMSProp on CTC loss with early stopping on validation loss. Writes best.htrf
/// (lowest validation loss so far), last.htrf and train_log.tsv after every epoch.
inline TrainResult train(const RunConfig& cfg, const DatasetBundle& train_set, const DatasetBundle& valid_set,
                         const TrainOptions& options) {
  cfg.validate();
  if (train_set.charset.hash() != valid_set.charset.hash()) {
    throw MismatchError("train and validation bundles use different charsets");
  }
  set_thread_count(static_cast<int>(cfg.threads));

  Model model;
  RmsProp opt = RmsProp::from_config(cfg);
  EarlyStopping es{cfg.patience};
  TrainLog log{cfg.seed, {}};
  std::size_t epoch = 0;
  const auto log_path = options.out_dir / "train_log.tsv";
  if (!options.resume.empty()) {
    TensorMap st = load_checkpoint(options.resume.string());
    const std::string text = cfg.dump();
    Tensor t({text.size()});
    for (std::size_t i = 0; i < text.size(); ++i) t[i] = static_cast<unsigned char>(text[i]);
    st["meta.config"] = t;  // architecture must match; training knobs come from cfg
    model = Model::from_state(st);
    const auto get = [&](const std::string& n) {
      const auto it = st.find(n);
      if (it == st.end()) throw MismatchError("resume checkpoint lacks '" + n + "'");
      return it->second[0];
    };
    epoch = static_cast<std::size_t>(get("train.epoch"));
    opt.steps = static_cast<std::size_t>(get("opt.steps"));
    es.best = get("train.best_val");
    es.best_epoch = static_cast<std::size_t>(get("train.best_epoch"));
    es.since = static_cast<std::size_t>(get("train.since"));
    for (const auto& [name, a] : st)
      if (name.rfind("opt.acc.", 0) == 0) opt.acc.emplace(name.substr(8), a);
    if (std::filesystem::exists(log_path)) {
      const io::Bytes b = io::read_file(log_path.string());
      log = TrainLog::from_tsv(std::string(b.begin(), b.end()));
      while (!log.rows.empty() && log.rows.back().epoch > epoch) log.rows.pop_back();
      log.seed = cfg.seed;
    }
  } else {
    model = Model::create(cfg, train_set.charset, cfg.seed);
  }
  train_detail::check_split(model, train_set);
  train_detail::check_split(model, valid_set);
  const auto train_samples = load_samples(train_set, cfg.invert);
  const auto valid_samples = load_samples(valid_set, cfg.invert);

  TrainResult result;
  result.best = model;
  if (!options.resume.empty() && std::filesystem::exists(options.out_dir / "best.htrf")) {
    result.best = Model::from_state(load_checkpoint((options.out_dir / "best.htrf").string()));
  }
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(train_samples.size());
  while (true) {
    if (es.should_stop()) {
      result.stop_reason = "patience";
      break;
    }
    if (epoch >= cfg.max_epochs) {
      result.stop_reason = "max_epochs";
      break;
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (cfg.max_seconds > 0 && elapsed >= cfg.max_seconds) {
      result.stop_reason = "max_seconds";
      break;
    }
    ++epoch;
    const auto epoch_start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, {0xE90C, epoch}));
    rng.shuffle(order);
    double loss_sum = 0;
    for (std::size_t b = 0, k = 0; b < order.size(); b += cfg.batch_size, ++k) {
      std::vector<const LoadedSample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&train_samples[order[i]]);
      BatchResult r;
      try {
        r = train_batch(model, opt, batch, derive_seed(cfg.seed, {0xD409, epoch, k}));
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(k + 1) + ": " + e.what());
      }
      loss_sum += r.loss * static_cast<double>(batch.size());
    }
    TrainLogRow row{epoch, loss_sum / static_cast<double>(order.size()),
                    mean_ctc_loss(model, valid_samples, cfg.batch_size), 0};
    if (!std::isfinite(row.train_loss) || !std::isfinite(row.val_loss)) {
      throw NumericError("epoch " + std::to_string(epoch) + ": non-finite loss");
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    const bool improved = es.update(epoch, row.val_loss);
    log.rows.push_back(row);
    if (improved) result.best = model;
    if (!options.out_dir.empty()) {
      std::filesystem::create_directories(options.out_dir);
      const TensorMap st = train_detail::checkpoint_state(model, opt, es, epoch);
      if (improved) save_checkpoint((options.out_dir / "best.htrf").string(), st);
      save_checkpoint((options.out_dir / "last.htrf").string(), st);
      const std::string tsv = log.to_tsv();
      io::write_file(log_path.string(), io::Bytes(tsv.begin(), tsv.end()));
    }
    if (options.on_epoch) options.on_epoch(row, improved);
  }
  result.log = std::move(log);
  result.best_epoch = es.best_epoch;
  result.best_val_loss = es.best;
  return result;
}

// ---------------------------------------------------------------------------
// Inference

enum class DecodeMode { greedy, beam };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::greedy;
  std::size_t beam_width = 16;

  static DecodeOptions from_config(const RunConfig& c) {
    return {c.decode == "beam" ? DecodeMode::beam : DecodeMode::greedy, c.beam_width};
  }
};

inline LabelSeq decode(const Tensor& logits, const DecodeOptions& d) {
  const Tensor dist = softmax_rows(logits);
  return d.mode == DecodeMode::beam ? decode_beam(dist, d.beam_width) : decode_greedy(dist);
}

/// Hypotheses for every sample, batched through the model in infer mode.
inline std::vector<std::string> transcribe_samples(const Model& m, const std::vector<LoadedSample>& samples,
                                                   const DecodeOptions& d, std::size_t batch_size = 32) {
  std::vector<std::string> out(samples.size());
  for (std::size_t b = 0; b < samples.size(); b += batch_size) {
    const std::size_t e = std::min(samples.size(), b + batch_size);
    std::vector<const Tensor*> imgs;
    for (std::size_t i = b; i < e; ++i) imgs.push_back(&samples[i].image);
    const auto logits = forward(m, stack_images(imgs), Mode::infer);
    parallel_for(e - b, [&](std::size_t i) { out[b + i] = decode_label(decode(logits[i], d), m.charset); });
  }
  return out;
}

/// Transcribes a bundle and scores it. With `oracle` set the references stand in for the
/// hypotheses, which checks the scoring path without a model.
inline EvalReport evaluate(const Model& m, const DatasetBundle& b, const DecodeOptions& d, bool oracle = false) {
  if (b.charset.hash() != m.charset.hash()) {
    throw MismatchError("bundle charset " + b.charset.hash() + " differs from checkpoint charset " + m.charset.hash());
  }
  const auto samples = load_samples(b, m.config.invert);
  std::vector<std::string> hyps;
  if (oracle) {
    for (const auto& s : samples) hyps.push_back(decode_label(s.label, m.charset));
  } else {
    hyps = transcribe_samples(m, samples, d, m.config.batch_size);
  }
  std::vector<SampleResult> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string ref = decode_label(samples[i].label, b.charset);
    rows.push_back({samples[i].id, ref, hyps[i], count_edits(ref, hyps[i])});
  }
  return EvalReport::from(std::move(rows));
}

struct Transcription {
  std::string text;
  Tensor dist;  // T × classes softmax, for per-step inspection
};

/// Preprocesses one raw image exactly as bundles are built, then decodes it.
inline Transcription transcribe_image(const Model& m, const RawImage& img, const DecodeOptions& d) {
  const RunConfig& c = m.config;
  const RawImage pre = preprocess(img, {c.input_height, c.input_width, c.illumination, c.deslant});
  const Tensor x = to_tensor(pre, c.invert);
  const auto logits = forward(m, stack_images({&x}), Mode::infer);
  return {decode_label(decode(logits[0], d), m.charset), softmax_rows(logits[0])};
}

}  // namespace htr
