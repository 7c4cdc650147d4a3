// Command-line front end: preprocess, train, transcribe, evaluate, synth.
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "htr/htr.hpp"

namespace fs = std::filesystem;
using namespace htr;

namespace {

enum Exit { kOk = 0, kInternal = 1, kInput = 2, kNumeric = 3, kMismatch = 4 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

/// Config file (or defaults) with `--set key=value` overrides, then --seed/--threads on top.
RunConfig load_config(const Common& c) {
  std::string text;
  if (!c.config_path.empty()) {
    const io::Bytes b = io::read_file(c.config_path);
    text.assign(b.begin(), b.end());
  }
  RunConfig cfg = RunConfig::parse(text);
  if (!c.overrides.empty()) {
    std::string dumped = cfg.dump();
    for (const auto& kv : c.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      const std::string key = config_detail::trim(kv.substr(0, eq));
      const std::string line = key + " = " + config_detail::trim(kv.substr(eq + 1));
      const auto pos = ("\n" + dumped).find("\n" + key + " = ");
      if (pos == std::string::npos) {
        dumped += line + "\n";  // unknown key, rejected by parse below
      } else {
        const auto end = dumped.find('\n', pos);
        dumped.replace(pos, end - pos, line);
      }
    }
    cfg = RunConfig::parse(dumped);
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  cfg.validate();
  return cfg;
}

Model load_model(const std::string& path, const Common& c) {
  Model m = Model::from_state(load_checkpoint(path));
  if (c.threads) m.config.threads = *c.threads;
  set_thread_count(static_cast<int>(m.config.threads));
  return m;
}

DecodeOptions decode_options(const Model& m, bool greedy, std::size_t beam) {
  DecodeOptions d = DecodeOptions::from_config(m.config);
  if (greedy) d.mode = DecodeMode::greedy;
  if (beam > 0) d = {DecodeMode::beam, beam};
  return d;
}

int cmd_preprocess(const Common& c, const std::string& corpus, const std::string& out) {
  const RunConfig cfg = load_config(c);
  set_thread_count(static_cast<int>(cfg.threads));
  const auto bundles = build_bundles(corpus, cfg);
  fs::create_directories(out);
  std::size_t total = 0;
  for (const auto& b : bundles) {
    const fs::path p = fs::path(out) / (b.split + ".htrb");
    save_bundle(p, b);
    std::printf("%-8s %6zu samples  -> %s\n", b.split.c_str(), b.samples.size(), p.string().c_str());
    total += b.samples.size();
  }
  const Charset& cs = bundles.front().charset;
  std::printf("total    %6zu samples, charset %zu symbols (hash %s), images %zux%zu\n", total, cs.size(),
              cs.hash().c_str(), cfg.input_height, cfg.input_width);
  return kOk;
}

int cmd_train(const Common& c, const std::string& bundles, const std::string& out, const std::string& resume) {
  const RunConfig cfg = load_config(c);
  const DatasetBundle tr = load_bundle(fs::path(bundles) / "train.htrb");
  const DatasetBundle va = load_bundle(fs::path(bundles) / "valid.htrb");
  std::printf("training: lr %s, batch %zu, patience %zu, rho %s, epsilon %s, clip_norm %s, seed %llu\n",
              config_detail::format_real(cfg.learning_rate).c_str(), cfg.batch_size, cfg.patience,
              config_detail::format_real(cfg.rho).c_str(), config_detail::format_real(cfg.epsilon).c_str(),
              config_detail::format_real(cfg.clip_norm).c_str(), static_cast<unsigned long long>(cfg.seed));
  std::printf("          %zu train / %zu valid samples, max_epochs %zu, max_seconds %s, threads %d\n",
              tr.samples.size(), va.samples.size(), cfg.max_epochs, config_detail::format_real(cfg.max_seconds).c_str(),
              cfg.threads ? static_cast<int>(cfg.threads) : max_threads());
  std::fflush(stdout);
  TrainOptions opts{out, resume, [](const TrainLogRow& r, bool improved) {
                      std::printf("epoch %4zu  train_loss %10.6f  val_loss %10.6f  %7.1fs%s\n", r.epoch, r.train_loss,
                                  r.val_loss, r.seconds, improved ? "  *" : "");
                      std::fflush(stdout);
                    }};
  const TrainResult r = train(cfg, tr, va, opts);
  std::printf("stopped (%s); best epoch %zu, val_loss %.6f; checkpoints in %s\n", r.stop_reason.c_str(), r.best_epoch,
              r.best_val_loss, out.c_str());
  return kOk;
}

int cmd_transcribe(const Common& c, const std::string& ckpt, const std::string& image, bool greedy, std::size_t beam,
                   std::size_t top_k) {
  const RawImage img = load_image(image);
  const Model m = load_model(ckpt, c);
  const Transcription t = transcribe_image(m, img, decode_options(m, greedy, beam));
  std::printf("%s\n", t.text.c_str());
  if (top_k > 0) {
    const std::size_t k = std::min(top_k, m.classes());
    for (std::size_t s = 0; s < t.dist.shape()[0]; ++s) {
      std::vector<std::size_t> idx(m.classes());
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                        [&](std::size_t a, std::size_t b) { return t.dist(s, a) > t.dist(s, b); });
      std::printf("%zu", s);
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t cls = idx[j];
        const std::string sym = static_cast<int>(cls) == m.charset.blank() ? "<blank>" : utf8_encode(std::u32string(1, m.charset.symbol(static_cast<int>(cls))));
        std::printf("\t%s:%.4f", sym.c_str(), t.dist(s, cls));
      }
      std::printf("\n");
    }
  }
  return kOk;
}

int cmd_evaluate(const Common& c, const std::string& ckpt, const std::string& bundle, const std::string& report,
                 bool oracle, bool greedy, std::size_t beam) {
  const Model m = load_model(ckpt, c);
  const DatasetBundle b = load_bundle(bundle);
  const EvalReport r = evaluate(m, b, decode_options(m, greedy, beam), oracle);
  if (!report.empty()) {
    std::ofstream os(report, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot write " + report);
    write_report(os, r);
  }
  std::printf("%s %s\n", b.split.c_str(), r.summary().c_str());
  return kOk;
}

int run(int argc, char** argv) {
  CLI::App app{"Handwritten text recognition: gated CNN encoder, attention, BiGRU decoder, CTC."};
  app.require_subcommand(0, 1);
  Common common;
  app.add_option("--config", common.config_path, "Run configuration file (key = value lines)");
  app.add_option("--set", common.overrides, "Override one config key, e.g. --set max_epochs=2");
  app.add_option("--seed", common.seed, "Seed for every random stream");
  app.add_option("--threads", common.threads, "Worker thread cap (0 = all cores)");
  bool dump = false, help_config = false;
  app.add_flag("--dump-config", dump, "Print the effective configuration and exit");
  app.add_flag("--help-config", help_config, "Describe every configuration key and exit");
  app.footer("\n" + RunConfig::help());

  std::string corpus, out, bundles, resume, ckpt, image, bundle, report;
  bool greedy = false, oracle = false;
  std::size_t beam = 0, top_k = 0, count = 2400;
  std::uint64_t synth_seed = 1;

  auto* pre = app.add_subcommand("preprocess", "Build <split>.htrb bundles from a corpus directory");
  pre->add_option("corpus", corpus, "Directory with labels.tsv and <id>.png/.pgm images")->required();
  pre->add_option("out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train on train.htrb, early-stop on valid.htrb");
  tr->add_option("bundles", bundles, "Directory holding train.htrb and valid.htrb")->required();
  tr->add_option("out", out, "Directory for best.htrf, last.htrf and train_log.tsv")->required();
  tr->add_option("--resume", resume, "Checkpoint to continue from (usually <out>/last.htrf)");

  auto* tx = app.add_subcommand("transcribe", "Print the transcription of one image");
  tx->add_option("checkpoint", ckpt)->required();
  tx->add_option("image", image, "PNG or PGM image")->required();
  auto* g1 = tx->add_flag("--greedy", greedy, "Best-path decoding");
  tx->add_option("--beam", beam, "Prefix beam search with this width")->excludes(g1);
  tx->add_option("--top-k", top_k, "Also print the k most likely classes per time step");

  auto* ev = app.add_subcommand("evaluate", "Transcribe a bundle and report CER, WER and SER");
  ev->add_option("checkpoint", ckpt)->required();
  ev->add_option("bundle", bundle)->required();
  ev->add_option("--report", report, "Write the per-sample TSV report here");
  ev->add_flag("--oracle", oracle, "Score the references against themselves");
  auto* g2 = ev->add_flag("--greedy", greedy, "Best-path decoding");
  ev->add_option("--beam", beam, "Prefix beam search with this width")->excludes(g2);

  auto* sy = app.add_subcommand("synth", "Render a toy corpus of 1 to 5 symbol words");
  sy->add_option("out", out, "Output directory")->required();
  sy->add_option("--count", count, "Number of samples");
  sy->add_option("--corpus-seed", synth_seed, "Rendering seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kInput;
  }
  if (help_config) {
    std::fputs(RunConfig::help().c_str(), stdout);
    return kOk;
  }
  if (dump) {
    std::fputs(load_config(common).dump().c_str(), stdout);
    return kOk;
  }
  if (pre->parsed()) return cmd_preprocess(common, corpus, out);
  if (tr->parsed()) return cmd_train(common, bundles, out, resume);
  if (tx->parsed()) return cmd_transcribe(common, ckpt, image, greedy, beam, top_k);
  if (ev->parsed()) return cmd_evaluate(common, ckpt, bundle, report, oracle, greedy, beam);
  if (sy->parsed()) {
    write_toy_corpus(out, count, synth_seed);
    std::printf("wrote %zu samples to %s\n", count, out.c_str());
    return kOk;
  }
  std::fputs(app.help().c_str(), stdout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: numeric divergence: %s\n", e.what());
    return kNumeric;
  } catch (const MismatchError& e) {
    std::fprintf(stderr, "error: mismatch: %s\n", e.what());
    return kMismatch;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInput;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kInternal;
  }
}
