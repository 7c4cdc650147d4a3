#include <filesystem>

#include <gtest/gtest.h>

#include "htr/synth.hpp"
#include "htr/train.hpp"
#include "test_util.hpp"

namespace htr {
namespace {

namespace fs = std::filesystem;

/// Small enough for finite differences: 8×16 input, two blocks, T = 8.
RunConfig micro_config() {
  RunConfig c;
  c.input_height = 8;
  c.input_width = 16;
  c.illumination = false;
  c.deslant = false;
  c.enc_channels = {3, 4};
  c.enc_kernels = {{3, 3}, {3, 3}};
  c.enc_strides = {{2, 2}, {2, 1}};
  c.enc_padding = {{1, 1}, {1, 1}};
  c.gates = {1};
  c.dropout = 0.2;
  c.dropout_blocks = {1};
  c.feature_dim = 8;
  c.attention_dim = 5;
  c.attention_out = 6;
  c.gru_hidden = 4;
  c.gru_layers = 2;
  c.max_label_len = 4;
  c.batch_size = 4;
  c.charset = "corpus";
  return c;
}

/// 16×64 input, T = 16; used for short training runs.
RunConfig small_config() {
  RunConfig c = micro_config();
  c.input_height = 16;
  c.input_width = 64;
  c.enc_channels = {4, 6, 8};
  c.enc_kernels = {{3, 3}, {3, 3}, {2, 4}};
  c.enc_strides = {{2, 2}, {2, 1}, {2, 2}};
  c.enc_padding = {{1, 1}, {1, 1}, {0, 1}};
  c.gates = {2};
  c.dropout_blocks = {1, 2};
  c.feature_dim = 16;
  c.attention_dim = 8;
  c.attention_out = 8;
  c.gru_hidden = 8;
  c.max_label_len = 3;
  c.batch_size = 8;
  return c;
}

DatasetBundle toy_bundle(const std::string& split, std::size_t n, std::uint64_t seed, std::size_t h, std::size_t w,
                         std::size_t max_len) {
  DatasetBundle b;
  b.split = split;
  b.charset = Charset(toy_alphabet());
  b.height = h;
  b.width = w;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    LabelSeq label(static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(max_len))));
    for (int& s : label) s = rng.uniform_int(0, 3);
    const RawImage img = resize_with_padding(render_toy_word(label, rng), h, w);
    b.samples.push_back({split + std::to_string(i), label, encode_png(img)});
  }
  return b;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("htr_training_" + name);
  fs::remove_all(p);
  return p;
}

TEST(RmsProp, ZeroGradientLeavesParamsAndDecaysAccumulator) {
  Tensor w = Tensor::vector({1.0, -2.0}), acc = Tensor::vector({4.0, 1.0});
  rmsprop_update(w, Tensor({2}), acc, 1e-3, 0.9, 1e-8);
  EXPECT_EQ(w, Tensor::vector({1.0, -2.0}));
  EXPECT_DOUBLE_EQ(acc[0], 3.6);
  EXPECT_DOUBLE_EQ(acc[1], 0.9);
}

TEST(RmsProp, FirstStepWithConstantGradient) {
  for (double g : {0.5, -3.0, 1e-3}) {
    Tensor w({1}, 0.0), acc({1});
    rmsprop_update(w, Tensor({1}, g), acc, 1e-3, 0.9, 1e-8);
    EXPECT_DOUBLE_EQ(acc[0], 0.1 * g * g);
    EXPECT_NEAR(w[0], -1e-3 * g / (std::sqrt(0.1) * std::abs(g) + 1e-8), 1e-18);
    EXPECT_NEAR(w[0], -1e-3 / std::sqrt(0.1) * (g > 0 ? 1 : -1), 1e-7);
  }
}

TEST(RmsProp, QuadraticLossDecreasesMonotonically) {
  Tensor w({1}, 1.0), acc({1});
  double prev = w[0] * w[0];
  for (int step = 0; step < 100; ++step) {
    rmsprop_update(w, Tensor({1}, 2 * w[0]), acc, 1e-3, 0.9, 1e-8);
    const double loss = w[0] * w[0];
    ASSERT_LT(loss, prev) << "step " << step;
    prev = loss;
  }
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor v = testing::random_tensor({5}, rng, -10, 10), a({5});
    const double before = dot(v.data(), v.data());
    rmsprop_update(v, mul(v, 2.0), a, 1e-3, 0.9, 1e-8);
    EXPECT_LT(dot(v.data(), v.data()), before);
  }
}

TEST(RmsProp, NonFiniteGradientAborts) {
  Model m = Model::create(micro_config(), Charset(U"ab"), 1);
  ModelParams g = m.params.zeros_like();
  g.attn.v[0] = std::nan("");
  RmsProp opt;
  try {
    opt.step(m.params, g);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("attn.v"), std::string::npos);
  }
}

TEST(RmsProp, ClippingCapsTheUpdateNorm) {
  Model m = Model::create(micro_config(), Charset(U"ab"), 1);
  ModelParams g = m.params.zeros_like();
  g.dec.proj_bias[0] = 100.0;
  RmsProp opt;
  opt.clip_norm = 5.0;
  EXPECT_DOUBLE_EQ(opt.step(m.params, g), 100.0);
  EXPECT_DOUBLE_EQ(opt.acc.at("dec.proj_bias")[0], 0.1 * 25.0);
}

TEST(EarlyStopping, StopsPatienceEpochsAfterBest) {
  EarlyStopping es{20};
  std::size_t epoch = 0;
  const std::vector<double> losses{5, 4, 3, 3.5, 2.5};
  for (double l : losses) es.update(++epoch, l);
  while (!es.should_stop()) es.update(++epoch, 10.0);
  EXPECT_EQ(es.best_epoch, 5u);
  EXPECT_EQ(epoch, 25u);
}

TEST(Forward, ShapesForDefaultAndToyConfigs) {
  const Model def = Model::create(RunConfig{}, default_charset(), 1);
  EXPECT_EQ(def.time_steps(), 128u);
  const Tensor x({1, 1, 128, 1024});
  const auto logits = forward(def, x, Mode::infer);
  ASSERT_EQ(logits.size(), 1u);
  EXPECT_EQ(logits[0].shape(), (Shape{128, 101}));

  const Model toy = Model::create(toy_config(), Charset(toy_alphabet()), 1);
  EXPECT_EQ(forward(toy, Tensor({2, 1, 32, 256}), Mode::infer)[1].shape(), (Shape{32, 13}));
}

TEST(Forward, IdenticalImagesGiveIdenticalLogits) {
  const Model m = Model::create(toy_config(), Charset(toy_alphabet()), 3);
  Rng rng(2);
  const Tensor img = to_tensor(resize_with_padding(render_toy_word({1, 2, 3}, rng), 32, 256));
  const auto out = forward(m, stack_images({&img, &img}), Mode::infer);
  EXPECT_EQ(out[0], out[1]);
}

TEST(Forward, ShapeErrorsNameTheStage) {
  const Model m = Model::create(micro_config(), Charset(U"ab"), 1);
  try {
    forward(m, Tensor({1, 1, 8, 15}), Mode::infer);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("input"), std::string::npos) << e.what();
  }
  Model broken = m;
  broken.params.attn.W1 = Tensor({5, 7});
  try {
    forward(broken, Tensor({1, 1, 8, 16}), Mode::infer);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("attention"), std::string::npos) << e.what();
  }
}

TEST(Backward, EndToEndGradientMatchesFiniteDifferences) {
  const RunConfig cfg = micro_config();
  Model m = Model::create(cfg, Charset(U"abc"), 5);
  Rng rng(9);
  // Non-trivial BN and PReLU parameters so every path carries signal.
  for (auto& b : m.params.blocks) {
    b.bn_gamma = testing::random_tensor(b.bn_gamma.shape(), rng, 0.5, 1.5);
    b.bn_beta = testing::random_tensor(b.bn_beta.shape(), rng, -0.5, 0.5);
  }
  const Tensor batch = testing::random_tensor({2, 1, 8, 16}, rng, 0, 1);
  const std::vector<LabelSeq> labels{{0, 1}, {2, 2, 0}};
  const std::uint64_t seed = 77;
  auto loss_of = [&](const Model& model) {
    const auto logits = forward(model, batch, Mode::train, seed);
    return (ctc_loss(logits[0], labels[0]).loss + ctc_loss(logits[1], labels[1]).loss) / 2.0;
  };
  ForwardCache cache;
  const auto logits = forward(m, batch, Mode::train, seed, &cache);
  std::vector<Tensor> gl;
  for (std::size_t i = 0; i < 2; ++i) gl.push_back(mul(ctc_loss(logits[i], labels[i]).grad, 0.5));
  const ModelParams g = backward(m, cache, gl);

  std::size_t checked = 0;
  g.for_each([&](const std::string& name, const Tensor& grad, bool trainable) {
    if (!trainable) return;
    for (int pick = 0; pick < 3; ++pick) {
      const std::size_t idx = rng.below(grad.size());
      const double eps = 1e-5;
      Model plus = m, minus = m;
      auto bump = [&](Model& mm, double d) {
        mm.params.for_each([&](const std::string& n, Tensor& t, bool) {
          if (n == name) t[idx] += d;
        });
      };
      bump(plus, eps);
      bump(minus, -eps);
      const double numeric = (loss_of(plus) - loss_of(minus)) / (2 * eps);
      const double analytic = grad[idx];
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-7});
      EXPECT_LT(std::abs(numeric - analytic) / scale, 1e-3) << name << "[" << idx << "] " << analytic << " vs " << numeric;
      ++checked;
    }
  });
  EXPECT_GT(checked, 60u);
}

TEST(Checkpoint, RoundTripGivesBitIdenticalLogits) {
  const Model m = Model::create(toy_config(), Charset(toy_alphabet()), 4);
  const fs::path dir = scratch_dir("ckpt");
  fs::create_directories(dir);
  save_checkpoint((dir / "m.htrf").string(), m.state());
  const Model back = Model::from_state(load_checkpoint((dir / "m.htrf").string()));
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.charset, m.charset);
  Rng rng(5);
  const Tensor x = testing::random_tensor({2, 1, 32, 256}, rng, 0, 1);
  const auto a = forward(m, x, Mode::infer), b = forward(back, x, Mode::infer);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a[i], b[i]);
  fs::remove_all(dir);
}

TEST(Checkpoint, ArchitectureMismatchIsRejected) {
  TensorMap st = Model::create(micro_config(), Charset(U"ab"), 1).state();
  TensorMap wrong_shape = st;
  wrong_shape["dec.proj"] = Tensor({4, 8});
  EXPECT_THROW(Model::from_state(wrong_shape), MismatchError);
  TensorMap missing = st;
  missing.erase("attn.Wc");
  EXPECT_THROW(Model::from_state(missing), MismatchError);
  TensorMap extra = st;
  extra["enc.gate9.kernels"] = Tensor({1});
  EXPECT_THROW(Model::from_state(extra), MismatchError);
}

TEST(TrainLog, TsvRoundTrip) {
  TrainLog log{42, {{1, 3.25, 2.5, 1.0}, {2, 0.1 + 0.2, 1.0 / 3.0, 2.5}}};
  const TrainLog back = TrainLog::from_tsv(log.to_tsv());
  EXPECT_EQ(back.seed, 42u);
  ASSERT_EQ(back.rows.size(), 2u);
  EXPECT_EQ(back.rows[1].train_loss, 0.1 + 0.2);
  EXPECT_EQ(back.rows[1].val_loss, 1.0 / 3.0);
}

class TrainRun : public ::testing::Test {
 protected:
  static RunConfig config() {
    RunConfig c = small_config();
    c.max_epochs = 3;
    return c;
  }
  DatasetBundle train_ = toy_bundle("train", 24, 1, 16, 64, 3);
  DatasetBundle valid_ = toy_bundle("valid", 8, 2, 16, 64, 3);
};

TEST_F(TrainRun, DeterministicLogAndCheckpoints) {
  const fs::path a = scratch_dir("run_a"), b = scratch_dir("run_b");
  const TrainResult ra = train(config(), train_, valid_, {a, {}, {}});
  const TrainResult rb = train(config(), train_, valid_, {b, {}, {}});
  ASSERT_EQ(ra.log.rows.size(), 3u);
  EXPECT_EQ(ra.stop_reason, "max_epochs");
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ra.log.rows[i].epoch, i + 1);
    EXPECT_EQ(ra.log.rows[i].train_loss, rb.log.rows[i].train_loss);
    EXPECT_EQ(ra.log.rows[i].val_loss, rb.log.rows[i].val_loss);
  }
  for (const char* f : {"best.htrf", "last.htrf"}) {
    EXPECT_EQ(io::read_file((a / f).string()), io::read_file((b / f).string())) << f;
  }
  EXPECT_TRUE(fs::exists(a / "train_log.tsv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_F(TrainRun, BestCheckpointMatchesBestEpoch) {
  const fs::path dir = scratch_dir("best");
  RunConfig c = config();
  c.max_epochs = 4;
  const TrainResult r = train(c, train_, valid_, {dir, {}, {}});
  double best = std::numeric_limits<double>::infinity();
  for (const auto& row : r.log.rows) best = std::min(best, row.val_loss);
  EXPECT_EQ(r.best_val_loss, best);
  const Model m = Model::from_state(load_checkpoint((dir / "best.htrf").string()));
  EXPECT_EQ(mean_ctc_loss(m, load_samples(valid_, false), c.batch_size), best);
  fs::remove_all(dir);
}

TEST_F(TrainRun, ResumeContinuesEpochNumbering) {
  const fs::path dir = scratch_dir("resume");
  RunConfig c = config();
  c.max_epochs = 2;
  train(c, train_, valid_, {dir, {}, {}});
  c.max_epochs = 4;
  const TrainResult r = train(c, train_, valid_, {dir, dir / "last.htrf", {}});
  ASSERT_EQ(r.log.rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.log.rows[i].epoch, i + 1);
  // Same trajectory as an uninterrupted run.
  const fs::path straight = scratch_dir("straight");
  const TrainResult s = train(c, train_, valid_, {straight, {}, {}});
  EXPECT_EQ(s.log.rows.back().val_loss, r.log.rows.back().val_loss);
  fs::remove_all(dir);
  fs::remove_all(straight);
}

TEST_F(TrainRun, PatienceStopsTraining) {
  RunConfig c = config();
  c.patience = 1;
  c.max_epochs = 50;
  c.learning_rate = 0.5;  // diverging steps make validation loss stop improving quickly
  c.clip_norm = 1.0;
  const TrainResult r = train(c, train_, valid_, {{}, {}, {}});
  EXPECT_EQ(r.stop_reason, "patience");
  EXPECT_EQ(r.log.rows.size(), r.best_epoch + 1);
}

TEST_F(TrainRun, CharsetMismatchAndEmptyBundleAreErrors) {
  DatasetBundle other = valid_;
  other.charset = Charset(U"xyzАБВГДЕЖЗИКЛМ");
  EXPECT_THROW(train(config(), train_, other, {}), MismatchError);
  DatasetBundle empty = valid_;
  empty.samples.clear();
  EXPECT_THROW(train(config(), train_, empty, {}), InputError);
}

TEST_F(TrainRun, EvaluateOracleAndRowCounts) {
  const Model m = Model::create(config(), train_.charset, 1);
  const EvalReport oracle = evaluate(m, valid_, {}, true);
  EXPECT_EQ(oracle.cer, 0.0);
  EXPECT_EQ(oracle.wer, 0.0);
  EXPECT_EQ(oracle.ser, 0.0);
  const EvalReport r = evaluate(m, valid_, {DecodeMode::beam, 4});
  EXPECT_EQ(r.samples.size(), valid_.samples.size());
  DatasetBundle other = valid_;
  other.charset = Charset(U"abc");
  EXPECT_THROW(evaluate(m, other, {}), MismatchError);
}

}  // namespace
}  // namespace htr
