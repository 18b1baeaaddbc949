#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "stdsnn/eval.hpp"
#include "stdsnn/overlay.hpp"
#include "stdsnn/train.hpp"

namespace {

using namespace stdsnn;

const PhantomDims kTiny{4, 32, 32};

ModelConfig tiny_model_cfg() {
  ModelConfig cfg;
  cfg.base_width = 4;
  cfg.num_classes = 6;
  cfg.input_h = 32;
  cfg.input_w = 32;
  return cfg;
}

TrainConfig tiny_train_cfg() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 6;
  cfg.learning_rate = 1e-3;
  cfg.seed = 11;
  return cfg;
}

TEST(LrSchedule, PinnedValues) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at(1, cfg), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(50, cfg), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(51, cfg), 2.5e-5);
  EXPECT_DOUBLE_EQ(lr_at(200, cfg), 6.25e-6);
  EXPECT_THROW(lr_at(0, cfg), std::invalid_argument);
}

TEST(LrSchedule, PiecewiseConstantWithExpectedSteps) {
  TrainConfig cfg;
  cfg.epochs = 200;
  std::set<double> distinct;
  for (std::int64_t e = 1; e <= cfg.epochs; ++e) distinct.insert(lr_at(e, cfg));
  EXPECT_EQ(distinct.size(), static_cast<std::size_t>((cfg.epochs - 1) / cfg.step_size + 1));
}

TEST(Crop, IdentityWhenFractionIsOne) {
  TrainConfig cfg;
  cfg.crop_fraction_lo = cfg.crop_fraction_hi = 1.0;
  Tensor<float> x1({2, 1, 32, 32}), x2({2, 1, 32, 32});
  Tensor<std::int32_t> y1({2, 32, 32}), y2({2, 32, 32});
  Rng rng(3);
  for (std::int64_t i = 0; i < x1.numel(); ++i) x1[i] = static_cast<float>(i);
  for (std::int64_t i = 0; i < y1.numel(); ++i) y1[i] = static_cast<std::int32_t>(i % 6);
  const auto crop = random_crop_pair(x1, x2, y1, y2, rng, cfg);
  EXPECT_TRUE(crop.x1 == x1);
  EXPECT_TRUE(crop.y1 == y1);
}

TEST(Crop, SharedWindowAcrossStreamsAndLabels) {
  TrainConfig cfg;
  Tensor<float> x1({1, 1, 64, 64}), x2({1, 1, 64, 64});
  Tensor<std::int32_t> y1({1, 64, 64}), y2({1, 64, 64});
  // encode the absolute position in every value
  for (std::int64_t i = 0; i < x1.numel(); ++i) {
    x1[i] = static_cast<float>(i);
    x2[i] = static_cast<float>(i + 100000);
  }
  for (std::int64_t i = 0; i < y1.numel(); ++i) {
    y1[i] = static_cast<std::int32_t>(i);
    y2[i] = static_cast<std::int32_t>(i) + 200000;
  }
  Rng rng(17);
  const auto crop = random_crop_pair(x1, x2, y1, y2, rng, cfg);
  const std::int64_t ch = crop.x1.dim(2), cw = crop.x1.dim(3);
  EXPECT_EQ(ch % 16, 0);
  EXPECT_EQ(cw % 16, 0);
  EXPECT_EQ(ch, 48);  // fraction in (0.8, 1.0) of 64 always rounds down to 48
  // recover the window origin from the first cropped value
  const auto first = static_cast<std::int64_t>(crop.x1.at4(0, 0, 0, 0));
  const std::int64_t oy = first / 64, ox = first % 64;
  for (std::int64_t y = 0; y < ch; ++y)
    for (std::int64_t x = 0; x < cw; ++x) {
      const std::int64_t src = (oy + y) * 64 + (ox + x);
      ASSERT_EQ(crop.x1.at4(0, 0, y, x), static_cast<float>(src));
      ASSERT_EQ(crop.x2.at4(0, 0, y, x), static_cast<float>(src + 100000));
      ASSERT_EQ(crop.y1.at3(0, y, x), src);
      ASSERT_EQ(crop.y2.at3(0, y, x), src + 200000);
    }
}

TEST(Crop, TooSmallCropRejected) {
  TrainConfig cfg;
  cfg.crop_fraction_lo = cfg.crop_fraction_hi = 0.5;
  Tensor<float> x({1, 1, 16, 16});
  Tensor<std::int32_t> y({1, 16, 16});
  Rng rng(1);
  EXPECT_THROW(random_crop_pair(x, x, y, y, rng, cfg), std::invalid_argument);
}

TEST(Crop, DeterministicPerSeed) {
  TrainConfig cfg;
  Tensor<float> x({1, 1, 64, 64});
  Tensor<std::int32_t> y({1, 64, 64});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(i % 97);
  Rng r1(5), r2(5);
  const auto a = random_crop_pair(x, x, y, y, r1, cfg);
  const auto b = random_crop_pair(x, x, y, y, r2, cfg);
  EXPECT_TRUE(a.x1 == b.x1);
}

TEST(PairLoss, IdenticalStreamsEqualSingleCrossEntropy) {
  Rng rng(9);
  Tensor<double> logits({1, 3, 2, 2});
  for (std::int64_t i = 0; i < logits.numel(); ++i) logits[i] = rng.normal();
  Tensor<std::int32_t> y({1, 2, 2});
  y.at3(0, 0, 1) = 2;
  y.at3(0, 1, 0) = 1;
  auto node = make_leaf(logits);
  const auto pl = pair_loss<double>(node, node, y, y);
  const auto ce = ops::cross_entropy_loss(node, y);
  EXPECT_DOUBLE_EQ(pl->value[0], ce->value[0]);
}

TEST(PairLoss, SymmetricInStreams) {
  Rng rng(10);
  Tensor<double> a({1, 4, 2, 2}), b({1, 4, 2, 2});
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
  }
  Tensor<std::int32_t> ya({1, 2, 2}), yb({1, 2, 2});
  ya.at3(0, 0, 0) = 3;
  yb.at3(0, 1, 1) = 1;
  auto na = make_leaf(a), nb = make_leaf(b);
  EXPECT_DOUBLE_EQ(pair_loss<double>(na, nb, ya, yb)->value[0],
                   pair_loss<double>(nb, na, yb, ya)->value[0]);
}

TEST(PairLoss, NearZeroForConfidentCorrectLogits) {
  Tensor<double> logits({1, 2, 1, 2});
  logits.at4(0, 0, 0, 0) = 50;   // pixel 0 -> class 0
  logits.at4(0, 1, 0, 0) = -50;
  logits.at4(0, 0, 0, 1) = -50;  // pixel 1 -> class 1
  logits.at4(0, 1, 0, 1) = 50;
  Tensor<std::int32_t> y({1, 1, 2});
  y.at3(0, 0, 1) = 1;
  auto node = make_leaf(logits);
  EXPECT_LT(pair_loss<double>(node, node, y, y)->value[0], 1e-12);
}

class TrainLoop : public ::testing::Test {
 protected:
  static Dataset make_data() { return generate_cohort(31, {2}, kTiny); }
  static std::vector<ScanPair> pairs_of(const Dataset& d) {
    Rng rng(1);
    return sample_stream_inputs(StreamVariant::sequential, d, rng);
  }
};

TEST_F(TrainLoop, ZeroEpochsLeavesModelUntouched) {
  const auto data = make_data();
  Model<float> model(tiny_model_cfg(), 5);
  Model<float> twin(tiny_model_cfg(), 5);
  auto cfg = tiny_train_cfg();
  cfg.epochs = 0;
  const auto hist = train(model, data, pairs_of(data), cfg);
  EXPECT_TRUE(hist.epochs.empty());
  EXPECT_TRUE(hist.checkpoints.empty());
  const auto a = model.named_parameters();
  const auto b = twin.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    ASSERT_TRUE(a[i].second->value == b[i].second->value) << a[i].first;
}

TEST_F(TrainLoop, DeterministicAcrossRuns) {
  const auto data = make_data();
  const auto cfg = tiny_train_cfg();
  Model<float> m1(tiny_model_cfg(), 5);
  Model<float> m2(tiny_model_cfg(), 5);
  const auto h1 = train(m1, data, pairs_of(data), cfg);
  const auto h2 = train(m2, data, pairs_of(data), cfg);
  ASSERT_EQ(h1.epochs.size(), h2.epochs.size());
  for (std::size_t e = 0; e < h1.epochs.size(); ++e) {
    EXPECT_EQ(h1.epochs[e].epoch, h2.epochs[e].epoch);
    EXPECT_DOUBLE_EQ(h1.epochs[e].mean_loss, h2.epochs[e].mean_loss);
    EXPECT_DOUBLE_EQ(h1.epochs[e].lr, h2.epochs[e].lr);
  }
  const auto p1 = m1.named_parameters();
  const auto p2 = m2.named_parameters();
  for (std::size_t i = 0; i < p1.size(); ++i)
    ASSERT_TRUE(p1[i].second->value == p2[i].second->value) << p1[i].first;
}

TEST_F(TrainLoop, LossDecreasesOnTinyProblem) {
  const auto data = make_data();
  auto cfg = tiny_train_cfg();
  cfg.epochs = 50;
  cfg.learning_rate = 3e-3;
  Model<float> model(tiny_model_cfg(), 5);
  const auto hist = train(model, data, pairs_of(data), cfg);
  ASSERT_EQ(hist.epochs.size(), 50u);
  for (std::size_t e = 0; e < hist.epochs.size(); ++e)
    EXPECT_EQ(hist.epochs[e].epoch, static_cast<std::int64_t>(e + 1));
  EXPECT_LT(hist.epochs.back().mean_loss, 0.5 * hist.epochs.front().mean_loss);
  EXPECT_TRUE(std::isfinite(hist.epochs.back().mean_loss));
}

TEST_F(TrainLoop, NonFiniteLossAbortsWithDiagnostics) {
  const auto data = make_data();
  Model<float> model(tiny_model_cfg(), 5);
  for (auto& [name, p] : model.named_parameters())
    if (name == "head.bias") p->value[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(model, data, pairs_of(data), tiny_train_cfg());
    FAIL() << "non-finite loss not detected";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("nan"), std::string::npos) << msg;
  }
}

TEST_F(TrainLoop, CheckpointCadenceAndFinal) {
  const auto data = make_data();
  auto cfg = tiny_train_cfg();
  cfg.epochs = 5;
  cfg.step_size = 2;
  cfg.checkpoint_dir = std::filesystem::path(testing::TempDir()) / "ckpt_cadence";
  std::filesystem::remove_all(cfg.checkpoint_dir);
  Model<float> model(tiny_model_cfg(), 5);
  const auto hist = train(model, data, pairs_of(data), cfg);
  ASSERT_EQ(hist.checkpoints.size(), 3u);  // epochs 2, 4 and the final 5
  EXPECT_EQ(hist.checkpoints[0].epoch, 2);
  EXPECT_EQ(hist.checkpoints[1].epoch, 4);
  EXPECT_EQ(hist.checkpoints[2].epoch, 5);
  for (const auto& c : hist.checkpoints) EXPECT_TRUE(std::filesystem::exists(c.path));
}

TEST_F(TrainLoop, CheckpointRoundTripRestoresEverything) {
  const auto data = make_data();
  auto cfg = tiny_train_cfg();
  Model<float> model(tiny_model_cfg(), 5);
  auto params = model.parameters();
  AdamState<float> adam(params, static_cast<float>(cfg.weight_decay));
  train(model, data, pairs_of(data), cfg);

  const auto path = std::filesystem::path(testing::TempDir()) / "roundtrip.stdw";
  // fabricate optimizer state so the moments are nontrivial to restore
  AdamState<float> trained(params, 0.0f);
  Rng rng(55);
  for (auto& t : trained.m)
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal());
  for (auto& t : trained.v)
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = std::abs(static_cast<float>(rng.normal()));
  trained.step_count = 123;
  save_checkpoint(path, model, &trained, 7);

  Model<float> loaded(tiny_model_cfg(), 999);
  auto lparams = loaded.parameters();
  AdamState<float> ladam(lparams, 0.0f);
  const auto epoch = load_checkpoint(path, loaded, &ladam);
  EXPECT_EQ(epoch, 7);
  EXPECT_EQ(ladam.step_count, 123);
  for (std::size_t k = 0; k < trained.m.size(); ++k) {
    ASSERT_TRUE(ladam.m[k] == trained.m[k]);
    ASSERT_TRUE(ladam.v[k] == trained.v[k]);
  }

  Tensor<float> probe({1, 1, 32, 32});
  Rng prng(4);
  for (std::int64_t i = 0; i < probe.numel(); ++i)
    probe[i] = static_cast<float>(prng.uniform01());
  model.set_mode(Mode::eval);
  loaded.set_mode(Mode::eval);
  const auto a = model.single_stream_forward(make_leaf(probe));
  const auto b = loaded.single_stream_forward(make_leaf(probe));
  EXPECT_TRUE(a->value == b->value);
}

TEST_F(TrainLoop, LoadRejectsMismatchedConfig) {
  const auto data = make_data();
  Model<float> model(tiny_model_cfg(), 5);
  const auto path = std::filesystem::path(testing::TempDir()) / "mismatch.stdw";
  save_checkpoint<float>(path, model, nullptr, 1);

  auto other_cfg = tiny_model_cfg();
  other_cfg.base_width = 8;
  Model<float> other(other_cfg, 5);
  EXPECT_THROW(load_checkpoint<float>(path, other, nullptr), std::invalid_argument);
}

TEST_F(TrainLoop, LoadWithoutOptimizerStateOnlyWhenAbsent) {
  Model<float> model(tiny_model_cfg(), 5);
  const auto path = std::filesystem::path(testing::TempDir()) / "no_moments.stdw";
  save_checkpoint<float>(path, model, nullptr, 3);

  Model<float> plain(tiny_model_cfg(), 8);
  EXPECT_EQ(load_checkpoint<float>(path, plain, nullptr), 3);

  auto params = plain.parameters();
  AdamState<float> adam(params, 0.0f);
  EXPECT_THROW(load_checkpoint(path, plain, &adam), std::invalid_argument);
}

TEST_F(TrainLoop, ResumeMatchesUninterruptedRun) {
  const auto data = make_data();
  const auto pairs = pairs_of(data);

  auto full_cfg = tiny_train_cfg();
  full_cfg.epochs = 4;
  full_cfg.step_size = 2;
  Model<float> full(tiny_model_cfg(), 5);
  const auto full_hist = train(full, data, pairs, full_cfg);

  auto half_cfg = full_cfg;
  half_cfg.epochs = 2;
  half_cfg.checkpoint_dir = std::filesystem::path(testing::TempDir()) / "resume_ckpt";
  std::filesystem::remove_all(half_cfg.checkpoint_dir);
  Model<float> half(tiny_model_cfg(), 5);
  train(half, data, pairs, half_cfg);

  auto resume_cfg = full_cfg;
  resume_cfg.resume_checkpoint = half_cfg.checkpoint_dir / "checkpoint_epoch2.stdw";
  Model<float> resumed(tiny_model_cfg(), 5);
  const auto resumed_hist = train(resumed, data, pairs, resume_cfg);

  ASSERT_EQ(resumed_hist.epochs.size(), 2u);
  EXPECT_EQ(resumed_hist.epochs.front().epoch, 3);
  EXPECT_DOUBLE_EQ(resumed_hist.epochs.front().lr, full_hist.epochs[2].lr);
  for (std::size_t e = 0; e < 2; ++e)
    EXPECT_DOUBLE_EQ(resumed_hist.epochs[e].mean_loss, full_hist.epochs[e + 2].mean_loss);

  const auto pf = full.named_parameters();
  const auto pr = resumed.named_parameters();
  for (std::size_t i = 0; i < pf.size(); ++i)
    ASSERT_TRUE(pf[i].second->value == pr[i].second->value) << pf[i].first;
}

TEST(HistoryCsv, PinnedColumns) {
  TrainHistory h;
  h.epochs.push_back({1, 1.5, 5e-5, 2.25});
  h.epochs.push_back({2, 0.75, 5e-5, 2.125});
  std::ostringstream out;
  write_history_csv(out, h);
  std::istringstream lines(out.str());
  std::string header, row;
  std::getline(lines, header);
  EXPECT_EQ(header, "epoch,mean_loss,lr,seconds");
  std::getline(lines, row);
  EXPECT_EQ(row, "1,1.50000000,5e-05,2.250");
}

}  // namespace
