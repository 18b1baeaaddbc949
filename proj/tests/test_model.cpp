#include "stdsnn/model.hpp"

#include <gtest/gtest.h>

#include <set>

#include "stdsnn/gradcheck.hpp"

using stdsnn::make_leaf;
using stdsnn::Mode;
using stdsnn::Model;
using stdsnn::ModelConfig;
using stdsnn::NodePtr;
using stdsnn::Rng;
using stdsnn::Shape;
using stdsnn::Tensor;

namespace {

template <typename T>
Tensor<T> rand_image(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, Rng& rng) {
  Tensor<T> t({n, c, h, w});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform01());
  return t;
}

ModelConfig tiny_config(std::int64_t classes = 3, std::int64_t width = 4) {
  ModelConfig cfg;
  cfg.num_classes = classes;
  cfg.base_width = width;
  cfg.input_h = 32;
  cfg.input_w = 32;
  return cfg;
}

// closed-form parameter count: conv k*k (cin,cout) has k*k*cin*cout + cout,
// each BN contributes 2c
std::int64_t expected_param_count(const ModelConfig& cfg) {
  const std::int64_t b = cfg.base_width;
  auto conv = [](std::int64_t k, std::int64_t ci, std::int64_t co) { return k * k * ci * co + co; };
  auto conv_bn = [&](std::int64_t ci, std::int64_t co) { return conv(3, ci, co) + 2 * co; };
  auto double_conv = [&](std::int64_t ci, std::int64_t co) {
    return conv_bn(ci, co) + conv_bn(co, co);
  };
  std::int64_t n = double_conv(cfg.in_channels, b);
  for (int k = 0; k < 4; ++k) n += double_conv(b << k, b << (k + 1));
  n += 3 * conv_bn(b << 4, b << 4);
  for (int k = 0; k < 4; ++k) {
    const std::int64_t ci = b << (4 - k), co = b << (3 - k);
    n += conv(2, ci, co) + double_conv(2 * co, co);
  }
  n += conv(1, b, cfg.num_classes);
  return n;
}

}  // namespace

TEST(ModelBuild, RejectsBadInputSize) {
  ModelConfig cfg;
  cfg.input_h = 170;
  cfg.input_w = 170;
  EXPECT_THROW(Model<float>(cfg, 1), std::invalid_argument);
}

TEST(ModelBuild, HeadShapeMatchesClassCount) {
  Model<float> m(tiny_config(6, 4), 1);
  auto params = m.named_parameters();
  bool found = false;
  for (auto& [name, p] : params)
    if (name == "head.weight") {
      found = true;
      EXPECT_EQ(p->value.shape(), (Shape{6, 4, 1, 1}));
    }
  EXPECT_TRUE(found);
}

TEST(ModelBuild, ParamCountMatchesClosedForm) {
  ModelConfig cfg = tiny_config(6, 4);
  Model<float> m(cfg, 1);
  EXPECT_EQ(m.param_count(), expected_param_count(cfg));

  ModelConfig full;  // defaults: width 32, 6 classes
  Model<float> full_m(full, 1);
  EXPECT_EQ(full_m.param_count(), expected_param_count(full));
}

TEST(ModelBuild, SameSeedBitwiseIdentical) {
  Model<float> a(tiny_config(), 42), b(tiny_config(), 42), c(tiny_config(), 43);
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  auto pc = c.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff_c = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(pa[i].second->value == pb[i].second->value) << pa[i].first;
    if (!(pa[i].second->value == pc[i].second->value)) any_diff_c = true;
  }
  EXPECT_TRUE(any_diff_c);
}

TEST(ModelBuild, RegistryNamesAreUniqueAndSingleSet) {
  Model<float> m(tiny_config(), 7);
  auto params = m.named_parameters();
  std::set<std::string> names;
  for (auto& [name, p] : params) EXPECT_TRUE(names.insert(name).second) << "duplicate " << name;
  // one parameter set: every name appears once, under exactly these roots
  for (auto& [name, p] : params)
    EXPECT_TRUE(name.rfind("enc.", 0) == 0 || name.rfind("res.", 0) == 0 ||
                name.rfind("dec.", 0) == 0 || name.rfind("head", 0) == 0)
        << name;
}

TEST(ModelEncode, FeatureScheduleAt64) {
  ModelConfig cfg;  // base 32
  cfg.input_h = 64;
  cfg.input_w = 64;
  Model<float> m(cfg, 3);
  m.set_mode(Mode::eval);
  Rng rng(5);
  auto x = make_leaf(rand_image<float>(1, 1, 64, 64, rng), false);
  auto feats = m.encode(x);
  EXPECT_EQ(feats.f[0]->value.shape(), (Shape{1, 32, 64, 64}));
  EXPECT_EQ(feats.f[1]->value.shape(), (Shape{1, 64, 32, 32}));
  EXPECT_EQ(feats.f[2]->value.shape(), (Shape{1, 128, 16, 16}));
  EXPECT_EQ(feats.f[3]->value.shape(), (Shape{1, 256, 8, 8}));
  EXPECT_EQ(feats.f[4]->value.shape(), (Shape{1, 512, 4, 4}));
}

TEST(ModelForward, OutputShapesAndNormalization) {
  Model<float> m(tiny_config(6, 4), 9);
  m.set_mode(Mode::eval);
  Rng rng(6);
  auto x1 = make_leaf(rand_image<float>(2, 1, 32, 32, rng), false);
  auto x2 = make_leaf(rand_image<float>(2, 1, 32, 32, rng), false);
  auto [p1, p2] = m.forward(x1, x2);
  EXPECT_EQ(p1->value.shape(), (Shape{2, 6, 32, 32}));
  EXPECT_EQ(p2->value.shape(), (Shape{2, 6, 32, 32}));
  for (const auto* p : {p1.get(), p2.get()}) {
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t q = 0; q < 32 * 32; ++q) {
        double s = 0;
        for (std::int64_t c = 0; c < 6; ++c) s += p->value.at4(n, c, q / 32, q % 32);
        ASSERT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(ModelForward, SwapEquivarianceBitwiseInEval) {
  Model<float> m(tiny_config(), 11);
  m.set_mode(Mode::eval);
  Rng rng(7);
  auto x1 = make_leaf(rand_image<float>(1, 1, 32, 32, rng), false);
  auto x2 = make_leaf(rand_image<float>(1, 1, 32, 32, rng), false);
  auto [a1, a2] = m.forward(x1, x2);
  auto [b1, b2] = m.forward(x2, x1);
  EXPECT_TRUE(a1->value == b2->value);
  EXPECT_TRUE(a2->value == b1->value);
}

TEST(ModelForward, IdenticalInputCollapse) {
  Model<float> m(tiny_config(), 13);
  m.set_mode(Mode::eval);
  Rng rng(8);
  auto x = make_leaf(rand_image<float>(1, 1, 32, 32, rng), false);
  auto [p1, p2] = m.forward(x, x);
  EXPECT_TRUE(p1->value == p2->value);
  auto single = m.single_stream_forward(x);
  EXPECT_TRUE(single->value == p1->value);
}

TEST(ModelForward, TrainModeUpdatesRunningStatsPerStream) {
  Model<float> m(tiny_config(), 17);
  m.set_mode(Mode::train);
  Rng rng(9);
  auto x1 = make_leaf(rand_image<float>(2, 1, 32, 32, rng), false);
  auto x2 = make_leaf(rand_image<float>(2, 1, 32, 32, rng), false);
  auto before = m.named_buffers();
  std::vector<Tensor<float>> snapshot;
  for (auto& [name, t] : before) snapshot.push_back(*t);
  (void)m.forward(x1, x2);
  auto after = m.named_buffers();
  bool changed = false;
  for (std::size_t i = 0; i < after.size(); ++i)
    if (!(*after[i].second == snapshot[i])) changed = true;
  EXPECT_TRUE(changed);
}

TEST(ModelForward, RejectsWrongDims) {
  Model<float> m(tiny_config(), 19);
  auto bad = make_leaf(Tensor<float>({1, 1, 30, 32}), false);
  EXPECT_THROW(m.encode(bad), std::invalid_argument);
  auto bad_ch = make_leaf(Tensor<float>({1, 2, 32, 32}), false);
  EXPECT_THROW(m.encode(bad_ch), std::invalid_argument);
}

TEST(ModelResidual, ZeroWeightsPassThroughGiveZero) {
  Model<float> m(tiny_config(), 21);
  m.set_mode(Mode::eval);
  for (auto& [name, p] : m.named_parameters())
    if (name.rfind("res.", 0) == 0 && name.find(".conv.") != std::string::npos)
      p->value.fill(0.0f);
  Rng rng(10);
  auto bott = make_leaf(rand_image<float>(1, 64, 2, 2, rng), false);  // base 4 << 4 = 64
  auto y = m.residual_generate(bott);
  EXPECT_EQ(y->value.shape(), bott->value.shape());
  for (std::int64_t i = 0; i < y->value.numel(); ++i) EXPECT_EQ(y->value[i], 0.0f);
}

TEST(ModelCheckpoint, SaveLoadForwardBitwise) {
  ModelConfig cfg = tiny_config();
  Model<float> m(cfg, 23);
  m.set_mode(Mode::eval);
  Rng rng(11);
  auto x1 = make_leaf(rand_image<float>(1, 1, 32, 32, rng), false);
  auto x2 = make_leaf(rand_image<float>(1, 1, 32, 32, rng), false);
  auto [p1, p2] = m.forward(x1, x2);

  stdsnn::Checkpoint cp;
  m.export_state(cp);
  Model<float> fresh(cfg, 999);  // different init, then overwritten
  fresh.import_state(cp);
  fresh.set_mode(Mode::eval);
  auto [q1, q2] = fresh.forward(x1, x2);
  EXPECT_TRUE(p1->value == q1->value);
  EXPECT_TRUE(p2->value == q2->value);
}

TEST(ModelCheckpoint, ConfigMismatchRejected) {
  Model<float> m(tiny_config(3, 4), 1);
  stdsnn::Checkpoint cp;
  m.export_state(cp);
  Model<float> other(tiny_config(6, 4), 1);
  EXPECT_THROW(other.import_state(cp), std::invalid_argument);
}

TEST(ModelCheckpoint, ConfigRoundTrip) {
  ModelConfig cfg = tiny_config(5, 2);
  Model<float> m(cfg, 2);
  stdsnn::Checkpoint cp;
  m.export_state(cp);
  const ModelConfig back = Model<float>::config_from_checkpoint(cp);
  EXPECT_EQ(back.num_classes, 5);
  EXPECT_EQ(back.base_width, 2);
  EXPECT_EQ(back.input_h, 32);
}

TEST(ModelGrad, EndToEndFiniteDifferenceSpotCheck) {
  ModelConfig cfg;
  cfg.num_classes = 2;
  cfg.base_width = 2;
  cfg.input_h = 16;
  cfg.input_w = 16;
  Model<double> m(cfg, 31);
  m.set_mode(Mode::train);
  Rng rng(12);
  auto x1 = make_leaf(rand_image<double>(2, 1, 16, 16, rng), false);
  auto x2 = make_leaf(rand_image<double>(2, 1, 16, 16, rng), false);
  Tensor<std::int32_t> y1({2, 16, 16}), y2({2, 16, 16});
  for (std::int64_t i = 0; i < y1.numel(); ++i) {
    y1[i] = static_cast<std::int32_t>(rng.uniform_int(2));
    y2[i] = static_cast<std::int32_t>(rng.uniform_int(2));
  }
  auto build = [&] {
    auto [l1, l2] = m.forward_logits(x1, x2);
    auto ce1 = stdsnn::ops::cross_entropy_loss(l1, y1);
    auto ce2 = stdsnn::ops::cross_entropy_loss(l2, y2);
    return stdsnn::ops::scale(stdsnn::ops::add(ce1, ce2), 0.5);
  };
  Rng pick(13);
  const auto rep = stdsnn::check_gradients<double>(m.named_parameters(), build, pick, 2, 1e-5);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.describe();
}
