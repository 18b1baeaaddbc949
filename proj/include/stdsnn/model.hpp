#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stdsnn/graph.hpp"
#include "stdsnn/init.hpp"
#include "stdsnn/ops.hpp"
#include "stdsnn/rng.hpp"
#include "stdsnn/serialize.hpp"
#include "stdsnn/tensor.hpp"

namespace stdsnn {

struct ModelConfig {
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 6;  // background + 5 structures
  std::int64_t base_width = 32;
  std::int64_t levels = 4;  // fixed; the only supported depth
  // four pooling stages need multiples of 16; 160 is the closest valid size
  // to the 168-pixel scans this mirrors
  std::int64_t input_h = 160;
  std::int64_t input_w = 160;
};

inline void validate_config(const ModelConfig& cfg) {
  detail::check(cfg.in_channels >= 1, "model config: in_channels must be >= 1");
  detail::check(cfg.num_classes >= 2, "model config: num_classes must be >= 2");
  detail::check(cfg.base_width >= 1, "model config: base_width must be >= 1");
  detail::check(cfg.levels == 4, "model config: levels is fixed at 4");
  if (cfg.input_h % 16 != 0 || cfg.input_w % 16 != 0)
    throw std::invalid_argument("model config: input size (" + std::to_string(cfg.input_h) +
                                "," + std::to_string(cfg.input_w) +
                                ") must be divisible by 16");
}

/// One conv3x3 (pad 1) with its batch norm; relu applied by the block users.
template <typename T>
struct ConvBn {
  ConvParams<T> conv;
  BatchNormState<T> bn;
};

template <typename T>
struct DoubleConv {
  ConvBn<T> c1, c2;
};

/// He-style residual unit with a convolutional shortcut: the fused bottleneck
/// features pass through conv-BN-ReLU-conv-BN on the main path and conv-BN on
/// the shortcut, then ReLU of the sum.
template <typename T>
struct ResidualBlock {
  ConvBn<T> main1, main2, shortcut;
};

template <typename T>
struct UpBlock {
  ConvParams<T> up;  // 2x2 stride-2 transpose conv, halves channels
  DoubleConv<T> convs;
};

/// The dual-stream segmentation network. One parameter set serves both
/// streams: encode/decode are called twice per forward against the same
/// storage, so sharing is structural rather than a copy that must be synced.
template <typename T>
class Model {
 public:
  struct Features {
    std::array<NodePtr<T>, 5> f;  // f[k]: base_width*2^k channels at (h,w)/2^k
  };

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate_config(cfg_);
    Rng rng(derive_seed(seed, 0x6d6f64656cULL));  // "model" stream
    const std::int64_t b = cfg_.base_width;
    input_block_ = make_double_conv(cfg_.in_channels, b, rng);
    for (int k = 0; k < 4; ++k)
      down_[k] = make_double_conv(b << k, b << (k + 1), rng);
    const std::int64_t bott = b << 4;
    residual_.main1 = make_conv_bn(bott, bott, rng);
    residual_.main2 = make_conv_bn(bott, bott, rng);
    residual_.shortcut = make_conv_bn(bott, bott, rng);
    for (int k = 0; k < 4; ++k) {
      const std::int64_t ci = b << (4 - k), co = b << (3 - k);
      up_[k].up = make_conv(ci, co, 2, rng);
      up_[k].convs = make_double_conv(2 * co, co, rng);
    }
    head_ = make_conv(b, cfg_.num_classes, 1, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  void set_mode(Mode m) {
    mode_ = m;
    for (BatchNormState<T>* s : bn_states()) s->mode = m;
  }
  Mode mode() const { return mode_; }

  Features encode(const NodePtr<T>& x) {
    check_input(x->value);
    Features out;
    out.f[0] = double_conv(x, input_block_);
    for (int k = 0; k < 4; ++k)
      out.f[k + 1] = double_conv(ops::maxpool2x2(out.f[k]), down_[k]);
    return out;
  }

  /// Eq-style elementwise fusion of the two bottleneck feature maps.
  NodePtr<T> fuse(const NodePtr<T>& f1, const NodePtr<T>& f2) { return ops::add(f1, f2); }

  NodePtr<T> residual_generate(const NodePtr<T>& fused) {
    auto main = ops::batchnorm2d(
        ops::conv2d(ops::relu(ops::batchnorm2d(ops::conv2d(fused, residual_.main1.conv, 1, 1),
                                               residual_.main1.bn)),
                    residual_.main2.conv, 1, 1),
        residual_.main2.bn);
    auto sc = ops::batchnorm2d(ops::conv2d(fused, residual_.shortcut.conv, 1, 1),
                               residual_.shortcut.bn);
    return ops::relu(ops::add(main, sc));
  }

  NodePtr<T> decode(const NodePtr<T>& fused, const Features& skips) {
    auto cur = fused;
    for (int k = 0; k < 4; ++k) {
      cur = ops::conv_transpose2d(cur, up_[k].up);
      cur = ops::concat_channels(cur, skips.f[3 - k]);
      cur = double_conv(cur, up_[k].convs);
    }
    return ops::conv2d(cur, head_, 1, 0);  // 1x1 projection to class logits
  }

  std::pair<NodePtr<T>, NodePtr<T>> forward_logits(const NodePtr<T>& x1, const NodePtr<T>& x2) {
    detail::check_same_shape(x1->value, x2->value, "forward");
    auto feats1 = encode(x1);
    auto feats2 = encode(x2);
    auto r = residual_generate(fuse(feats1.f[4], feats2.f[4]));
    return {decode(r, feats1), decode(r, feats2)};
  }

  std::pair<NodePtr<T>, NodePtr<T>> forward(const NodePtr<T>& x1, const NodePtr<T>& x2) {
    auto [l1, l2] = forward_logits(x1, x2);
    return {ops::softmax_channels(l1), ops::softmax_channels(l2)};
  }

  NodePtr<T> single_stream_forward(const NodePtr<T>& x) { return forward(x, x).first; }

  /// Deterministic registry order; doubles as the checkpoint tensor order.
  std::vector<std::pair<std::string, NodePtr<T>>> named_parameters() {
    std::vector<std::pair<std::string, NodePtr<T>>> out;
    auto add_conv = [&](const std::string& p, const ConvParams<T>& c) {
      out.emplace_back(p + ".weight", c.weight);
      out.emplace_back(p + ".bias", c.bias);
    };
    auto add_cb = [&](const std::string& p, const ConvBn<T>& cb) {
      add_conv(p + ".conv", cb.conv);
      out.emplace_back(p + ".bn.gamma", cb.bn.gamma);
      out.emplace_back(p + ".bn.beta", cb.bn.beta);
    };
    auto add_dc = [&](const std::string& p, const DoubleConv<T>& dc) {
      add_cb(p + ".c1", dc.c1);
      add_cb(p + ".c2", dc.c2);
    };
    add_dc("enc.in", input_block_);
    for (int k = 0; k < 4; ++k) add_dc("enc.down" + std::to_string(k + 1), down_[k]);
    add_cb("res.main1", residual_.main1);
    add_cb("res.main2", residual_.main2);
    add_cb("res.shortcut", residual_.shortcut);
    for (int k = 0; k < 4; ++k) {
      const std::string p = "dec.up" + std::to_string(k + 1);
      add_conv(p + ".up", up_[k].up);
      add_dc(p, up_[k].convs);
    }
    add_conv("head", head_);
    return out;
  }

  std::vector<NodePtr<T>> parameters() {
    std::vector<NodePtr<T>> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

  /// Running BN statistics, in the same traversal order as the parameters.
  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto states = named_bn_states();
    for (auto& [name, s] : states) {
      out.emplace_back(name + ".running_mean", &s->running_mean);
      out.emplace_back(name + ".running_var", &s->running_var);
    }
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto& [name, p] : named_parameters()) n += p->value.numel();
    return n;
  }

  void export_state(Checkpoint& cp) {
    for (auto& [name, p] : named_parameters()) cp.tensors.push_back({name, to_f32(p->value)});
    for (auto& [name, t] : named_buffers()) cp.tensors.push_back({name, to_f32(*t)});
    std::ostringstream cfg;
    cfg << "in_channels = " << cfg_.in_channels << "\n"
        << "num_classes = " << cfg_.num_classes << "\n"
        << "base_width = " << cfg_.base_width << "\n"
        << "levels = " << cfg_.levels << "\n"
        << "input_h = " << cfg_.input_h << "\n"
        << "input_w = " << cfg_.input_w << "\n";
    cp.config_text = cfg.str();
  }

  void import_state(const Checkpoint& cp) {
    const ModelConfig file_cfg = config_from_checkpoint(cp);
    auto expect = [&](const char* key, std::int64_t got, std::int64_t want) {
      if (got != want)
        throw std::invalid_argument("checkpoint config mismatch: " + std::string(key) + " is " +
                                    std::to_string(got) + ", model expects " +
                                    std::to_string(want));
    };
    expect("in_channels", file_cfg.in_channels, cfg_.in_channels);
    expect("num_classes", file_cfg.num_classes, cfg_.num_classes);
    expect("base_width", file_cfg.base_width, cfg_.base_width);
    expect("levels", file_cfg.levels, cfg_.levels);
    for (auto& [name, p] : named_parameters()) copy_from(cp, name, p->value);
    for (auto& [name, t] : named_buffers()) copy_from(cp, name, *t);
  }

  static ModelConfig config_from_checkpoint(const Checkpoint& cp) {
    ModelConfig cfg;
    std::istringstream in(cp.config_text);
    std::string line;
    bool any = false;
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::int64_t val = std::stoll(line.substr(eq + 3));
      any = true;
      if (key == "in_channels") cfg.in_channels = val;
      else if (key == "num_classes") cfg.num_classes = val;
      else if (key == "base_width") cfg.base_width = val;
      else if (key == "levels") cfg.levels = val;
      else if (key == "input_h") cfg.input_h = val;
      else if (key == "input_w") cfg.input_w = val;
      else throw std::invalid_argument("checkpoint config: unknown key \"" + key + "\"");
    }
    if (!any) throw std::invalid_argument("checkpoint has no model config block");
    return cfg;
  }

 private:
  static Tensor<float> to_f32(const Tensor<T>& t) {
    Tensor<float> out(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<float>(t[i]);
    return out;
  }

  static void copy_from(const Checkpoint& cp, const std::string& name, Tensor<T>& dst) {
    const Tensor<float>* src = cp.find(name);
    if (!src) throw std::invalid_argument("checkpoint is missing tensor \"" + name + "\"");
    if (src->shape() != dst.shape())
      throw std::invalid_argument("checkpoint tensor \"" + name + "\" has shape " +
                                  shape_str(src->shape()) + ", model expects " +
                                  shape_str(dst.shape()));
    for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>((*src)[i]);
  }

  void check_input(const Tensor<T>& x) const {
    detail::check(x.rank() == 4, "model input must be 4-d, got " + shape_str(x.shape()));
    if (x.shape()[1] != cfg_.in_channels)
      throw std::invalid_argument("model input has " + std::to_string(x.shape()[1]) +
                                  " channels, config expects " +
                                  std::to_string(cfg_.in_channels));
    if (x.shape()[2] % 16 != 0 || x.shape()[3] % 16 != 0 || x.shape()[2] < 16 ||
        x.shape()[3] < 16)
      throw std::invalid_argument("model input dims must be multiples of 16, got " +
                                  shape_str(x.shape()));
  }

  static ConvParams<T> make_conv(std::int64_t cin, std::int64_t cout, std::int64_t k, Rng& rng) {
    Tensor<T> w({cout, cin, k, k});
    xavier_uniform_conv(w, rng);
    ConvParams<T> p;
    p.weight = make_leaf(std::move(w), true);
    p.bias = make_leaf(Tensor<T>({cout}), true);
    return p;
  }

  static ConvBn<T> make_conv_bn(std::int64_t cin, std::int64_t cout, Rng& rng) {
    ConvBn<T> cb;
    cb.conv = make_conv(cin, cout, 3, rng);
    cb.bn.gamma = make_leaf(Tensor<T>({cout}, T(1)), true);
    cb.bn.beta = make_leaf(Tensor<T>({cout}), true);
    cb.bn.running_mean = Tensor<T>({cout});
    cb.bn.running_var = Tensor<T>({cout}, T(1));
    return cb;
  }

  static DoubleConv<T> make_double_conv(std::int64_t cin, std::int64_t cout, Rng& rng) {
    DoubleConv<T> dc;
    dc.c1 = make_conv_bn(cin, cout, rng);
    dc.c2 = make_conv_bn(cout, cout, rng);
    return dc;
  }

  NodePtr<T> double_conv(const NodePtr<T>& x, DoubleConv<T>& dc) {
    auto h = ops::relu(ops::batchnorm2d(ops::conv2d(x, dc.c1.conv, 1, 1), dc.c1.bn));
    return ops::relu(ops::batchnorm2d(ops::conv2d(h, dc.c2.conv, 1, 1), dc.c2.bn));
  }

  std::vector<std::pair<std::string, BatchNormState<T>*>> named_bn_states() {
    std::vector<std::pair<std::string, BatchNormState<T>*>> out;
    auto add_dc = [&](const std::string& p, DoubleConv<T>& dc) {
      out.emplace_back(p + ".c1.bn", &dc.c1.bn);
      out.emplace_back(p + ".c2.bn", &dc.c2.bn);
    };
    add_dc("enc.in", input_block_);
    for (int k = 0; k < 4; ++k) add_dc("enc.down" + std::to_string(k + 1), down_[k]);
    out.emplace_back("res.main1.bn", &residual_.main1.bn);
    out.emplace_back("res.main2.bn", &residual_.main2.bn);
    out.emplace_back("res.shortcut.bn", &residual_.shortcut.bn);
    for (int k = 0; k < 4; ++k) add_dc("dec.up" + std::to_string(k + 1), up_[k].convs);
    return out;
  }

  std::vector<BatchNormState<T>*> bn_states() {
    std::vector<BatchNormState<T>*> out;
    for (auto& [name, s] : named_bn_states()) out.push_back(s);
    return out;
  }

  ModelConfig cfg_;
  Mode mode_ = Mode::train;
  DoubleConv<T> input_block_;
  std::array<DoubleConv<T>, 4> down_;
  ResidualBlock<T> residual_;
  std::array<UpBlock<T>, 4> up_;
  ConvParams<T> head_;
};

}  // namespace stdsnn
