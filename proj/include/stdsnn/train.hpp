#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "stdsnn/adam.hpp"
#include "stdsnn/model.hpp"
#include "stdsnn/phantom.hpp"

namespace stdsnn {

struct TrainConfig {
  std::int64_t batch_size = 6;
  double learning_rate = 5e-5;
  double weight_decay = 1e-5;
  std::int64_t step_size = 50;  // epochs between LR halvings and checkpoints
  double gamma = 0.5;
  std::int64_t epochs = 200;
  double crop_fraction_lo = 0.8;
  double crop_fraction_hi = 1.0;
  std::uint64_t seed = 1;
  std::filesystem::path checkpoint_dir;     // empty: no checkpoints written
  std::filesystem::path resume_checkpoint;  // empty: train from scratch
};

inline void validate_train_config(const TrainConfig& cfg) {
  detail::check(cfg.batch_size >= 1, "train config: batch_size must be >= 1");
  detail::check(cfg.learning_rate > 0, "train config: learning_rate must be positive");
  detail::check(cfg.weight_decay >= 0, "train config: weight_decay must be nonnegative");
  detail::check(cfg.step_size >= 1, "train config: step_size must be >= 1");
  detail::check(cfg.gamma > 0, "train config: gamma must be positive");
  detail::check(cfg.epochs >= 0, "train config: epochs must be nonnegative");
  detail::check(cfg.crop_fraction_lo > 0 && cfg.crop_fraction_lo <= cfg.crop_fraction_hi &&
                    cfg.crop_fraction_hi <= 1.0,
                "train config: crop fractions must satisfy 0 < lo <= hi <= 1");
}

/// Step schedule: learning_rate * gamma^floor((epoch-1)/step_size), epoch 1-based.
inline double lr_at(std::int64_t epoch, const TrainConfig& cfg) {
  detail::check(epoch >= 1, "lr_at: epoch must be >= 1");
  return cfg.learning_rate * std::pow(cfg.gamma, static_cast<double>((epoch - 1) / cfg.step_size));
}

template <typename T>
struct CropQuad {
  Tensor<T> x1, x2;
  Tensor<std::int32_t> y1, y2;
};

/// Samples ONE window (fraction of each spatial dim, rounded down to a
/// multiple of 16; position uniform) and applies it to both images and both
/// label maps, preserving cross-time correspondence.  Draw order: fraction,
/// offset y, offset x.
template <typename T>
CropQuad<T> random_crop_pair(const Tensor<T>& x1, const Tensor<T>& x2,
                             const Tensor<std::int32_t>& y1, const Tensor<std::int32_t>& y2,
                             Rng& rng, const TrainConfig& cfg) {
  detail::check_same_shape(x1, x2, "random_crop_pair images");
  detail::check_same_shape(y1, y2, "random_crop_pair labels");
  detail::check(x1.rank() == 4 && y1.rank() == 3, "random_crop_pair: want [n,c,h,w] and [n,h,w]");
  const std::int64_t n = x1.dim(0), c = x1.dim(1), h = x1.dim(2), w = x1.dim(3);
  detail::check(y1.dim(0) == n && y1.dim(1) == h && y1.dim(2) == w,
                "random_crop_pair: image/label spatial dims disagree");

  const double f = rng.uniform(cfg.crop_fraction_lo, cfg.crop_fraction_hi);
  const std::int64_t ch = static_cast<std::int64_t>(f * static_cast<double>(h)) / 16 * 16;
  const std::int64_t cw = static_cast<std::int64_t>(f * static_cast<double>(w)) / 16 * 16;
  if (ch < 16 || cw < 16)
    throw std::invalid_argument("random_crop_pair: crop " + std::to_string(ch) + "x" +
                                std::to_string(cw) + " is smaller than 16x16");
  const std::int64_t oy = static_cast<std::int64_t>(rng.uniform_int(h - ch + 1));
  const std::int64_t ox = static_cast<std::int64_t>(rng.uniform_int(w - cw + 1));

  CropQuad<T> out{Tensor<T>({n, c, ch, cw}), Tensor<T>({n, c, ch, cw}),
                  Tensor<std::int32_t>({n, ch, cw}), Tensor<std::int32_t>({n, ch, cw})};
  for (std::int64_t in = 0; in < n; ++in) {
    for (std::int64_t ic = 0; ic < c; ++ic)
      for (std::int64_t y = 0; y < ch; ++y)
        for (std::int64_t x = 0; x < cw; ++x) {
          out.x1.at4(in, ic, y, x) = x1.at4(in, ic, oy + y, ox + x);
          out.x2.at4(in, ic, y, x) = x2.at4(in, ic, oy + y, ox + x);
        }
    for (std::int64_t y = 0; y < ch; ++y)
      for (std::int64_t x = 0; x < cw; ++x) {
        out.y1.at3(in, y, x) = y1.at3(in, oy + y, ox + x);
        out.y2.at3(in, y, x) = y2.at3(in, oy + y, ox + x);
      }
  }
  return out;
}

/// Mean of the two streams' cross-entropies; symmetric in the streams.
template <typename T>
NodePtr<T> pair_loss(const NodePtr<T>& logits1, const NodePtr<T>& logits2,
                     const Tensor<std::int32_t>& y1, const Tensor<std::int32_t>& y2) {
  return ops::scale(ops::add(ops::cross_entropy_loss(logits1, y1),
                             ops::cross_entropy_loss(logits2, y2)),
                    T(0.5));
}

struct EpochRecord {
  std::int64_t epoch = 0;
  double mean_loss = 0;
  double lr = 0;
  double seconds = 0;
};

struct CheckpointRecord {
  std::int64_t epoch = 0;
  std::string path;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<CheckpointRecord> checkpoints;
};

// log columns: epoch, mean_loss, lr, seconds
inline void write_history_csv(std::ostream& out, const TrainHistory& h) {
  out << "epoch,mean_loss,lr,seconds\n";
  for (const auto& e : h.epochs) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%lld,%.8f,%.8g,%.3f\n", static_cast<long long>(e.epoch),
                  e.mean_loss, e.lr, e.seconds);
    out << buf;
  }
}

// ---- checkpointing with optimizer state ----
// Model tensors keep their registry names; Adam moments ride along as
// "adam.m.<param>" / "adam.v.<param>", plus "meta.epoch" and "meta.adam_step".

namespace detail {

inline Tensor<float> to_f32_any(const Tensor<float>& t) { return t; }
inline Tensor<float> to_f32_any(const Tensor<double>& t) {
  Tensor<float> out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<float>(t[i]);
  return out;
}

template <typename T>
void copy_f32_into(const Tensor<float>& src, Tensor<T>& dst, const std::string& name) {
  if (src.shape() != dst.shape())
    throw std::invalid_argument("checkpoint tensor \"" + name + "\" has shape " +
                                shape_str(src.shape()) + ", expected " + shape_str(dst.shape()));
  for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(src[i]);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Model<T>& model,
                     const AdamState<T>* adam, std::int64_t epoch) {
  Checkpoint cp;
  model.export_state(cp);
  if (adam) {
    const auto named = model.named_parameters();
    detail::check(named.size() == adam->m.size(), "save_checkpoint: optimizer/model mismatch");
    for (std::size_t k = 0; k < named.size(); ++k) {
      cp.tensors.push_back({"adam.m." + named[k].first, detail::to_f32_any(adam->m[k])});
      cp.tensors.push_back({"adam.v." + named[k].first, detail::to_f32_any(adam->v[k])});
    }
    Tensor<float> step({1});
    step[0] = static_cast<float>(adam->step_count);
    cp.tensors.push_back({"meta.adam_step", step});
  }
  Tensor<float> ep({1});
  ep[0] = static_cast<float>(epoch);
  cp.tensors.push_back({"meta.epoch", ep});
  save_checkpoint_file(path.string(), cp);
}

/// Restores model parameters/buffers (config must match) and, when adam is
/// given, the optimizer moments.  Returns the stored epoch.
template <typename T>
std::int64_t load_checkpoint(const std::filesystem::path& path, Model<T>& model,
                             AdamState<T>* adam) {
  const Checkpoint cp = load_checkpoint_file(path.string());
  model.import_state(cp);
  if (adam) {
    const auto named = model.named_parameters();
    detail::check(named.size() == adam->m.size(), "load_checkpoint: optimizer/model mismatch");
    for (std::size_t k = 0; k < named.size(); ++k) {
      const Tensor<float>* m = cp.find("adam.m." + named[k].first);
      const Tensor<float>* v = cp.find("adam.v." + named[k].first);
      if (!m || !v)
        throw std::invalid_argument("checkpoint has no optimizer state for \"" +
                                    named[k].first + "\"");
      detail::copy_f32_into(*m, adam->m[k], "adam.m." + named[k].first);
      detail::copy_f32_into(*v, adam->v[k], "adam.v." + named[k].first);
    }
    const Tensor<float>* step = cp.find("meta.adam_step");
    adam->step_count = step ? static_cast<std::int64_t>((*step)[0]) : 0;
  }
  const Tensor<float>* ep = cp.find("meta.epoch");
  return ep ? static_cast<std::int64_t>((*ep)[0]) : 0;
}

namespace detail {

struct SliceSampleRef {
  std::size_t pair_index;
  std::int64_t slice;
};

inline const Scan& pair_scan_a(const Dataset& data, const ScanPair& p) {
  return data.at(p.patient1).scans.at(static_cast<std::size_t>(p.tp1 - 1));
}
inline const Scan& pair_scan_b(const Dataset& data, const ScanPair& p) {
  return data.at(p.patient2).scans.at(static_cast<std::size_t>(p.tp2 - 1));
}

}  // namespace detail

/// The full recipe: per epoch, shuffle pairs (seeded), expand to slice-pair
/// samples, batch, crop-augment with one shared window per batch, forward in
/// train mode, mean dual-stream cross-entropy, Adam with the step schedule.
/// Deterministic for a given (seed, data, config).
template <typename T>
TrainHistory train(Model<T>& model, const Dataset& data, const std::vector<ScanPair>& pairs,
                   const TrainConfig& cfg) {
  validate_train_config(cfg);
  detail::check(!pairs.empty(), "train: no pairs to train on");
  TrainHistory history;
  if (cfg.epochs == 0) return history;

  const std::int64_t slices = detail::pair_scan_a(data, pairs[0]).volume.dim(0);
  const std::int64_t h = detail::pair_scan_a(data, pairs[0]).volume.dim(2);
  const std::int64_t w = detail::pair_scan_a(data, pairs[0]).volume.dim(3);
  for (const auto& p : pairs) {
    const auto& a = detail::pair_scan_a(data, p);
    const auto& b = detail::pair_scan_b(data, p);
    detail::check(a.volume.dim(0) == slices && b.volume.dim(0) == slices &&
                      a.volume.dim(2) == h && b.volume.dim(2) == h && a.volume.dim(3) == w &&
                      b.volume.dim(3) == w,
                  "train: all scans must share dims");
  }

  auto params = model.parameters();
  AdamState<T> adam(params, static_cast<T>(cfg.weight_decay));
  std::int64_t first_epoch = 1;
  if (!cfg.resume_checkpoint.empty())
    first_epoch = load_checkpoint(cfg.resume_checkpoint, model, &adam) + 1;
  if (first_epoch > cfg.epochs) return history;

  for (std::int64_t epoch = first_epoch; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    model.set_mode(Mode::train);

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, 0x73687566ULL, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());

    std::vector<detail::SliceSampleRef> samples;
    samples.reserve(order.size() * static_cast<std::size_t>(slices));
    for (const auto pi : order)
      for (std::int64_t s = 0; s < slices; ++s) samples.push_back({pi, s});

    Rng crop_rng(derive_seed(cfg.seed, 0x63726f70ULL, static_cast<std::uint64_t>(epoch)));
    const double lr = lr_at(epoch, cfg);
    double loss_sum = 0;
    std::int64_t loss_n = 0;

    for (std::size_t b0 = 0; b0 < samples.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bn =
          std::min(samples.size() - b0, static_cast<std::size_t>(cfg.batch_size));
      const auto n = static_cast<std::int64_t>(bn);
      Tensor<T> x1({n, 1, h, w}), x2({n, 1, h, w});
      Tensor<std::int32_t> y1({n, h, w}), y2({n, h, w});
      for (std::size_t k = 0; k < bn; ++k) {
        const auto& ref = samples[b0 + k];
        const auto& pr = pairs[ref.pair_index];
        const auto [ia, la] = slice_sample(detail::pair_scan_a(data, pr), ref.slice);
        const auto [ib, lb] = slice_sample(detail::pair_scan_b(data, pr), ref.slice);
        for (std::int64_t q = 0; q < h * w; ++q) {
          x1.at4(static_cast<std::int64_t>(k), 0, q / w, q % w) = static_cast<T>(ia[q]);
          x2.at4(static_cast<std::int64_t>(k), 0, q / w, q % w) = static_cast<T>(ib[q]);
          y1.at3(static_cast<std::int64_t>(k), q / w, q % w) = la[q];
          y2.at3(static_cast<std::int64_t>(k), q / w, q % w) = lb[q];
        }
      }
      auto crop = random_crop_pair(x1, x2, y1, y2, crop_rng, cfg);

      auto in1 = make_leaf(std::move(crop.x1));
      auto in2 = make_leaf(std::move(crop.x2));
      auto [l1, l2] = model.forward_logits(in1, in2);
      auto loss = pair_loss<T>(l1, l2, crop.y1, crop.y2);

      const double loss_v = static_cast<double>(loss->value[0]);
      if (!std::isfinite(loss_v))
        throw std::runtime_error("training diverged: loss " + std::to_string(loss_v) +
                                 " at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(b0 / static_cast<std::size_t>(cfg.batch_size)));
      for (auto& p : params) p->grad.fill(T(0));
      backprop(loss);
      adam_step(params, adam, static_cast<T>(lr));

      loss_sum += loss_v * static_cast<double>(n);
      loss_n += n;
    }

    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    history.epochs.push_back({epoch, loss_sum / static_cast<double>(loss_n), lr, secs});

    const bool cadence = epoch % cfg.step_size == 0;
    if (!cfg.checkpoint_dir.empty() && (cadence || epoch == cfg.epochs)) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      const auto path =
          cfg.checkpoint_dir / ("checkpoint_epoch" + std::to_string(epoch) + ".stdw");
      save_checkpoint(path, model, &adam, epoch);
      history.checkpoints.push_back({epoch, path.string()});
    }
  }

  model.set_mode(Mode::eval);
  return history;
}

}  // namespace stdsnn
