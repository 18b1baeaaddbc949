// stdsnn command-line driver: phantom generation, training, cross-validation,
// evaluation and gradient checking behind one reproducible entry point.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "stdsnn/adam.hpp"
#include "stdsnn/eval.hpp"
#include "stdsnn/gradcheck.hpp"
#include "stdsnn/model.hpp"
#include "stdsnn/overlay.hpp"
#include "stdsnn/phantom.hpp"
#include "stdsnn/train.hpp"

namespace fs = std::filesystem;
using namespace stdsnn;

namespace {

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// "NxM[,NxM...]": M patients with N scans each, expanded to per-patient counts
std::vector<int> parse_scan_counts(const std::string& spec) {
  std::vector<int> counts;
  std::stringstream ss(spec);
  std::string group;
  while (std::getline(ss, group, ',')) {
    long long scans = 0, patients = 0;
    int consumed = -1;
    if (std::sscanf(group.c_str(), "%lldx%lld%n", &scans, &patients, &consumed) != 2 ||
        consumed != static_cast<int>(group.size()) || scans < 1 || patients < 1)
      throw usage_error("bad scan-count group \"" + group + "\" (want NxM, e.g. 2x6)");
    for (long long i = 0; i < patients; ++i) counts.push_back(static_cast<int>(scans));
  }
  if (counts.empty()) throw usage_error("scan-count spec \"" + spec + "\" is empty");
  return counts;
}

PhantomDims parse_dims(const std::string& spec) {
  long long s = 0, h = 0, w = 0;
  int consumed = -1;
  if (std::sscanf(spec.c_str(), "%lldx%lldx%lld%n", &s, &h, &w, &consumed) != 3 ||
      consumed != static_cast<int>(spec.size()))
    throw usage_error("bad dims \"" + spec + "\" (want SLICESxHxW, e.g. 16x160x160)");
  if (s < 4) throw usage_error("dims " + spec + ": need at least 4 slices");
  if (h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0)
    throw usage_error("dims " + spec + ": h and w must be multiples of 16, at least 32");
  return PhantomDims{s, h, w};
}

StreamVariant variant_from(const std::string& s) {
  if (s == "same") return StreamVariant::same;
  if (s == "unpaired") return StreamVariant::unpaired;
  if (s == "sequential") return StreamVariant::sequential;
  throw usage_error("unknown variant \"" + s + "\"");
}

struct HyperFlags {
  std::int64_t epochs = 200;
  std::int64_t batch_size = 6;
  double lr = 5e-5;
  double weight_decay = 1e-5;
  std::int64_t step_size = 50;
  double gamma = 0.5;
  double crop_lo = 0.8;
  double crop_hi = 1.0;
  std::int64_t base_width = 32;
};

void add_hyper_flags(CLI::App* cmd, HyperFlags& hp) {
  cmd->add_option("--epochs", hp.epochs, "training epochs")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--batch-size", hp.batch_size, "slice pairs per batch")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--lr", hp.lr, "initial learning rate")->capture_default_str();
  cmd->add_option("--weight-decay", hp.weight_decay, "L2 coefficient in the optimizer update")
      ->capture_default_str();
  cmd->add_option("--step-size", hp.step_size, "epochs between LR halvings and checkpoints")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--gamma", hp.gamma, "LR decay factor per step")->capture_default_str();
  cmd->add_option("--crop-lo", hp.crop_lo, "lower bound of the crop scale range")
      ->capture_default_str();
  cmd->add_option("--crop-hi", hp.crop_hi, "upper bound of the crop scale range")
      ->capture_default_str();
  cmd->add_option("--base-width", hp.base_width, "channels at the first encoder level")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

TrainConfig to_train_config(const HyperFlags& hp, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = hp.epochs;
  cfg.batch_size = hp.batch_size;
  cfg.learning_rate = hp.lr;
  cfg.weight_decay = hp.weight_decay;
  cfg.step_size = hp.step_size;
  cfg.gamma = hp.gamma;
  cfg.crop_fraction_lo = hp.crop_lo;
  cfg.crop_fraction_hi = hp.crop_hi;
  cfg.seed = seed;
  return cfg;
}

ModelConfig model_config_for(const Dataset& data, std::int64_t base_width) {
  ModelConfig cfg;
  cfg.base_width = base_width;
  cfg.input_h = data.front().scans.front().volume.dim(2);
  cfg.input_w = data.front().scans.front().volume.dim(3);
  return cfg;
}

int cmd_gen_phantom(const std::string& counts_spec, long long patients, const std::string& dims_spec,
                    std::uint64_t seed, const fs::path& out) {
  const std::vector<int> counts = patients > 0
                                      ? std::vector<int>(static_cast<std::size_t>(patients), 2)
                                      : parse_scan_counts(counts_spec);
  const PhantomDims dm = parse_dims(dims_spec);
  const Dataset data = generate_cohort(seed, counts, dm);
  fs::create_directories(out);
  write_dataset(out, data);

  std::int64_t scans = 0, pairs = 0;
  for (std::size_t p = 0; p < data.size(); ++p) {
    scans += static_cast<std::int64_t>(data[p].scans.size());
    pairs += static_cast<std::int64_t>(enumerate_pairs(data[p], p).size());
  }
  std::cout << "wrote " << data.size() << " patients (" << scans << " scans, "
            << dm.slices << "x" << dm.h << "x" << dm.w << ") to " << out.string() << "\n"
            << pairs << (pairs == 1 ? " pair" : " pairs") << "\n";
  return 0;
}

int cmd_train(const fs::path& data_path, const std::string& variant_spec, const HyperFlags& hp,
              std::uint64_t seed, const fs::path& out, const fs::path& resume) {
  const Dataset data = load_dataset(data_path);
  const ModelConfig mcfg = model_config_for(data, hp.base_width);
  Model<float> model(mcfg, derive_seed(seed, 0x6d6f64656cULL));

  Rng pair_rng(derive_seed(seed, 0x74726eULL));
  const auto pairs = sample_stream_inputs(variant_from(variant_spec), data, pair_rng);

  TrainConfig cfg = to_train_config(hp, seed);
  fs::create_directories(out);
  cfg.checkpoint_dir = out;
  cfg.resume_checkpoint = resume;

  const TrainHistory hist = train(model, data, pairs, cfg);

  {
    std::ofstream csv(out / "history.csv");
    write_history_csv(csv, hist);
  }
  if (hist.checkpoints.empty()) {
    // zero new epochs still leaves a loadable, resumable checkpoint behind
    AdamState<float> adam(model.parameters(), static_cast<float>(cfg.weight_decay));
    save_checkpoint(out / "checkpoint_epoch0.stdw", model, &adam, 0);
  }

  std::cout << "trained " << variant_spec << " on " << pairs.size() << " pairs for "
            << hist.epochs.size() << " epochs";
  if (!hist.epochs.empty()) {
    std::ostringstream loss;
    loss.precision(8);
    loss << hist.epochs.back().mean_loss;
    std::cout << " (final mean loss " << loss.str() << ")";
  }
  std::cout << "\ncheckpoints and history.csv in " << out.string() << "\n";
  return 0;
}

int cmd_crossval(const fs::path& data_path, const std::string& variant_spec, int k,
                 const HyperFlags& hp, std::uint64_t seed, const fs::path& out) {
  const Dataset data = load_dataset(data_path);
  const ModelConfig mcfg = model_config_for(data, hp.base_width);
  const TrainConfig tcfg = to_train_config(hp, seed);

  std::vector<StreamVariant> variants;
  if (variant_spec == "all")
    variants = {StreamVariant::same, StreamVariant::unpaired, StreamVariant::sequential};
  else
    variants = {variant_from(variant_spec)};

  std::vector<CrossvalOutcome> outcomes;
  for (StreamVariant v : variants) {
    std::cout << "cross-validating " << variant_name(v) << " (" << k << " folds)\n" << std::flush;
    outcomes.push_back(run_crossval<float>(data, v, mcfg, tcfg, k, seed));
  }

  fs::create_directories(out);
  {
    std::ofstream csv(out / "metrics.csv");
    write_crossval_csv(csv, outcomes);
  }
  {
    std::ofstream sig(out / "significance.txt");
    write_significance_summary(sig, outcomes);
  }
  write_significance_summary(std::cout, outcomes);
  std::cout << "metrics.csv and significance.txt in " << out.string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& ckpt_path, const fs::path& data_path, const std::string& variant_spec,
             std::uint64_t seed, const fs::path& out_csv, const fs::path& overlay_dir) {
  const Checkpoint cp = load_checkpoint_file(ckpt_path.string());
  const ModelConfig mcfg = Model<float>::config_from_checkpoint(cp);
  Model<float> model(mcfg, 1);
  model.import_state(cp);
  model.set_mode(Mode::eval);

  const Dataset data = load_dataset(data_path);
  const std::int64_t h = data.front().scans.front().volume.dim(2);
  const std::int64_t w = data.front().scans.front().volume.dim(3);
  if (h != mcfg.input_h || w != mcfg.input_w)
    throw std::runtime_error("checkpoint was trained on " + std::to_string(mcfg.input_h) + "x" +
                             std::to_string(mcfg.input_w) + " slices but the dataset has " +
                             std::to_string(h) + "x" + std::to_string(w));

  Rng pair_rng(derive_seed(seed, 0x747374ULL));
  const auto pairs = sample_stream_inputs(variant_from(variant_spec), data, pair_rng);
  const MetricsReport report =
      evaluate_pairs(model, data, pairs, mcfg.num_classes, variant_spec, -1, seed);

  if (!out_csv.empty()) {
    std::ofstream f(out_csv);
    write_metrics_csv(f, {report});
  }
  write_metrics_csv(std::cout, {report});

  if (!overlay_dir.empty()) {
    fs::create_directories(overlay_dir);
    std::int64_t rendered = 0;
    for (const auto& patient : data) {
      for (std::size_t t = 0; t < patient.scans.size(); ++t) {
        const Scan& scan = patient.scans[t];
        for (std::int64_t s = 0; s < scan.volume.dim(0); ++s) {
          auto [img, lab] = slice_sample(scan, s);
          (void)lab;
          auto pred = model.single_stream_forward(make_leaf(img));
          std::ostringstream name;
          name << patient.patient_id << "_t" << (t + 1) << "_s" << s << ".ppm";
          render_overlay(img, argmax_channels(pred->value), overlay_dir / name.str());
          ++rendered;
        }
      }
    }
    std::cout << "wrote " << rendered << " overlays to " << overlay_dir.string() << "\n";
  }
  return 0;
}

Tensor<double> rand_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// magnitudes bounded away from zero so relu/pool kinks stay clear of the stencil
Tensor<double> rand_tensor_nonzero(const Shape& s, Rng& rng) {
  Tensor<double> t(s);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double mag = 0.1 + 0.9 * rng.uniform01();
    t[i] = rng.uniform01() < 0.5 ? -mag : mag;
  }
  return t;
}

Tensor<std::int32_t> rand_labels(const Shape& s, std::int64_t classes, Rng& rng) {
  Tensor<std::int32_t> t(s);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(classes)));
  return t;
}

int cmd_gradcheck(const std::string& profile, std::uint64_t seed) {
  if (profile != "tiny") throw usage_error("unknown gradcheck profile \"" + profile + "\"");

  using Leaves = std::vector<std::pair<std::string, NodePtr<double>>>;
  int checks = 0, failures = 0;
  const auto check = [&](const std::string& name, const Leaves& leaves, auto build,
                         std::int64_t samples = 8) {
    Rng pick(derive_seed(seed, 0x67636bULL, static_cast<std::uint64_t>(checks)));
    const auto rep = check_gradients<double>(leaves, build, pick, samples, 1e-5);
    const bool ok = rep.pass(1e-4);
    std::cout << (ok ? "ok   " : "FAIL ") << name << ": " << rep.describe() << "\n";
    ++checks;
    if (!ok) ++failures;
  };

  {
    Rng rng(derive_seed(seed, 0x6463ULL, 1));
    auto x = make_leaf(rand_tensor({2, 3, 5, 5}, rng), true);
    auto w = make_leaf(rand_tensor({4, 3, 3, 3}, rng), true);
    auto b = make_leaf(rand_tensor({4}, rng), true);
    auto r = make_leaf(rand_tensor({2, 4, 5, 5}, rng), false);
    check("conv2d 3x3 stride 1 pad 1", {{"x", x}, {"w", w}, {"b", b}}, [&] {
      return ops::sum_all(ops::mul(ops::conv2d(x, ConvParams<double>{w, b}, 1, 1), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 2));
    auto x = make_leaf(rand_tensor({1, 2, 6, 6}, rng), true);
    auto w = make_leaf(rand_tensor({3, 2, 3, 3}, rng), true);
    auto b = make_leaf(rand_tensor({3}, rng), true);
    auto r = make_leaf(rand_tensor({1, 3, 3, 3}, rng), false);
    check("conv2d 3x3 stride 2 pad 1", {{"x", x}, {"w", w}, {"b", b}}, [&] {
      return ops::sum_all(ops::mul(ops::conv2d(x, ConvParams<double>{w, b}, 2, 1), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 3));
    auto x = make_leaf(rand_tensor({2, 3, 3, 3}, rng), true);
    auto w = make_leaf(rand_tensor({2, 3, 2, 2}, rng), true);
    auto b = make_leaf(rand_tensor({2}, rng), true);
    auto r = make_leaf(rand_tensor({2, 2, 6, 6}, rng), false);
    check("conv_transpose2d 2x2 stride 2", {{"x", x}, {"w", w}, {"b", b}}, [&] {
      return ops::sum_all(ops::mul(ops::conv_transpose2d(x, ConvParams<double>{w, b}), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 4));
    auto x = make_leaf(rand_tensor({2, 3, 6, 6}, rng), true);
    auto r = make_leaf(rand_tensor({2, 3, 3, 3}, rng), false);
    check("maxpool 2x2", {{"x", x}}, [&] {
      return ops::sum_all(ops::mul(ops::maxpool2x2(x), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 5));
    BatchNormState<double> s;
    s.gamma = make_leaf(rand_tensor({3}, rng, 0.5, 1.5), true);
    s.beta = make_leaf(rand_tensor({3}, rng, -0.5, 0.5), true);
    s.running_mean = Tensor<double>({3}, 0.0);
    s.running_var = Tensor<double>({3}, 1.0);
    auto x = make_leaf(rand_tensor({2, 3, 4, 4}, rng), true);
    auto r = make_leaf(rand_tensor({2, 3, 4, 4}, rng), false);
    check("batchnorm2d train mode", {{"x", x}, {"gamma", s.gamma}, {"beta", s.beta}}, [&] {
      return ops::sum_all(ops::mul(ops::batchnorm2d(x, s), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 6));
    BatchNormState<double> s;
    s.gamma = make_leaf(rand_tensor({2}, rng, 0.5, 1.5), true);
    s.beta = make_leaf(rand_tensor({2}, rng, -0.5, 0.5), true);
    s.running_mean = rand_tensor({2}, rng, -0.3, 0.3);
    s.running_var = rand_tensor({2}, rng, 0.5, 1.5);
    s.mode = Mode::eval;
    auto x = make_leaf(rand_tensor({2, 2, 3, 3}, rng), true);
    auto r = make_leaf(rand_tensor({2, 2, 3, 3}, rng), false);
    check("batchnorm2d eval mode", {{"x", x}, {"gamma", s.gamma}, {"beta", s.beta}}, [&] {
      return ops::sum_all(ops::mul(ops::batchnorm2d(x, s), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 7));
    auto x = make_leaf(rand_tensor_nonzero({2, 3, 4, 4}, rng), true);
    auto r = make_leaf(rand_tensor({2, 3, 4, 4}, rng), false);
    check("relu", {{"x", x}}, [&] {
      return ops::sum_all(ops::mul(ops::relu(x), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 8));
    auto a = make_leaf(rand_tensor({2, 3, 3, 3}, rng), true);
    auto b = make_leaf(rand_tensor({2, 3, 3, 3}, rng), true);
    check("add / mul / scale chain", {{"a", a}, {"b", b}}, [&] {
      return ops::sum_all(ops::scale(ops::mul(ops::add(a, b), b), 0.5));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 9));
    auto a = make_leaf(rand_tensor({2, 2, 3, 3}, rng), true);
    auto b = make_leaf(rand_tensor({2, 3, 3, 3}, rng), true);
    auto r = make_leaf(rand_tensor({2, 5, 3, 3}, rng), false);
    check("concat_channels", {{"a", a}, {"b", b}}, [&] {
      return ops::sum_all(ops::mul(ops::concat_channels(a, b), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 10));
    auto x = make_leaf(rand_tensor({2, 3, 3, 3}, rng), true);
    auto r = make_leaf(rand_tensor({2, 3, 3, 3}, rng), false);
    check("softmax_channels", {{"x", x}}, [&] {
      return ops::sum_all(ops::mul(ops::softmax_channels(x), r));
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 11));
    auto x = make_leaf(rand_tensor({2, 3, 4, 4}, rng), true);
    auto labels = rand_labels({2, 4, 4}, 3, rng);
    check("cross_entropy_loss", {{"logits", x}}, [&] {
      return ops::cross_entropy_loss(x, labels);
    });
  }
  {
    Rng rng(derive_seed(seed, 0x6463ULL, 12));
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.base_width = 4;
    cfg.input_h = 16;
    cfg.input_w = 16;
    Model<double> m(cfg, derive_seed(seed, 0x6463ULL, 13));
    m.set_mode(Mode::train);
    auto x1 = make_leaf(rand_tensor({2, 1, 16, 16}, rng, 0.0, 1.0), false);
    auto x2 = make_leaf(rand_tensor({2, 1, 16, 16}, rng, 0.0, 1.0), false);
    const auto y1 = rand_labels({2, 16, 16}, cfg.num_classes, rng);
    const auto y2 = rand_labels({2, 16, 16}, cfg.num_classes, rng);
    check(
        "dual-stream model end to end",
        m.named_parameters(),
        [&] {
          auto [l1, l2] = m.forward_logits(x1, x2);
          return ops::scale(ops::add(ops::cross_entropy_loss(l1, y1),
                                     ops::cross_entropy_loss(l2, y2)),
                            0.5);
        },
        2);
  }

  std::cout << "gradient check (" << profile << "): " << checks << " checks, " << failures
            << (failures == 1 ? " failure" : " failures") << "\n";
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-stream co-segmentation of paired sequential 2D scans"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from a \"key = value\" file ([subcommand] sections)");
  app.allow_config_extras(CLI::config_extras_mode::error);

  int rc = 0;

  auto* gen = app.add_subcommand("gen-phantom", "generate a synthetic sequential-scan cohort");
  std::string gen_counts = "2x6,3x3,4x1";
  long long gen_patients = 0;
  std::string gen_dims = "16x160x160";
  std::uint64_t gen_seed = 1;
  std::string gen_out = "phantom_data";
  gen->add_option("--scan-counts", gen_counts, "cohort spec NxM[,NxM...]: M patients with N scans")
      ->capture_default_str();
  gen->add_option("--patients", gen_patients, "shorthand for --scan-counts 2xN (ignored when 0)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  gen->add_option("--dims", gen_dims, "volume dims SLICESxHxW (h, w multiples of 16)")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "cohort seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory (volumes, labels, manifest.txt)")
      ->capture_default_str();
  gen->callback(
      [&] { rc = cmd_gen_phantom(gen_counts, gen_patients, gen_dims, gen_seed, gen_out); });

  auto* tr = app.add_subcommand("train", "train one model on a cohort manifest");
  std::string tr_data, tr_variant = "sequential", tr_out = "train_out", tr_resume;
  std::uint64_t tr_seed = 1;
  HyperFlags tr_hp;
  tr->add_option("--data", tr_data, "manifest.txt of the cohort")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--variant", tr_variant, "input-stream pairing")
      ->check(CLI::IsMember({"same", "unpaired", "sequential"}))
      ->capture_default_str();
  tr->add_option("--out", tr_out, "directory for checkpoints and history.csv")
      ->capture_default_str();
  tr->add_option("--resume", tr_resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  tr->add_option("--seed", tr_seed, "experiment seed")->capture_default_str();
  add_hyper_flags(tr, tr_hp);
  tr->callback([&] { rc = cmd_train(tr_data, tr_variant, tr_hp, tr_seed, tr_out, tr_resume); });

  auto* cv = app.add_subcommand("crossval",
                                "patient-wise k-fold cross-validation over pairing variants");
  std::string cv_data, cv_variant = "all", cv_out = "crossval_out";
  int cv_k = 5;
  std::uint64_t cv_seed = 1;
  HyperFlags cv_hp;
  cv->add_option("--data", cv_data, "manifest.txt of the cohort")
      ->required()
      ->check(CLI::ExistingFile);
  cv->add_option("--variant", cv_variant, "one pairing variant, or all three")
      ->check(CLI::IsMember({"same", "unpaired", "sequential", "all"}))
      ->capture_default_str();
  cv->add_option("--k", cv_k, "number of folds")->check(CLI::Range(2, 1000))->capture_default_str();
  cv->add_option("--out", cv_out, "directory for metrics.csv and significance.txt")
      ->capture_default_str();
  cv->add_option("--seed", cv_seed, "experiment seed")->capture_default_str();
  add_hyper_flags(cv, cv_hp);
  cv->callback([&] { rc = cmd_crossval(cv_data, cv_variant, cv_k, cv_hp, cv_seed, cv_out); });

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a cohort manifest");
  std::string ev_ckpt, ev_data, ev_variant = "sequential", ev_out, ev_overlays;
  std::uint64_t ev_seed = 1;
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint (.stdw)")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "manifest.txt of the cohort")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--variant", ev_variant, "input-stream pairing for scoring")
      ->check(CLI::IsMember({"same", "unpaired", "sequential"}))
      ->capture_default_str();
  ev->add_option("--out", ev_out, "also write the metrics table to this CSV file");
  ev->add_option("--overlays", ev_overlays, "render per-slice prediction overlays (PPM) here");
  ev->add_option("--seed", ev_seed, "pair-sampling seed")->capture_default_str();
  ev->callback([&] { rc = cmd_eval(ev_ckpt, ev_data, ev_variant, ev_seed, ev_out, ev_overlays); });

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every gradient path");
  std::string gc_profile = "tiny";
  std::uint64_t gc_seed = 1;
  gc->add_option("--profile", gc_profile, "check profile")
      ->check(CLI::IsMember({"tiny"}))
      ->capture_default_str();
  gc->add_option("--seed", gc_seed, "sampling seed")->capture_default_str();
  gc->callback([&] { rc = cmd_gradcheck(gc_profile, gc_seed); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
