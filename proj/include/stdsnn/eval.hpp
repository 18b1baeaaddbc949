#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "stdsnn/metrics.hpp"
#include "stdsnn/model.hpp"
#include "stdsnn/phantom.hpp"
#include "stdsnn/train.hpp"

namespace stdsnn {

/// Scores a model over slice-pair samples: per-pixel argmax of each stream's
/// softmax against that stream's ground truth, confusion counts pooled over
/// every scored output (micro-aggregation).
template <typename T>
MetricsReport evaluate_pairs(Model<T>& model, const Dataset& data,
                             const std::vector<ScanPair>& pairs, std::int64_t num_classes,
                             std::string method = {}, int fold = -1, std::uint64_t seed = 0,
                             std::int64_t batch_size = 6) {
  detail::check(!pairs.empty(), "evaluate_pairs: no pairs to evaluate");
  detail::check(batch_size >= 1, "evaluate_pairs: batch_size must be >= 1");
  model.set_mode(Mode::eval);

  const std::int64_t slices = detail::pair_scan_a(data, pairs[0]).volume.dim(0);
  const std::int64_t h = detail::pair_scan_a(data, pairs[0]).volume.dim(2);
  const std::int64_t w = detail::pair_scan_a(data, pairs[0]).volume.dim(3);

  std::vector<detail::SliceSampleRef> samples;
  for (std::size_t pi = 0; pi < pairs.size(); ++pi)
    for (std::int64_t s = 0; s < slices; ++s) samples.push_back({pi, s});

  std::vector<ConfusionCounts> pool(static_cast<std::size_t>(num_classes));
  std::int64_t outputs = 0;

  for (std::size_t b0 = 0; b0 < samples.size(); b0 += static_cast<std::size_t>(batch_size)) {
    const std::size_t bn = std::min(samples.size() - b0, static_cast<std::size_t>(batch_size));
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
    auto [p1, p2] = model.forward(make_leaf(std::move(x1)), make_leaf(std::move(x2)));
    accumulate_confusion(pool, argmax_channels(p1->value), y1);
    accumulate_confusion(pool, argmax_channels(p2->value), y2);
    outputs += 2 * n;
  }
  return make_report(std::move(pool), std::move(method), fold, seed, outputs);
}

struct CrossvalOutcome {
  StreamVariant variant = StreamVariant::sequential;
  std::vector<MetricsReport> folds;
  MetricsReport aggregate;  // per-class and mean values averaged over folds
  std::vector<TrainHistory> histories;  // one per fold
};

namespace detail {

inline std::optional<double> mean_over_folds(const std::vector<MetricsReport>& folds,
                                             const std::vector<std::optional<double>> MetricsReport::*field,
                                             std::size_t cls) {
  double sum = 0;
  int n = 0;
  for (const auto& f : folds) {
    const auto& v = f.*field;
    if (cls < v.size() && v[cls]) {
      sum += *v[cls];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

inline std::optional<double> mean_of_means(const std::vector<MetricsReport>& folds,
                                           const std::optional<double> MetricsReport::*field) {
  double sum = 0;
  int n = 0;
  for (const auto& f : folds)
    if (f.*field) {
      sum += *(f.*field);
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace detail

/// Aggregate report: arithmetic mean of fold values (fold means averaged for
/// the mean column, per-class values averaged where present).
inline MetricsReport aggregate_folds(const std::vector<MetricsReport>& folds, std::string method,
                                     std::int64_t num_classes) {
  MetricsReport agg;
  agg.method = std::move(method);
  for (const auto& f : folds) agg.outputs_scored += f.outputs_scored;
  for (std::size_t cls = 0; cls < static_cast<std::size_t>(num_classes); ++cls) {
    agg.dsc.push_back(detail::mean_over_folds(folds, &MetricsReport::dsc, cls));
    agg.jaccard.push_back(detail::mean_over_folds(folds, &MetricsReport::jaccard, cls));
    agg.ppv.push_back(detail::mean_over_folds(folds, &MetricsReport::ppv, cls));
  }
  agg.mean_dsc = detail::mean_of_means(folds, &MetricsReport::mean_dsc);
  agg.mean_jaccard = detail::mean_of_means(folds, &MetricsReport::mean_jaccard);
  agg.mean_ppv = detail::mean_of_means(folds, &MetricsReport::mean_ppv);
  return agg;
}

/// Patient-wise k-fold cross-validation for one input-stream variant: each
/// fold trains a fresh model on the other folds' pairs and is scored on its
/// own.  Test-fold pairs are drawn with the same variant sampler.
template <typename T>
CrossvalOutcome run_crossval(const Dataset& data, StreamVariant variant, const ModelConfig& mcfg,
                             const TrainConfig& tcfg, int k, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& p : data) ids.push_back(p.patient_id);
  const FoldSpec folds = make_folds(ids, k, seed);

  CrossvalOutcome out;
  out.variant = variant;
  for (int fold = 0; fold < k; ++fold) {
    Dataset train_ds, test_ds;
    for (const auto& p : data)
      (folds.fold_of.at(p.patient_id) == fold ? test_ds : train_ds).push_back(p);

    Rng train_pair_rng(derive_seed(seed, 0x74726eULL, static_cast<std::uint64_t>(fold)));
    const auto train_pairs = sample_stream_inputs(variant, train_ds, train_pair_rng);

    Model<T> model(mcfg, derive_seed(seed, 0x6d646cULL, static_cast<std::uint64_t>(fold)));
    TrainConfig fold_cfg = tcfg;
    fold_cfg.seed = derive_seed(seed, 0x666974ULL, static_cast<std::uint64_t>(fold));
    out.histories.push_back(train(model, train_ds, train_pairs, fold_cfg));

    Rng test_pair_rng(derive_seed(seed, 0x747374ULL, static_cast<std::uint64_t>(fold)));
    const auto test_pairs = sample_stream_inputs(variant, test_ds, test_pair_rng);
    out.folds.push_back(evaluate_pairs(model, test_ds, test_pairs, mcfg.num_classes,
                                       std::string(variant_name(variant)) + "_fold" +
                                           std::to_string(fold + 1),
                                       fold, seed));
  }
  out.aggregate = aggregate_folds(out.folds, variant_name(variant), mcfg.num_classes);
  return out;
}

/// Welch tests between variants on per-fold mean DSC/Jaccard/PPV, plus the
/// observed ordering; purely descriptive.
inline void write_significance_summary(std::ostream& out,
                                       const std::vector<CrossvalOutcome>& outcomes) {
  out << "two-sample Welch t-test on per-fold mean metrics\n";
  const auto fold_means = [](const CrossvalOutcome& o,
                             const std::optional<double> MetricsReport::*field) {
    std::vector<double> v;
    for (const auto& f : o.folds)
      if (f.*field) v.push_back(*(f.*field));
    return v;
  };
  const std::array<std::pair<const char*, const std::optional<double> MetricsReport::*>, 3>
      metrics = {{{"dsc", &MetricsReport::mean_dsc},
                  {"jaccard", &MetricsReport::mean_jaccard},
                  {"ppv", &MetricsReport::mean_ppv}}};
  char buf[160];
  for (std::size_t i = 0; i < outcomes.size(); ++i)
    for (std::size_t j = i + 1; j < outcomes.size(); ++j) {
      for (const auto& [name, field] : metrics) {
        const auto a = fold_means(outcomes[i], field), b = fold_means(outcomes[j], field);
        if (a.size() < 2 || b.size() < 2) {
          out << variant_name(outcomes[i].variant) << " vs "
              << variant_name(outcomes[j].variant) << " " << name
              << ": not enough folds with data\n";
          continue;
        }
        const auto r = t_test_two_sample(a, b);
        std::snprintf(buf, sizeof(buf), "%s vs %s %s: t=%.6f df=%.4f p=%.6f\n",
                      variant_name(outcomes[i].variant), variant_name(outcomes[j].variant), name,
                      r.t, r.df, r.p);
        out << buf;
      }
    }
  out << "mean dsc by variant:";
  for (const auto& o : outcomes) {
    std::snprintf(buf, sizeof(buf), " %s=%.6f", variant_name(o.variant),
                  o.aggregate.mean_dsc ? *o.aggregate.mean_dsc : 0.0);
    out << buf;
  }
  out << "\n";
}

inline void write_crossval_csv(std::ostream& out, const std::vector<CrossvalOutcome>& outcomes) {
  out << report_csv_header << "\n";
  for (const auto& o : outcomes) {
    for (const auto& f : o.folds) {
      detail::write_metric_row(out, "dsc", f, f.dsc, f.mean_dsc);
      detail::write_metric_row(out, "jaccard", f, f.jaccard, f.mean_jaccard);
      detail::write_metric_row(out, "ppv", f, f.ppv, f.mean_ppv);
    }
    detail::write_metric_row(out, "dsc", o.aggregate, o.aggregate.dsc, o.aggregate.mean_dsc);
    detail::write_metric_row(out, "jaccard", o.aggregate, o.aggregate.jaccard,
                             o.aggregate.mean_jaccard);
    detail::write_metric_row(out, "ppv", o.aggregate, o.aggregate.ppv, o.aggregate.mean_ppv);
  }
}

}  // namespace stdsnn
