#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stdsnn/tensor.hpp"

namespace stdsnn {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

/// Pixel-level counts for one class; permutation-invariant over pixels.
inline ConfusionCounts confusion(const Tensor<std::int32_t>& pred,
                                 const Tensor<std::int32_t>& gt, std::int32_t cls) {
  detail::check_same_shape(pred, gt, "confusion");
  ConfusionCounts c;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] == cls, g = gt[i] == cls;
    c.tp += (p && g) ? 1 : 0;
    c.fp += (p && !g) ? 1 : 0;
    c.fn += (!p && g) ? 1 : 0;
  }
  return c;
}

// A zero denominator means the class is neither present nor predicted; the
// metric is then absent and excluded from means, not reported as 0 or 1.
inline std::optional<double> dsc(const ConfusionCounts& c) {
  const auto den = 2 * c.tp + c.fp + c.fn;
  if (den == 0) return std::nullopt;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

inline std::optional<double> jaccard(const ConfusionCounts& c) {
  const auto den = c.tp + c.fp + c.fn;
  if (den == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(den);
}

inline std::optional<double> ppv(const ConfusionCounts& c) {
  const auto den = c.tp + c.fp;
  if (den == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(den);
}

/// Per-pixel argmax over the channel axis; ties go to the lowest class index.
template <typename T>
Tensor<std::int32_t> argmax_channels(const Tensor<T>& scores) {
  detail::check(scores.rank() == 4, "argmax_channels: scores must be [n,c,h,w]");
  const std::int64_t n = scores.dim(0), c = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  Tensor<std::int32_t> out({n, h, w});
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        std::int32_t best = 0;
        T best_v = scores.at4(in, 0, y, x);
        for (std::int64_t ic = 1; ic < c; ++ic) {
          const T v = scores.at4(in, ic, y, x);
          if (v > best_v) {
            best_v = v;
            best = static_cast<std::int32_t>(ic);
          }
        }
        out.at3(in, y, x) = best;
      }
  return out;
}

/// Micro-aggregated scores for one evaluation run: confusion counts are
/// pooled over every scored output, metrics computed once per class, means
/// taken over the foreground classes that are present.
struct MetricsReport {
  std::string method;  // variant or model label
  int fold = -1;
  std::uint64_t seed = 0;
  std::int64_t outputs_scored = 0;  // stream outputs, two per evaluated pair

  std::vector<ConfusionCounts> counts;                   // index = class
  std::vector<std::optional<double>> dsc, jaccard, ppv;  // index = class
  std::optional<double> mean_dsc, mean_jaccard, mean_ppv;
};

namespace detail {

inline std::optional<double> foreground_mean(const std::vector<std::optional<double>>& v) {
  double sum = 0;
  int n = 0;
  for (std::size_t cls = 1; cls < v.size(); ++cls)
    if (v[cls]) {
      sum += *v[cls];
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace detail

inline MetricsReport make_report(std::vector<ConfusionCounts> counts, std::string method = {},
                                 int fold = -1, std::uint64_t seed = 0,
                                 std::int64_t outputs_scored = 0) {
  MetricsReport r;
  r.method = std::move(method);
  r.fold = fold;
  r.seed = seed;
  r.outputs_scored = outputs_scored;
  r.counts = std::move(counts);
  for (const auto& c : r.counts) {
    r.dsc.push_back(stdsnn::dsc(c));
    r.jaccard.push_back(stdsnn::jaccard(c));
    r.ppv.push_back(stdsnn::ppv(c));
  }
  r.mean_dsc = detail::foreground_mean(r.dsc);
  r.mean_jaccard = detail::foreground_mean(r.jaccard);
  r.mean_ppv = detail::foreground_mean(r.ppv);
  return r;
}

/// Accumulates one prediction/ground-truth pair into per-class pooled counts.
inline void accumulate_confusion(std::vector<ConfusionCounts>& pool,
                                 const Tensor<std::int32_t>& pred,
                                 const Tensor<std::int32_t>& gt) {
  for (std::size_t cls = 0; cls < pool.size(); ++cls)
    pool[cls] += confusion(pred, gt, static_cast<std::int32_t>(cls));
}

// ---- Welch's two-sample t-test ----

namespace detail {

inline double beta_cont_fraction(double a, double b, double x) {
  constexpr int max_iter = 300;
  constexpr double eps = 3e-15, tiny = 1e-300;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

inline double reg_inc_beta(double a, double b, double x) {
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1) / (a + b + 2)) return front * beta_cont_fraction(a, b, x) / a;
  return 1 - front * beta_cont_fraction(b, a, 1 - x) / b;
}

inline double sample_mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_var(const std::vector<double>& v, double mean) {
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace detail

struct TTestResult {
  double t = 0, df = 0, p = 1;
};

/// Welch's unequal-variance two-sample t-test, two-sided p-value through the
/// regularized incomplete beta function.  Degenerate zero-variance input:
/// equal means give (t=0, p=1), unequal means give p=0.
inline TTestResult t_test_two_sample(const std::vector<double>& a, const std::vector<double>& b) {
  detail::check(a.size() >= 2 && b.size() >= 2,
                "t_test_two_sample: both samples need at least 2 observations");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = detail::sample_mean(a), mb = detail::sample_mean(b);
  const double va = detail::sample_var(a, ma), vb = detail::sample_var(b, mb);
  const double sea = va / na, seb = vb / nb;

  TTestResult r;
  if (sea + seb == 0) {
    r.df = na + nb - 2;
    if (ma == mb) return r;  // t=0, p=1
    r.t = ma > mb ? std::numeric_limits<double>::infinity()
                  : -std::numeric_limits<double>::infinity();
    r.p = 0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(sea + seb);
  r.df = (sea + seb) * (sea + seb) / (sea * sea / (na - 1) + seb * seb / (nb - 1));
  const double x = r.df / (r.df + r.t * r.t);
  r.p = std::clamp(detail::reg_inc_beta(r.df / 2.0, 0.5, x), 0.0, 1.0);
  return r;
}

// ---- report serialization ----

// column order mirrors the reference result tables
inline constexpr std::array<std::int32_t, 5> report_class_columns = {1, 5, 2, 4, 3};
inline constexpr const char* report_csv_header =
    "metric,method,brain,bladder,heart,r_kidney,l_kidney,mean";

namespace detail {

inline std::string metric_cell(const std::optional<double>& v) {
  if (!v) return "absent";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", *v);
  return buf;
}

inline void write_metric_row(std::ostream& out, const char* metric, const MetricsReport& r,
                             const std::vector<std::optional<double>>& per_class,
                             const std::optional<double>& mean) {
  out << metric << "," << r.method;
  for (const auto cls : report_class_columns) {
    const auto idx = static_cast<std::size_t>(cls);
    out << "," << metric_cell(idx < per_class.size() ? per_class[idx] : std::nullopt);
  }
  out << "," << metric_cell(mean) << "\n";
}

}  // namespace detail

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsReport>& reports) {
  out << report_csv_header << "\n";
  for (const auto& r : reports) {
    detail::write_metric_row(out, "dsc", r, r.dsc, r.mean_dsc);
    detail::write_metric_row(out, "jaccard", r, r.jaccard, r.mean_jaccard);
    detail::write_metric_row(out, "ppv", r, r.ppv, r.mean_ppv);
  }
}

}  // namespace stdsnn
