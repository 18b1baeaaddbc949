#pragma once

#include <cmath>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stdsnn/graph.hpp"
#include "stdsnn/rng.hpp"

namespace stdsnn {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;

  bool pass(double tol) const { return max_rel_err < tol; }
  std::string describe() const {
    if (worst_index < 0) return "all sampled quotients agree exactly";
    return "max rel err " + std::to_string(max_rel_err) + " at " + worst_param + "[" +
           std::to_string(worst_index) + "] (analytic " + std::to_string(analytic) +
           ", numeric " + std::to_string(numeric) + ")";
  }
};

/// Central-difference check of d(loss)/d(leaf) against backprop.  build_loss
/// must rebuild the graph from the leaves' current values and return a scalar
/// node.  Intended for T = double; float rounding drowns the difference
/// quotient.  rel err = |a-f| / max(|a|, |f|, 1e-6), except that |a-f| <= 1e-7
/// counts as exact: a dead-relu path has an analytic gradient of exactly zero
/// while the re-evaluated loss carries ~1e-14 of rounding noise, and noise/2h
/// over the 1e-6 floor would fail quotients the stencil cannot resolve at all.
/// Any wrong gradient big enough to matter disagrees by far more than 1e-7.
///
/// A quotient that disagrees at the base step is re-measured at smaller steps:
/// piecewise-linear kinks (relu, maxpool ties) a short distance from the
/// evaluation point corrupt wide stencils, and shrinking the step resolves
/// them, while a genuinely wrong gradient stays wrong at every step.
template <typename T, typename BuildLoss>
GradCheckReport check_gradients(const std::vector<std::pair<std::string, NodePtr<T>>>& leaves,
                                BuildLoss build_loss, Rng& rng,
                                std::int64_t samples_per_tensor = 8, double step = 1e-5) {
  auto loss = build_loss();
  zero_grads(loss);
  backprop(loss);
  std::vector<Tensor<T>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& [name, leaf] : leaves) analytic.push_back(leaf->grad);

  GradCheckReport rep;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto& name = leaves[k].first;
    auto& val = leaves[k].second->value;
    std::vector<std::int64_t> idx;
    if (val.numel() <= samples_per_tensor) {
      for (std::int64_t i = 0; i < val.numel(); ++i) idx.push_back(i);
    } else {
      std::unordered_set<std::int64_t> seen;
      while (static_cast<std::int64_t>(idx.size()) < samples_per_tensor) {
        const std::int64_t i = static_cast<std::int64_t>(rng.uniform_int(
            static_cast<std::uint64_t>(val.numel())));
        if (seen.insert(i).second) idx.push_back(i);
      }
    }
    for (const std::int64_t i : idx) {
      const double an = static_cast<double>(analytic[k][i]);
      double best_rel = 0.0, best_fd = 0.0;
      bool first = true;
      for (const double h : {step, step / 100.0, step / 10000.0}) {
        const T old = val[i];
        val[i] = old + static_cast<T>(h);
        const double lp = static_cast<double>(build_loss()->value[0]);
        val[i] = old - static_cast<T>(h);
        const double lm = static_cast<double>(build_loss()->value[0]);
        val[i] = old;
        const double fd = (lp - lm) / (2.0 * h);
        const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
        const double rel = std::abs(an - fd) <= 1e-7 ? 0.0 : std::abs(an - fd) / denom;
        if (first || rel < best_rel) {
          best_rel = rel;
          best_fd = fd;
          first = false;
        }
        if (best_rel < 1e-4) break;
      }
      if (best_rel > rep.max_rel_err) {
        rep.max_rel_err = best_rel;
        rep.worst_param = name;
        rep.worst_index = i;
        rep.analytic = an;
        rep.numeric = best_fd;
      }
    }
  }
  return rep;
}

}  // namespace stdsnn
