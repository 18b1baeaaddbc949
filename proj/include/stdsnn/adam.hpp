#pragma once

#include <cmath>
#include <vector>

#include "stdsnn/graph.hpp"
#include "stdsnn/tensor.hpp"

namespace stdsnn {

/// Adam moments for a fixed parameter list (slot i belongs to params[i]).
template <typename T>
struct AdamState {
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  T weight_decay = T(0);
  std::int64_t step_count = 0;
  std::vector<Tensor<T>> m, v;

  explicit AdamState(const std::vector<NodePtr<T>>& params, T wd = T(0)) : weight_decay(wd) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
  }
};

/// One update with bias correction; weight decay is coupled L2 (added to the
/// gradient before the moment updates).
template <typename T>
void adam_step(const std::vector<NodePtr<T>>& params, AdamState<T>& st, T lr) {
  detail::check(params.size() == st.m.size(), "adam_step: state does not match param list");
  ++st.step_count;
  const double bc1 = 1.0 - std::pow(static_cast<double>(st.beta1), st.step_count);
  const double bc2 = 1.0 - std::pow(static_cast<double>(st.beta2), st.step_count);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = params[k]->value;
    const Tensor<T>& gr = params[k]->grad;
    Tensor<T>& m = st.m[k];
    Tensor<T>& v = st.v[k];
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const T g = gr[i] + st.weight_decay * p[i];
      m[i] = st.beta1 * m[i] + (T(1) - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (T(1) - st.beta2) * g * g;
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      p[i] -= static_cast<T>(static_cast<double>(lr) * mhat /
                             (std::sqrt(vhat) + static_cast<double>(st.epsilon)));
    }
  }
}

}  // namespace stdsnn
