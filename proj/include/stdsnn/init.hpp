#pragma once

#include <cmath>

#include "stdsnn/rng.hpp"
#include "stdsnn/tensor.hpp"

namespace stdsnn {

/// Xavier/Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void xavier_uniform(Tensor<T>& t, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  detail::check(fan_in > 0 && fan_out > 0, "xavier_uniform: fans must be positive");
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(-a, a));
}

/// Conv weight [out_ch, in_ch, kh, kw]: fan_in = in_ch*kh*kw, fan_out = out_ch*kh*kw.
template <typename T>
void xavier_uniform_conv(Tensor<T>& w, Rng& rng) {
  detail::check(w.rank() == 4, "xavier_uniform_conv: weight must be 4-d");
  const std::int64_t k = w.shape()[2] * w.shape()[3];
  xavier_uniform(w, w.shape()[1] * k, w.shape()[0] * k, rng);
}

}  // namespace stdsnn
