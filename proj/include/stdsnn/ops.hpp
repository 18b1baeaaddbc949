#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "stdsnn/graph.hpp"
#include "stdsnn/tensor.hpp"

namespace stdsnn {

enum class Mode { train, eval };

/// Convolution parameters; weight layout [out_ch, in_ch, kh, kw].
template <typename T>
struct ConvParams {
  NodePtr<T> weight;
  NodePtr<T> bias;
};

template <typename T>
struct BatchNormState {
  NodePtr<T> gamma;  // [c]
  NodePtr<T> beta;   // [c]
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);
  Mode mode = Mode::train;
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// Lower one batch item into a [c*kh*kw, oh*ow] patch matrix.
template <typename T>
void im2col(const Tensor<T>& x, std::int64_t n, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, T* col) {
  const std::int64_t cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  std::int64_t r = 0;
  for (std::int64_t c = 0; c < cin; ++c) {
    for (std::int64_t i = 0; i < kh; ++i) {
      for (std::int64_t j = 0; j < kw; ++j, ++r) {
        T* dst = col + r * oh * ow;
        // valid ox range: 0 <= ox*stride + j - pad < w
        std::int64_t ox_lo = (pad - j + stride - 1) / stride;
        if (ox_lo < 0) ox_lo = 0;
        std::int64_t ox_hi = (w - 1 - j + pad) / stride;  // inclusive
        if (ox_hi > ow - 1) ox_hi = ow - 1;
        for (std::int64_t oy = 0; oy < oh; ++oy, dst += ow) {
          const std::int64_t iy = oy * stride + i - pad;
          if (iy < 0 || iy >= h || ox_lo > ox_hi) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          std::fill(dst, dst + ox_lo, T(0));
          const T* src = &x.at4(n, c, iy, 0);
          if (stride == 1) {
            std::memcpy(dst + ox_lo, src + ox_lo + j - pad,
                        static_cast<std::size_t>(ox_hi - ox_lo + 1) * sizeof(T));
          } else {
            for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
              dst[ox] = src[ox * stride + j - pad];
          }
          std::fill(dst + ox_hi + 1, dst + ow, T(0));
        }
      }
    }
  }
}

// Scatter-add a patch matrix back into one batch item of gx.
template <typename T>
void col2im_add(const T* col, std::int64_t n, std::int64_t kh, std::int64_t kw,
                std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow,
                Tensor<T>& gx) {
  const std::int64_t cin = gx.shape()[1], h = gx.shape()[2], w = gx.shape()[3];
  std::int64_t r = 0;
  for (std::int64_t c = 0; c < cin; ++c) {
    for (std::int64_t i = 0; i < kh; ++i) {
      for (std::int64_t j = 0; j < kw; ++j, ++r) {
        const T* src = col + r * oh * ow;
        std::int64_t ox_lo = (pad - j + stride - 1) / stride;
        if (ox_lo < 0) ox_lo = 0;
        std::int64_t ox_hi = (w - 1 - j + pad) / stride;
        if (ox_hi > ow - 1) ox_hi = ow - 1;
        for (std::int64_t oy = 0; oy < oh; ++oy, src += ow) {
          const std::int64_t iy = oy * stride + i - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = &gx.at4(n, c, iy, 0);
          for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
            dst[ox * stride + j - pad] += src[ox];
        }
      }
    }
  }
}

template <typename T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                     std::int64_t stride, std::int64_t pad, const char* op) {
  check(x.rank() == 4, std::string(op) + ": input must be 4-d, got " + shape_str(x.shape()));
  check(w.rank() == 4, std::string(op) + ": weight must be 4-d, got " + shape_str(w.shape()));
  check(b.rank() == 1 && b.shape()[0] == w.shape()[0],
        std::string(op) + ": bias shape " + shape_str(b.shape()) + " does not match out_ch " +
            std::to_string(w.shape()[0]));
  check(stride >= 1 && pad >= 0, std::string(op) + ": invalid stride/pad");
  if (x.shape()[1] != w.shape()[1])
    throw std::invalid_argument(std::string(op) + ": input channels " +
                                std::to_string(x.shape()[1]) + " != weight in_ch " +
                                std::to_string(w.shape()[1]) + " (input " + shape_str(x.shape()) +
                                ", weight " + shape_str(w.shape()) + ")");
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         std::int64_t stride, std::int64_t pad) {
  check_conv_args(x, w, b, stride, pad, "conv2d");
  const std::int64_t n = x.shape()[0], h = x.shape()[2], wd = x.shape()[3];
  const std::int64_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  check(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel does not fit padded input");
  const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  const std::int64_t k = w.shape()[1] * kh * kw, p = oh * ow;

  Tensor<T> y({n, cout, oh, ow});
  std::vector<T> col(static_cast<std::size_t>(k * p));
  CMapRM<T> wm(w.data(), cout, k);
  for (std::int64_t i = 0; i < n; ++i) {
    im2col(x, i, kh, kw, stride, pad, oh, ow, col.data());
    CMapRM<T> cm(col.data(), k, p);
    MapRM<T> ym(&y.at4(i, 0, 0, 0), cout, p);
    ym.noalias() = wm * cm;
    for (std::int64_t oc = 0; oc < cout; ++oc) ym.row(oc).array() += b[oc];
  }
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride, std::int64_t pad,
                     const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const std::int64_t n = x.shape()[0];
  const std::int64_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  const std::int64_t oh = gy.shape()[2], ow = gy.shape()[3];
  const std::int64_t k = w.shape()[1] * kh * kw, p = oh * ow;

  std::vector<T> col(static_cast<std::size_t>(k * p));
  std::vector<T> colg;
  if (gx) colg.resize(static_cast<std::size_t>(k * p));
  CMapRM<T> wm(w.data(), cout, k);
  for (std::int64_t i = 0; i < n; ++i) {
    CMapRM<T> gym(&gy.at4(i, 0, 0, 0), cout, p);
    if (gb) {
      // fixed-order scalar reduction: vectorized reductions can regroup
      // terms depending on buffer alignment, breaking bitwise determinism
      for (std::int64_t oc = 0; oc < cout; ++oc) {
        const T* row = &gy.at4(i, oc, 0, 0);
        T acc = T(0);
        for (std::int64_t q = 0; q < p; ++q) acc += row[q];
        (*gb)[oc] += acc;
      }
    }
    if (gw) {
      im2col(x, i, kh, kw, stride, pad, oh, ow, col.data());
      CMapRM<T> cm(col.data(), k, p);
      MapRM<T> gwm(gw->data(), cout, k);
      gwm.noalias() += gym * cm.transpose();
    }
    if (gx) {
      MapRM<T> cgm(colg.data(), k, p);
      cgm.noalias() = wm.transpose() * gym;
      col2im_add(colg.data(), i, kh, kw, stride, pad, oh, ow, *gx);
    }
  }
}

// Fractionally strided convolution, fixed 2x2 kernel / stride 2: the exact
// adjoint of a stride-2 conv, so output dims are (2h, 2w).
template <typename T>
Tensor<T> conv_transpose2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check_conv_args(x, w, b, 2, 0, "conv_transpose2d");
  check(w.shape()[2] == 2 && w.shape()[3] == 2,
        "conv_transpose2d: kernel must be 2x2, got " + shape_str(w.shape()));
  const std::int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const std::int64_t cout = w.shape()[0];
  Tensor<T> y({n, cout, 2 * h, 2 * wd});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t co = 0; co < cout; ++co) {
      T* yp = &y.at4(i, co, 0, 0);
      std::fill(yp, yp + 4 * h * wd, b[co]);
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T w00 = w.at4(co, ci, 0, 0), w01 = w.at4(co, ci, 0, 1);
        const T w10 = w.at4(co, ci, 1, 0), w11 = w.at4(co, ci, 1, 1);
        for (std::int64_t yy = 0; yy < h; ++yy) {
          const T* xr = &x.at4(i, ci, yy, 0);
          T* y0 = &y.at4(i, co, 2 * yy, 0);
          T* y1 = &y.at4(i, co, 2 * yy + 1, 0);
          for (std::int64_t xx = 0; xx < wd; ++xx) {
            const T v = xr[xx];
            y0[2 * xx] += v * w00;
            y0[2 * xx + 1] += v * w01;
            y1[2 * xx] += v * w10;
            y1[2 * xx + 1] += v * w11;
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
void conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy,
                               Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const std::int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const std::int64_t cout = w.shape()[0];
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t co = 0; co < cout; ++co) {
      if (gb) {
        T s = T(0);
        const T* gp = &gy.at4(i, co, 0, 0);
        for (std::int64_t q = 0; q < 4 * h * wd; ++q) s += gp[q];
        (*gb)[co] += s;
      }
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T w00 = w.at4(co, ci, 0, 0), w01 = w.at4(co, ci, 0, 1);
        const T w10 = w.at4(co, ci, 1, 0), w11 = w.at4(co, ci, 1, 1);
        T s00 = T(0), s01 = T(0), s10 = T(0), s11 = T(0);
        for (std::int64_t yy = 0; yy < h; ++yy) {
          const T* xr = &x.at4(i, ci, yy, 0);
          const T* g0 = &gy.at4(i, co, 2 * yy, 0);
          const T* g1 = &gy.at4(i, co, 2 * yy + 1, 0);
          T* gxr = gx ? &gx->at4(i, ci, yy, 0) : nullptr;
          for (std::int64_t xx = 0; xx < wd; ++xx) {
            const T ga = g0[2 * xx], gb_ = g0[2 * xx + 1];
            const T gc = g1[2 * xx], gd = g1[2 * xx + 1];
            if (gx) gxr[xx] += ga * w00 + gb_ * w01 + gc * w10 + gd * w11;
            if (gw) {
              const T v = xr[xx];
              s00 += v * ga;
              s01 += v * gb_;
              s10 += v * gc;
              s11 += v * gd;
            }
          }
        }
        if (gw) {
          gw->at4(co, ci, 0, 0) += s00;
          gw->at4(co, ci, 0, 1) += s01;
          gw->at4(co, ci, 1, 0) += s10;
          gw->at4(co, ci, 1, 1) += s11;
        }
      }
    }
  }
}

template <typename T>
struct MaxPoolResult {
  Tensor<T> value;
  Tensor<std::int64_t> argmax;  // flat index into the input's data
};

// Ties route to the first maximal element in row-major window order.
template <typename T>
MaxPoolResult<T> maxpool2x2_forward(const Tensor<T>& x) {
  check(x.rank() == 4, "maxpool2x2: input must be 4-d, got " + shape_str(x.shape()));
  const std::int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  check(h % 2 == 0 && w % 2 == 0,
        "maxpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
  MaxPoolResult<T> r{Tensor<T>({n, c, h / 2, w / 2}), Tensor<std::int64_t>({n, c, h / 2, w / 2})};
  std::int64_t out = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t oy = 0; oy < h / 2; ++oy) {
        const T* r0 = &x.at4(i, ch, 2 * oy, 0);
        const T* r1 = &x.at4(i, ch, 2 * oy + 1, 0);
        const std::int64_t base = ((i * c + ch) * h + 2 * oy) * w;
        for (std::int64_t ox = 0; ox < w / 2; ++ox, ++out) {
          std::int64_t best = base + 2 * ox;
          T bv = r0[2 * ox];
          if (r0[2 * ox + 1] > bv) { bv = r0[2 * ox + 1]; best = base + 2 * ox + 1; }
          if (r1[2 * ox] > bv) { bv = r1[2 * ox]; best = base + w + 2 * ox; }
          if (r1[2 * ox + 1] > bv) { bv = r1[2 * ox + 1]; best = base + w + 2 * ox + 1; }
          r.value[out] = bv;
          r.argmax[out] = best;
        }
      }
    }
  }
  return r;
}

// Per-channel batch statistics over (n, h, w); double accumulation in a fixed
// order keeps float runs reproducible.
template <typename T>
struct BatchNormSaved {
  std::vector<T> mean, inv_std;  // per channel
};

template <typename T>
Tensor<T> batchnorm2d_forward(const Tensor<T>& x, BatchNormState<T>& s, BatchNormSaved<T>& saved) {
  check(x.rank() == 4, "batchnorm2d: input must be 4-d, got " + shape_str(x.shape()));
  const std::int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  check(c == s.gamma->value.shape()[0],
        "batchnorm2d: channels " + std::to_string(c) + " != state channels " +
            std::to_string(s.gamma->value.shape()[0]));
  const std::int64_t m = n * h * w;
  Tensor<T> y({n, c, h, w});
  saved.mean.resize(static_cast<std::size_t>(c));
  saved.inv_std.resize(static_cast<std::size_t>(c));
  const T* g = s.gamma->value.data();
  const T* b = s.beta->value.data();

  if (s.mode == Mode::train) {
    check(m >= 2, "batchnorm2d: train mode needs n*h*w >= 2, got " + std::to_string(m));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double sum = 0.0, sumsq = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = &x.at4(i, ch, 0, 0);
        for (std::int64_t q = 0; q < h * w; ++q) {
          sum += p[q];
          sumsq += static_cast<double>(p[q]) * p[q];
        }
      }
      const double mean = sum / static_cast<double>(m);
      double var = sumsq / static_cast<double>(m) - mean * mean;  // biased
      if (var < 0.0) var = 0.0;
      saved.mean[ch] = static_cast<T>(mean);
      saved.inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(s.epsilon)));
      // running stats use the unbiased variance, framework convention
      const double ub = (m > 1) ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      s.running_mean[ch] =
          static_cast<T>((1.0 - s.momentum) * s.running_mean[ch] + s.momentum * mean);
      s.running_var[ch] = static_cast<T>((1.0 - s.momentum) * s.running_var[ch] + s.momentum * ub);
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      saved.mean[ch] = s.running_mean[ch];
      saved.inv_std[ch] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(s.running_var[ch]) + static_cast<double>(s.epsilon)));
    }
  }
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T mu = saved.mean[ch], inv = saved.inv_std[ch], ga = g[ch], be = b[ch];
      const T* p = &x.at4(i, ch, 0, 0);
      T* o = &y.at4(i, ch, 0, 0);
      for (std::int64_t q = 0; q < h * w; ++q) o[q] = (p[q] - mu) * inv * ga + be;
    }
  }
  return y;
}

}  // namespace detail

namespace ops {

template <typename T>
NodePtr<T> conv2d(const NodePtr<T>& x, const ConvParams<T>& p, std::int64_t stride = 1,
                  std::int64_t pad = 0) {
  Tensor<T> y = detail::conv2d_forward(x->value, p.weight->value, p.bias->value, stride, pad);
  return make_op<T>(
      "conv2d", std::move(y), {x, p.weight, p.bias}, [stride, pad](Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        detail::conv2d_backward(xn.value, wn.value, stride, pad, self.grad,
                                xn.requires_grad ? &xn.grad : nullptr,
                                wn.requires_grad ? &wn.grad : nullptr,
                                bn.requires_grad ? &bn.grad : nullptr);
      });
}

template <typename T>
NodePtr<T> conv_transpose2d(const NodePtr<T>& x, const ConvParams<T>& p) {
  Tensor<T> y = detail::conv_transpose2d_forward(x->value, p.weight->value, p.bias->value);
  return make_op<T>("conv_transpose2d", std::move(y), {x, p.weight, p.bias}, [](Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& wn = *self.inputs[1];
    auto& bn = *self.inputs[2];
    detail::conv_transpose2d_backward(xn.value, wn.value, self.grad,
                                      xn.requires_grad ? &xn.grad : nullptr,
                                      wn.requires_grad ? &wn.grad : nullptr,
                                      bn.requires_grad ? &bn.grad : nullptr);
  });
}

template <typename T>
NodePtr<T> maxpool2x2(const NodePtr<T>& x) {
  auto r = detail::maxpool2x2_forward(x->value);
  auto idx = std::make_shared<Tensor<std::int64_t>>(std::move(r.argmax));
  return make_op<T>("maxpool2x2", std::move(r.value), {x}, [idx](Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      xn.grad[(*idx)[i]] += self.grad[i];
  });
}

template <typename T>
NodePtr<T> batchnorm2d(const NodePtr<T>& x, BatchNormState<T>& s) {
  auto saved = std::make_shared<detail::BatchNormSaved<T>>();
  Tensor<T> y = detail::batchnorm2d_forward(x->value, s, *saved);
  const bool train = s.mode == Mode::train;
  return make_op<T>(
      "batchnorm2d", std::move(y), {x, s.gamma, s.beta}, [saved, train](Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const auto& xv = xn.value;
        const std::int64_t n = xv.shape()[0], c = xv.shape()[1], h = xv.shape()[2],
                           w = xv.shape()[3];
        const std::int64_t m = n * h * w;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T mu = saved->mean[ch], inv = saved->inv_std[ch];
          const T ga = gn.value[ch];
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t i = 0; i < n; ++i) {
            const T* gp = &self.grad.at4(i, ch, 0, 0);
            const T* xp = &xv.at4(i, ch, 0, 0);
            for (std::int64_t q = 0; q < h * w; ++q) {
              sum_g += gp[q];
              sum_gx += static_cast<double>(gp[q]) * ((xp[q] - mu) * inv);
            }
          }
          if (gn.requires_grad) gn.grad[ch] += static_cast<T>(sum_gx);
          if (bn.requires_grad) bn.grad[ch] += static_cast<T>(sum_g);
          if (!xn.requires_grad) continue;
          if (train) {
            const T mg = static_cast<T>(sum_g / static_cast<double>(m));
            const T mgx = static_cast<T>(sum_gx / static_cast<double>(m));
            for (std::int64_t i = 0; i < n; ++i) {
              const T* gp = &self.grad.at4(i, ch, 0, 0);
              const T* xp = &xv.at4(i, ch, 0, 0);
              T* out = &xn.grad.at4(i, ch, 0, 0);
              for (std::int64_t q = 0; q < h * w; ++q) {
                const T xh = (xp[q] - mu) * inv;
                out[q] += ga * inv * (gp[q] - mg - xh * mgx);
              }
            }
          } else {
            for (std::int64_t i = 0; i < n; ++i) {
              const T* gp = &self.grad.at4(i, ch, 0, 0);
              T* out = &xn.grad.at4(i, ch, 0, 0);
              for (std::int64_t q = 0; q < h * w; ++q) out[q] += gp[q] * ga * inv;
            }
          }
        }
      });
}

/// Gradient is 0 for x <= 0 (the x == 0 subgradient choice).
template <typename T>
NodePtr<T> relu(const NodePtr<T>& x) {
  Tensor<T> y = x->value;
  for (std::int64_t i = 0; i < y.numel(); ++i)
    if (y[i] < T(0)) y[i] = T(0);
  return make_op<T>("relu", std::move(y), {x}, [](Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      if (xn.value[i] > T(0)) xn.grad[i] += self.grad[i];
  });
}

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
  detail::check_same_shape(a->value, b->value, "add");
  Tensor<T> y = a->value;
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += b->value[i];
  return make_op<T>("add", std::move(y), {a, b}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) in.grad[i] += self.grad[i];
    }
  });
}

template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
  detail::check_same_shape(a->value, b->value, "mul");
  Tensor<T> y = a->value;
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= b->value[i];
  return make_op<T>("mul", std::move(y), {a, b}, [](Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      if (an.requires_grad) an.grad[i] += self.grad[i] * bn.value[i];
      if (bn.requires_grad) bn.grad[i] += self.grad[i] * an.value[i];
    }
  });
}

template <typename T>
NodePtr<T> scale(const NodePtr<T>& x, T k) {
  Tensor<T> y = x->value;
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= k;
  return make_op<T>("scale", std::move(y), {x}, [k](Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) xn.grad[i] += k * self.grad[i];
  });
}

template <typename T>
NodePtr<T> sum_all(const NodePtr<T>& x) {
  double s = 0.0;
  for (std::int64_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
  Tensor<T> y({1});
  y[0] = static_cast<T>(s);
  return make_op<T>("sum_all", std::move(y), {x}, [](Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    const T g = self.grad[0];
    for (std::int64_t i = 0; i < xn.grad.numel(); ++i) xn.grad[i] += g;
  });
}

/// Channel-axis concatenation, a first.
template <typename T>
NodePtr<T> concat_channels(const NodePtr<T>& a, const NodePtr<T>& b) {
  const auto& as = a->value.shape();
  const auto& bs = b->value.shape();
  detail::check(a->value.rank() == 4 && b->value.rank() == 4 && as[0] == bs[0] &&
                    as[2] == bs[2] && as[3] == bs[3],
                "concat_channels: incompatible shapes " + shape_str(as) + " vs " + shape_str(bs));
  const std::int64_t n = as[0], c1 = as[1], c2 = bs[1], hw = as[2] * as[3];
  Tensor<T> y({n, c1 + c2, as[2], as[3]});
  for (std::int64_t i = 0; i < n; ++i) {
    std::memcpy(&y.at4(i, 0, 0, 0), &a->value.at4(i, 0, 0, 0),
                static_cast<std::size_t>(c1 * hw) * sizeof(T));
    std::memcpy(&y.at4(i, c1, 0, 0), &b->value.at4(i, 0, 0, 0),
                static_cast<std::size_t>(c2 * hw) * sizeof(T));
  }
  return make_op<T>("concat_channels", std::move(y), {a, b}, [c1, c2, hw](Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    const std::int64_t n = self.grad.shape()[0];
    for (std::int64_t i = 0; i < n; ++i) {
      if (an.requires_grad) {
        const T* g = &self.grad.at4(i, 0, 0, 0);
        T* out = &an.grad.at4(i, 0, 0, 0);
        for (std::int64_t q = 0; q < c1 * hw; ++q) out[q] += g[q];
      }
      if (bn.requires_grad) {
        const T* g = &self.grad.at4(i, c1, 0, 0);
        T* out = &bn.grad.at4(i, 0, 0, 0);
        for (std::int64_t q = 0; q < c2 * hw; ++q) out[q] += g[q];
      }
    }
  });
}

/// Per-pixel softmax over the channel axis, max-subtracted for stability.
template <typename T>
NodePtr<T> softmax_channels(const NodePtr<T>& x) {
  detail::check(x->value.rank() == 4,
                "softmax_channels: input must be 4-d, got " + shape_str(x->value.shape()));
  const auto& xs = x->value.shape();
  const std::int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3], hw = h * w;
  Tensor<T> y(xs);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xp = &x->value.at4(i, 0, 0, 0);
    T* yp = &y.at4(i, 0, 0, 0);
    for (std::int64_t q = 0; q < hw; ++q) {
      T mx = xp[q];
      for (std::int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, xp[ch * hw + q]);
      double z = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T e = std::exp(xp[ch * hw + q] - mx);
        yp[ch * hw + q] = e;
        z += e;
      }
      const T invz = static_cast<T>(1.0 / z);
      for (std::int64_t ch = 0; ch < c; ++ch) yp[ch * hw + q] *= invz;
    }
  }
  return make_op<T>("softmax_channels", std::move(y), {x}, [](Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    const auto& s = self.value.shape();
    const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
    for (std::int64_t i = 0; i < n; ++i) {
      const T* p = &self.value.at4(i, 0, 0, 0);
      const T* g = &self.grad.at4(i, 0, 0, 0);
      T* out = &xn.grad.at4(i, 0, 0, 0);
      for (std::int64_t q = 0; q < hw; ++q) {
        double dot = 0.0;
        for (std::int64_t ch = 0; ch < c; ++ch)
          dot += static_cast<double>(g[ch * hw + q]) * p[ch * hw + q];
        for (std::int64_t ch = 0; ch < c; ++ch)
          out[ch * hw + q] += p[ch * hw + q] * (g[ch * hw + q] - static_cast<T>(dot));
      }
    }
  });
}

/// Mean over all pixels of -log softmax(logits)[label], fused log-softmax.
template <typename T>
NodePtr<T> cross_entropy_loss(const NodePtr<T>& logits, const Tensor<std::int32_t>& labels) {
  const auto& ls = logits->value.shape();
  detail::check(logits->value.rank() == 4, "cross_entropy_loss: logits must be 4-d, got " +
                                               shape_str(ls));
  detail::check(labels.rank() == 3 && labels.shape()[0] == ls[0] && labels.shape()[1] == ls[2] &&
                    labels.shape()[2] == ls[3],
                "cross_entropy_loss: labels shape " + shape_str(labels.shape()) +
                    " does not match logits " + shape_str(ls));
  const std::int64_t n = ls[0], c = ls[1], h = ls[2], w = ls[3], hw = h * w;
  const std::int64_t total = n * hw;

  // softmax probabilities are kept for the backward pass
  auto probs = std::make_shared<Tensor<T>>(ls);
  double loss_sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xp = &logits->value.at4(i, 0, 0, 0);
    T* pp = &probs->at4(i, 0, 0, 0);
    for (std::int64_t q = 0; q < hw; ++q) {
      const std::int32_t lab = labels.at3(i, q / w, q % w);
      if (lab < 0 || lab >= c)
        throw std::invalid_argument(
            "cross_entropy_loss: label " + std::to_string(lab) + " out of range [0," +
            std::to_string(c) + ") at pixel (n=" + std::to_string(i) + ", y=" +
            std::to_string(q / w) + ", x=" + std::to_string(q % w) + ")");
      T mx = xp[q];
      for (std::int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, xp[ch * hw + q]);
      double z = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double e = std::exp(static_cast<double>(xp[ch * hw + q] - mx));
        pp[ch * hw + q] = static_cast<T>(e);
        z += e;
      }
      const double invz = 1.0 / z;
      for (std::int64_t ch = 0; ch < c; ++ch) pp[ch * hw + q] = static_cast<T>(pp[ch * hw + q] * invz);
      // -log p[label] = log(z) + mx - logit[label]
      loss_sum += std::log(z) + static_cast<double>(mx) - static_cast<double>(xp[lab * hw + q]);
    }
  }
  Tensor<T> y({1});
  y[0] = static_cast<T>(loss_sum / static_cast<double>(total));

  auto labs = std::make_shared<Tensor<std::int32_t>>(labels);
  return make_op<T>("cross_entropy_loss", std::move(y), {logits}, [probs, labs](Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    const auto& s = xn.value.shape();
    const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3], hw = h * w;
    const T g = self.grad[0] / static_cast<T>(n * hw);
    for (std::int64_t i = 0; i < n; ++i) {
      const T* pp = &probs->at4(i, 0, 0, 0);
      T* out = &xn.grad.at4(i, 0, 0, 0);
      for (std::int64_t q = 0; q < hw; ++q) {
        const std::int32_t lab = labs->at3(i, q / w, q % w);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T onehot = (ch == lab) ? T(1) : T(0);
          out[ch * hw + q] += (pp[ch * hw + q] - onehot) * g;
        }
      }
    }
  });
}

}  // namespace ops

}  // namespace stdsnn
