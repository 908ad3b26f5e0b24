#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fmnas/tensor.hpp"

namespace fmnas {

namespace detail {

template <typename S>
inline void expect_ndim(const TensorT<S>& t, int n, const char* what) {
  if (!t.defined() || t.ndim() != n)
    throw ShapeError(msg(what, ": expected a ", n, "-d tensor, got ",
                         t.defined() ? shape_str(t.shape()) : "undefined"));
}

template <typename S>
inline void expect_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(msg(what, ": shape mismatch ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
}

// Fold a double-precision scratch buffer into a grad span.
template <typename S>
inline void fold_grad(std::span<S> grad, const std::vector<double>& scratch) {
  for (std::size_t i = 0; i < scratch.size(); ++i)
    grad[i] += static_cast<S>(scratch[i]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::expect_same_shape(a, b, "add");
  TensorT<S> out(a.shape());
  auto oa = a.data(), ob = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] + ob[i];
  record_op<S>({a, b}, out, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::expect_same_shape(a, b, "sub");
  TensorT<S> out(a.shape());
  auto oa = a.data(), ob = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] - ob[i];
  record_op<S>({a, b}, out, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::expect_same_shape(a, b, "mul");
  TensorT<S> out(a.shape());
  auto oa = a.data(), ob = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] * ob[i];
  record_op<S>({a, b}, out, [a, b, out]() mutable {
    auto g = out.grad();
    auto da = a.data(), db = b.data();
    if (a.requires_grad()) {
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * db[i];
    }
    if (b.requires_grad()) {
      auto gb = b.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * da[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, double c) {
  TensorT<S> out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = static_cast<S>(oa[i] * c);
  record_op<S>({a}, out, [a, out, c]() mutable {
    auto g = out.grad();
    auto ga = a.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += static_cast<S>(g[i] * c);
  });
  return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
  TensorT<S> out(a.shape());
  auto oa = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = oa[i] > S(0) ? oa[i] : S(0);
  record_op<S>({a}, out, [a, out]() mutable {
    auto g = out.grad();
    auto da = a.data();
    auto ga = a.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (da[i] > S(0)) ga[i] += g[i];
  });
  return out;
}

/// Sum of all elements, 64-bit accumulation. Returns a scalar tensor.
template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
  double acc = 0.0;
  for (S v : a.data()) acc += static_cast<double>(v);
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));
  record_op<S>({a}, out, [a, out]() mutable {
    const S g = out.grad()[0];
    auto ga = a.ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int dilation, int padding) {
  return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

inline int same_padding(int k, int dilation) { return dilation * (k - 1) / 2; }

namespace detail {
inline void check_conv_geometry(int H, int W, int kh, int kw, int stride, int dilation,
                                int padding, const char* what) {
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ValueError(msg(what, ": kernel dims must be odd, got ", kh, "x", kw));
  if (stride < 1 || dilation < 1 || padding < 0)
    throw ValueError(msg(what, ": bad stride/dilation/padding ", stride, "/", dilation, "/",
                         padding));
  if (H % stride != 0 || W % stride != 0)
    throw ShapeError(msg(what, ": input ", H, "x", W, " not divisible by stride ", stride));
  const int oh = conv_out_dim(H, kh, stride, dilation, padding);
  const int ow = conv_out_dim(W, kw, stride, dilation, padding);
  if (oh != H / stride || ow != W / stride)
    throw ShapeError(msg(what, ": padding ", padding, " does not give the same-size output (",
                         oh, "x", ow, " vs expected ", H / stride, "x", W / stride, ")"));
}
}  // namespace detail

/// Cross-correlation of input [N,C,H,W] with kernel [F,C,kh,kw].
/// Same-padding contract: the caller picks `padding` so H' = H/stride exactly.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& kernel, int stride, int dilation,
                  int padding) {
  detail::expect_ndim(input, 4, "conv2d input");
  detail::expect_ndim(kernel, 4, "conv2d kernel");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int F = kernel.dim(0), KC = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (KC != C)
    throw ShapeError(detail::msg("conv2d: input channels ", C, " != kernel channels ", KC));
  detail::check_conv_geometry(H, W, kh, kw, stride, dilation, padding, "conv2d");
  const int OH = H / stride, OW = W / stride;

  TensorT<S> out({N, F, OH, OW});
  auto x = input.data();
  auto k = kernel.data();
  auto o = out.data();
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - padding + ky * dilation;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - padding + kx * dilation;
                if (ix < 0 || ix >= W) continue;
                acc += static_cast<double>(x[((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix]) *
                       static_cast<double>(k[((static_cast<std::size_t>(f) * C + c) * kh + ky) * kw + kx]);
              }
            }
          o[((static_cast<std::size_t>(n) * F + f) * OH + oy) * OW + ox] = static_cast<S>(acc);
        }

  record_op<S>({input, kernel}, out, [input, kernel, out, stride, dilation, padding]() mutable {
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int F = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int OH = H / stride, OW = W / stride;
    auto g = out.grad();
    auto x = input.data();
    auto k = kernel.data();
    const bool need_x = input.requires_grad();
    const bool need_k = kernel.requires_grad();
    std::vector<double> gx(need_x ? x.size() : 0, 0.0);
    std::vector<double> gk(need_k ? k.size() : 0, 0.0);
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < F; ++f)
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox) {
            const double go = static_cast<double>(
                g[((static_cast<std::size_t>(n) * F + f) * OH + oy) * OW + ox]);
            if (go == 0.0) continue;
            for (int c = 0; c < C; ++c)
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - padding + ky * dilation;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - padding + kx * dilation;
                  if (ix < 0 || ix >= W) continue;
                  const std::size_t xi = ((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix;
                  const std::size_t ki = ((static_cast<std::size_t>(f) * C + c) * kh + ky) * kw + kx;
                  if (need_x) gx[xi] += static_cast<double>(k[ki]) * go;
                  if (need_k) gk[ki] += static_cast<double>(x[xi]) * go;
                }
              }
          }
    if (need_x) detail::fold_grad(input.ensure_grad(), gx);
    if (need_k) detail::fold_grad(kernel.ensure_grad(), gk);
  });
  return out;
}

/// Per-channel (depthwise) convolution: input [N,C,H,W], kernel [C,kh,kw].
template <typename S>
TensorT<S> depthwise_conv2d(const TensorT<S>& input, const TensorT<S>& kernel, int stride,
                            int dilation, int padding) {
  detail::expect_ndim(input, 4, "depthwise_conv2d input");
  detail::expect_ndim(kernel, 3, "depthwise_conv2d kernel");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int KC = kernel.dim(0), kh = kernel.dim(1), kw = kernel.dim(2);
  if (KC != C)
    throw ShapeError(detail::msg("depthwise_conv2d: input channels ", C,
                                 " != kernel channels ", KC));
  detail::check_conv_geometry(H, W, kh, kw, stride, dilation, padding, "depthwise_conv2d");
  const int OH = H / stride, OW = W / stride;

  TensorT<S> out({N, C, OH, OW});
  auto x = input.data();
  auto k = kernel.data();
  auto o = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - padding + ky * dilation;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - padding + kx * dilation;
              if (ix < 0 || ix >= W) continue;
              acc += static_cast<double>(x[((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix]) *
                     static_cast<double>(k[(static_cast<std::size_t>(c) * kh + ky) * kw + kx]);
            }
          }
          o[((static_cast<std::size_t>(n) * C + c) * OH + oy) * OW + ox] = static_cast<S>(acc);
        }

  record_op<S>({input, kernel}, out, [input, kernel, out, stride, dilation, padding]() mutable {
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int kh = kernel.dim(1), kw = kernel.dim(2);
    const int OH = H / stride, OW = W / stride;
    auto g = out.grad();
    auto x = input.data();
    auto k = kernel.data();
    const bool need_x = input.requires_grad();
    const bool need_k = kernel.requires_grad();
    std::vector<double> gx(need_x ? x.size() : 0, 0.0);
    std::vector<double> gk(need_k ? k.size() : 0, 0.0);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox) {
            const double go = static_cast<double>(
                g[((static_cast<std::size_t>(n) * C + c) * OH + oy) * OW + ox]);
            if (go == 0.0) continue;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - padding + ky * dilation;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - padding + kx * dilation;
                if (ix < 0 || ix >= W) continue;
                const std::size_t xi = ((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix;
                const std::size_t ki = (static_cast<std::size_t>(c) * kh + ky) * kw + kx;
                if (need_x) gx[xi] += static_cast<double>(k[ki]) * go;
                if (need_k) gk[ki] += static_cast<double>(x[xi]) * go;
              }
            }
          }
    if (need_x) detail::fold_grad(input.ensure_grad(), gx);
    if (need_k) detail::fold_grad(kernel.ensure_grad(), gk);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class PoolKind { Max, Avg };

/// Window pooling with the same-padding convention (pad = (window-1)/2,
/// H' = H/stride). Max pads with -inf and routes the gradient to the first
/// row-major argmax; Avg pads with zeros and always divides by window^2.
template <typename S>
TensorT<S> pool2d(const TensorT<S>& input, PoolKind kind, int window, int stride) {
  detail::expect_ndim(input, 4, "pool2d input");
  if (window < 1 || window % 2 == 0)
    throw ValueError(detail::msg("pool2d: window must be odd and positive, got ", window));
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int pad = (window - 1) / 2;
  if (window > H + 2 * pad || window > W + 2 * pad)
    throw ValueError(detail::msg("pool2d: window ", window, " larger than padded input ",
                                 H + 2 * pad, "x", W + 2 * pad));
  if (stride < 1 || H % stride != 0 || W % stride != 0)
    throw ShapeError(detail::msg("pool2d: input ", H, "x", W, " not divisible by stride ",
                                 stride));
  const int OH = H / stride, OW = W / stride;
  const double area = static_cast<double>(window) * window;

  TensorT<S> out({N, C, OH, OW});
  auto x = input.data();
  auto o = out.data();
  std::vector<int> argmax;
  if (kind == PoolKind::Max) argmax.assign(out.numel(), -1);

  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          const std::size_t oi = ((static_cast<std::size_t>(n) * C + c) * OH + oy) * OW + ox;
          if (kind == PoolKind::Max) {
            S best = S(0);
            int best_idx = -1;
            for (int ky = 0; ky < window; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < window; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                const std::size_t xi = ((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix;
                if (best_idx < 0 || x[xi] > best) {
                  best = x[xi];
                  best_idx = static_cast<int>(xi);
                }
              }
            }
            o[oi] = best;
            argmax[oi] = best_idx;
          } else {
            double acc = 0.0;
            for (int ky = 0; ky < window; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < window; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                acc += static_cast<double>(
                    x[((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix]);
              }
            }
            o[oi] = static_cast<S>(acc / area);
          }
        }

  record_op<S>({input}, out, [input, out, kind, stride, window, argmax = std::move(argmax)]() mutable {
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int pad = (window - 1) / 2;
    const int OH = H / stride, OW = W / stride;
    const double area = static_cast<double>(window) * window;
    auto g = out.grad();
    std::vector<double> gx(input.numel(), 0.0);
    if (kind == PoolKind::Max) {
      for (std::size_t oi = 0; oi < g.size(); ++oi)
        if (argmax[oi] >= 0) gx[static_cast<std::size_t>(argmax[oi])] += static_cast<double>(g[oi]);
    } else {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
              const double go = static_cast<double>(
                  g[((static_cast<std::size_t>(n) * C + c) * OH + oy) * OW + ox]) / area;
              if (go == 0.0) continue;
              for (int ky = 0; ky < window; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < window; ++kx) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= W) continue;
                  gx[((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix] += go;
                }
              }
            }
    }
    detail::fold_grad(input.ensure_grad(), gx);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization, linear, loss
// ---------------------------------------------------------------------------

/// Per-channel learned affine y = x * gain[c] + bias[c] (normalization stand-in
/// without batch statistics).
template <typename S>
TensorT<S> affine_channel(const TensorT<S>& input, const TensorT<S>& gain,
                          const TensorT<S>& bias) {
  detail::expect_ndim(input, 4, "affine_channel input");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (gain.ndim() != 1 || gain.dim(0) != C || bias.ndim() != 1 || bias.dim(0) != C)
    throw ShapeError(detail::msg("affine_channel: gain/bias must be [", C, "], got ",
                                 shape_str(gain.shape()), " and ", shape_str(bias.shape())));
  TensorT<S> out(input.shape());
  auto x = input.data();
  auto gn = gain.data();
  auto bs = bias.data();
  auto o = out.data();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) o[base + i] = x[base + i] * gn[c] + bs[c];
    }
  record_op<S>({input, gain, bias}, out, [input, gain, bias, out]() mutable {
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    auto g = out.grad();
    auto x = input.data();
    auto gn = gain.data();
    std::vector<double> ggain(gain.requires_grad() ? static_cast<std::size_t>(C) : 0, 0.0);
    std::vector<double> gbias(bias.requires_grad() ? static_cast<std::size_t>(C) : 0, 0.0);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
        if (input.requires_grad()) {
          auto gx = input.ensure_grad();
          for (std::size_t i = 0; i < hw; ++i) gx[base + i] += g[base + i] * gn[c];
        }
        for (std::size_t i = 0; i < hw; ++i) {
          if (!ggain.empty())
            ggain[static_cast<std::size_t>(c)] +=
                static_cast<double>(g[base + i]) * static_cast<double>(x[base + i]);
          if (!gbias.empty()) gbias[static_cast<std::size_t>(c)] += static_cast<double>(g[base + i]);
        }
      }
    if (!ggain.empty()) detail::fold_grad(gain.ensure_grad(), ggain);
    if (!gbias.empty()) detail::fold_grad(bias.ensure_grad(), gbias);
  });
  return out;
}

/// y = x @ w + b with x [N,D], w [D,C], b [C].
template <typename S>
TensorT<S> linear(const TensorT<S>& input, const TensorT<S>& weight, const TensorT<S>& bias) {
  detail::expect_ndim(input, 2, "linear input");
  detail::expect_ndim(weight, 2, "linear weight");
  const int N = input.dim(0), D = input.dim(1);
  const int WD = weight.dim(0), C = weight.dim(1);
  if (D != WD)
    throw ShapeError(detail::msg("linear: inner dimensions differ, input [.,", D,
                                 "] vs weight [", WD, ",.]"));
  if (bias.ndim() != 1 || bias.dim(0) != C)
    throw ShapeError(detail::msg("linear: bias must be [", C, "], got ",
                                 shape_str(bias.shape())));
  TensorT<S> out({N, C});
  auto x = input.data();
  auto w = weight.data();
  auto b = bias.data();
  auto o = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double acc = static_cast<double>(b[c]);
      for (int d = 0; d < D; ++d)
        acc += static_cast<double>(x[static_cast<std::size_t>(n) * D + d]) *
               static_cast<double>(w[static_cast<std::size_t>(d) * C + c]);
      o[static_cast<std::size_t>(n) * C + c] = static_cast<S>(acc);
    }
  record_op<S>({input, weight, bias}, out, [input, weight, bias, out]() mutable {
    const int N = input.dim(0), D = input.dim(1), C = weight.dim(1);
    auto g = out.grad();
    auto x = input.data();
    auto w = weight.data();
    std::vector<double> gx(input.requires_grad() ? x.size() : 0, 0.0);
    std::vector<double> gw(weight.requires_grad() ? w.size() : 0, 0.0);
    std::vector<double> gb(bias.requires_grad() ? static_cast<std::size_t>(C) : 0, 0.0);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double go = static_cast<double>(g[static_cast<std::size_t>(n) * C + c]);
        if (go == 0.0) continue;
        if (!gb.empty()) gb[static_cast<std::size_t>(c)] += go;
        for (int d = 0; d < D; ++d) {
          if (!gx.empty())
            gx[static_cast<std::size_t>(n) * D + d] +=
                go * static_cast<double>(w[static_cast<std::size_t>(d) * C + c]);
          if (!gw.empty())
            gw[static_cast<std::size_t>(d) * C + c] +=
                go * static_cast<double>(x[static_cast<std::size_t>(n) * D + d]);
        }
      }
    if (!gx.empty()) detail::fold_grad(input.ensure_grad(), gx);
    if (!gw.empty()) detail::fold_grad(weight.ensure_grad(), gw);
    if (!gb.empty()) detail::fold_grad(bias.ensure_grad(), gb);
  });
  return out;
}

/// Mean over the batch of -log softmax(logits)[label], max-subtraction
/// stabilized, 64-bit accumulation.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, std::span<const int> labels) {
  detail::expect_ndim(logits, 2, "cross_entropy logits");
  const int N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw ShapeError(detail::msg("cross_entropy: ", labels.size(), " labels for batch of ", N));
  for (int n = 0; n < N; ++n)
    if (labels[static_cast<std::size_t>(n)] < 0 || labels[static_cast<std::size_t>(n)] >= C)
      throw ValueError(detail::msg("cross_entropy: label ", labels[static_cast<std::size_t>(n)],
                                   " at row ", n, " outside [0,", C, ")"));

  auto x = logits.data();
  std::vector<S> probs(x.size());
  double loss_acc = 0.0;
  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C;
    double m = static_cast<double>(x[base]);
    for (int c = 1; c < C; ++c) m = std::max(m, static_cast<double>(x[base + c]));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(x[base + c]) - m);
    const double log_z = std::log(z) + m;
    for (int c = 0; c < C; ++c)
      probs[base + c] = static_cast<S>(std::exp(static_cast<double>(x[base + c]) - log_z));
    loss_acc += log_z - static_cast<double>(x[base + labels[static_cast<std::size_t>(n)]]);
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(loss_acc / N));

  std::vector<int> labels_copy(labels.begin(), labels.end());
  record_op<S>({logits}, out, [logits, out, probs = std::move(probs),
                               labels = std::move(labels_copy)]() mutable {
    const int N = logits.dim(0), C = logits.dim(1);
    const double g = static_cast<double>(out.grad()[0]) / N;
    auto gx = logits.ensure_grad();
    for (int n = 0; n < N; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * C;
      for (int c = 0; c < C; ++c) {
        const double onehot = (labels[static_cast<std::size_t>(n)] == c) ? 1.0 : 0.0;
        gx[base + c] += static_cast<S>(g * (static_cast<double>(probs[base + c]) - onehot));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Graph-combination ops
// ---------------------------------------------------------------------------

/// out = sum_k weights[k] * xs[k]; the gradient flows to every xs[k] and to
/// the weight vector itself.
template <typename S>
TensorT<S> weighted_sum(const std::vector<TensorT<S>>& xs, const TensorT<S>& weights) {
  if (xs.empty()) throw ValueError("weighted_sum: empty term list");
  if (weights.numel() != xs.size())
    throw ShapeError(detail::msg("weighted_sum: ", xs.size(), " terms but ", weights.numel(),
                                 " weights"));
  for (std::size_t i = 1; i < xs.size(); ++i) detail::expect_same_shape(xs[0], xs[i], "weighted_sum");

  TensorT<S> out(xs[0].shape());
  auto o = out.data();
  auto w = weights.data();
  const std::size_t n = o.size();
  {
    std::vector<double> acc(n, 0.0);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      auto xk = xs[k].data();
      const double wk = static_cast<double>(w[k]);
      for (std::size_t i = 0; i < n; ++i) acc[i] += wk * static_cast<double>(xk[i]);
    }
    for (std::size_t i = 0; i < n; ++i) o[i] = static_cast<S>(acc[i]);
  }

  GradTapeT<S>* tape = active_tape<S>();
  bool needed = weights.requires_grad();
  for (const auto& t : xs) needed = needed || t.requires_grad();
  if (tape != nullptr && needed) {
    out.mark_recorded(tape, tape->epoch());
    tape->record(out, [xs, weights, out]() mutable {
      auto g = out.grad();
      auto w = weights.data();
      for (std::size_t k = 0; k < xs.size(); ++k) {
        if (xs[k].requires_grad()) {
          auto gx = xs[k].ensure_grad();
          const S wk = w[k];
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += wk * g[i];
        }
        if (weights.requires_grad()) {
          auto xk = xs[k].data();
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i)
            acc += static_cast<double>(xk[i]) * static_cast<double>(g[i]);
          weights.ensure_grad()[k] += static_cast<S>(acc);
        }
      }
    });
  }
  return out;
}

/// Plain elementwise sum of equally shaped tensors.
template <typename S>
TensorT<S> sum_tensors(const std::vector<TensorT<S>>& xs) {
  if (xs.empty()) throw ValueError("sum_tensors: empty term list");
  for (std::size_t i = 1; i < xs.size(); ++i) detail::expect_same_shape(xs[0], xs[i], "sum_tensors");
  TensorT<S> out(xs[0].shape());
  auto o = out.data();
  {
    std::vector<double> acc(o.size(), 0.0);
    for (const auto& t : xs) {
      auto x = t.data();
      for (std::size_t i = 0; i < o.size(); ++i) acc[i] += static_cast<double>(x[i]);
    }
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<S>(acc[i]);
  }
  GradTapeT<S>* tape = active_tape<S>();
  bool needed = false;
  for (const auto& t : xs) needed = needed || t.requires_grad();
  if (tape != nullptr && needed) {
    out.mark_recorded(tape, tape->epoch());
    tape->record(out, [xs, out]() mutable {
      auto g = out.grad();
      for (auto& t : xs) {
        if (!t.requires_grad()) continue;
        auto gx = t.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
    });
  }
  return out;
}

/// Concatenate NCHW tensors along channels.
template <typename S>
TensorT<S> concat_channels(const std::vector<TensorT<S>>& xs) {
  if (xs.empty()) throw ValueError("concat_channels: empty list");
  for (const auto& t : xs) detail::expect_ndim(t, 4, "concat_channels");
  const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int C = 0;
  for (const auto& t : xs) {
    if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
      throw ShapeError(detail::msg("concat_channels: mismatched shapes ",
                                   shape_str(xs[0].shape()), " vs ", shape_str(t.shape())));
    C += t.dim(1);
  }
  TensorT<S> out({N, C, H, W});
  auto o = out.data();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    std::size_t c_off = 0;
    for (const auto& t : xs) {
      auto x = t.data();
      const std::size_t tc = static_cast<std::size_t>(t.dim(1));
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n) * tc * hw),
                  tc * hw,
                  o.begin() + static_cast<std::ptrdiff_t>(
                                  (static_cast<std::size_t>(n) * C + c_off) * hw));
      c_off += tc;
    }
  }
  GradTapeT<S>* tape = active_tape<S>();
  bool needed = false;
  for (const auto& t : xs) needed = needed || t.requires_grad();
  if (tape != nullptr && needed) {
    out.mark_recorded(tape, tape->epoch());
    tape->record(out, [xs, out, N, C, hw]() mutable {
      auto g = out.grad();
      for (int n = 0; n < N; ++n) {
        std::size_t c_off = 0;
        for (auto& t : xs) {
          const std::size_t tc = static_cast<std::size_t>(t.dim(1));
          if (t.requires_grad()) {
            auto gx = t.ensure_grad();
            const std::size_t src = (static_cast<std::size_t>(n) * C + c_off) * hw;
            const std::size_t dst = static_cast<std::size_t>(n) * tc * hw;
            for (std::size_t i = 0; i < tc * hw; ++i) gx[dst + i] += g[src + i];
          }
          c_off += tc;
        }
      }
    });
  }
  return out;
}

/// Spatial mean per channel: [N,C,H,W] -> [N,C].
template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& input) {
  detail::expect_ndim(input, 4, "global_avg_pool");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  TensorT<S> out({N, C});
  auto x = input.data();
  auto o = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(x[base + i]);
      o[static_cast<std::size_t>(n) * C + c] = static_cast<S>(acc / static_cast<double>(hw));
    }
  record_op<S>({input}, out, [input, out, hw]() mutable {
    const int N = input.dim(0), C = input.dim(1);
    auto g = out.grad();
    auto gx = input.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const S go = static_cast<S>(g[static_cast<std::size_t>(n) * C + c] / static_cast<S>(hw));
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) gx[base + i] += go;
      }
  });
  return out;
}

/// Keep every second pixel (offset 0): [N,C,H,W] -> [N,C,H/2,W/2].
/// Used as the stride-2 identity on reduction edges.
template <typename S>
TensorT<S> subsample2(const TensorT<S>& input) {
  detail::expect_ndim(input, 4, "subsample2");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError(detail::msg("subsample2: spatial dims must be even, got ", H, "x", W));
  const int OH = H / 2, OW = W / 2;
  TensorT<S> out({N, C, OH, OW});
  auto x = input.data();
  auto o = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox)
          o[((static_cast<std::size_t>(n) * C + c) * OH + oy) * OW + ox] =
              x[((static_cast<std::size_t>(n) * C + c) * H + 2 * oy) * W + 2 * ox];
  record_op<S>({input}, out, [input, out]() mutable {
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int OH = H / 2, OW = W / 2;
    auto g = out.grad();
    auto gx = input.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox)
            gx[((static_cast<std::size_t>(n) * C + c) * H + 2 * oy) * W + 2 * ox] +=
                g[((static_cast<std::size_t>(n) * C + c) * OH + oy) * OW + ox];
  });
  return out;
}

}  // namespace fmnas
