#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ilmcam/graph.hpp"
#include "ilmcam/tensor.hpp"

// Neural-network primitives recorded on a Graph. Every op computes its
// forward pass eagerly and registers a backward rule that only touches
// inputs which require a gradient.

namespace ilmcam {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

inline void require_dim(std::size_t got, std::size_t want, const char* op, const std::string& what) {
  if (got != want) {
    throw ShapeError(std::string(op) + ": " + what + " is " + std::to_string(got) + ", expected " +
                     std::to_string(want));
  }
}

// C[m x n] += A[m x k] * B[k x n], all row-major.
template <typename T>
inline void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
inline void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// cols[(c*kh + i)*kw + j][oh*out_w + ow]
template <typename T>
inline void im2col(const ConvGeometry& g, const T* img, T* cols) {
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * g.positions();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) &&
                                iw < static_cast<long>(g.width);
            row[oh * g.out_w + ow] = inside ? img[(c * g.height + ih) * g.width + iw] : T(0);
          }
        }
      }
}

template <typename T>
inline void col2im_add(const ConvGeometry& g, const T* cols, T* img) {
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * g.positions();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            img[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
}

inline std::size_t pooled_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                 const char* op, const char* axis) {
  if (stride == 0) throw ConfigError(std::string(op) + ": stride must be positive");
  if (k == 0 || k > in + 2 * pad) {
    throw ShapeError(std::string(op) + ": kernel extent " + std::to_string(k) + " exceeds padded " + axis +
                     " extent " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

/// 2-D convolution with explicit zero padding. x: [N,C,H,W], weight:
/// [K,C,kh,kw], bias: [K] (optional).
template <typename T>
Var conv2d(BasicGraph<T>& g, Var x, Var weight, std::optional<Var> bias, std::size_t stride = 1,
                  std::size_t padding = 0) {
  const Shape& xs = g.shape(x);
  const Shape& ws = g.shape(weight);
  detail::require_rank(xs, 4, "conv2d", "input");
  detail::require_rank(ws, 4, "conv2d", "weight");
  detail::require_dim(ws[1], xs[1], "conv2d", "weight input-channel dimension (dim 1)");
  if (bias) {
    detail::require_rank(g.shape(*bias), 1, "conv2d", "bias");
    detail::require_dim(g.shape(*bias)[0], ws[0], "conv2d", "bias length (dim 0)");
  }
  detail::ConvGeometry geo{xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding, 0, 0};
  geo.out_h = detail::pooled_extent(xs[2], ws[2], stride, padding, "conv2d", "height (dim 2)");
  geo.out_w = detail::pooled_extent(xs[3], ws[3], stride, padding, "conv2d", "width (dim 3)");
  const std::size_t n_batch = xs[0], k_out = ws[0], patch = geo.patch(), pos = geo.positions();

  BasicTensor<T> out({n_batch, k_out, geo.out_h, geo.out_w});
  {
    const BasicTensor<T>& xv = g.value(x);
    const BasicTensor<T>& wv = g.value(weight);
    std::vector<T> cols(patch * pos);
    for (std::size_t n = 0; n < n_batch; ++n) {
      detail::im2col(geo, xv.data().data() + n * geo.channels * geo.height * geo.width, cols.data());
      T* o = out.data().data() + n * k_out * pos;
      if (bias) {
        const BasicTensor<T>& bv = g.value(*bias);
        for (std::size_t k = 0; k < k_out; ++k) std::fill(o + k * pos, o + (k + 1) * pos, bv[k]);
      }
      detail::gemm_acc(k_out, pos, patch, wv.data().data(), cols.data(), o);
    }
  }

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const std::size_t out_id = g.size();
  return g.record(std::move(out), inputs, [=](BasicGraph<T>& gr) {
    const Var o{out_id};
    const auto dout = gr.grad(o);
    const T* xd = gr.value(x).data().data();
    const T* wd = gr.value(weight).data().data();
    const bool need_x = gr.requires_grad(x), need_w = gr.requires_grad(weight);
    const bool need_b = bias && gr.requires_grad(*bias);
    std::vector<T> cols, cols_t, dcols, w_t;
    if (need_w) {
      cols.resize(patch * pos);
      cols_t.resize(patch * pos);
    }
    if (need_x) {
      dcols.resize(patch * pos);
      w_t.resize(patch * k_out);
      detail::transpose(k_out, patch, wd, w_t.data());
    }
    const std::size_t in_stride = geo.channels * geo.height * geo.width;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* dn = dout.data() + n * k_out * pos;
      if (need_w) {
        detail::im2col(geo, xd + n * in_stride, cols.data());
        detail::transpose(patch, pos, cols.data(), cols_t.data());
        detail::gemm_acc(k_out, patch, pos, dn, cols_t.data(), gr.grad(weight).data());
      }
      if (need_b) {
        auto db = gr.grad(*bias);
        for (std::size_t k = 0; k < k_out; ++k) {
          T s = T(0);
          for (std::size_t p = 0; p < pos; ++p) s += dn[k * pos + p];
          db[k] += s;
        }
      }
      if (need_x) {
        std::fill(dcols.begin(), dcols.end(), T(0));
        detail::gemm_acc(patch, pos, k_out, w_t.data(), dn, dcols.data());
        detail::col2im_add(geo, dcols.data(), gr.grad(x).data() + n * in_stride);
      }
    }
  });
}

/// Per-channel spatial convolution. weight: [C,1,kh,kw]; no bias.
template <typename T>
Var depthwise_conv2d(BasicGraph<T>& g, Var x, Var weight, std::size_t stride = 1, std::size_t padding = 0) {
  const Shape& xs = g.shape(x);
  const Shape& ws = g.shape(weight);
  detail::require_rank(xs, 4, "depthwise_conv2d", "input");
  detail::require_rank(ws, 4, "depthwise_conv2d", "weight");
  detail::require_dim(ws[0], xs[1], "depthwise_conv2d", "depthwise kernel count (dim 0)");
  detail::require_dim(ws[1], 1, "depthwise_conv2d", "depthwise kernel depth (dim 1)");
  const std::size_t n_batch = xs[0], chans = xs[1], h = xs[2], w = xs[3], kh = ws[2], kw = ws[3];
  const std::size_t oh = detail::pooled_extent(h, kh, stride, padding, "depthwise_conv2d", "height (dim 2)");
  const std::size_t ow = detail::pooled_extent(w, kw, stride, padding, "depthwise_conv2d", "width (dim 3)");

  // Calls fn(out_index, in_index, weight_index) for every in-bounds tap.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < n_batch; ++n)
      for (std::size_t c = 0; c < chans; ++c)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const std::size_t oi = ((n * chans + c) * oh + y) * ow + xo;
            for (std::size_t i = 0; i < kh; ++i) {
              const long iy = static_cast<long>(y * stride + i) - static_cast<long>(padding);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t j = 0; j < kw; ++j) {
                const long ix = static_cast<long>(xo * stride + j) - static_cast<long>(padding);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                fn(oi, ((n * chans + c) * h + iy) * w + ix, (c * kh + i) * kw + j);
              }
            }
          }
  };

  BasicTensor<T> out({n_batch, chans, oh, ow});
  {
    const auto xd = g.value(x).data();
    const auto wd = g.value(weight).data();
    auto od = out.data();
    for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) { od[oi] += wd[wi] * xd[ii]; });
  }
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x, weight}, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    const auto xd = gr.value(x).data();
    const auto wd = gr.value(weight).data();
    if (gr.requires_grad(x)) {
      auto dx = gr.grad(x);
      for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) { dx[ii] += wd[wi] * dout[oi]; });
    }
    if (gr.requires_grad(weight)) {
      auto dw = gr.grad(weight);
      for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) { dw[wi] += xd[ii] * dout[oi]; });
    }
  });
}

/// Depthwise spatial convolution followed by a 1x1 cross-channel convolution.
/// depthwise: [C,1,k,k], pointwise: [K,C,1,1], bias: [K] (optional).
template <typename T>
Var depthwise_separable_conv2d(BasicGraph<T>& g, Var x, Var depthwise, Var pointwise, std::optional<Var> bias,
                                      std::size_t padding) {
  const Shape& xs = g.shape(x);
  detail::require_rank(xs, 4, "depthwise_separable_conv2d", "input");
  detail::require_rank(g.shape(depthwise), 4, "depthwise_separable_conv2d", "depthwise weight");
  detail::require_dim(g.shape(depthwise)[0], xs[1], "depthwise_separable_conv2d",
                      "depthwise kernel count (dim 0)");
  const Shape& ps = g.shape(pointwise);
  detail::require_rank(ps, 4, "depthwise_separable_conv2d", "pointwise weight");
  if (ps[2] != 1 || ps[3] != 1) {
    throw ShapeError("depthwise_separable_conv2d: pointwise kernel must be 1x1, got " + shape_str(ps));
  }
  Var spatial = depthwise_conv2d(g, x, depthwise, 1, padding);
  return conv2d(g, spatial, pointwise, bias, 1, 0);
}

/// Max pooling; padded cells never win. Ties go to the first cell in
/// row-major window order.
template <typename T>
Var maxpool2d(BasicGraph<T>& g, Var x, std::size_t k, std::size_t stride, std::size_t padding = 0) {
  const Shape& xs = g.shape(x);
  detail::require_rank(xs, 4, "maxpool2d", "input");
  if (padding >= k) throw ConfigError("maxpool2d: padding must be smaller than the window");
  const std::size_t n_batch = xs[0], chans = xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = detail::pooled_extent(h, k, stride, padding, "maxpool2d", "height (dim 2)");
  const std::size_t ow = detail::pooled_extent(w, k, stride, padding, "maxpool2d", "width (dim 3)");
  BasicTensor<T> out({n_batch, chans, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  const auto xd = g.value(x).data();
  auto od = out.data();
  for (std::size_t nc = 0; nc < n_batch * chans; ++nc)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        bool found = false;
        for (std::size_t i = 0; i < k; ++i) {
          const long iy = static_cast<long>(y * stride + i) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const long ix = static_cast<long>(xo * stride + j) - static_cast<long>(padding);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const std::size_t ii = (nc * h + iy) * w + ix;
            if (!found || xd[ii] > best) {
              best = xd[ii];
              best_i = ii;
              found = true;
            }
          }
        }
        const std::size_t oi = (nc * oh + y) * ow + xo;
        od[oi] = best;
        argmax[oi] = best_i;
      }
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x}, [=, argmax = std::move(argmax)](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    auto dx = gr.grad(x);
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dout[i];
  });
}

/// Mean over the spatial extents: [N,C,H,W] -> [N,C].
template <typename T>
Var global_avg_pool(BasicGraph<T>& g, Var x) {
  const Shape& xs = g.shape(x);
  detail::require_rank(xs, 4, "global_avg_pool", "input");
  const std::size_t nc = xs[0] * xs[1], hw = xs[2] * xs[3];
  BasicTensor<T> out({xs[0], xs[1]});
  const auto xd = g.value(x).data();
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += xd[i * hw + p];
    out[i] = static_cast<T>(s / static_cast<double>(hw));
  }
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x}, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    auto dx = gr.grad(x);
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t p = 0; p < hw; ++p) dx[i * hw + p] += dout[i] * inv;
  });
}

/// Affine map x: [N,F], weight: [O,F], bias: [O] (optional) -> [N,O].
template <typename T>
Var fully_connected(BasicGraph<T>& g, Var x, Var weight, std::optional<Var> bias) {
  const Shape& xs = g.shape(x);
  const Shape& ws = g.shape(weight);
  detail::require_rank(xs, 2, "fully_connected", "input");
  detail::require_rank(ws, 2, "fully_connected", "weight");
  detail::require_dim(ws[1], xs[1], "fully_connected", "weight input dimension (dim 1)");
  if (bias) {
    detail::require_rank(g.shape(*bias), 1, "fully_connected", "bias");
    detail::require_dim(g.shape(*bias)[0], ws[0], "fully_connected", "bias length (dim 0)");
  }
  const std::size_t n_batch = xs[0], fin = xs[1], fout = ws[0];
  BasicTensor<T> out({n_batch, fout});
  {
    const auto xd = g.value(x).data();
    const auto wd = g.value(weight).data();
    for (std::size_t n = 0; n < n_batch; ++n)
      for (std::size_t o = 0; o < fout; ++o) {
        T s = bias ? g.value(*bias)[o] : T(0);
        for (std::size_t f = 0; f < fin; ++f) s += wd[o * fin + f] * xd[n * fin + f];
        out[n * fout + o] = s;
      }
  }
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const std::size_t out_id = g.size();
  return g.record(std::move(out), inputs, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    const auto xd = gr.value(x).data();
    const auto wd = gr.value(weight).data();
    if (gr.requires_grad(x)) {
      auto dx = gr.grad(x);
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < fout; ++o) {
          const T d = dout[n * fout + o];
          for (std::size_t f = 0; f < fin; ++f) dx[n * fin + f] += d * wd[o * fin + f];
        }
    }
    if (gr.requires_grad(weight)) {
      auto dw = gr.grad(weight);
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < fout; ++o) {
          const T d = dout[n * fout + o];
          for (std::size_t f = 0; f < fin; ++f) dw[o * fin + f] += d * xd[n * fin + f];
        }
    }
    if (bias && gr.requires_grad(*bias)) {
      auto db = gr.grad(*bias);
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < fout; ++o) db[o] += dout[n * fout + o];
    }
  });
}

template <typename T>
Var relu(BasicGraph<T>& g, Var x) {
  BasicTensor<T> out = g.value(x);
  out.drop_grad();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x}, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    const auto xd = gr.value(x).data();
    auto dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xd[i] > T(0)) dx[i] += dout[i];
  });
}

template <typename T>
Var sigmoid(BasicGraph<T>& g, Var x) {
  BasicTensor<T> out = g.value(x);
  out.drop_grad();
  for (T& v : out.data()) v = detail::stable_sigmoid(v);
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x}, [=](BasicGraph<T>& gr) {
    const Var o{out_id};
    const auto dout = gr.grad(o);
    const auto y = gr.value(o).data();
    auto dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i] * y[i] * (T(1) - y[i]);
  });
}

/// Row-wise softmax over [N,O].
template <typename T>
Var softmax(BasicGraph<T>& g, Var x) {
  const Shape& xs = g.shape(x);
  detail::require_rank(xs, 2, "softmax", "input");
  const std::size_t rows = xs[0], cols = xs[1];
  BasicTensor<T> out({rows, cols});
  const auto xd = g.value(x).data();
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = xd[r * cols];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xd[r * cols + c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(static_cast<double>(xd[r * cols + c] - mx));
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = static_cast<T>(std::exp(static_cast<double>(xd[r * cols + c] - mx)) / total);
  }
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x}, [=](BasicGraph<T>& gr) {
    const Var o{out_id};
    const auto dout = gr.grad(o);
    const auto y = gr.value(o).data();
    auto dx = gr.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(dout[r * cols + c]) * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        dx[r * cols + c] += y[r * cols + c] * (dout[r * cols + c] - static_cast<T>(dot));
    }
  });
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean negative log-likelihood of class-probability rows; probabilities
/// are clamped at 1e-12 before the log.
template <typename T>
Var cross_entropy_loss(BasicGraph<T>& g, Var probs, std::span<const std::size_t> labels) {
  const Shape& ps = g.shape(probs);
  detail::require_rank(ps, 2, "cross_entropy_loss", "probabilities");
  detail::require_dim(labels.size(), ps[0], "cross_entropy_loss", "label count");
  const std::size_t rows = ps[0], cols = ps[1];
  for (std::size_t l : labels) {
    if (l >= cols) {
      throw std::out_of_range("cross_entropy_loss: label " + std::to_string(l) + " outside [0," +
                              std::to_string(cols) + ")");
    }
  }
  const auto pd = g.value(probs).data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) total -= std::log(std::max(static_cast<double>(pd[r * cols + labels[r]]), kProbabilityFloor));
  BasicTensor<T> out({1}, static_cast<T>(total / static_cast<double>(rows)));
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {probs}, [=, lab = std::move(lab)](BasicGraph<T>& gr) {
    const T up = gr.grad(Var{out_id})[0];
    const auto p = gr.value(probs).data();
    auto dp = gr.grad(probs);
    for (std::size_t r = 0; r < rows; ++r) {
      const T v = p[r * cols + lab[r]];
      if (static_cast<double>(v) > kProbabilityFloor) dp[r * cols + lab[r]] -= up / (static_cast<T>(rows) * v);
    }
  });
}

template <typename T>
Var add(BasicGraph<T>& g, Var a, Var b) {
  if (g.shape(a) != g.shape(b)) {
    throw ShapeError("add: shapes " + shape_str(g.shape(a)) + " and " + shape_str(g.shape(b)) + " differ");
  }
  BasicTensor<T> out = g.value(a);
  out.drop_grad();
  const auto bd = g.value(b).data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {a, b}, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    for (Var in : {a, b}) {
      if (!gr.requires_grad(in)) continue;
      auto d = gr.grad(in);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dout[i];
    }
  });
}

/// Concatenates [N,C_i,H,W] maps along the channel dimension.
template <typename T>
Var concat_channels(BasicGraph<T>& g, std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape first = g.shape(parts[0]);
  detail::require_rank(first, 4, "concat_channels", "input");
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (Var p : parts) {
    const Shape& s = g.shape(p);
    detail::require_rank(s, 4, "concat_channels", "input");
    detail::require_dim(s[0], first[0], "concat_channels", "batch (dim 0)");
    detail::require_dim(s[2], first[2], "concat_channels", "height (dim 2)");
    detail::require_dim(s[3], first[3], "concat_channels", "width (dim 3)");
    chans.push_back(s[1]);
    total += s[1];
  }
  const std::size_t n_batch = first[0], hw = first[2] * first[3];
  BasicTensor<T> out({n_batch, total, first[2], first[3]});
  auto od = out.data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto pd = g.value(parts[k]).data();
      std::copy_n(pd.begin() + n * chans[k] * hw, chans[k] * hw, od.begin() + (n * total + offset) * hw);
      offset += chans[k];
    }
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  const std::size_t out_id = g.size();
  return g.record(std::move(out), parts, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    for (std::size_t n = 0; n < n_batch; ++n) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (gr.requires_grad(ins[k])) {
          auto d = gr.grad(ins[k]);
          const std::size_t len = chans[k] * hw;
          for (std::size_t i = 0; i < len; ++i) d[n * len + i] += dout[(n * total + offset) * hw + i];
        }
        offset += chans[k];
      }
    }
  });
}

/// Multiplies channel c of sample n by scale[n,c]. x: [N,C,H,W], scale: [N,C].
template <typename T>
Var scale_channels(BasicGraph<T>& g, Var x, Var scale) {
  const Shape& xs = g.shape(x);
  const Shape& ss = g.shape(scale);
  detail::require_rank(xs, 4, "scale_channels", "input");
  detail::require_rank(ss, 2, "scale_channels", "scale");
  detail::require_dim(ss[0], xs[0], "scale_channels", "scale batch (dim 0)");
  detail::require_dim(ss[1], xs[1], "scale_channels", "scale channels (dim 1)");
  const std::size_t nc = xs[0] * xs[1], hw = xs[2] * xs[3];
  BasicTensor<T> out = g.value(x);
  out.drop_grad();
  const auto sd = g.value(scale).data();
  auto od = out.data();
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t p = 0; p < hw; ++p) od[i * hw + p] *= sd[i];
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x, scale}, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    const auto xd = gr.value(x).data();
    const auto s = gr.value(scale).data();
    if (gr.requires_grad(x)) {
      auto dx = gr.grad(x);
      for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t p = 0; p < hw; ++p) dx[i * hw + p] += dout[i * hw + p] * s[i];
    }
    if (gr.requires_grad(scale)) {
      auto ds = gr.grad(scale);
      for (std::size_t i = 0; i < nc; ++i) {
        T acc = T(0);
        for (std::size_t p = 0; p < hw; ++p) acc += dout[i * hw + p] * xd[i * hw + p];
        ds[i] += acc;
      }
    }
  });
}

/// 1-D cross-correlation along the channel axis with zero "same" padding.
/// x: [N,C], kernel: [k] with k odd.
template <typename T>
Var channel_conv1d(BasicGraph<T>& g, Var x, Var kernel) {
  const Shape& xs = g.shape(x);
  detail::require_rank(xs, 2, "channel_conv1d", "input");
  detail::require_rank(g.shape(kernel), 1, "channel_conv1d", "kernel");
  const std::size_t n_batch = xs[0], chans = xs[1], k = g.shape(kernel)[0];
  if (k % 2 == 0) throw ConfigError("channel_conv1d: kernel size must be odd, got " + std::to_string(k));
  const long half = static_cast<long>(k / 2);
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < n_batch; ++n)
      for (std::size_t c = 0; c < chans; ++c)
        for (std::size_t j = 0; j < k; ++j) {
          const long src = static_cast<long>(c) + static_cast<long>(j) - half;
          if (src < 0 || src >= static_cast<long>(chans)) continue;
          fn(n * chans + c, n * chans + static_cast<std::size_t>(src), j);
        }
  };
  BasicTensor<T> out({n_batch, chans});
  {
    const auto xd = g.value(x).data();
    const auto kd = g.value(kernel).data();
    auto od = out.data();
    for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t j) { od[oi] += kd[j] * xd[ii]; });
  }
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x, kernel}, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    const auto xd = gr.value(x).data();
    const auto kd = gr.value(kernel).data();
    if (gr.requires_grad(x)) {
      auto dx = gr.grad(x);
      for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t j) { dx[ii] += kd[j] * dout[oi]; });
    }
    if (gr.requires_grad(kernel)) {
      auto dk = gr.grad(kernel);
      for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t j) { dk[j] += xd[ii] * dout[oi]; });
    }
  });
}

/// [N, ...] -> [N, prod(rest)].
template <typename T>
Var flatten(BasicGraph<T>& g, Var x) {
  const Shape& xs = g.shape(x);
  if (xs.empty()) throw ShapeError("flatten: rank-0 input");
  const std::size_t rest = g.value(x).numel() / xs[0];
  BasicTensor<T> out = g.value(x).reshaped({xs[0], rest});
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x}, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    auto dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i];
  });
}

/// Sum of all elements as a [1] tensor.
template <typename T>
Var sum(BasicGraph<T>& g, Var x) {
  double s = 0.0;
  for (T v : g.value(x).data()) s += v;
  const std::size_t out_id = g.size();
  return g.record(BasicTensor<T>({1}, static_cast<T>(s)), {x}, [=](BasicGraph<T>& gr) {
    const T up = gr.grad(Var{out_id})[0];
    auto dx = gr.grad(x);
    for (T& d : dx) d += up;
  });
}

}  // namespace ilmcam
