#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ilmcam/graph.hpp"
#include "ilmcam/ops.hpp"
#include "ilmcam/tensor.hpp"

namespace ilmcam {

/// Attention gate families. Identity is the neutral gate used to check
/// that blocks are interchangeable without changing shapes.
enum class AttentionKind { SimAM, SE, ECA, Identity };

inline std::string_view to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::SimAM: return "simam";
    case AttentionKind::SE: return "se";
    case AttentionKind::ECA: return "eca";
    case AttentionKind::Identity: return "identity";
  }
  return "?";
}

inline AttentionKind attention_kind_from_string(std::string_view s) {
  if (s == "simam") return AttentionKind::SimAM;
  if (s == "se") return AttentionKind::SE;
  if (s == "eca") return AttentionKind::ECA;
  if (s == "identity") return AttentionKind::Identity;
  throw ConfigError("unknown attention kind '" + std::string(s) + "'");
}

struct SimAMConfig {
  double lambda = 1e-4;

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("SimAM lambda must be positive");
  }
};

struct SEConfig {
  std::size_t reduction_ratio = 4;

  /// Hidden width C/r of the bottleneck.
  std::size_t hidden(std::size_t channels) const {
    if (reduction_ratio == 0) throw ConfigError("SE reduction ratio must be positive");
    if (channels % reduction_ratio != 0) {
      throw ConfigError("SE reduction ratio " + std::to_string(reduction_ratio) + " does not divide " +
                        std::to_string(channels) + " channels");
    }
    return channels / reduction_ratio;
  }
};

struct ECAConfig {
  std::size_t kernel_size = 3;

  void validate(std::size_t channels) const {
    if (kernel_size == 0 || kernel_size % 2 == 0) {
      throw ConfigError("ECA kernel size must be odd, got " + std::to_string(kernel_size));
    }
    if (kernel_size > channels) {
      throw ConfigError("ECA kernel size " + std::to_string(kernel_size) + " exceeds " +
                        std::to_string(channels) + " channels");
    }
  }
};

/// Per-neuron minimal energies e*_t, same extents as the feature map.
struct EnergyMap {
  Tensor energy;
};

namespace detail {

inline void require_simam_extent(const Shape& s) {
  require_rank(s, 4, "simam", "input");
  if (s[2] * s[3] < 2) {
    throw ShapeError("simam: spatial map " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " has fewer than 2 neurons; variance is undefined");
  }
}

// Mean and population variance over one H*W plane, in double.
template <typename T>
inline std::pair<double, double> plane_moments(const T* p, std::size_t m) {
  double mu = 0.0;
  for (std::size_t i = 0; i < m; ++i) mu += p[i];
  mu /= static_cast<double>(m);
  double var = 0.0;
  for (std::size_t i = 0; i < m; ++i) var += (p[i] - mu) * (p[i] - mu);
  return {mu, var / static_cast<double>(m)};
}

}  // namespace detail

/// e*_t = 4(var + lambda) / ((t - mu)^2 + 2 var + 2 lambda), with the mean
/// and population variance taken over all H*W neurons of each channel.
inline EnergyMap simam_energy(const Tensor& x, const SimAMConfig& cfg = {}) {
  cfg.validate();
  detail::require_simam_extent(x.shape());
  const std::size_t m = x.dim(2) * x.dim(3), planes = x.dim(0) * x.dim(1);
  Tensor e(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const float* in = x.data().data() + p * m;
    const auto [mu, var] = detail::plane_moments(in, m);
    for (std::size_t i = 0; i < m; ++i) {
      const double d = in[i] - mu;
      e[p * m + i] = static_cast<float>(4.0 * (var + cfg.lambda) / (d * d + 2.0 * var + 2.0 * cfg.lambda));
    }
  }
  return {std::move(e)};
}

/// Parameter-free spatial attention: out = sigmoid(1/e*) * x, elementwise.
///
/// 1/e* simplifies to d^2 / (4(var + lambda)) + 1/2 with d = t - mu, which
/// is what the forward and the hand-derived backward below use.
template <typename T>
Var simam_forward(BasicGraph<T>& g, Var x, const SimAMConfig& cfg = {}) {
  cfg.validate();
  detail::require_simam_extent(g.shape(x));
  const Shape xs = g.shape(x);
  const std::size_t m = xs[2] * xs[3], planes = xs[0] * xs[1];
  const double lambda = cfg.lambda;
  BasicTensor<T> out(xs);
  {
    const auto xd = g.value(x).data();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* in = xd.data() + p * m;
      const auto [mu, var] = detail::plane_moments(in, m);
      const double denom = 4.0 * (var + lambda);
      for (std::size_t i = 0; i < m; ++i) {
        const double d = in[i] - mu;
        const T gate = detail::stable_sigmoid(static_cast<T>(d * d / denom + 0.5));
        out[p * m + i] = gate * in[i];
      }
    }
  }
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {x}, [=](BasicGraph<T>& gr) {
    const auto dout = gr.grad(Var{out_id});
    const auto xd = gr.value(x).data();
    auto dx = gr.grad(x);
    std::vector<double> dev(m), gate(m), b(m);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* in = xd.data() + p * m;
      const T* go = dout.data() + p * m;
      const auto [mu, var] = detail::plane_moments(in, m);
      const double denom = 4.0 * (var + lambda);
      // y_i = d_i^2 / D; a_i = dL/dy_i; A = sum a_i d_i^2.
      double big_a = 0.0, mean_b = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        dev[i] = in[i] - mu;
        const double y = dev[i] * dev[i] / denom + 0.5;
        gate[i] = 1.0 / (1.0 + std::exp(-y));
        const double a = go[i] * in[i] * gate[i] * (1.0 - gate[i]);
        big_a += a * dev[i] * dev[i];
        b[i] = 2.0 * a * dev[i] / denom;
        mean_b += b[i];
      }
      mean_b /= static_cast<double>(m);
      const double var_term = 8.0 * big_a / (static_cast<double>(m) * denom * denom);
      for (std::size_t i = 0; i < m; ++i) {
        dx[p * m + i] += static_cast<T>(go[i] * gate[i] + b[i] - mean_b - var_term * dev[i]);
      }
    }
  });
}

/// Squeeze-and-excitation: s = sigmoid(fc2 . relu(fc1 . GAP(x))), out_c = s_c x_c.
/// fc1: [C/r, C], fc2: [C, C/r], both without bias.
template <typename T>
Var se_forward(BasicGraph<T>& g, Var x, Var fc1, Var fc2, const SEConfig& cfg = {}) {
  const Shape& xs = g.shape(x);
  detail::require_rank(xs, 4, "se_forward", "input");
  const std::size_t c = xs[1], hidden = cfg.hidden(c);
  detail::require_rank(g.shape(fc1), 2, "se_forward", "fc1");
  detail::require_rank(g.shape(fc2), 2, "se_forward", "fc2");
  detail::require_dim(g.shape(fc1)[0], hidden, "se_forward", "fc1 rows (dim 0)");
  detail::require_dim(g.shape(fc2)[0], c, "se_forward", "fc2 rows (dim 0)");
  Var squeezed = global_avg_pool(g, x);
  Var excited = relu(g, fully_connected(g, squeezed, fc1, std::nullopt));
  Var gate = sigmoid(g, fully_connected(g, excited, fc2, std::nullopt));
  return scale_channels(g, x, gate);
}

/// Efficient channel attention: a = sigmoid(conv1d(GAP(x), kernel)), out_c = a_c x_c.
template <typename T>
Var eca_forward(BasicGraph<T>& g, Var x, Var kernel, const ECAConfig& cfg = {}) {
  const Shape& xs = g.shape(x);
  detail::require_rank(xs, 4, "eca_forward", "input");
  cfg.validate(xs[1]);
  detail::require_rank(g.shape(kernel), 1, "eca_forward", "kernel");
  detail::require_dim(g.shape(kernel)[0], cfg.kernel_size, "eca_forward", "kernel length (dim 0)");
  Var pooled = global_avg_pool(g, x);
  Var gate = sigmoid(g, channel_conv1d(g, pooled, kernel));
  return scale_channels(g, x, gate);
}

}  // namespace ilmcam
