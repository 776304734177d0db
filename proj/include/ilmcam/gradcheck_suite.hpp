#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ilmcam/attention.hpp"
#include "ilmcam/gradcheck.hpp"
#include "ilmcam/ops.hpp"

namespace ilmcam {

namespace detail {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, static_cast<float>(scale));
  for (float& v : t.data()) v = dist(rng);
  return t;
}

// Values at least `gap` away from zero, so relu never sees a kink within h.
inline Tensor away_from_zero(Shape shape, std::mt19937_64& rng, float gap = 0.05f) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> mag(gap, 1.5f);
  std::bernoulli_distribution sign(0.5);
  for (float& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Distinct values spaced 0.01 apart, shuffled, so pooling windows never tie.
inline Tensor distinct_values(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::vector<float> v(t.numel());
  std::iota(v.begin(), v.end(), 0.0f);
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i] * 0.01f - 0.5f;
  return t;
}

// Smallest |fc1 . GAP(x)| over samples and hidden units.
inline double se_hidden_margin(const Tensor& x, const Tensor& fc1) {
  const std::size_t n = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3), hidden = fc1.dim(0);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < hidden; ++j) {
      double z = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (std::size_t p = 0; p < m; ++p) mean += x[(s * c + ch) * m + p];
        z += fc1[j * c + ch] * mean / static_cast<double>(m);
      }
      margin = std::min(margin, std::abs(z));
    }
  }
  return margin;
}

}  // namespace detail

/// Finite-difference checks for every differentiable op and the three
/// attention blocks, `instances` seeded cases each.
inline std::vector<GradCheckReport> gradcheck_suite(std::uint64_t seed, std::size_t instances = 20,
                                                    double h = 1e-3, double tol = 1e-3) {
  using detail::away_from_zero;
  using detail::distinct_values;
  using detail::random_tensor;
  using detail::se_hidden_margin;
  static const std::vector<std::size_t> kLabels{1, 0, 2};

  std::vector<GradCheckReport> reports;
  std::uint64_t case_index = 0;
  auto run = [&](std::string name, auto fn, auto make) {
    GradCheckReport total;
    total.name = name;
    total.instances = 0;
    for (std::size_t i = 0; i < instances; ++i) {
      const std::uint64_t s = seed * 1000003ull + case_index * 7919ull + i;
      std::mt19937_64 rng(s);
      const std::vector<Tensor> inputs = make(rng);
      total.merge(finite_diff_check(fn, inputs, s, h, tol, name));
    }
    reports.push_back(std::move(total));
    ++case_index;
  };

  run("conv2d",
      [](auto& g, std::span<const Var> v) { return conv2d(g, v[0], v[1], v[2], 1, 0); },
      [](auto& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 8, 8}, rng), random_tensor({4, 3, 3, 3}, rng, 0.5),
                                   random_tensor({4}, rng)};
      });
  run("conv2d_stride2_pad1",
      [](auto& g, std::span<const Var> v) { return conv2d(g, v[0], v[1], v[2], 2, 1); },
      [](auto& rng) {
        return std::vector<Tensor>{random_tensor({1, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng, 0.5),
                                   random_tensor({3}, rng)};
      });
  run("depthwise_separable_conv2d",
      [](auto& g, std::span<const Var> v) { return depthwise_separable_conv2d(g, v[0], v[1], v[2], v[3], 1); },
      [](auto& rng) {
        return std::vector<Tensor>{random_tensor({1, 2, 4, 4}, rng), random_tensor({2, 1, 3, 3}, rng, 0.5),
                                   random_tensor({3, 2, 1, 1}, rng, 0.5), random_tensor({3}, rng)};
      });
  run("maxpool2d",
      [](auto& g, std::span<const Var> v) { return maxpool2d(g, v[0], 2, 2); },
      [](auto& rng) { return std::vector<Tensor>{distinct_values({1, 1, 4, 4}, rng)}; });
  run("maxpool2d_3x3_pad1",
      [](auto& g, std::span<const Var> v) { return maxpool2d(g, v[0], 3, 1, 1); },
      [](auto& rng) { return std::vector<Tensor>{distinct_values({1, 2, 4, 4}, rng)}; });
  run("global_avg_pool",
      [](auto& g, std::span<const Var> v) { return global_avg_pool(g, v[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({2, 3, 4, 5}, rng)}; });
  run("fully_connected",
      [](auto& g, std::span<const Var> v) { return fully_connected(g, v[0], v[1], v[2]); },
      [](auto& rng) {
        return std::vector<Tensor>{random_tensor({3, 5}, rng), random_tensor({4, 5}, rng, 0.5),
                                   random_tensor({4}, rng)};
      });
  run("relu",
      [](auto& g, std::span<const Var> v) { return relu(g, v[0]); },
      [](auto& rng) { return std::vector<Tensor>{away_from_zero({2, 3, 3, 3}, rng)}; });
  run("sigmoid",
      [](auto& g, std::span<const Var> v) { return sigmoid(g, v[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({2, 7}, rng, 2.0)}; });
  run("softmax",
      [](auto& g, std::span<const Var> v) { return softmax(g, v[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({3, 4}, rng, 2.0)}; });
  run("softmax_cross_entropy",
      [](auto& g, std::span<const Var> v) { return cross_entropy_loss(g, softmax(g, v[0]), kLabels); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({3, 4}, rng, 2.0)}; });
  run("add",
      [](auto& g, std::span<const Var> v) { return add(g, v[0], v[1]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}; });
  run("concat_channels",
      [](auto& g, std::span<const Var> v) { return concat_channels(g, v); },
      [](auto& rng) {
        return std::vector<Tensor>{random_tensor({2, 1, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng)};
      });
  run("scale_channels",
      [](auto& g, std::span<const Var> v) { return scale_channels(g, v[0], v[1]); },
      [](auto& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 3}, rng)};
      });
  run("channel_conv1d",
      [](auto& g, std::span<const Var> v) { return channel_conv1d(g, v[0], v[1]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({2, 6}, rng), random_tensor({3}, rng)}; });
  run("simam",
      [](auto& g, std::span<const Var> v) { return simam_forward(g, v[0]); },
      [](auto& rng) { return std::vector<Tensor>{random_tensor({1, 2, 4, 4}, rng)}; });
  run("se",
      [](auto& g, std::span<const Var> v) { return se_forward(g, v[0], v[1], v[2], SEConfig{4}); },
      [](auto& rng) {
        // Redraw until every hidden pre-activation clears the relu kink.
        for (;;) {
          std::vector<Tensor> in{random_tensor({2, 8, 3, 3}, rng), random_tensor({2, 8}, rng),
                                 random_tensor({8, 2}, rng)};
          if (se_hidden_margin(in[0], in[1]) >= 0.05) return in;
        }
      });
  run("eca",
      [](auto& g, std::span<const Var> v) { return eca_forward(g, v[0], v[1], ECAConfig{3}); },
      [](auto& rng) {
        return std::vector<Tensor>{random_tensor({2, 6, 3, 3}, rng), random_tensor({3}, rng)};
      });
  return reports;
}

}  // namespace ilmcam
