#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ilmcam/attention.hpp"
#include "ilmcam/gradcheck.hpp"
#include "ilmcam/gradcheck_suite.hpp"

using namespace ilmcam;

namespace {

Tensor randn(Shape s, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  return detail::random_tensor(std::move(s), rng, scale);
}

Tensor constant_per_channel(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  Tensor t({n, c, h, w});
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t p = 0; p < h * w; ++p) t[i * h * w + p] = 0.3f * static_cast<float>(i) - 1.1f;
  return t;
}

// Minimal energy of one neuron, computed without the tensor code.
double scalar_energy(double t, const std::vector<double>& channel, double lambda) {
  double mu = 0.0;
  for (double v : channel) mu += v;
  mu /= static_cast<double>(channel.size());
  double var = 0.0;
  for (double v : channel) var += (v - mu) * (v - mu);
  var /= static_cast<double>(channel.size());
  return 4.0 * (var + lambda) / ((t - mu) * (t - mu) + 2.0 * var + 2.0 * lambda);
}

}  // namespace

TEST(SimAM, DefaultLambda) { EXPECT_DOUBLE_EQ(SimAMConfig{}.lambda, 1e-4); }

TEST(SimAM, ConstantChannelEnergyIsTwo) {
  const EnergyMap e = simam_energy(constant_per_channel(2, 3, 4, 4));
  for (float v : e.energy.data()) EXPECT_EQ(v, 2.0f);
}

TEST(SimAM, TwoNeuronChannelMatchesScalarEvaluation) {
  const Tensor x({1, 1, 1, 2}, std::vector<float>{1.0f, -1.0f});
  const EnergyMap e = simam_energy(x);
  const double expected = scalar_energy(1.0, {1.0, -1.0}, 1e-4);
  EXPECT_NEAR(expected, 4.0 * (1.0 + 1e-4) / (3.0 + 2e-4), 1e-15);
  EXPECT_NEAR(e.energy[0], expected, 1e-6);
  EXPECT_NEAR(e.energy[1], expected, 1e-6);
}

TEST(SimAM, RandomEnergiesMatchScalarEvaluation) {
  const Tensor x = randn({1, 2, 3, 3}, 17);
  const EnergyMap e = simam_energy(x);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<double> channel(x.data().begin() + c * 9, x.data().begin() + (c + 1) * 9);
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_NEAR(e.energy[c * 9 + i], scalar_energy(channel[i], channel, 1e-4), 1e-5);
      EXPECT_GT(e.energy[c * 9 + i], 0.0f);
    }
  }
}

TEST(SimAM, ConstantChannelScalesBySigmoidHalf) {
  const Tensor x = constant_per_channel(1, 2, 4, 4);
  Graph g;
  const Tensor& out = g.value(simam_forward(g, g.input(x)));
  const double gate = 1.0 / (1.0 + std::exp(-0.5));
  EXPECT_NEAR(gate, 0.62246, 1e-5);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(out[i], gate * x[i], 1e-6);
}

TEST(SimAM, ZeroInputGivesZeroOutput) {
  Graph g;
  for (float v : g.value(simam_forward(g, g.input(Tensor({1, 2, 3, 3})))).data()) EXPECT_EQ(v, 0.0f);
}

TEST(SimAM, SingleNeuronMapRejected) {
  Graph g;
  EXPECT_THROW(simam_forward(g, g.input(Tensor({1, 1, 1, 1}))), ShapeError);
  EXPECT_THROW(simam_energy(Tensor({1, 1, 1, 1})), ShapeError);
  EXPECT_THROW(simam_energy(Tensor({1, 1, 2, 2}), SimAMConfig{0.0}), ConfigError);
}

TEST(SimAM, GradientMatchesFiniteDifferences) {
  auto f = [](auto& g, std::span<const Var> v) { return sum(g, simam_forward(g, v[0])); };
  const auto r = finite_diff_check(f, {randn({1, 2, 4, 4}, 3)}, 3);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(SE, ZeroWeightsGateAtOneHalf) {
  Graph g;
  const Tensor x = randn({2, 8, 3, 3}, 5);
  const Tensor& out = g.value(se_forward(g, g.input(x), g.input(Tensor({2, 8})), g.input(Tensor({8, 2}))));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(out[i], 0.5f * x[i]);
}

TEST(SE, GateIsConstantAcrossSpatialPositions) {
  std::mt19937_64 rng(9);
  Graph g;
  const Tensor x = detail::away_from_zero({1, 4, 3, 3}, rng);
  const Tensor& out =
      g.value(se_forward(g, g.input(x), g.input(randn({1, 4}, 6)), g.input(randn({4, 1}, 7)), SEConfig{4}));
  for (std::size_t c = 0; c < 4; ++c) {
    const float ratio = out[c * 9] / x[c * 9];
    EXPECT_GT(ratio, 0.0f);
    EXPECT_LT(ratio, 1.0f);
    for (std::size_t p = 1; p < 9; ++p) EXPECT_NEAR(out[c * 9 + p] / x[c * 9 + p], ratio, 1e-6);
  }
}

TEST(SE, ReductionRatioMustDivideChannels) {
  Graph g;
  EXPECT_THROW(se_forward(g, g.input(Tensor({1, 6, 2, 2})), g.input(Tensor({1, 6})), g.input(Tensor({6, 1})),
                          SEConfig{4}),
               ConfigError);
}

TEST(ECA, CenterTapKernelOnZeroMeanMap) {
  // GAP of every channel is 0, so a_c = sigmoid(0) = 0.5.
  Tensor x({1, 3, 2, 2}, std::vector<float>{1, -1, 2, -2, 3, -3, 0.5f, -0.5f, 4, -4, 1, -1});
  Graph g;
  const Tensor& out = g.value(eca_forward(g, g.input(x), g.input(Tensor({3}, std::vector<float>{0, 1, 0}))));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(out[i], 0.5f * x[i]);
}

TEST(ECA, CenterTapKernelUsesOwnChannelMean) {
  Tensor x({1, 3, 1, 2}, std::vector<float>{1, 3, -2, -4, 0, 0});
  Graph g;
  const Tensor& out = g.value(eca_forward(g, g.input(x), g.input(Tensor({3}, std::vector<float>{0, 1, 0}))));
  const float a0 = 1.0f / (1.0f + std::exp(-2.0f)), a1 = 1.0f / (1.0f + std::exp(3.0f));
  EXPECT_NEAR(out[0], a0 * 1, 1e-6);
  EXPECT_NEAR(out[3], a1 * -4, 1e-6);
  EXPECT_EQ(out[4], 0.0f);
}

TEST(ECA, ZeroKernelScalesUniformly) {
  const Tensor x = randn({2, 5, 3, 3}, 15);
  Graph g;
  const Tensor& out = g.value(eca_forward(g, g.input(x), g.input(Tensor({3}))));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(out[i], 0.5f * x[i]);
}

TEST(ECA, EvenKernelRejected) {
  Graph g;
  EXPECT_THROW(eca_forward(g, g.input(Tensor({1, 4, 2, 2})), g.input(Tensor({2})), ECAConfig{2}), ConfigError);
  EXPECT_THROW(ECAConfig{5}.validate(3), ConfigError);
}

TEST(AttentionProperties, ShapePreservingPositiveGates) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = detail::away_from_zero({2, 8, 4, 4}, rng);
    Graph g;
    Var in = g.input(x);
    const std::vector<Var> outs{simam_forward(g, in),
                                se_forward(g, in, g.input(detail::random_tensor({2, 8}, rng)),
                                           g.input(detail::random_tensor({8, 2}, rng))),
                                eca_forward(g, in, g.input(detail::random_tensor({3}, rng)))};
    for (Var o : outs) {
      const Tensor& y = g.value(o);
      ASSERT_EQ(y.shape(), x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const float gate = y[i] / x[i];
        EXPECT_GT(gate, 0.0f);
        EXPECT_LT(gate, 1.0f);
      }
    }
  }
}

TEST(AttentionProperties, ChannelGatesIgnoreSpatialPermutation) {
  std::mt19937_64 rng(77);
  const Tensor x = detail::away_from_zero({1, 4, 3, 3}, rng);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor shuffled(x.shape());
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 9; ++p) shuffled[c * 9 + p] = x[c * 9 + perm[p]];
  const Tensor fc1 = detail::random_tensor({1, 4}, rng), fc2 = detail::random_tensor({4, 1}, rng);
  const Tensor k = detail::random_tensor({3}, rng);
  Graph g;
  const Tensor a = g.value(se_forward(g, g.input(x), g.input(fc1), g.input(fc2)));
  const Tensor b = g.value(se_forward(g, g.input(shuffled), g.input(fc1), g.input(fc2)));
  const Tensor c = g.value(eca_forward(g, g.input(x), g.input(k)));
  const Tensor d = g.value(eca_forward(g, g.input(shuffled), g.input(k)));
  for (std::size_t ch = 0; ch < 4; ++ch) {
    EXPECT_NEAR(a[ch * 9] / x[ch * 9], b[ch * 9] / shuffled[ch * 9], 1e-6);
    EXPECT_NEAR(c[ch * 9] / x[ch * 9], d[ch * 9] / shuffled[ch * 9], 1e-6);
  }
}

TEST(AttentionProperties, BlockGradientsPassSuite) {
  for (const auto& r : gradcheck_suite(31, 20)) {
    if (r.name == "simam" || r.name == "se" || r.name == "eca") {
      EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
    }
  }
}
