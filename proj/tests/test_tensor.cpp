#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ilmcam/gradcheck.hpp"
#include "ilmcam/gradcheck_suite.hpp"
#include "ilmcam/ops.hpp"

using namespace ilmcam;

namespace {

Tensor randn(Shape s, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  return detail::random_tensor(std::move(s), rng, scale);
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
}

TEST(Tensor, ReshapePreservesData) {
  Tensor t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r[5], 6.0f);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
}

TEST(Conv2d, AllOnesSumsWindowPlusBias) {
  Graph g;
  Var x = g.input(Tensor({1, 1, 3, 3}, 1.0f));
  Var w = g.input(Tensor({1, 1, 3, 3}, 1.0f));
  Var b = g.input(Tensor({1}, 0.5f));
  const Tensor& out = g.value(conv2d(g, x, w, b));
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(out[0], 9.5f);
}

TEST(Conv2d, IdentityKernelPassesInputThrough) {
  Graph g;
  Tensor input = randn({2, 1, 5, 5}, 3);
  Var x = g.input(input);
  Var w = g.input(Tensor({1, 1, 1, 1}, 1.0f));
  Var b = g.input(Tensor({1}, 0.0f));
  EXPECT_EQ(g.value(conv2d(g, x, w, b)), input);
}

TEST(Conv2d, OutputExtentsFollowPaddingAndStride) {
  Graph g;
  Var x = g.input(Tensor({1, 2, 7, 6}));
  Var w = g.input(Tensor({3, 2, 3, 3}));
  EXPECT_EQ(g.shape(conv2d(g, x, w, std::nullopt, 2, 1)), (Shape{1, 3, 4, 3}));
}

TEST(Conv2d, ZeroPaddingContributesNothing) {
  Graph g;
  Var x = g.input(Tensor({1, 1, 1, 1}, 2.0f));
  Var w = g.input(Tensor({1, 1, 3, 3}, 1.0f));
  const Tensor& out = g.value(conv2d(g, x, w, std::nullopt, 1, 1));
  EXPECT_FLOAT_EQ(out[0], 2.0f);
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  Graph g;
  Var x = g.input(Tensor({1, 3, 4, 4}));
  Var w = g.input(Tensor({2, 2, 3, 3}));
  try {
    conv2d(g, x, w, std::nullopt);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dim 1"), std::string::npos);
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputRejected) {
  Graph g;
  Var x = g.input(Tensor({1, 1, 2, 2}));
  Var w = g.input(Tensor({1, 1, 3, 3}));
  EXPECT_THROW(conv2d(g, x, w, std::nullopt), ShapeError);
}

TEST(Conv2d, WeightGradientMatchesFiniteDifferences) {
  // Gradient of sum(output) w.r.t. every weight of a 4x3x3x3 kernel on a 2x3x8x8 input.
  const Tensor x = randn({2, 3, 8, 8}, 11);
  const Tensor w = randn({4, 3, 3, 3}, 12, 0.5f);
  const Tensor b = randn({4}, 13);
  Graph g;
  Var xv = g.input(x), wv = g.variable(w), bv = g.input(b);
  g.backward(sum(g, conv2d(g, xv, wv, bv)));
  const auto analytic = g.grad(wv);
  // Reference forward in double precision.
  const TensorD xd = tensor_cast<double>(x), bd = tensor_cast<double>(b);
  auto loss = [&](const TensorD& wt) {
    GraphD e;
    double s = 0.0;
    for (double v : e.value(conv2d(e, e.input(xd), e.input(wt), e.input(bd))).data()) s += v;
    return s;
  };
  TensorD work = tensor_cast<double>(w);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double orig = work[i];
    work[i] = orig + 1e-3;
    const double up = loss(work);
    work[i] = orig - 1e-3;
    const double down = loss(work);
    work[i] = orig;
    const double numeric = (up - down) / 2e-3;
    EXPECT_LE(gradient_rel_error(analytic[i], numeric), 1e-3) << "weight " << i;
  }
}

TEST(DepthwiseSeparable, IdentityKernelsPassInputThrough) {
  Graph g;
  Tensor input = randn({1, 2, 4, 4}, 5);
  Tensor dw({2, 1, 3, 3});
  dw.at(0, 0, 1, 1) = 1.0f;
  dw.at(1, 0, 1, 1) = 1.0f;
  Tensor pw({2, 2, 1, 1});
  pw.at(0, 0, 0, 0) = 1.0f;
  pw.at(1, 1, 0, 0) = 1.0f;
  Var out = depthwise_separable_conv2d(g, g.input(input), g.input(dw), g.input(pw), std::nullopt, 1);
  EXPECT_EQ(g.value(out), input);
}

TEST(DepthwiseSeparable, EqualsPerChannelConvThenPointwise) {
  const Tensor input = randn({1, 2, 4, 4}, 21);
  const Tensor dw = randn({2, 1, 3, 3}, 22);
  const Tensor pw = randn({3, 2, 1, 1}, 23);
  const Tensor bias = randn({3}, 24);
  Graph g;
  const Tensor fused =
      g.value(depthwise_separable_conv2d(g, g.input(input), g.input(dw), g.input(pw), g.input(bias), 1));

  // Oracle: slice each channel, run an ordinary single-channel conv2d, reassemble, then 1x1 conv2d.
  Graph o;
  Tensor spatial({1, 2, 4, 4});
  for (std::size_t c = 0; c < 2; ++c) {
    Tensor plane({1, 1, 4, 4});
    Tensor kernel({1, 1, 3, 3});
    for (std::size_t i = 0; i < 16; ++i) plane[i] = input[c * 16 + i];
    for (std::size_t i = 0; i < 9; ++i) kernel[i] = dw[c * 9 + i];
    const Tensor r = o.value(conv2d(o, o.input(plane), o.input(kernel), std::nullopt, 1, 1));
    for (std::size_t i = 0; i < 16; ++i) spatial[c * 16 + i] = r[i];
  }
  const Tensor expected = o.value(conv2d(o, o.input(spatial), o.input(pw), o.input(bias)));
  ASSERT_EQ(fused.shape(), expected.shape());
  for (std::size_t i = 0; i < fused.numel(); ++i) EXPECT_NEAR(fused[i], expected[i], 1e-5f);
}

TEST(DepthwiseSeparable, ChannelMismatchRejected) {
  Graph g;
  EXPECT_THROW(depthwise_separable_conv2d(g, g.input(Tensor({1, 3, 4, 4})), g.input(Tensor({2, 1, 3, 3})),
                                          g.input(Tensor({2, 2, 1, 1})), std::nullopt, 1),
               ShapeError);
}

TEST(MaxPool, PicksWindowMaximum) {
  Graph g;
  Var x = g.input(Tensor({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  EXPECT_FLOAT_EQ(g.value(maxpool2d(g, x, 2, 2))[0], 4.0f);
}

TEST(MaxPool, ConstantInputGivesConstantOutput) {
  Graph g;
  const Tensor& out = g.value(maxpool2d(g, g.input(Tensor({1, 2, 4, 4}, 0.7f)), 2, 2));
  for (float v : out.data()) EXPECT_FLOAT_EQ(v, 0.7f);
}

TEST(MaxPool, GradientRoutesToArgmaxOnly) {
  Graph g;
  Var x = g.variable(Tensor({1, 1, 2, 2}, std::vector<float>{1, 5, 3, 4}));
  g.backward(sum(g, maxpool2d(g, x, 2, 2)));
  const auto d = g.grad(x);
  EXPECT_EQ(std::vector<float>(d.begin(), d.end()), (std::vector<float>{0, 1, 0, 0}));
}

TEST(GlobalAvgPool, ArithmeticMean) {
  Graph g;
  Var x = g.input(Tensor({1, 2, 2, 2}, std::vector<float>{0, 2, 4, 6, 5, 5, 5, 5}));
  const Tensor& out = g.value(global_avg_pool(g, x));
  EXPECT_EQ(out.shape(), (Shape{1, 2}));
  EXPECT_FLOAT_EQ(out[0], 3.0f);
  EXPECT_FLOAT_EQ(out[1], 5.0f);
}

TEST(GlobalAvgPool, GradientIsUniform) {
  Graph g;
  Var x = g.variable(randn({1, 1, 3, 4}, 8));
  g.backward(sum(g, global_avg_pool(g, x)));
  for (float d : g.grad(x)) EXPECT_FLOAT_EQ(d, 1.0f / 12.0f);
}

TEST(FullyConnected, IdentityAndZeroWeights) {
  Graph g;
  Tensor input({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0f;
  EXPECT_EQ(g.value(fully_connected(g, g.input(input), g.input(eye), g.input(Tensor({3})))), input);
  const Tensor& biased =
      g.value(fully_connected(g, g.input(input), g.input(Tensor({2, 3})), g.input(Tensor({2}, std::vector<float>{7, 8}))));
  EXPECT_EQ(biased, Tensor({2, 2}, std::vector<float>{7, 8, 7, 8}));
  EXPECT_THROW(fully_connected(g, g.input(input), g.input(Tensor({2, 4})), std::nullopt), ShapeError);
}

TEST(Activations, ClosedFormValues) {
  Graph g;
  EXPECT_FLOAT_EQ(g.value(sigmoid(g, g.input(Tensor({1}, 0.0f))))[0], 0.5f);
  const Tensor& sm = g.value(softmax(g, g.input(Tensor({1, 2}, 0.0f))));
  EXPECT_FLOAT_EQ(sm[0], 0.5f);
  EXPECT_FLOAT_EQ(sm[1], 0.5f);
  const Tensor& r = g.value(relu(g, g.input(Tensor({3}, std::vector<float>{-1, 0, 2}))));
  EXPECT_EQ(r, Tensor({3}, std::vector<float>{0, 0, 2}));
}

TEST(Activations, RangeProperties) {
  Graph g;
  const Tensor x = randn({16, 9}, 99, 5.0f);
  const Tensor& s = g.value(sigmoid(g, g.input(x)));
  for (float v : s.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  for (float v : g.value(relu(g, g.input(x))).data()) EXPECT_GE(v, 0.0f);
  const Tensor& sm = g.value(softmax(g, g.input(x)));
  for (std::size_t r = 0; r < 16; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 9; ++c) total += sm[r * 9 + c];
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, KnownValues) {
  Graph g;
  std::vector<std::size_t> labels{1};
  EXPECT_NEAR(g.value(cross_entropy_loss(g, g.input(Tensor({1, 2}, std::vector<float>{0, 1})), labels))[0], 0.0,
              1e-6);
  EXPECT_NEAR(g.value(cross_entropy_loss(g, g.input(Tensor({1, 2}, 0.5f)), labels))[0], std::log(2.0), 1e-6);
  std::vector<std::size_t> bad{2};
  EXPECT_THROW(cross_entropy_loss(g, g.input(Tensor({1, 2}, 0.5f)), bad), std::out_of_range);
}

TEST(CrossEntropy, ClampsZeroProbability) {
  Graph g;
  std::vector<std::size_t> labels{0};
  const float l = g.value(cross_entropy_loss(g, g.input(Tensor({1, 2}, std::vector<float>{0, 1})), labels))[0];
  EXPECT_NEAR(l, -std::log(1e-12), 1e-3);
  EXPECT_TRUE(std::isfinite(l));
}

TEST(Graph, BackwardPopulatesEveryTrainableLeaf) {
  Tensor w = randn({2, 3}, 1);
  w.set_requires_grad(true);
  Tensor frozen = randn({2}, 2);
  Graph g;
  Var x = g.input(randn({4, 3}, 3));
  Var out = softmax(g, fully_connected(g, x, g.parameter(w), g.parameter(frozen)));
  std::vector<std::size_t> labels{0, 1, 1, 0};
  g.backward(cross_entropy_loss(g, out, labels));
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_FALSE(g.has_grad(x));
}

TEST(Graph, FrozenSubgraphRecordsNoBackward) {
  Graph g;
  Var x = g.input(randn({1, 1, 4, 4}, 4));
  Var y = relu(g, x);
  EXPECT_FALSE(g.requires_grad(y));
  EXPECT_THROW(g.backward(y), ShapeError);
}

TEST(Graph, ForwardIsBitDeterministic) {
  const Tensor x = randn({2, 3, 8, 8}, 31), w = randn({4, 3, 3, 3}, 32), b = randn({4}, 33);
  Graph a, c;
  const Tensor r1 = a.value(conv2d(a, a.input(x), a.input(w), a.input(b), 1, 1));
  const Tensor r2 = c.value(conv2d(c, c.input(x), c.input(w), c.input(b), 1, 1));
  EXPECT_EQ(r1, r2);
}

TEST(GradCheck, HarnessFlagsWrongGradient) {
  // A deliberately broken op: forward doubles, backward claims identity.
  auto broken = [](auto& g, std::span<const Var> v) {
    auto out = g.value(v[0]);
    for (auto& e : out.data()) e *= 2;
    const std::size_t id = g.size();
    const Var in = v[0];
    return g.record(std::move(out), {in}, [=](auto& gr) {
      auto d = gr.grad(in);
      const auto up = gr.grad(Var{id});
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i];
    });
  };
  const auto report = finite_diff_check(broken, {randn({4}, 1)}, 1);
  EXPECT_FALSE(report.passed);
}

TEST(GradCheck, SuitePassesForEveryOp) {
  for (const auto& r : gradcheck_suite(7, 20)) {
    EXPECT_TRUE(r.passed) << r.name << " max rel err " << r.max_rel_error;
    EXPECT_EQ(r.instances, 20u) << r.name;
  }
}
