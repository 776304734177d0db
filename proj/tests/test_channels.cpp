#include <gtest/gtest.h>

#include <random>

#include "ilmcam/channels.hpp"
#include "ilmcam/gradcheck_suite.hpp"

using namespace ilmcam;

namespace {

const ChannelKind kKinds[] = {ChannelKind::SIC, ChannelKind::MGIC, ChannelKind::MSIC};

Tensor random_batch(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor t({n, 3, size, size});
  for (float& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

TEST(Channels, DecisionRowsSumToOne) {
  for (ChannelKind k : kKinds) {
    ChannelModel m = build_channel(k, 2);
    const Tensor p = m.predict(random_batch(3, 64, 1));
    ASSERT_EQ(p.shape(), (Shape{3, 2}));
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(p[2 * i] + p[2 * i + 1], 1.0f, 1e-6) << to_string(k);
      EXPECT_GE(p[2 * i], 0.0f);
    }
  }
}

TEST(Channels, ZeroedHeadGivesUniformDecision) {
  for (ChannelKind k : kKinds) {
    ChannelModel m = build_channel(k, 9, 1.0, std::nullopt, 32);
    for (float& v : m.param("head.fc.weight").value.data()) v = 0.0f;
    const Tensor p = m.predict(random_batch(2, 32, 2));
    for (float v : p.data()) EXPECT_NEAR(v, 1.0f / 9.0f, 1e-7);
  }
}

TEST(Channels, IdenticalInputsGiveIdenticalRows) {
  for (ChannelKind k : kKinds) {
    ChannelModel m = build_channel(k, 3, 1.0, std::nullopt, 32);
    Tensor one = random_batch(1, 32, 3);
    Tensor two({2, 3, 32, 32});
    std::copy(one.data().begin(), one.data().end(), two.data().begin());
    std::copy(one.data().begin(), one.data().end(), two.data().begin() + one.numel());
    const Tensor p = m.predict(two);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p[c], p[3 + c]);
  }
}

TEST(Channels, ForwardIsBitDeterministicPerSeed) {
  for (ChannelKind k : kKinds) {
    ChannelModel a = build_channel(k, 2, 1.0, std::nullopt, 32, 7);
    ChannelModel b = build_channel(k, 2, 1.0, std::nullopt, 32, 7);
    ChannelModel c = build_channel(k, 2, 1.0, std::nullopt, 32, 8);
    const Tensor x = random_batch(4, 32, 4);
    EXPECT_EQ(a.predict(x), b.predict(x));
    EXPECT_NE(encode_checkpoint(a.state()), encode_checkpoint(c.state()));
  }
}

TEST(Channels, ParameterCountsUnderLimit) {
  for (ChannelKind k : kKinds) {
    const ChannelModel m = build_channel(k, 2);
    const ModelSummary s = m.summarize();
    EXPECT_EQ(s.total_parameters, m.parameter_count());
    EXPECT_LT(s.total_parameters, 500000u) << to_string(k);
    EXPECT_EQ(s.layers.back().output, (Shape{1, 2}));
  }
}

TEST(Channels, SummaryRecordsExpectedSicLayout) {
  const ModelSummary s = build_channel(ChannelKind::SIC, 2).summarize();
  // conv 3->8: 8*3*9 + 8 weights.
  EXPECT_EQ(s.layers[0].parameters, 224u);
  EXPECT_EQ(s.layers[0].output, (Shape{1, 8, 64, 64}));
  EXPECT_EQ(s.layers[1].type, "attention");
  EXPECT_EQ(s.layers[1].parameters, 0u);
  // Head input after three halvings: 32 * 8 * 8.
  EXPECT_EQ(build_channel(ChannelKind::SIC, 2).feature_size(), 2048u);
}

TEST(Channels, StructuralAuditPassesForEveryKindAndAttention) {
  for (ChannelKind k : kKinds) {
    for (AttentionKind a : {AttentionKind::SimAM, AttentionKind::SE, AttentionKind::ECA, AttentionKind::Identity}) {
      const ChannelModel m = build_channel(k, 2, 1.0, a, 32);
      const AuditResult r = structural_audit(m);
      EXPECT_TRUE(r.ok) << to_string(k) << "/" << to_string(a) << ": "
                        << (r.problems.empty() ? "" : r.problems.front());
    }
  }
}

TEST(Channels, SeInSicStillAlternatesConvAndAttention) {
  const ChannelModel m = build_channel(ChannelKind::SIC, 2, 1.0, AttentionKind::SE);
  std::vector<LayerType> core;
  for (const Layer& l : m.layers())
    if (l.type == LayerType::Conv || l.type == LayerType::Attention) core.push_back(l.type);
  ASSERT_EQ(core.size(), 8u);
  for (std::size_t i = 0; i < core.size(); ++i)
    EXPECT_EQ(core[i], i % 2 == 0 ? LayerType::Conv : LayerType::Attention);
  for (const Layer& l : m.layers())
    if (l.type == LayerType::Attention) {
      EXPECT_EQ(l.attention, AttentionKind::SE);
    }
  EXPECT_NO_THROW(m.params().at(0));
  bool has_se = false;
  for (const auto& p : m.params()) has_se = has_se || p.name == "block1.se.fc1";
  EXPECT_TRUE(has_se);
}

TEST(Channels, IdentityGateKeepsOutputShapes) {
  for (ChannelKind k : kKinds) {
    const auto a = build_channel(k, 2, 1.0, std::nullopt, 32).summarize();
    const auto b = build_channel(k, 2, 1.0, AttentionKind::Identity, 32).summarize();
    ASSERT_EQ(a.layers.size(), b.layers.size());
    for (std::size_t i = 0; i < a.layers.size(); ++i) EXPECT_EQ(a.layers[i].output, b.layers[i].output);
  }
}

TEST(Channels, ParameterGroupsFollowNaming) {
  for (ChannelKind k : kKinds) {
    const ChannelModel m = build_channel(k, 2);
    std::size_t head = 0, attention = 0;
    for (const auto& p : m.params()) {
      if (p.group == ParamGroup::Head) {
        ++head;
        EXPECT_EQ(p.name.rfind("head.fc.", 0), 0u);
      }
      if (p.group == ParamGroup::Attention) {
        ++attention;
        EXPECT_TRUE(p.name.find(".se.") != std::string::npos || p.name.find(".eca.") != std::string::npos);
      }
    }
    EXPECT_EQ(head, 2u);
    EXPECT_EQ(attention, k == ChannelKind::SIC ? 0u : (k == ChannelKind::MGIC ? 6u : 3u));
  }
}

TEST(Channels, ConfigurationErrors) {
  EXPECT_THROW(build_channel(ChannelKind::SIC, 1), ConfigError);
  EXPECT_THROW(build_channel(ChannelKind::SIC, 2, 0.01), ConfigError);
  EXPECT_THROW(build_channel(ChannelKind::MGIC, 2, 1.0, std::nullopt, 40), ConfigError);
  ChannelModel m = build_channel(ChannelKind::SIC, 2, 1.0, std::nullopt, 32);
  Graph g;
  EXPECT_THROW(m.forward(g, g.input(Tensor({1, 1, 32, 32}))), ShapeError);
}

TEST(Channels, CheckpointRoundTripRestoresPredictions) {
  ChannelModel a = build_channel(ChannelKind::MSIC, 2, 1.0, std::nullopt, 32, 1);
  ChannelModel b = build_channel(ChannelKind::MSIC, 2, 1.0, std::nullopt, 32, 2);
  const Tensor x = random_batch(3, 32, 9);
  b.load_state(decode_checkpoint(encode_checkpoint(a.state())));
  EXPECT_EQ(a.predict(x), b.predict(x));
  ChannelModel c = build_channel(ChannelKind::SIC, 2, 1.0, std::nullopt, 32);
  EXPECT_THROW(c.load_state(a.state()), CheckpointError);
  EXPECT_EQ(ChannelSpec::from_json(a.spec().to_json()).to_json(), a.spec().to_json());
}

TEST(Channels, FeatureSplitMatchesFullForward) {
  for (ChannelKind k : kKinds) {
    ChannelModel m = build_channel(k, 2, 1.0, std::nullopt, 32, 3);
    const Tensor x = random_batch(5, 32, 10);
    const Tensor feats = m.extract_features(x, 2);
    EXPECT_EQ(feats.dim(1), m.feature_size());
    EXPECT_EQ(m.predict_from_features(feats), m.predict(x, 2));
  }
}

TEST(Channels, ParameterGradientsMatchFiniteDifferences) {
  // A backbone weight gradient through the whole network. The step is small
  // so no relu or pooling switch falls inside it.
  ChannelModel m = build_channel(ChannelKind::SIC, 2, 0.5, std::nullopt, 16, 4);
  const Tensor x = random_batch(2, 16, 11);
  const std::vector<std::size_t> labels{0, 1};
  auto loss_of = [&]() {
    Graph g;
    return static_cast<double>(g.value(cross_entropy_loss(g, m.forward(g, g.input(x)), labels))[0]);
  };
  Parameter& w = m.param("block2.conv.weight");
  w.value.set_requires_grad(true);
  {
    Graph g;
    g.backward(cross_entropy_loss(g, m.forward(g, g.input(x)), labels));
  }
  const std::vector<float> analytic(w.value.grad().begin(), w.value.grad().end());
  w.value.set_requires_grad(false);
  double worst = 0.0;
  for (std::size_t j = 0; j < w.value.numel(); j += 7) {
    const float orig = w.value[j];
    w.value[j] = orig + 1e-4f;
    const double lp = loss_of();
    w.value[j] = orig - 1e-4f;
    const double lm = loss_of();
    w.value[j] = orig;
    worst = std::max(worst, gradient_rel_error(analytic[j], (lp - lm) / 2e-4));
  }
  EXPECT_LT(worst, 5e-3);
}
