#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ilmcam/synth.hpp"
#include "ilmcam/trainer.hpp"

using namespace ilmcam;

namespace {

struct Fixture {
  LabeledImages train, val;
};

const Fixture& small_data() {
  static const Fixture f = [] {
    SynthConfig cfg;
    cfg.count = 64;
    cfg.size = 16;
    cfg.seed = 3;
    const DataSplit s = split(synth_generate(cfg), SplitRatios{}, 1);
    return Fixture{to_labeled(s.train, 16), to_labeled(s.val, 16)};
  }();
  return f;
}

ChannelModel small_model(ChannelKind k, std::uint64_t seed = 0) {
  return build_channel(k, 2, 0.5, std::nullopt, 16, seed);
}

std::vector<std::uint64_t> checksums(const ChannelModel& m) {
  std::vector<std::uint64_t> out;
  for (const auto& p : m.params()) out.push_back(checksum(p.value));
  return out;
}

// Textbook AdamW in long double, written out independently of the library.
long double reference_adamw(long double p, const std::vector<long double>& grads) {
  const long double lr = 2e-3L, b1 = 0.9L, b2 = 0.999L, eps = 1e-8L, wd = 1e-2L;
  long double m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const long double g = grads[t - 1];
    p = p - lr * wd * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const long double mh = m / (1 - std::pow(b1, (long double)t));
    const long double vh = v / (1 - std::pow(b2, (long double)t));
    p = p - lr * mh / (std::sqrt(vh) + eps);
  }
  return p;
}

}  // namespace

TEST(AdamW, MatchesScalarReferenceOverTenSteps) {
  for (float p0 : {0.0f, 0.75f, -1.25f}) {
    std::vector<long double> gs;
    for (int t = 1; t <= 10; ++t) gs.push_back(std::sin(0.7L * t) + 0.3L);
    float p = p0;
    AdamWMoments s;
    for (long double g : gs) {
      const float gf = static_cast<float>(g);
      adamw_step(std::span<float>(&p, 1), std::span<const float>(&gf, 1), s, {});
    }
    std::vector<long double> gf;
    for (long double g : gs) gf.push_back(static_cast<float>(g));
    EXPECT_NEAR(p, static_cast<double>(reference_adamw(p0, gf)), 1e-7) << "p0=" << p0;
    EXPECT_EQ(s.step, 10u);
  }
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  float p = 3.0f;
  const float g = 0.0f;
  AdamWMoments s;
  adamw_step(std::span<float>(&p, 1), std::span<const float>(&g, 1), s, {});
  EXPECT_FLOAT_EQ(p, static_cast<float>(3.0 * (1.0 - 2e-3 * 1e-2)));
}

TEST(AdamW, NonFiniteGradientThrowsWithoutUpdating) {
  float p[2] = {1.0f, 2.0f};
  const float g[2] = {0.5f, std::numeric_limits<float>::quiet_NaN()};
  AdamWMoments s;
  EXPECT_THROW(adamw_step(p, g, s, {}), NumericError);
  EXPECT_EQ(p[0], 1.0f);
  EXPECT_EQ(s.step, 0u);
}

TEST(AdamW, ConfigValidation) {
  AdamWConfig c;
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Freeze, PolicyMasksFollowParameterGroups) {
  ChannelModel m = small_model(ChannelKind::MGIC);
  const auto none = freeze_mask(m, FreezePolicy::None);
  const auto bb = freeze_mask(m, FreezePolicy::BackboneFrozen);
  const auto fc = freeze_mask(m, FreezePolicy::FcOnly);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto grp = m.params()[i].group;
    EXPECT_TRUE(none[i]);
    EXPECT_EQ(bb[i], grp != ParamGroup::Backbone) << m.params()[i].name;
    EXPECT_EQ(fc[i], grp == ParamGroup::Head) << m.params()[i].name;
  }
  EXPECT_TRUE(head_only(m, FreezePolicy::FcOnly));
  EXPECT_FALSE(head_only(m, FreezePolicy::BackboneFrozen));
  EXPECT_TRUE(head_only(small_model(ChannelKind::SIC), FreezePolicy::BackboneFrozen));
  EXPECT_EQ(freeze_policy_from_string("fc_only"), FreezePolicy::FcOnly);
  EXPECT_THROW(freeze_policy_from_string("partial"), ConfigError);
}

TEST(Freeze, FrozenParametersKeepTheirBits) {
  const auto& d = small_data();
  for (ChannelKind k : {ChannelKind::MGIC, ChannelKind::MSIC}) {
    for (FreezePolicy pol : {FreezePolicy::BackboneFrozen, FreezePolicy::FcOnly}) {
      ChannelModel m = small_model(k);
      const auto before = checksums(m);
      TrainPlan plan;
      plan.epochs = 2;
      plan.freeze = pol;
      train_channel(m, d.train, d.val, plan);
      const auto after = checksums(m);
      const auto mask = freeze_mask(m, pol);
      bool any_changed = false;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) {
          EXPECT_EQ(before[i], after[i]) << to_string(k) << " " << m.params()[i].name;
        } else {
          any_changed = any_changed || before[i] != after[i];
        }
      }
      EXPECT_TRUE(any_changed) << to_string(k) << " " << to_string(pol);
    }
  }
}

TEST(Trainer, SameSeedReproducesBitForBit) {
  const auto& d = small_data();
  TrainPlan plan;
  plan.epochs = 2;
  plan.seed = 11;
  ChannelModel a = small_model(ChannelKind::MSIC), b = small_model(ChannelKind::MSIC);
  const auto ra = train_channel(a, d.train, d.val, plan);
  const auto rb = train_channel(b, d.train, d.val, plan);
  EXPECT_EQ(checksums(a), checksums(b));
  EXPECT_EQ(ra.history_jsonl(), rb.history_jsonl());
}

TEST(Trainer, FeatureCacheIsBitIdenticalToFullForward) {
  const auto& d = small_data();
  TrainPlan plan;
  plan.epochs = 3;
  plan.freeze = FreezePolicy::FcOnly;
  ChannelModel a = small_model(ChannelKind::MGIC, 5), b = small_model(ChannelKind::MGIC, 5);
  plan.cache_features = true;
  const auto ra = train_channel(a, d.train, d.val, plan);
  plan.cache_features = false;
  const auto rb = train_channel(b, d.train, d.val, plan);
  EXPECT_TRUE(ra.used_feature_cache);
  EXPECT_FALSE(rb.used_feature_cache);
  EXPECT_EQ(checksums(a), checksums(b));
  EXPECT_EQ(ra.history_jsonl(), rb.history_jsonl());
}

TEST(Trainer, ReturnsEarliestBestValidationCheckpoint) {
  const auto& d = small_data();
  TrainPlan plan;
  plan.epochs = 4;
  ChannelModel m = small_model(ChannelKind::SIC);
  const auto r = train_channel(m, d.train, d.val, plan);
  ASSERT_EQ(r.history.size(), 4u);
  double best = -1;
  std::size_t best_epoch = 0;
  for (const auto& e : r.history) {
    if (e.val_acc > best) {
      best = e.val_acc;
      best_epoch = e.epoch;
    }
  }
  EXPECT_EQ(r.best_epoch, best_epoch);
  EXPECT_DOUBLE_EQ(r.best_val_acc, best);
  EXPECT_GE(r.best_val_acc, r.history.front().val_acc);
  EXPECT_DOUBLE_EQ(evaluate(m, d.val).accuracy(), r.best_val_acc);
}

TEST(Trainer, IncludeInitialNeverReturnsWorseThanStart) {
  const auto& d = small_data();
  ChannelModel m = small_model(ChannelKind::SIC);
  TrainPlan plan;
  plan.epochs = 3;
  train_channel(m, d.train, d.val, plan);
  const double start = evaluate(m, d.val).accuracy();
  const auto start_state = m.state();
  plan.include_initial = true;
  plan.freeze = FreezePolicy::FcOnly;
  plan.seed = 9;
  AdamWConfig harsh;
  harsh.lr = 0.5;
  const auto r = train_channel(m, d.train, d.val, plan, harsh);
  EXPECT_GE(r.best_val_acc, start);
  EXPECT_GE(evaluate(m, d.val).accuracy(), start);
  if (r.best_epoch == 0) {
    EXPECT_TRUE(r.changed_params.empty());
    const auto now = m.state();
    for (std::size_t i = 0; i < now.size(); ++i) EXPECT_EQ(now[i].second, start_state[i].second);
  }
}

TEST(Trainer, LossFallsOnLearnableData) {
  const auto& d = small_data();
  ChannelModel m = small_model(ChannelKind::SIC, 2);
  TrainPlan plan;
  plan.epochs = 8;
  const auto r = train_channel(m, d.train, d.val, plan);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Trainer, NonFiniteLossReportsEpochAndBatch) {
  const auto& d = small_data();
  ChannelModel m = small_model(ChannelKind::SIC);
  m.param("head.fc.bias").value.data()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainPlan plan;
  plan.epochs = 1;
  try {
    train_channel(m, d.train, d.val, plan);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 1"), std::string::npos) << e.what();
  }
}

TEST(Trainer, RejectsEmptySetsAndBadPlans) {
  const auto& d = small_data();
  ChannelModel m = small_model(ChannelKind::SIC);
  TrainPlan plan;
  plan.epochs = 0;
  EXPECT_THROW(train_channel(m, d.train, d.val, plan), ConfigError);
  plan.epochs = 1;
  EXPECT_THROW(train_channel(m, d.train, LabeledImages{}, plan), std::invalid_argument);
}

TEST(Trainer, ConcurrentChannelsMatchSequentialRuns) {
  const auto& d = small_data();
  TrainPlan plan;
  plan.epochs = 1;
  const ChannelKind kinds[] = {ChannelKind::SIC, ChannelKind::MGIC, ChannelKind::MSIC};
  std::vector<ChannelModel> par, seq;
  for (auto k : kinds) {
    par.push_back(small_model(k, 4));
    seq.push_back(small_model(k, 4));
  }
  parallel_for(3, 3, [&](std::size_t i) { train_channel(par[i], d.train, d.val, plan); });
  for (auto& m : seq) train_channel(m, d.train, d.val, plan);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(checksums(par[i]), checksums(seq[i]));
}

TEST(Trainer, ParallelForRethrowsWorkerErrors) {
  EXPECT_THROW(parallel_for(4, 2,
                            [](std::size_t i) {
                              if (i == 2) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Trainer, FusedEvaluationUsesWeights) {
  const auto& d = small_data();
  std::vector<ChannelModel> ms;
  for (auto k : {ChannelKind::SIC, ChannelKind::MGIC, ChannelKind::MSIC}) ms.push_back(small_model(k, 7));
  const DecisionSet ds = decisions_of(ms, d.val.images);
  const std::vector<double> only_first = {1.0, 0.0, 0.0};
  EXPECT_EQ(evaluate_fused(ds, only_first, d.val.labels), evaluate(ms[0], d.val));
}
