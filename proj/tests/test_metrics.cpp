#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "ilmcam/metrics.hpp"

using namespace ilmcam;

namespace {

std::string pct(std::uint64_t num, std::uint64_t den) { return percent_2dp({num, den}); }

}  // namespace

TEST(Metrics, ReportedTestMatrixReproducesTableValues) {
  // Abnormal class positive.
  const auto cm = ConfusionMatrix::binary(975, 12, 23, 992);
  const auto m = per_class_metrics(cm, 1);
  EXPECT_EQ(percent_2dp(m.sens), "98.78");
  EXPECT_EQ(percent_2dp(m.spec), "97.73");
  EXPECT_EQ(percent_2dp(m.f1), "98.24");
  EXPECT_EQ(percent_2dp(m.avg_acc), "98.25");
  EXPECT_EQ(cm.total(), 2002u);
}

TEST(Metrics, HandArithmeticOracle) {
  // 975/987, 992/1015, 1950/1985, 1967/2002 by long division.
  EXPECT_NEAR(975.0 / 987.0, 0.987842, 1e-6);
  EXPECT_EQ(pct(975, 987), "98.78");
  EXPECT_EQ(pct(992, 1015), "97.73");
  EXPECT_EQ(pct(1950, 1985), "98.24");
  EXPECT_EQ(pct(1967, 2002), "98.25");
}

TEST(Metrics, HalfEvenRounding) {
  EXPECT_EQ(pct(1, 8), "12.50");
  EXPECT_EQ(pct(1, 80000), "0.00");  // 0.00125 %
  EXPECT_EQ(pct(3, 20000), "0.02");  // 0.015 %
  EXPECT_EQ(pct(1, 4000), "0.02");   // 0.025 %
  EXPECT_EQ(pct(5, 40000), "0.01");  // 0.0125 %
  EXPECT_EQ(fixed_2dp(0.125), "0.12");
  EXPECT_EQ(fixed_2dp(0.375), "0.38");
  EXPECT_EQ(pct(0, 0), "undef");
}

TEST(Metrics, IdentityPredictionsAreAllPerfect) {
  std::vector<std::size_t> y{0, 1, 1, 0, 2, 2, 1};
  const auto cm = ConfusionMatrix::from_predictions(3, y, y);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto m = per_class_metrics(cm, c);
    for (const Ratio* r : {&m.spec, &m.sens, &m.f1, &m.avg_acc}) EXPECT_EQ(percent_2dp(*r), "100.00");
  }
}

TEST(Metrics, AllWrongBinaryGivesZeroSensAndSpec) {
  std::vector<std::size_t> y{0, 1, 0, 1}, p{1, 0, 1, 0};
  const auto m = per_class_metrics(ConfusionMatrix::from_predictions(2, y, p), 1);
  EXPECT_EQ(*m.sens.value(), 0.0);
  EXPECT_EQ(*m.spec.value(), 0.0);
}

TEST(Metrics, ZeroDenominatorIsExplicitlyUndefined) {
  // No positives at all: sensitivity has nothing to measure.
  std::vector<std::size_t> y{0, 0, 0};
  const auto m = per_class_metrics(ConfusionMatrix::from_predictions(2, y, y), 1);
  EXPECT_FALSE(m.sens.defined());
  EXPECT_FALSE(m.sens.value().has_value());
  EXPECT_TRUE(m.spec.defined());
  EXPECT_EQ(metrics_json(m)["sens"], "undef");
}

TEST(Metrics, EmptyMatrixRejected) { EXPECT_THROW(per_class_metrics(ConfusionMatrix(2), 0), std::invalid_argument); }

TEST(Metrics, AggregateReproducesReportedValidationAverage) {
  const std::vector<double> v{99.00, 98.70, 98.90};
  EXPECT_EQ(aggregate(v).str(), "98.87 ± 0.12");
}

TEST(Metrics, AggregateReproducesReportedTestAverage) {
  const std::vector<double> v{98.25, 98.50, 98.40};
  EXPECT_EQ(aggregate(v).str(), "98.38 ± 0.10");
}

TEST(Metrics, AggregateSingleRunHasZeroSpread) {
  const std::vector<double> v{97.5};
  EXPECT_EQ(aggregate(v).std, 0.0);
  EXPECT_THROW(aggregate(std::span<const double>{}), std::invalid_argument);
}

TEST(MetricProperties, BinarySpecificityMirrorsOtherClassSensitivity) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> d(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> y(40), p(40);
    for (std::size_t i = 0; i < 40; ++i) {
      y[i] = static_cast<std::size_t>(d(rng));
      p[i] = static_cast<std::size_t>(d(rng));
    }
    const auto cm = ConfusionMatrix::from_predictions(2, y, p);
    const auto a = per_class_metrics(cm, 0), b = per_class_metrics(cm, 1);
    EXPECT_EQ(a.spec.num, b.sens.num);
    EXPECT_EQ(a.spec.den, b.sens.den);
    EXPECT_EQ(a.avg_acc.num, b.avg_acc.num);
    EXPECT_EQ(a.avg_acc.den, b.avg_acc.den);
  }
}

TEST(MetricProperties, TotalEqualsEvaluatedSamples) {
  std::vector<std::size_t> y{0, 1, 2, 2, 1}, p{2, 1, 0, 2, 1};
  const auto cm = ConfusionMatrix::from_predictions(3, y, p);
  EXPECT_EQ(cm.total(), 5u);
  EXPECT_EQ(cm.errors(), 2u);
  EXPECT_THROW(cm.at(3, 0), std::out_of_range);
}
