#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilmcam/tensor.hpp"

namespace ilmcam {

/// n x n counts; rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {
    if (classes < 2) throw ConfigError("confusion matrix needs at least 2 classes");
  }

  static ConfusionMatrix from_predictions(std::size_t classes, std::span<const std::size_t> truth,
                                          std::span<const std::size_t> predicted) {
    if (truth.size() != predicted.size()) {
      throw ShapeError("confusion matrix: " + std::to_string(truth.size()) + " labels vs " +
                       std::to_string(predicted.size()) + " predictions");
    }
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
    return cm;
  }

  /// Binary matrix from one-vs-rest counts, class 1 positive.
  static ConfusionMatrix binary(std::uint64_t tp, std::uint64_t fn, std::uint64_t fp, std::uint64_t tn) {
    ConfusionMatrix cm(2);
    cm.at(1, 1) = tp;
    cm.at(1, 0) = fn;
    cm.at(0, 1) = fp;
    cm.at(0, 0) = tn;
    return cm;
  }

  void add(std::size_t truth, std::size_t predicted) {
    if (truth >= n_ || predicted >= n_) throw std::out_of_range("class index outside confusion matrix");
    ++counts_[truth * n_ + predicted];
  }

  std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts_.at(truth * n_ + predicted); }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * n_ + predicted); }
  std::size_t classes() const { return n_; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t correct() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < n_; ++i) t += at(i, i);
    return t;
  }

  std::uint64_t errors() const { return total() - correct(); }

  double accuracy() const { return total() ? static_cast<double>(correct()) / static_cast<double>(total()) : 0.0; }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < n_; ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t j = 0; j < n_; ++j) row.push_back(at(i, j));
      rows.push_back(row);
    }
    return rows;
  }

  static ConfusionMatrix from_json(const nlohmann::json& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) throw ShapeError("confusion matrix JSON is not square");
      for (std::size_t j = 0; j < rows.size(); ++j) cm.at(i, j) = rows[i][j].get<std::uint64_t>();
    }
    return cm;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

/// A ratio that may have a zero denominator. Never NaN.
struct Ratio {
  std::uint64_t num = 0;
  std::uint64_t den = 0;

  bool defined() const { return den != 0; }
  std::optional<double> value() const {
    if (!defined()) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  }
};

struct ClassMetrics {
  std::uint64_t tp = 0, fn = 0, fp = 0, tn = 0;
  Ratio spec, sens, f1, avg_acc;
};

inline ClassMetrics per_class_metrics(const ConfusionMatrix& cm, std::size_t positive) {
  if (positive >= cm.classes()) throw std::out_of_range("positive class outside confusion matrix");
  const std::uint64_t total = cm.total();
  if (total == 0) throw std::invalid_argument("per_class_metrics: empty confusion matrix");
  ClassMetrics m;
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    for (std::size_t p = 0; p < cm.classes(); ++p) {
      const auto c = cm.at(t, p);
      if (t == positive && p == positive) m.tp += c;
      else if (t == positive) m.fn += c;
      else if (p == positive) m.fp += c;
      else m.tn += c;
    }
  }
  m.spec = {m.tn, m.tn + m.fp};
  m.sens = {m.tp, m.tp + m.fn};
  m.f1 = {2 * m.tp, 2 * m.tp + m.fp + m.fn};
  m.avg_acc = {m.tp + m.tn, total};
  return m;
}

/// Percentage at 2 d.p., rounding half to even on the exact rational.
/// Undefined ratios print as "undef".
inline std::string percent_2dp(const Ratio& r) {
  if (!r.defined()) return "undef";
  // 10000 * num / den, rounded half-even in integer arithmetic.
  const unsigned __int128 scaled = static_cast<unsigned __int128>(r.num) * 10000u;
  unsigned __int128 q = scaled / r.den;
  const unsigned __int128 rem = scaled % r.den;
  if (2 * rem > r.den || (2 * rem == r.den && (q & 1))) ++q;
  const auto whole = static_cast<std::uint64_t>(q / 100), frac = static_cast<std::uint64_t>(q % 100);
  return std::to_string(whole) + "." + (frac < 10 ? "0" : "") + std::to_string(frac);
}

/// Rounds a real value to 2 d.p. with half-even ties, as text.
inline std::string fixed_2dp(double v) {
  const double scaled = v * 100.0;
  double r = std::nearbyint(scaled);  // default rounding mode is to-nearest-even
  // Values within float noise of a .5 boundary count as exact ties.
  const double fl = std::floor(scaled);
  if (std::abs(scaled - fl - 0.5) < 1e-9) r = (static_cast<std::int64_t>(fl) % 2 == 0) ? fl : fl + 1.0;
  if (r == 0.0) r = 0.0;
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << r / 100.0;
  return os.str();
}

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population

  std::string str() const { return fixed_2dp(mean) + " ± " + fixed_2dp(std); }
};

inline Aggregate aggregate(std::span<const double> runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate: no runs");
  Aggregate a;
  for (double v : runs) a.mean += v;
  a.mean /= static_cast<double>(runs.size());
  double ss = 0.0;
  for (double v : runs) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(runs.size()));
  return a;
}

inline nlohmann::json metrics_json(const ClassMetrics& m) {
  auto pct = [](const Ratio& r) -> nlohmann::json {
    auto v = r.value();
    return v ? nlohmann::json(*v * 100.0) : nlohmann::json("undef");
  };
  return {{"tp", m.tp}, {"fn", m.fn},          {"fp", m.fp},     {"tn", m.tn},
          {"spec", pct(m.spec)}, {"sens", pct(m.sens)}, {"f1", pct(m.f1)}, {"avg_acc", pct(m.avg_acc)}};
}

/// Human-readable report; one block per class treated as positive.
inline std::string metric_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names = {}) {
  std::ostringstream os;
  os << "samples " << cm.total() << "  accuracy " << percent_2dp({cm.correct(), cm.total()}) << "%\n";
  os << "class        spec     sens     f1       avg_acc\n";
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const auto m = per_class_metrics(cm, c);
    std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    name.resize(std::max<std::size_t>(name.size(), 12), ' ');
    os << name << ' ';
    for (const Ratio* r : {&m.spec, &m.sens, &m.f1, &m.avg_acc}) {
      std::string s = percent_2dp(*r);
      s.resize(std::max<std::size_t>(s.size(), 8), ' ');
      os << s << ' ';
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace ilmcam
