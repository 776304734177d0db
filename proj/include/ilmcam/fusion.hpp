#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilmcam/tensor.hpp"

namespace ilmcam {

/// Per-class softmax scores of one channel for one sample.
using DecisionVector = std::vector<float>;

/// Nonnegative channel weights; normalized ones sum to 1.
struct ChannelWeights {
  std::vector<double> w;

  void validate(std::size_t channels) const {
    if (w.size() != channels) {
      throw ShapeError("fusion: " + std::to_string(w.size()) + " weights for " + std::to_string(channels) +
                       " channels");
    }
    double s = 0.0;
    for (double v : w) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("fusion weights must be finite and nonnegative");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("fusion weights sum to " + std::to_string(s) + ", not 1");
  }

  double entropy() const {
    double h = 0.0;
    for (double v : w)
      if (v > 0.0) h -= v * std::log(v);
    return h;
  }

  nlohmann::json to_json() const { return w; }
};

struct FusedDecision {
  std::size_t label = 0;
  std::vector<double> scores;
  bool tie = false;  // argmax shared by several classes; lowest index won
};

/// Sum_i w_i d_i and its argmax. Weights are taken as given, normalized or not.
inline FusedDecision weighted_vote(std::span<const DecisionVector> decisions, std::span<const double> weights) {
  if (decisions.empty()) throw ShapeError("fusion: no decision vectors");
  if (weights.size() != decisions.size()) {
    throw ShapeError("fusion: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(decisions.size()) + " decision vectors");
  }
  const std::size_t n = decisions[0].size();
  if (n < 2) throw ShapeError("fusion: decision vectors need at least 2 classes");
  FusedDecision out;
  out.scores.assign(n, 0.0);
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    if (decisions[i].size() != n) {
      throw ShapeError("fusion: decision vector " + std::to_string(i) + " has " +
                       std::to_string(decisions[i].size()) + " classes, expected " + std::to_string(n));
    }
    for (std::size_t x = 0; x < n; ++x) out.scores[x] += weights[i] * decisions[i][x];
  }
  for (std::size_t x = 1; x < n; ++x) {
    if (out.scores[x] > out.scores[out.label]) {
      out.label = x;
      out.tie = false;
    } else if (out.scores[x] == out.scores[out.label]) {
      out.tie = true;
    }
  }
  return out;
}

inline FusedDecision fuse(std::span<const DecisionVector> decisions, const ChannelWeights& w) {
  w.validate(decisions.size());
  return weighted_vote(decisions, w.w);
}

/// Decisions of every channel over a sample set: probs[channel] is [N, classes].
struct DecisionSet {
  std::vector<Tensor> probs;

  std::size_t channels() const { return probs.size(); }
  std::size_t samples() const { return probs.empty() ? 0 : probs[0].dim(0); }
  std::size_t classes() const { return probs.empty() ? 0 : probs[0].dim(1); }

  void validate() const {
    if (probs.empty()) throw ShapeError("decision set has no channels");
    for (std::size_t c = 0; c < probs.size(); ++c) {
      if (probs[c].rank() != 2 || probs[c].shape() != probs[0].shape()) {
        throw ShapeError("decision set: channel " + std::to_string(c) + " has shape " +
                         shape_str(probs[c].shape()) + ", expected " + shape_str(probs[0].shape()));
      }
    }
  }

  std::vector<DecisionVector> sample(std::size_t i) const {
    std::vector<DecisionVector> out;
    const std::size_t n = classes();
    for (const Tensor& p : probs) out.emplace_back(p.data().begin() + i * n, p.data().begin() + (i + 1) * n);
    return out;
  }
};

struct FusedPredictions {
  std::vector<std::size_t> labels;
  std::size_t ties = 0;
};

inline FusedPredictions predict_fused(const DecisionSet& set, std::span<const double> weights) {
  set.validate();
  FusedPredictions out;
  out.labels.reserve(set.samples());
  for (std::size_t i = 0; i < set.samples(); ++i) {
    const auto d = set.sample(i);
    const FusedDecision f = weighted_vote(d, weights);
    out.labels.push_back(f.label);
    out.ties += f.tie ? 1 : 0;
  }
  return out;
}

inline double fused_accuracy(const DecisionSet& set, std::span<const double> weights,
                             std::span<const std::size_t> labels) {
  const auto p = predict_fused(set, weights);
  if (labels.size() != p.labels.size()) throw ShapeError("fusion: label count does not match decision set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += p.labels[i] == labels[i] ? 1 : 0;
  return labels.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Lattice points of the simplex with coordinates in multiples of `step`,
/// in lexicographic order. Channels outside `active` are pinned to 0.
inline std::vector<ChannelWeights> simplex_grid(std::size_t channels, double step,
                                                std::vector<bool> active = {}) {
  if (channels == 0) throw ConfigError("simplex grid needs at least one channel");
  if (!(step > 0.0) || step > 1.0) throw ConfigError("grid step must lie in (0, 1]");
  const double m_real = 1.0 / step;
  const auto m = static_cast<std::size_t>(std::llround(m_real));
  if (m == 0 || std::abs(static_cast<double>(m) * step - 1.0) > 1e-9) {
    throw ConfigError("grid step " + std::to_string(step) + " does not divide 1");
  }
  if (active.empty()) active.assign(channels, true);
  if (active.size() != channels) throw ShapeError("channel mask length does not match channel count");
  if (std::none_of(active.begin(), active.end(), [](bool b) { return b; })) {
    throw ConfigError("channel mask selects no channel");
  }
  std::vector<ChannelWeights> out;
  std::vector<std::size_t> units(channels, 0);
  // Distribute m units over the active channels, last active channel takes the remainder.
  std::vector<std::size_t> idx;
  for (std::size_t c = 0; c < channels; ++c)
    if (active[c]) idx.push_back(c);
  auto rec = [&](auto&& self, std::size_t k, std::size_t left) -> void {
    if (k + 1 == idx.size()) {
      units[idx[k]] = left;
      ChannelWeights w;
      for (std::size_t c = 0; c < channels; ++c) w.w.push_back(static_cast<double>(units[c]) / static_cast<double>(m));
      out.push_back(std::move(w));
      return;
    }
    for (std::size_t u = 0; u <= left; ++u) {
      units[idx[k]] = u;
      self(self, k + 1, left - u);
    }
    units[idx[k]] = 0;
  };
  rec(rec, 0, m);
  return out;
}

struct GridPoint {
  ChannelWeights weights;
  double accuracy = 0.0;
};

struct GridSearchResult {
  ChannelWeights best;
  double accuracy = 0.0;
  std::vector<GridPoint> table;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& p : table) rows.push_back({{"weights", p.weights.w}, {"val_acc", p.accuracy}});
    return {{"weights", best.w}, {"val_acc", accuracy}, {"grid", rows}};
  }
};

/// Exhaustive search over the weight lattice for the best validation
/// accuracy. Ties prefer the most uniform weights, then the earliest point.
inline GridSearchResult grid_search_weights(const DecisionSet& val, std::span<const std::size_t> labels,
                                            double step = 0.1, std::vector<bool> active = {}) {
  val.validate();
  if (val.samples() == 0 || labels.empty()) throw std::invalid_argument("grid search: empty validation set");
  GridSearchResult r;
  bool have = false;
  double best_entropy = 0.0;
  for (auto& w : simplex_grid(val.channels(), step, std::move(active))) {
    const double acc = fused_accuracy(val, w.w, labels);
    const double h = w.entropy();
    if (!have || acc > r.accuracy || (acc == r.accuracy && h > best_entropy + 1e-12)) {
      r.best = w;
      r.accuracy = acc;
      best_entropy = h;
      have = true;
    }
    r.table.push_back({std::move(w), acc});
  }
  return r;
}

}  // namespace ilmcam
