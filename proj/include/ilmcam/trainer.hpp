#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "ilmcam/channels.hpp"
#include "ilmcam/data.hpp"
#include "ilmcam/fusion.hpp"
#include "ilmcam/metrics.hpp"

namespace ilmcam {

struct AdamWConfig {
  double lr = 2e-3;
  double eps = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("AdamW betas must lie in [0, 1)");
    }
    if (!(lr > 0.0) || !(eps > 0.0) || !(weight_decay >= 0.0)) {
      throw ConfigError("AdamW lr and eps must be positive, weight decay nonnegative");
    }
  }
};

struct AdamWMoments {
  std::vector<double> m, v;
  std::uint64_t step = 0;
};

/// One decoupled-decay Adam update:
///   p <- p (1 - lr wd);  p <- p - lr m_hat / (sqrt(v_hat) + eps).
/// Throws NumericError before touching anything if a gradient is not finite.
inline void adamw_step(std::span<float> params, std::span<const float> grads, AdamWMoments& s,
                       const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adamw_step: parameter and gradient sizes differ");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("adamw_step: non-finite gradient " + std::to_string(grads[i]) + " at element " +
                         std::to_string(i));
    }
  }
  if (s.m.size() != params.size()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g;
    s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
    double p = static_cast<double>(params[i]) * decay;
    p -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    params[i] = static_cast<float>(p);
  }
}

enum class FreezePolicy { None, BackboneFrozen, FcOnly };

inline std::string_view to_string(FreezePolicy f) {
  switch (f) {
    case FreezePolicy::None: return "none";
    case FreezePolicy::BackboneFrozen: return "backbone_frozen";
    case FreezePolicy::FcOnly: return "fc_only";
  }
  return "?";
}

inline FreezePolicy freeze_policy_from_string(std::string_view s) {
  if (s == "none") return FreezePolicy::None;
  if (s == "backbone_frozen") return FreezePolicy::BackboneFrozen;
  if (s == "fc_only") return FreezePolicy::FcOnly;
  throw ConfigError("unknown freeze policy '" + std::string(s) + "'");
}

/// Trainable flag per parameter, in model order.
inline std::vector<bool> freeze_mask(const ChannelModel& m, FreezePolicy policy) {
  std::vector<bool> out;
  for (const auto& p : m.params()) {
    switch (policy) {
      case FreezePolicy::None: out.push_back(true); break;
      case FreezePolicy::BackboneFrozen: out.push_back(p.group != ParamGroup::Backbone); break;
      case FreezePolicy::FcOnly: out.push_back(p.group == ParamGroup::Head); break;
    }
  }
  return out;
}

struct TrainPlan {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  FreezePolicy freeze = FreezePolicy::None;
  std::uint64_t seed = 0;
  bool include_initial = false;  // the starting weights compete for best-val
  bool cache_features = true;    // reuse head inputs when only the head trains

  void validate() const {
    if (epochs == 0) throw ConfigError("train plan needs at least one epoch");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},          {"batch_size", batch_size},           {"freeze", to_string(freeze)},
            {"seed", seed},              {"include_initial", include_initial}, {"cache_features", cache_features}};
  }
};

struct LabeledImages {
  Tensor images;  // [N,3,S,S]
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

inline LabeledImages to_labeled(const Dataset& d, std::size_t input_size) {
  if (d.empty()) return {Tensor(), {}};
  return {stack_images(d, input_size), labels_of(d)};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;

  nlohmann::json to_json() const { return {{"epoch", epoch}, {"train_loss", train_loss}, {"val_acc", val_acc}}; }
};

struct TrainResult {
  NamedTensors best_state;
  std::size_t best_epoch = 0;  // 0 = the starting weights
  double best_val_acc = 0.0;
  std::vector<EpochRecord> history;
  std::vector<std::string> changed_params;  // bit-level changes between start and best
  std::vector<std::string> frozen_params;
  bool used_feature_cache = false;

  std::string history_jsonl() const {
    std::ostringstream os;
    for (const auto& e : history) os << e.to_json().dump() << '\n';
    return os.str();
  }
};

namespace detail {

inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  Shape s = t.shape();
  const std::size_t per = t.numel() / s[0];
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(t.data().begin() + idx[i] * per, t.data().begin() + (idx[i] + 1) * per, out.data().begin() + i * per);
  return out;
}

inline double accuracy_of(const Tensor& probs, std::span<const std::size_t> labels) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = probs.data().data() + i * k;
    hit += static_cast<std::size_t>(std::max_element(row, row + k) - row) == labels[i] ? 1 : 0;
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

// Uniform training loop over either raw images or cached head inputs.
template <typename Forward, typename Predict>
TrainResult run_training(ChannelModel& model, const Tensor& train_x, std::span<const std::size_t> train_y,
                         const Tensor& val_x, std::span<const std::size_t> val_y, const TrainPlan& plan,
                         const AdamWConfig& cfg, Forward&& forward, Predict&& predict) {
  plan.validate();
  cfg.validate();
  if (train_y.empty()) throw std::invalid_argument("train_channel: empty training set");
  if (val_y.empty()) throw std::invalid_argument("train_channel: empty validation set");
  auto& params = model.params();
  const std::vector<bool> trainable = freeze_mask(model, plan.freeze);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].value.drop_grad();
    params[i].value.set_requires_grad(trainable[i]);
  }
  const NamedTensors start = model.state();
  std::vector<AdamWMoments> moments(params.size());

  TrainResult r;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!trainable[i]) r.frozen_params.push_back(params[i].name);
  bool have_best = false;
  if (plan.include_initial) {
    r.best_val_acc = accuracy_of(predict(val_x), val_y);
    r.best_state = start;
    r.best_epoch = 0;
    have_best = true;
  }

  std::mt19937_64 rng(plan.seed);
  std::vector<std::size_t> order(train_y.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start_i = 0; start_i < order.size(); start_i += plan.batch_size) {
      const std::size_t m = std::min(plan.batch_size, order.size() - start_i);
      const std::span<const std::size_t> idx(order.data() + start_i, m);
      std::vector<std::size_t> labels(m);
      for (std::size_t i = 0; i < m; ++i) labels[i] = train_y[idx[i]];
      for (std::size_t i = 0; i < params.size(); ++i)
        if (trainable[i]) params[i].value.zero_grad();
      float loss = 0.0f;
      {
        Graph g;
        Var l = cross_entropy_loss(g, forward(g, g.input(gather_rows(train_x, idx))), labels);
        loss = g.value(l)[0];
        if (!std::isfinite(loss)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches + 1));
        }
        g.backward(l);
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable[i] || !params[i].value.has_grad()) continue;
        try {
          adamw_step(params[i].value.data(), params[i].value.grad(), moments[i], cfg);
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " in " + params[i].name + " at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batches + 1));
        }
      }
      loss_sum += loss;
      ++batches;
    }
    const double acc = accuracy_of(predict(val_x), val_y);
    r.history.push_back({epoch, loss_sum / static_cast<double>(batches), acc});
    if (!have_best || acc > r.best_val_acc) {
      r.best_val_acc = acc;
      r.best_epoch = epoch;
      r.best_state = model.state();
      have_best = true;
    }
  }
  model.load_state(r.best_state);
  for (auto& p : params) {
    p.value.drop_grad();
    p.value.set_requires_grad(false);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (checksum(start[i].second) != checksum(r.best_state[i].second)) r.changed_params.push_back(params[i].name);
  }
  return r;
}

}  // namespace detail

/// True when the plan leaves only the final FC layer trainable.
inline bool head_only(const ChannelModel& m, FreezePolicy policy) {
  const auto mask = freeze_mask(m, policy);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] && m.params()[i].group != ParamGroup::Head) return false;
  return true;
}

/// Trains the head alone on precomputed head inputs. Bit-identical to the
/// full path under a head-only policy, since the frozen stack is a fixed
/// per-sample function.
inline TrainResult train_head(ChannelModel& model, const Tensor& train_feats, std::span<const std::size_t> train_y,
                              const Tensor& val_feats, std::span<const std::size_t> val_y, TrainPlan plan,
                              const AdamWConfig& cfg = {}) {
  if (!head_only(model, plan.freeze)) throw ConfigError("train_head needs a head-only freeze policy");
  auto r = detail::run_training(
      model, train_feats, train_y, val_feats, val_y, plan, cfg,
      [&](Graph& g, Var x) { return model.head(g, x); },
      [&](const Tensor& x) { return model.predict_from_features(x); });
  r.used_feature_cache = true;
  return r;
}

/// Supervised training with best-on-validation selection. The model ends up
/// holding the best checkpoint.
inline TrainResult train_channel(ChannelModel& model, const LabeledImages& train, const LabeledImages& val,
                                 const TrainPlan& plan, const AdamWConfig& cfg = {}) {
  if (plan.cache_features && head_only(model, plan.freeze) && train.size() > 0 && val.size() > 0) {
    const Tensor tf = model.extract_features(train.images), vf = model.extract_features(val.images);
    return train_head(model, tf, train.labels, vf, val.labels, plan, cfg);
  }
  return detail::run_training(
      model, train.images, train.labels, val.images, val.labels, plan, cfg,
      [&](Graph& g, Var x) { return model.forward(g, x); }, [&](const Tensor& x) { return model.predict(x); });
}

inline ConfusionMatrix evaluate(ChannelModel& model, const LabeledImages& data) {
  const Tensor p = model.predict(data.images);
  std::vector<std::size_t> pred(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const float* row = p.data().data() + i * p.dim(1);
    pred[i] = static_cast<std::size_t>(std::max_element(row, row + p.dim(1)) - row);
  }
  return ConfusionMatrix::from_predictions(model.spec().num_classes, data.labels, pred);
}

/// Decision rows of every channel over a dataset.
inline DecisionSet decisions_of(std::vector<ChannelModel>& models, const Tensor& images) {
  DecisionSet d;
  for (auto& m : models) d.probs.push_back(m.predict(images));
  return d;
}

inline ConfusionMatrix evaluate_fused(const DecisionSet& d, std::span<const double> weights,
                                      std::span<const std::size_t> labels) {
  const auto p = predict_fused(d, weights);
  return ConfusionMatrix::from_predictions(d.classes(), labels, p.labels);
}

/// Runs `job(i)` for i in [0, n) on at most `jobs` threads. Exceptions are
/// rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& job) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace ilmcam
