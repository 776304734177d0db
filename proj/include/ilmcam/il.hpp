#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilmcam/data.hpp"
#include "ilmcam/image_io.hpp"
#include "ilmcam/pipeline.hpp"

namespace ilmcam {

enum class StopPolicy { ZeroErrors, NoNewErrors };
enum class StopReason { None, ZeroErrors, NoNewErrors, MaxIterations };

inline std::string_view to_string(StopPolicy p) { return p == StopPolicy::ZeroErrors ? "zero-errors" : "no-new-errors"; }

inline StopPolicy stop_policy_from_string(std::string_view s) {
  if (s == "zero-errors") return StopPolicy::ZeroErrors;
  if (s == "no-new-errors") return StopPolicy::NoNewErrors;
  throw ConfigError("unknown stop policy '" + std::string(s) + "'");
}

inline std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::None: return "none";
    case StopReason::ZeroErrors: return "zero_errors";
    case StopReason::NoNewErrors: return "no_new_errors";
    case StopReason::MaxIterations: return "max_iterations";
  }
  return "?";
}

inline StopReason stop_reason_from_string(std::string_view s) {
  for (auto r : {StopReason::None, StopReason::ZeroErrors, StopReason::NoNewErrors, StopReason::MaxIterations})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown stop reason '" + std::string(s) + "'");
}

struct ILConfig {
  std::size_t max_iterations = 10;
  StopPolicy policy = StopPolicy::NoNewErrors;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  float alpha = 0.1f;
  double grid_step = 0.1;
  std::uint64_t seed = 0;
  std::size_t jobs = 3;
  bool include_initial = true;  // the warm start competes for best-val
  AdamWConfig adamw;

  void validate() const {
    if (max_iterations == 0) throw ConfigError("max_iterations must be at least 1");
    if (epochs == 0 || batch_size == 0) throw ConfigError("IL epochs and batch size must be positive");
    if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ConfigError("emphasis alpha must lie in [0, 1]");
    if (jobs == 0 || jobs > 3) throw ConfigError("jobs must be between 1 and 3");
    adamw.validate();
  }

  nlohmann::json to_json() const {
    return {{"max_iterations", max_iterations}, {"policy", to_string(policy)}, {"epochs", epochs},
            {"batch_size", batch_size},         {"alpha", alpha},              {"grid_step", grid_step},
            {"seed", seed},                     {"jobs", jobs},                {"include_initial", include_initial},
            {"lr", adamw.lr},                   {"weight_decay", adamw.weight_decay}};
  }

  static ILConfig from_json(const nlohmann::json& j) {
    ILConfig c;
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    if (j.contains("policy")) c.policy = stop_policy_from_string(j.at("policy").get<std::string>());
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.alpha = j.value("alpha", c.alpha);
    c.grid_step = j.value("grid_step", c.grid_step);
    c.seed = j.value("seed", c.seed);
    c.jobs = j.value("jobs", c.jobs);
    c.include_initial = j.value("include_initial", c.include_initial);
    c.adamw.lr = j.value("lr", c.adamw.lr);
    c.adamw.weight_decay = j.value("weight_decay", c.adamw.weight_decay);
    c.validate();
    return c;
  }
};

/// A misclassified validation sample with the decisions that produced it.
struct QueueEntry {
  std::string id;
  std::size_t label = 0;
  std::size_t predicted = 0;
  std::vector<DecisionVector> channel_decisions;
  std::vector<double> fused_scores;
  bool tie = false;

  nlohmann::json to_json() const {
    return {{"id", id},
            {"label", label},
            {"predicted", predicted},
            {"channel_decisions", channel_decisions},
            {"fused_scores", fused_scores},
            {"tie", tie}};
  }

  static QueueEntry from_json(const nlohmann::json& j) {
    return {j.at("id"), j.at("label"), j.at("predicted"), j.at("channel_decisions"), j.at("fused_scores"),
            j.at("tie")};
  }
};

/// Samples whose fused prediction differs from the label, in set order.
inline std::vector<QueueEntry> collect_misclassified(const DecisionSet& d, std::span<const double> weights,
                                                     std::span<const std::size_t> labels,
                                                     std::span<const std::string> ids) {
  d.validate();
  if (labels.size() != d.samples() || ids.size() != d.samples()) {
    throw ShapeError("collect_misclassified: labels/ids do not match the decision set");
  }
  std::vector<QueueEntry> q;
  for (std::size_t i = 0; i < d.samples(); ++i) {
    auto dec = d.sample(i);
    const FusedDecision f = weighted_vote(dec, weights);
    if (f.label == labels[i]) continue;
    q.push_back({ids[i], labels[i], f.label, std::move(dec), f.scores, f.tie});
  }
  return q;
}

inline std::vector<QueueEntry> collect_misclassified(Ensemble& e, const Dataset& val) {
  std::vector<std::string> ids;
  for (const auto& s : val) ids.push_back(s.id);
  const auto labels = labels_of(val);
  return collect_misclassified(e.decisions(stack_images(val, e.input_size())), e.weights.w, labels, ids);
}

inline std::uint64_t mask_hash(const AttentionMask& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  mix(m.height);
  mix(m.width);
  for (auto b : m.bits) mix(b ? 1 : 0);
  return h;
}

/// Source of attention masks. Returning nullopt declines the sample, which
/// is logged as a skip.
class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual std::optional<AttentionMask> annotate(const QueueEntry& entry, const Sample& sample) = 0;
};

/// Hands back the ground-truth mask stored with the sample.
class OracleAnnotator : public Annotator {
 public:
  std::optional<AttentionMask> annotate(const QueueEntry&, const Sample& sample) override { return sample.mask; }
};

/// One resolved queue item: a mask, or a skip with its reason.
struct Annotation {
  std::optional<AttentionMask> mask;
  std::string skip_reason;

  static Annotation skip(std::string reason) { return {std::nullopt, std::move(reason)}; }
};

struct IterationRecord {
  std::size_t iteration = 0;
  std::vector<QueueEntry> queue;  // the errors this iteration acted on
  std::vector<std::string> annotated;
  std::vector<std::pair<std::string, std::string>> skipped;
  std::size_t corpus_before = 0, corpus_after = 0;
  std::size_t val_errors_before = 0, val_errors_after = 0;
  std::vector<std::string> new_error_ids;
  std::vector<std::size_t> best_epochs;
  ChannelWeights weights;
  ConfusionMatrix val_cm{2};
  std::size_t val_ids_in_training = 0;
  std::string digest;
  StopReason stop = StopReason::None;

  nlohmann::json to_json() const {
    nlohmann::json q = nlohmann::json::array(), sk = nlohmann::json::array();
    for (const auto& e : queue) q.push_back(e.to_json());
    for (const auto& [id, why] : skipped) sk.push_back({{"id", id}, {"reason", why}});
    return {{"iteration", iteration},
            {"queue", q},
            {"annotated", annotated},
            {"skipped", sk},
            {"corpus_before", corpus_before},
            {"corpus_after", corpus_after},
            {"val_errors_before", val_errors_before},
            {"val_errors_after", val_errors_after},
            {"val_acc", val_cm.total() ? static_cast<double>(val_cm.correct()) / static_cast<double>(val_cm.total())
                                       : 0.0},
            {"new_error_ids", new_error_ids},
            {"best_epochs", best_epochs},
            {"weights", weights.w},
            {"val_confusion", val_cm.to_json()},
            {"val_ids_in_training", val_ids_in_training},
            {"digest", digest},
            {"stop_reason", to_string(stop)}};
  }

  static IterationRecord from_json(const nlohmann::json& j) {
    IterationRecord r;
    r.iteration = j.at("iteration");
    for (const auto& e : j.at("queue")) r.queue.push_back(QueueEntry::from_json(e));
    r.annotated = j.at("annotated").get<std::vector<std::string>>();
    for (const auto& s : j.at("skipped")) r.skipped.emplace_back(s.at("id"), s.at("reason"));
    r.corpus_before = j.at("corpus_before");
    r.corpus_after = j.at("corpus_after");
    r.val_errors_before = j.at("val_errors_before");
    r.val_errors_after = j.at("val_errors_after");
    r.new_error_ids = j.at("new_error_ids").get<std::vector<std::string>>();
    r.best_epochs = j.at("best_epochs").get<std::vector<std::size_t>>();
    r.weights.w = j.at("weights").get<std::vector<double>>();
    r.val_cm = ConfusionMatrix::from_json(j.at("val_confusion"));
    r.val_ids_in_training = j.at("val_ids_in_training");
    r.digest = j.at("digest");
    r.stop = stop_reason_from_string(j.at("stop_reason").get<std::string>());
    return r;
  }
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

/// The interactive loop over a trained ensemble. Backbones and attention
/// stay frozen, so each channel's head inputs are computed once per sample
/// and reused across iterations.
class ILSession {
 public:
  ILSession(Ensemble ensemble, Dataset corpus, Dataset val, ILConfig cfg)
      : cfg_(std::move(cfg)), ens_(std::move(ensemble)), corpus_(std::move(corpus)), val_(std::move(val)) {
    cfg_.validate();
    if (ens_.channels.empty()) throw ConfigError("IL needs at least one channel");
    if (val_.empty()) throw std::invalid_argument("IL needs a nonempty validation set");
    if (corpus_.empty()) throw std::invalid_argument("IL needs a nonempty training corpus");
    ens_.weights.validate(ens_.channels.size());
    index_validation();
    const Tensor val_images = stack_images(val_, ens_.input_size());
    const Tensor corpus_images = stack_images(corpus_, ens_.input_size());
    for (auto& m : ens_.channels) {
      val_feats_.push_back(m.extract_features(val_images));
      corpus_feats_.push_back(m.extract_features(corpus_images));
    }
    corpus_labels_ = labels_of(corpus_);
    refresh_queue();
    IterationRecord r0;
    r0.iteration = 0;
    r0.corpus_before = r0.corpus_after = corpus_.size();
    r0.val_errors_before = r0.val_errors_after = queue_.size();
    for (const auto& e : queue_) r0.new_error_ids.push_back(e.id);
    r0.weights = ens_.weights;
    r0.val_cm = val_cm_;
    r0.digest = hex64(ens_.digest());
    if (queue_.empty()) r0.stop = stop_ = StopReason::ZeroErrors;
    for (const auto& e : queue_) seen_.insert(e.id);
    history_.push_back(std::move(r0));
  }

  const ILConfig& config() const { return cfg_; }
  const std::vector<QueueEntry>& queue() const { return queue_; }
  bool finished() const { return stop_ != StopReason::None; }
  StopReason stop_reason() const { return stop_; }
  std::size_t iteration() const { return history_.size() - 1; }
  const Ensemble& ensemble() const { return ens_; }
  Ensemble& ensemble() { return ens_; }
  const Dataset& corpus() const { return corpus_; }
  const Dataset& validation() const { return val_; }
  const std::vector<IterationRecord>& history() const { return history_; }
  std::size_t initial_val_errors() const { return history_.front().val_errors_after; }
  std::size_t val_errors() const { return queue_.size(); }

  const Sample& val_sample(const std::string& id) const {
    auto it = val_index_.find(id);
    if (it == val_index_.end()) throw std::out_of_range("unknown validation id '" + id + "'");
    return val_[it->second];
  }

  bool queued(const std::string& id) const {
    return std::any_of(queue_.begin(), queue_.end(), [&](const QueueEntry& e) { return e.id == id; });
  }

  /// Queue ids without an entry in `annotations`.
  std::vector<std::string> pending(const std::map<std::string, Annotation>& annotations) const {
    std::vector<std::string> out;
    for (const auto& e : queue_)
      if (!annotations.count(e.id)) out.push_back(e.id);
    return out;
  }

  /// Throws unless `m` fits the sample and marks at least one pixel.
  void check_mask(const std::string& id, const AttentionMask& m) const {
    const Sample& s = val_sample(id);
    validate_mask_for(m, s.height(), s.width());
  }

  /// Incorporates the annotations for the current queue, fine-tunes every
  /// head, re-searches the fusion weights and requeues.
  const IterationRecord& apply_iteration(const std::map<std::string, Annotation>& annotations) {
    if (finished()) throw std::logic_error("IL session already stopped (" + std::string(to_string(stop_)) + ")");
    if (queue_.empty()) throw std::logic_error("IL iteration needs a nonempty queue");
    if (auto p = pending(annotations); !p.empty()) {
      std::string list;
      for (const auto& id : p) list += (list.empty() ? "" : ", ") + id;
      throw std::invalid_argument("annotations pending for: " + list);
    }
    for (const auto& [id, a] : annotations) {
      if (!queued(id)) throw std::invalid_argument("'" + id + "' is not in the current queue");
      if (a.mask) check_mask(id, *a.mask);
    }

    IterationRecord r;
    r.iteration = iteration() + 1;
    r.queue = queue_;
    r.corpus_before = corpus_.size();
    r.val_errors_before = queue_.size();
    Dataset added;
    for (const auto& e : queue_) {
      const Annotation& a = annotations.at(e.id);
      if (!a.mask) {
        r.skipped.emplace_back(e.id, a.skip_reason.empty() ? "skipped" : a.skip_reason);
        continue;
      }
      r.annotated.push_back(e.id);
      incorporations_.push_back({e.id, r.iteration, *a.mask});
      for (auto& s : incorporation_samples(e.id, r.iteration, *a.mask)) added.push_back(std::move(s));
    }
    grow_corpus(added);
    r.corpus_after = corpus_.size();

    std::vector<TrainResult> results(ens_.channels.size());
    parallel_for(ens_.channels.size(), cfg_.jobs, [&](std::size_t c) {
      TrainPlan plan;
      plan.epochs = cfg_.epochs;
      plan.batch_size = cfg_.batch_size;
      plan.freeze = FreezePolicy::FcOnly;
      plan.seed = cfg_.seed * 1000003ULL + r.iteration * 101ULL + c;
      plan.include_initial = cfg_.include_initial;
      results[c] = train_head(ens_.channels[c], corpus_feats_[c], corpus_labels_, val_feats_[c], val_labels_, plan,
                              cfg_.adamw);
    });
    for (const auto& res : results) r.best_epochs.push_back(res.best_epoch);
    const DecisionSet d = val_decisions();
    ens_.weights = grid_search_weights(d, val_labels_, cfg_.grid_step).best;
    refresh_queue();

    r.val_errors_after = queue_.size();
    for (const auto& e : queue_)
      if (!seen_.count(e.id)) r.new_error_ids.push_back(e.id);
    r.weights = ens_.weights;
    r.val_cm = val_cm_;
    r.val_ids_in_training = leak_audit(corpus_, val_, {}).val_ids_in_training.size();
    r.digest = hex64(ens_.digest());
    if (queue_.empty()) stop_ = StopReason::ZeroErrors;
    else if (cfg_.policy == StopPolicy::NoNewErrors && r.new_error_ids.empty()) stop_ = StopReason::NoNewErrors;
    else if (r.iteration >= cfg_.max_iterations) stop_ = StopReason::MaxIterations;
    r.stop = stop_;
    for (const auto& e : queue_) seen_.insert(e.id);
    history_.push_back(std::move(r));
    return history_.back();
  }

  /// Drives the loop to a stop with `annotator` answering every queue item.
  void run(Annotator& annotator, const std::function<void(const IterationRecord&)>& on_iteration = {}) {
    while (!finished()) {
      std::map<std::string, Annotation> ann;
      for (const auto& e : queue_) {
        try {
          auto m = annotator.annotate(e, val_sample(e.id));
          if (!m) {
            ann[e.id] = Annotation::skip("annotator declined");
            continue;
          }
          check_mask(e.id, *m);
          ann[e.id] = {std::move(m), {}};
        } catch (const std::exception& ex) {
          ann[e.id] = Annotation::skip(ex.what());
        }
      }
      const auto& rec = apply_iteration(ann);
      if (on_iteration) on_iteration(rec);
    }
  }

  std::string audit_jsonl() const {
    std::string out;
    for (const auto& r : history_) out += r.to_json().dump() + "\n";
    return out;
  }

  LeakReport leak_report(const Dataset& test) const { return leak_audit(corpus_, val_, test); }

  nlohmann::json state_json() const {
    nlohmann::json inc = nlohmann::json::array();
    for (const auto& i : incorporations_) {
      inc.push_back({{"id", i.id},
                     {"iteration", i.iteration},
                     {"mask_png", base64_encode(encode_mask_png(i.mask))},
                     {"height", i.mask.height},
                     {"width", i.mask.width}});
    }
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : history_) hist.push_back(r.to_json());
    return {{"version", 1},
            {"config", cfg_.to_json()},
            {"iteration", iteration()},
            {"stop_reason", to_string(stop_)},
            {"seen_ids", std::vector<std::string>(seen_.begin(), seen_.end())},
            {"incorporated", inc},
            {"weights", ens_.weights.w},
            {"queue", [&] {
               nlohmann::json q = nlohmann::json::array();
               for (const auto& e : queue_) q.push_back(e.to_json());
               return q;
             }()},
            {"history", hist}};
  }

  /// Writes state.json, audit.jsonl and the current ensemble under `dir`.
  void save(const std::filesystem::path& dir) const {
    ens_.save(dir / "model");
    write_file_atomic(dir / "audit.jsonl", audit_jsonl());
    write_file_atomic(dir / "state.json", state_json().dump(2) + "\n");
  }

  /// Rebuilds a saved session from the base corpus and validation set it
  /// was started with; the incorporated annotations are replayed.
  static ILSession load(const std::filesystem::path& dir, Dataset base_corpus, Dataset val) {
    const auto j = nlohmann::json::parse(read_file(dir / "state.json"));
    if (j.value("version", 0) != 1) throw CheckpointError("unsupported IL state version");
    ILSession s(Ensemble::load(dir / "model"), std::move(base_corpus), std::move(val),
                ILConfig::from_json(j.at("config")), Resume{});
    Dataset added;
    for (const auto& i : j.at("incorporated")) {
      AttentionMask m = decode_mask_png(base64_decode(i.at("mask_png").get<std::string>()));
      const std::string id = i.at("id");
      const std::size_t it = i.at("iteration");
      s.incorporations_.push_back({id, it, m});
      for (auto& smp : s.incorporation_samples(id, it, m)) added.push_back(std::move(smp));
    }
    s.grow_corpus(added);
    s.history_.clear();
    for (const auto& r : j.at("history")) s.history_.push_back(IterationRecord::from_json(r));
    for (const auto& id : j.at("seen_ids")) s.seen_.insert(id.get<std::string>());
    s.stop_ = stop_reason_from_string(j.at("stop_reason").get<std::string>());
    s.refresh_queue();
    if (hex64(s.ens_.digest()) != s.history_.back().digest) {
      throw CheckpointError("IL state digest does not match the saved model");
    }
    return s;
  }

 private:
  struct Resume {};
  struct Incorporation {
    std::string id;
    std::size_t iteration;
    AttentionMask mask;
  };

  ILSession(Ensemble ensemble, Dataset corpus, Dataset val, ILConfig cfg, Resume)
      : cfg_(std::move(cfg)), ens_(std::move(ensemble)), corpus_(), val_(std::move(val)) {
    index_validation();
    const Tensor val_images = stack_images(val_, ens_.input_size());
    for (auto& m : ens_.channels) {
      val_feats_.push_back(m.extract_features(val_images));
      corpus_feats_.emplace_back();
    }
    grow_corpus(corpus);
  }

  void index_validation() {
    for (const auto& s : val_) {
      if (!val_index_.emplace(s.id, val_ids_.size()).second) throw std::invalid_argument("duplicate validation id " + s.id);
      val_ids_.push_back(s.id);
    }
    val_labels_ = labels_of(val_);
  }

  // The unaltered copy and the emphasized copy, each in six orientations.
  std::vector<Sample> incorporation_samples(const std::string& id, std::size_t iteration,
                                            const AttentionMask& mask) const {
    Sample base = val_sample(id);
    base.id = id + "@il" + std::to_string(iteration);
    base.mask = mask;
    const Sample emph = apply_mask_emphasis(base, mask, cfg_.alpha);
    std::vector<Sample> out = augment_6x(base);
    for (auto& s : augment_6x(emph)) out.push_back(std::move(s));
    return out;
  }

  void grow_corpus(const Dataset& added) {
    if (added.empty()) return;
    const Tensor images = stack_images(added, ens_.input_size());
    for (std::size_t c = 0; c < ens_.channels.size(); ++c) {
      const Tensor f = ens_.channels[c].extract_features(images);
      Tensor& dst = corpus_feats_[c];
      if (dst.empty()) {
        dst = f;
        continue;
      }
      Tensor merged({dst.dim(0) + f.dim(0), dst.dim(1)});
      std::copy(dst.data().begin(), dst.data().end(), merged.data().begin());
      std::copy(f.data().begin(), f.data().end(), merged.data().begin() + static_cast<std::ptrdiff_t>(dst.numel()));
      dst = std::move(merged);
    }
    for (const auto& s : added) {
      corpus_.push_back(s);
      corpus_labels_.push_back(s.label);
    }
  }

  DecisionSet val_decisions() {
    DecisionSet d;
    for (std::size_t c = 0; c < ens_.channels.size(); ++c)
      d.probs.push_back(ens_.channels[c].predict_from_features(val_feats_[c]));
    return d;
  }

  void refresh_queue() {
    const DecisionSet d = val_decisions();
    queue_ = collect_misclassified(d, ens_.weights.w, val_labels_, val_ids_);
    val_cm_ = evaluate_fused(d, ens_.weights.w, val_labels_);
  }

  ILConfig cfg_;
  Ensemble ens_;
  Dataset corpus_, val_;
  std::vector<std::size_t> corpus_labels_, val_labels_;
  std::vector<std::string> val_ids_;
  std::map<std::string, std::size_t> val_index_;
  std::vector<Tensor> corpus_feats_, val_feats_;
  std::vector<QueueEntry> queue_;
  ConfusionMatrix val_cm_{2};
  std::set<std::string> seen_;
  std::vector<Incorporation> incorporations_;
  std::vector<IterationRecord> history_;
  StopReason stop_ = StopReason::None;
};

/// Training corpus the IL stage starts from: the AL training set, augmented
/// the same way the AL stage saw it.
inline Dataset initial_corpus(const Dataset& train, const ALConfig& al) {
  return al.augment_train ? augment_dataset(train) : train;
}

struct ILRunOutput {
  nlohmann::json al_summary;
  ILSession session;
};

/// Headless pipeline: AL stage, then the IL loop driven by `annotator`.
inline ILRunOutput il_run(const DataSplit& data, const ALConfig& al, const ILConfig& il, Annotator& annotator,
                          const std::function<void(const IterationRecord&)>& on_iteration = {}) {
  ALResult r = run_al_stage(data.train, data.val, al);
  ILRunOutput out{al_summary_json(r), ILSession(std::move(r.ensemble), initial_corpus(data.train, al), data.val, il)};
  out.session.run(annotator, on_iteration);
  return out;
}

}  // namespace ilmcam
