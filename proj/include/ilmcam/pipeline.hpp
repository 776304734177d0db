#pragma once

#include <cstring>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilmcam/channels.hpp"
#include "ilmcam/checkpoint.hpp"
#include "ilmcam/data.hpp"
#include "ilmcam/fusion.hpp"
#include "ilmcam/metrics.hpp"
#include "ilmcam/trainer.hpp"

namespace ilmcam {

inline const std::vector<ChannelKind>& all_channel_kinds() {
  static const std::vector<ChannelKind> k = {ChannelKind::SIC, ChannelKind::MGIC, ChannelKind::MSIC};
  return k;
}

/// Automatic-learning stage settings: phase 1 trains everything, phase 2
/// freezes the backbone and tunes attention + FC.
struct ALConfig {
  std::size_t classes = 2;
  std::size_t input_size = 64;
  double width_multiplier = 1.0;
  std::vector<ChannelKind> kinds = all_channel_kinds();
  std::size_t pretrain_epochs = 20;
  std::size_t finetune_epochs = 80;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  AdamWConfig adamw;
  double grid_step = 0.1;
  std::size_t jobs = 3;
  bool augment_train = true;

  void validate() const {
    if (kinds.empty()) throw ConfigError("AL config lists no channels");
    if (pretrain_epochs + finetune_epochs == 0) throw ConfigError("AL config trains for zero epochs");
    if (jobs == 0 || jobs > 3) throw ConfigError("jobs must be between 1 and 3");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    adamw.validate();
  }

  std::uint64_t channel_seed(std::size_t c) const { return seed * 1000003ULL + 17ULL * (c + 1); }

  nlohmann::json to_json() const {
    nlohmann::json ks = nlohmann::json::array();
    for (auto k : kinds) ks.push_back(std::string(to_string(k)));
    return {{"classes", classes},
            {"input_size", input_size},
            {"width_multiplier", width_multiplier},
            {"channels", ks},
            {"pretrain_epochs", pretrain_epochs},
            {"finetune_epochs", finetune_epochs},
            {"batch_size", batch_size},
            {"seed", seed},
            {"lr", adamw.lr},
            {"weight_decay", adamw.weight_decay},
            {"grid_step", grid_step},
            {"jobs", jobs},
            {"augment_train", augment_train}};
  }

  static ALConfig from_json(const nlohmann::json& j) {
    ALConfig c;
    c.classes = j.value("classes", c.classes);
    c.input_size = j.value("input_size", c.input_size);
    c.width_multiplier = j.value("width_multiplier", c.width_multiplier);
    if (j.contains("channels")) {
      c.kinds.clear();
      for (const auto& k : j.at("channels")) c.kinds.push_back(channel_kind_from_string(k.get<std::string>()));
    }
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.adamw.lr = j.value("lr", c.adamw.lr);
    c.adamw.weight_decay = j.value("weight_decay", c.adamw.weight_decay);
    c.grid_step = j.value("grid_step", c.grid_step);
    c.jobs = j.value("jobs", c.jobs);
    c.augment_train = j.value("augment_train", c.augment_train);
    c.validate();
    return c;
  }
};

/// The channels plus their fusion weights.
struct Ensemble {
  std::vector<ChannelModel> channels;
  ChannelWeights weights;

  std::size_t classes() const { return channels.at(0).spec().num_classes; }
  std::size_t input_size() const { return channels.at(0).spec().input_size; }

  DecisionSet decisions(const Tensor& images) { return decisions_of(channels, images); }

  ConfusionMatrix evaluate(const LabeledImages& data) {
    return evaluate_fused(decisions(data.images), weights.w, data.labels);
  }

  /// FNV-1a over every tensor checksum and weight bit pattern.
  std::uint64_t digest() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](std::uint64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xff;
        h *= 1099511628211ULL;
      }
    };
    for (const auto& m : channels)
      for (const auto& p : m.params()) mix(checksum(p.value));
    for (double w : weights.w) {
      std::uint64_t bits;
      std::memcpy(&bits, &w, sizeof bits);
      mix(bits);
    }
    return h;
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["weights"] = weights.w;
    j["channels"] = nlohmann::json::array();
    for (const auto& m : channels) {
      const std::string file = std::string(to_string(m.spec().kind)) + ".ckpt";
      save_checkpoint(dir / file, m.state());
      j["channels"].push_back({{"spec", m.spec().to_json()}, {"checkpoint", file}});
    }
    write_file_atomic(dir / "ensemble.json", j.dump(2) + "\n");
  }

  static Ensemble load(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(read_file(dir / "ensemble.json"));
    Ensemble e;
    for (const auto& c : j.at("channels")) {
      const ChannelSpec spec = ChannelSpec::from_json(c.at("spec"));
      ChannelModel m(spec);
      m.load_state(load_checkpoint(dir / c.at("checkpoint").get<std::string>()));
      e.channels.push_back(std::move(m));
    }
    e.weights.w = j.at("weights").get<std::vector<double>>();
    e.weights.validate(e.channels.size());
    return e;
  }
};

struct ChannelLog {
  ChannelKind kind = ChannelKind::SIC;
  std::optional<TrainResult> pretrain, finetune;

  nlohmann::json to_json() const {
    nlohmann::json j{{"channel", to_string(kind)}};
    for (auto [name, r] : {std::pair{"pretrain", &pretrain}, std::pair{"finetune", &finetune}}) {
      if (!*r) continue;
      nlohmann::json h = nlohmann::json::array();
      for (const auto& e : (*r)->history) h.push_back(e.to_json());
      j[name] = {{"best_epoch", (*r)->best_epoch}, {"best_val_acc", (*r)->best_val_acc}, {"history", h}};
    }
    return j;
  }
};

struct ALResult {
  Ensemble ensemble;
  std::vector<ChannelLog> logs;
  GridSearchResult grid;
};

/// Trains every channel (concurrently, up to cfg.jobs) and grid-searches the
/// fusion weights on validation. `train` is augmented here when configured.
inline ALResult run_al_stage(const Dataset& train, const Dataset& val, const ALConfig& cfg,
                             const std::function<void(const std::string&)>& progress = {}) {
  cfg.validate();
  const Dataset train_set = cfg.augment_train ? augment_dataset(train) : train;
  const LabeledImages tr = to_labeled(train_set, cfg.input_size);
  const LabeledImages va = to_labeled(val, cfg.input_size);
  ALResult r;
  const std::size_t n = cfg.kinds.size();
  std::vector<std::optional<ChannelModel>> models(n);
  r.logs.resize(n);
  std::mutex progress_mu;
  parallel_for(n, cfg.jobs, [&](std::size_t c) {
    ChannelModel m = build_channel(cfg.kinds[c], cfg.classes, cfg.width_multiplier, std::nullopt, cfg.input_size,
                                   cfg.channel_seed(c));
    ChannelLog log{cfg.kinds[c], std::nullopt, std::nullopt};
    TrainPlan plan;
    plan.batch_size = cfg.batch_size;
    if (cfg.pretrain_epochs > 0) {
      plan.epochs = cfg.pretrain_epochs;
      plan.freeze = FreezePolicy::None;
      plan.seed = cfg.channel_seed(c) + 1;
      log.pretrain = train_channel(m, tr, va, plan, cfg.adamw);
    }
    if (cfg.finetune_epochs > 0) {
      plan.epochs = cfg.finetune_epochs;
      plan.freeze = FreezePolicy::BackboneFrozen;
      plan.seed = cfg.channel_seed(c) + 2;
      plan.include_initial = cfg.pretrain_epochs > 0;
      log.finetune = train_channel(m, tr, va, plan, cfg.adamw);
    }
    if (progress) {
      std::lock_guard lk(progress_mu);
      progress(std::string(to_string(cfg.kinds[c])) + " trained");
    }
    models[c].emplace(std::move(m));
    r.logs[c] = std::move(log);
  });
  for (auto& m : models) r.ensemble.channels.push_back(std::move(*m));
  r.grid = grid_search_weights(r.ensemble.decisions(va.images), va.labels, cfg.grid_step);
  r.ensemble.weights = r.grid.best;
  return r;
}

inline nlohmann::json al_summary_json(const ALResult& r) {
  nlohmann::json ch = nlohmann::json::array();
  for (const auto& l : r.logs) ch.push_back(l.to_json());
  return {{"weights", r.grid.best.w}, {"val_acc", r.grid.accuracy}, {"channels", ch}};
}

/// One seed's decisions on validation and test, the raw material of an ablation.
struct AblationRun {
  DecisionSet val, test;
  std::vector<std::size_t> val_labels, test_labels;
};

struct AblationCell {
  ChannelWeights weights;
  ConfusionMatrix test_cm{2};
};

struct AblationRow {
  std::vector<bool> active;
  std::vector<AblationCell> runs;
};

struct AblationReport {
  std::vector<std::string> channel_names;
  std::vector<std::string> class_names;
  std::vector<AblationRow> rows;

  static double accuracy_pct(const ConfusionMatrix& cm) {
    return 100.0 * static_cast<double>(cm.correct()) / static_cast<double>(cm.total());
  }

  Aggregate row_accuracy(const AblationRow& row) const {
    std::vector<double> acc;
    for (const auto& r : row.runs) acc.push_back(accuracy_pct(r.test_cm));
    return aggregate(acc);
  }

  /// Plain-text table: channel ticks, class, Spec/Sens/F1 per run, Avg.Acc.
  std::string str() const {
    std::ostringstream os;
    auto cell = [&](std::string s, std::size_t w) {
      s.resize(std::max(s.size(), w), ' ');
      os << s << ' ';
    };
    for (const auto& n : channel_names) cell(n, 5);
    cell("class", 10);
    const std::size_t runs = rows.empty() ? 0 : rows[0].runs.size();
    for (std::size_t r = 0; r < runs; ++r)
      for (const char* h : {"Spec.", "Sens.", "F1"}) cell(std::string(h) + (runs > 1 ? "#" + std::to_string(r + 1) : ""), 8);
    os << "Avg.Acc.\n";
    for (const auto& row : rows) {
      for (std::size_t k = 0; k < class_names.size(); ++k) {
        for (bool a : row.active) cell(k == 0 && a ? "x" : "", 5);
        cell(class_names[k], 10);
        for (const auto& run : row.runs) {
          const auto m = per_class_metrics(run.test_cm, k);
          cell(percent_2dp(m.spec), 8);
          cell(percent_2dp(m.sens), 8);
          cell(percent_2dp(m.f1), 8);
        }
        os << (k == 0 ? row_accuracy(row).str() : "") << '\n';
      }
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& row : rows) {
      nlohmann::json j;
      for (std::size_t c = 0; c < row.active.size(); ++c) j[channel_names[c]] = bool(row.active[c]);
      j["runs"] = nlohmann::json::array();
      for (const auto& run : row.runs) {
        nlohmann::json per = nlohmann::json::array();
        for (std::size_t k = 0; k < class_names.size(); ++k) {
          auto m = metrics_json(per_class_metrics(run.test_cm, k));
          m["class"] = class_names[k];
          per.push_back(m);
        }
        j["runs"].push_back({{"weights", run.weights.w}, {"classes", per}, {"confusion", run.test_cm.to_json()}});
      }
      const auto agg = row_accuracy(row);
      j["avg_acc"] = {{"mean", agg.mean}, {"std", agg.std}, {"text", agg.str()}};
      out.push_back(j);
    }
    return out;
  }
};

/// Nonempty channel subsets: singles, then pairs, then larger, each group in
/// lexicographic order (SIC / MGIC / MSIC / SIC+MGIC / SIC+MSIC / MGIC+MSIC / all).
inline std::vector<std::vector<bool>> channel_subsets(std::size_t n) {
  std::vector<std::vector<bool>> out;
  for (std::size_t size = 1; size <= n; ++size) {
    std::vector<bool> pick(n, false);
    std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(size), true);
    do out.push_back(pick);
    while (std::prev_permutation(pick.begin(), pick.end()));
  }
  return out;
}

/// For every channel subset and run: weights re-searched on validation with
/// the other channels pinned to zero, then scored on test.
inline AblationReport run_ablation(std::span<const AblationRun> runs, std::vector<std::string> channel_names,
                                   std::vector<std::string> class_names, double step = 0.1) {
  if (runs.empty()) throw std::invalid_argument("ablation needs at least one run");
  AblationReport rep;
  rep.channel_names = std::move(channel_names);
  rep.class_names = std::move(class_names);
  const std::size_t n = runs[0].val.channels();
  if (rep.channel_names.size() != n) throw ShapeError("ablation: channel name count mismatch");
  if (rep.class_names.size() != runs[0].val.classes()) throw ShapeError("ablation: class name count mismatch");
  for (const auto& active : channel_subsets(n)) {
    AblationRow row{active, {}};
    for (const auto& run : runs) {
      const auto g = grid_search_weights(run.val, run.val_labels, step, active);
      row.runs.push_back({g.best, evaluate_fused(run.test, g.best.w, run.test_labels)});
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace ilmcam
