#pragma once

#include <httplib.h>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "ilmcam/il.hpp"

namespace ilmcam {

enum class RunStatus { Idle, Training, AwaitingAnnotations, Iterating, Converged, Failed };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Idle: return "idle";
    case RunStatus::Training: return "training";
    case RunStatus::AwaitingAnnotations: return "awaiting_annotations";
    case RunStatus::Iterating: return "iterating";
    case RunStatus::Converged: return "converged";
    case RunStatus::Failed: return "failed";
  }
  return "?";
}

inline RunStatus run_status_from_string(std::string_view s) {
  for (auto r : {RunStatus::Idle, RunStatus::Training, RunStatus::AwaitingAnnotations, RunStatus::Iterating,
                 RunStatus::Converged, RunStatus::Failed})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown run status '" + std::string(s) + "'");
}

struct ServiceConfig {
  std::filesystem::path data_root = ".";
  std::filesystem::path state_dir = "ilmcam-state";
};

/// Status code plus JSON body; what every API call returns.
struct Reply {
  int status = 200;
  nlohmann::json body;

  static Reply error(int status, std::string message, nlohmann::json extra = nlohmann::json::object()) {
    extra["error"] = std::move(message);
    return {status, std::move(extra)};
  }
};

/// Training runs and their IL loops behind a request/response API. Long
/// operations run on worker threads; reads only touch snapshots.
class Service {
 public:
  explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    std::filesystem::create_directories(cfg_.state_dir);
    restore_runs();
    routes();
  }

  ~Service() {
    stop();
    std::vector<std::thread> ws;
    {
      std::lock_guard lk(workers_mu_);
      ws.swap(workers_);
    }
    for (auto& t : ws) t.join();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  httplib::Server& http() { return http_; }
  int bind_any_port(const std::string& host = "127.0.0.1") { return http_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return http_.bind_to_port(host, port); }
  bool listen_after_bind() { return http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  std::filesystem::path run_directory(const std::string& id) const { return cfg_.state_dir / id; }

  /// Blocks until no run is training or iterating.
  void wait_idle() {
    for (;;) {
      {
        std::lock_guard lk(runs_mu_);
        bool busy = false;
        for (auto& [id, r] : runs_) {
          std::lock_guard rl(r->mu);
          busy = busy || r->status == RunStatus::Training || r->status == RunStatus::Iterating;
        }
        if (!busy) return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

  // ---- API ----------------------------------------------------------------

  /// Body: {"data": dir under data_root, "al": {...}, "il": {...}}.
  Reply create_run(const nlohmann::json& body) {
    auto run = std::make_shared<Run>();
    try {
      if (!body.is_object() || !body.contains("data")) return Reply::error(400, "missing 'data'");
      run->config = body;
      run->al = ALConfig::from_json(body.value("al", nlohmann::json::object()));
      run->il = ILConfig::from_json(body.value("il", nlohmann::json::object()));
      run->data_path = resolve_data(body.at("data").get<std::string>());
    } catch (const std::exception& e) {
      return Reply::error(400, e.what());
    }
    {
      std::lock_guard lk(runs_mu_);
      run->id = next_id();
      run->status = RunStatus::Training;
      runs_[run->id] = run;
    }
    persist_run(*run);
    spawn([this, run] { train(run); });
    return {201, {{"id", run->id}, {"status", to_string(RunStatus::Training)}}};
  }

  Reply get_run(const std::string& id) {
    auto run = find(id);
    if (!run) return Reply::error(404, "no run '" + id + "'");
    std::lock_guard lk(run->mu);
    nlohmann::json j{{"id", run->id},
                     {"status", to_string(run->status)},
                     {"config", run->config},
                     {"iteration", run->iteration},
                     {"queue_size", run->queue.size()},
                     {"pending", pending_ids(*run)},
                     {"stop_reason", run->stop_reason}};
    if (!run->error.empty()) j["error"] = run->error;
    return {200, j};
  }

  Reply list_misclassified(const std::string& id) {
    auto run = find(id);
    if (!run) return Reply::error(404, "no run '" + id + "'");
    std::lock_guard lk(run->mu);
    nlohmann::json items = nlohmann::json::array();
    for (const auto& e : run->queue) {
      nlohmann::json j = e.entry;
      j["image_png"] = e.image_png;
      j["width"] = e.width;
      j["height"] = e.height;
      auto a = run->annotations.find(e.entry.at("id").get<std::string>());
      j["annotation"] = a == run->annotations.end() ? "pending" : (a->second.mask ? "annotated" : "skipped");
      items.push_back(std::move(j));
    }
    return {200, {{"id", run->id}, {"iteration", run->iteration}, {"status", to_string(run->status)}, {"items", items}}};
  }

  /// Body: {"sample_id", "mask_png" (base64), "width", "height"} or
  /// {"sample_id", "skip": true, "reason"}.
  Reply submit_annotation(const std::string& id, const nlohmann::json& body) {
    auto run = find(id);
    if (!run) return Reply::error(404, "no run '" + id + "'");
    std::lock_guard lk(run->mu);
    if (run->status != RunStatus::AwaitingAnnotations) {
      return Reply::error(409, "run is " + std::string(to_string(run->status)) + ", not awaiting annotations");
    }
    std::string sid;
    Annotation ann;
    std::uint64_t hash = 0;
    try {
      sid = body.at("sample_id").get<std::string>();
      if (!run->session->queued(sid)) return Reply::error(404, "'" + sid + "' is not in the current queue");
      if (body.value("skip", false)) {
        ann = Annotation::skip(body.value("reason", std::string("skipped by annotator")));
        hash = std::hash<std::string>{}("skip:" + ann.skip_reason);
      } else {
        const std::size_t w = body.at("width").get<std::size_t>(), h = body.at("height").get<std::size_t>();
        AttentionMask m = decode_mask_png(base64_decode(body.at("mask_png").get<std::string>()));
        if (m.width != w || m.height != h) {
          return Reply::error(400, "mask payload is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                                       ", declared " + std::to_string(h) + "x" + std::to_string(w));
        }
        run->session->check_mask(sid, m);
        hash = mask_hash(m);
        ann.mask = std::move(m);
      }
    } catch (const std::exception& e) {
      return Reply::error(400, e.what());
    }
    auto prev = run->hashes.find(sid);
    if (prev != run->hashes.end() && prev->second == hash) {
      return {200, {{"sample_id", sid}, {"result", "unchanged"}, {"pending", pending_ids(*run)}}};
    }
    const bool replaced = prev != run->hashes.end();
    run->annotations[sid] = std::move(ann);
    run->hashes[sid] = hash;
    persist_annotations(*run);
    return {200, {{"sample_id", sid}, {"result", replaced ? "replaced" : "accepted"}, {"pending", pending_ids(*run)}}};
  }

  Reply trigger_iteration(const std::string& id) {
    auto run = find(id);
    if (!run) return Reply::error(404, "no run '" + id + "'");
    {
      std::lock_guard lk(run->mu);
      if (run->status != RunStatus::AwaitingAnnotations) {
        return Reply::error(409, "run is " + std::string(to_string(run->status)) + ", not awaiting annotations");
      }
      if (auto p = pending_ids(*run); !p.empty()) return Reply::error(409, "annotations pending", {{"pending", p}});
      run->status = RunStatus::Iterating;
    }
    persist_run(*run);
    spawn([this, run] { iterate(run); });
    return {202, {{"id", id}, {"status", to_string(RunStatus::Iterating)}}};
  }

  Reply get_metrics(const std::string& id) {
    auto run = find(id);
    if (!run) return Reply::error(404, "no run '" + id + "'");
    std::lock_guard lk(run->mu);
    return {200, run->metrics};
  }

 private:
  struct QueueItem {
    nlohmann::json entry;
    std::string image_png;
    std::size_t width = 0, height = 0;
  };

  struct Run {
    std::string id;
    nlohmann::json config;
    ALConfig al;
    ILConfig il;
    std::filesystem::path data_path;

    std::mutex mu;  // guards the fields below
    RunStatus status = RunStatus::Idle;
    std::string error;
    std::size_t iteration = 0;
    std::string stop_reason = "none";
    std::vector<QueueItem> queue;
    std::map<std::string, Annotation> annotations;
    std::map<std::string, std::uint64_t> hashes;
    nlohmann::json metrics = nlohmann::json::object();

    // Owned by whichever thread moved status into Training/Iterating.
    std::unique_ptr<ILSession> session;
    Dataset test;
  };

  std::filesystem::path resolve_data(const std::string& p) const {
    std::filesystem::path path(p);
    if (path.is_relative()) path = cfg_.data_root / path;
    if (!std::filesystem::exists(path / kManifestName)) throw ImageError("no dataset at " + path.string());
    return path;
  }

  std::filesystem::path run_dir(const Run& r) const { return cfg_.state_dir / r.id; }

  std::string next_id() {
    char buf[32];
    std::snprintf(buf, sizeof buf, "run-%04zu", ++last_id_);
    return buf;
  }

  std::shared_ptr<Run> find(const std::string& id) {
    std::lock_guard lk(runs_mu_);
    auto it = runs_.find(id);
    return it == runs_.end() ? nullptr : it->second;
  }

  static std::vector<std::string> pending_ids(const Run& r) {
    std::vector<std::string> out;
    if (r.status != RunStatus::AwaitingAnnotations) return out;
    for (const auto& q : r.queue) {
      const std::string id = q.entry.at("id");
      if (!r.annotations.count(id)) out.push_back(id);
    }
    return out;
  }

  void spawn(std::function<void()> fn) {
    std::lock_guard lk(workers_mu_);
    workers_.emplace_back(std::move(fn));
  }

  // Refreshes every snapshot from the session. Caller holds run.mu and owns
  // the session.
  void publish(Run& run, nlohmann::json al_summary = nullptr) {
    const ILSession& s = *run.session;
    run.iteration = s.iteration();
    run.stop_reason = to_string(s.stop_reason());
    run.queue.clear();
    for (const auto& e : s.queue()) {
      const Sample& smp = s.val_sample(e.id);
      run.queue.push_back({e.to_json(), base64_encode(encode_png(to_image8(smp.image))), smp.width(), smp.height()});
    }
    if (!al_summary.is_null()) run.metrics["al"] = std::move(al_summary);
    run.metrics["id"] = run.id;
    nlohmann::json its = nlohmann::json::array();
    for (const auto& r : s.history()) {
      nlohmann::json j{{"iteration", r.iteration},
                       {"val_errors", r.val_errors_after},
                       {"val_acc", r.val_cm.accuracy()},
                       {"weights", r.weights.w},
                       {"val_confusion", r.val_cm.to_json()},
                       {"corpus_size", r.corpus_after},
                       {"annotated", r.annotated.size()},
                       {"skipped", r.skipped.size()},
                       {"new_error_ids", r.new_error_ids},
                       {"digest", r.digest},
                       {"stop_reason", to_string(r.stop)}};
      nlohmann::json per = nlohmann::json::array();
      for (std::size_t c = 0; c < r.val_cm.classes(); ++c) per.push_back(metrics_json(per_class_metrics(r.val_cm, c)));
      j["val_per_class"] = per;
      its.push_back(std::move(j));
    }
    run.metrics["iterations"] = its;
    run.metrics["stop_reason"] = run.stop_reason;
    run.status = s.finished() ? RunStatus::Converged : RunStatus::AwaitingAnnotations;
  }

  void finish_metrics(Run& run) {
    if (run.test.empty()) return;
    Ensemble& e = run.session->ensemble();
    const ConfusionMatrix cm = e.evaluate(to_labeled(run.test, e.input_size()));
    nlohmann::json per = nlohmann::json::array();
    for (std::size_t c = 0; c < cm.classes(); ++c) per.push_back(metrics_json(per_class_metrics(cm, c)));
    run.metrics["test"] = {{"confusion", cm.to_json()}, {"accuracy", cm.accuracy()}, {"per_class", per}};
    run.metrics["leak_audit"] = run.session->leak_report(run.test).to_json();
  }

  void fail(Run& run, const std::string& what) {
    {
      std::lock_guard lk(run.mu);
      run.status = RunStatus::Failed;
      run.error = what;
    }
    persist_run(run);
  }

  void train(std::shared_ptr<Run> run) {
    try {
      DataSplit data = load_dataset(run->data_path);
      ALResult al = run_al_stage(data.train, data.val, run->al);
      auto summary = al_summary_json(al);
      auto session = std::make_unique<ILSession>(std::move(al.ensemble), initial_corpus(data.train, run->al),
                                                 std::move(data.val), run->il);
      session->save(run_dir(*run) / "session");
      std::lock_guard lk(run->mu);
      run->session = std::move(session);
      run->test = std::move(data.test);
      publish(*run, std::move(summary));
      if (run->status == RunStatus::Converged) finish_metrics(*run);
    } catch (const std::exception& e) {
      fail(*run, e.what());
      return;
    }
    persist_run(*run);
  }

  void iterate(std::shared_ptr<Run> run) {
    try {
      std::map<std::string, Annotation> ann;
      {
        std::lock_guard lk(run->mu);
        ann = run->annotations;
      }
      run->session->apply_iteration(ann);
      run->session->save(run_dir(*run) / "session");
      std::lock_guard lk(run->mu);
      run->annotations.clear();
      run->hashes.clear();
      publish(*run);
      if (run->status == RunStatus::Converged) finish_metrics(*run);
      persist_annotations(*run);
    } catch (const std::exception& e) {
      fail(*run, e.what());
      return;
    }
    persist_run(*run);
  }

  void persist_run(Run& run) {
    nlohmann::json j;
    {
      std::lock_guard lk(run.mu);
      j = {{"id", run.id}, {"config", run.config}, {"status", to_string(run.status)}, {"error", run.error},
           {"metrics", run.metrics}};
    }
    write_file_atomic(run_dir(run) / "run.json", j.dump(2) + "\n");
  }

  // Caller holds run.mu.
  void persist_annotations(Run& run) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& [sid, ann] : run.annotations) {
      nlohmann::json j{{"sample_id", sid}};
      if (ann.mask) {
        j["mask_png"] = base64_encode(encode_mask_png(*ann.mask));
      } else {
        j["skip"] = true;
        j["reason"] = ann.skip_reason;
      }
      a.push_back(j);
    }
    write_file_atomic(run_dir(run) / "annotations.json", a.dump() + "\n");
  }

  // Runs found in the state directory come back awaiting annotations or
  // converged; work cut off mid-training is marked failed, mid-iteration is
  // rolled back to its last saved state.
  void restore_runs() {
    namespace fs = std::filesystem;
    for (const auto& ent : fs::directory_iterator(cfg_.state_dir)) {
      const auto file = ent.path() / "run.json";
      if (!fs::exists(file)) continue;
      auto run = std::make_shared<Run>();
      const auto j = nlohmann::json::parse(read_file(file));
      run->id = j.at("id");
      run->config = j.at("config");
      run->metrics = j.value("metrics", nlohmann::json::object());
      unsigned n = 0;
      if (std::sscanf(run->id.c_str(), "run-%u", &n) == 1) last_id_ = std::max<std::size_t>(last_id_, n);
      const RunStatus st = run_status_from_string(j.at("status").get<std::string>());
      try {
        run->al = ALConfig::from_json(run->config.value("al", nlohmann::json::object()));
        run->il = ILConfig::from_json(run->config.value("il", nlohmann::json::object()));
        run->data_path = resolve_data(run->config.at("data").get<std::string>());
        if (st == RunStatus::Failed || st == RunStatus::Training || st == RunStatus::Idle) {
          run->status = RunStatus::Failed;
          run->error = st == RunStatus::Failed ? j.value("error", std::string()) : "interrupted before training finished";
        } else {
          DataSplit data = load_dataset(run->data_path);
          run->session = std::make_unique<ILSession>(
              ILSession::load(ent.path() / "session", initial_corpus(data.train, run->al), std::move(data.val)));
          run->test = std::move(data.test);
          std::lock_guard lk(run->mu);
          publish(*run, run->metrics.value("al", nlohmann::json()));
          if (run->status == RunStatus::Converged) finish_metrics(*run);
          if (fs::exists(ent.path() / "annotations.json") && run->status == RunStatus::AwaitingAnnotations) {
            for (const auto& a : nlohmann::json::parse(read_file(ent.path() / "annotations.json"))) {
              const std::string sid = a.at("sample_id");
              if (!run->session->queued(sid)) continue;
              if (a.value("skip", false)) {
                run->annotations[sid] = Annotation::skip(a.value("reason", std::string()));
                run->hashes[sid] = std::hash<std::string>{}("skip:" + run->annotations[sid].skip_reason);
              } else {
                AttentionMask m = decode_mask_png(base64_decode(a.at("mask_png").get<std::string>()));
                run->hashes[sid] = mask_hash(m);
                run->annotations[sid] = {std::move(m), {}};
              }
            }
          }
        }
      } catch (const std::exception& e) {
        run->status = RunStatus::Failed;
        run->error = std::string("restore failed: ") + e.what();
      }
      runs_[run->id] = run;
    }
  }

  void routes() {
    auto send = [](httplib::Response& res, const Reply& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    auto parse = [](const httplib::Request& req, nlohmann::json& out) -> bool {
      try {
        out = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
        return true;
      } catch (const std::exception&) {
        return false;
      }
    };
    http_.Get("/healthz", [send](const httplib::Request&, httplib::Response& res) {
      send(res, {200, {{"ok", true}}});
    });
    http_.Post("/runs", [this, send, parse](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      if (!parse(req, body)) return send(res, Reply::error(400, "body is not JSON"));
      send(res, create_run(body));
    });
    http_.Get(R"(/runs/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_run(req.matches[1]));
    });
    http_.Get(R"(/runs/([^/]+)/misclassified)", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, list_misclassified(req.matches[1]));
    });
    http_.Post(R"(/runs/([^/]+)/annotations)",
               [this, send, parse](const httplib::Request& req, httplib::Response& res) {
                 nlohmann::json body;
                 if (!parse(req, body)) return send(res, Reply::error(400, "body is not JSON"));
                 send(res, submit_annotation(req.matches[1], body));
               });
    http_.Post(R"(/runs/([^/]+)/iterate)", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, trigger_iteration(req.matches[1]));
    });
    http_.Get(R"(/runs/([^/]+)/metrics)", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_metrics(req.matches[1]));
    });
  }

  ServiceConfig cfg_;
  httplib::Server http_;
  std::mutex runs_mu_;
  std::map<std::string, std::shared_ptr<Run>> runs_;
  std::size_t last_id_ = 0;
  std::mutex workers_mu_;
  std::vector<std::thread> workers_;
};

}  // namespace ilmcam
