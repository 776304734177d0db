// ilmcam command-line front end. Each subcommand composes library calls.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "ilmcam/gradcheck_suite.hpp"
#include "ilmcam/il.hpp"
#include "ilmcam/pipeline.hpp"
#include "ilmcam/service.hpp"
#include "ilmcam/synth.hpp"

namespace fs = std::filesystem;
using namespace ilmcam;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 2;
constexpr int kNumeric = 3;

struct Common {
  std::string data_root;
  std::size_t jobs = 3;

  fs::path path(const std::string& p) const {
    if (data_root.empty() || fs::path(p).is_absolute()) return p;
    return fs::path(data_root) / p;
  }
};

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file(p)); }

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file_atomic(p, s);
}

// A plan file holds {"al": {...}, "il": {...}}; a bare object is read as "al".
std::pair<ALConfig, ILConfig> read_plan(const std::string& file, const Common& c) {
  nlohmann::json j = file.empty() ? nlohmann::json::object() : read_json(c.path(file));
  nlohmann::json al = j.contains("al") || j.contains("il") ? j.value("al", nlohmann::json::object()) : j;
  nlohmann::json il = j.value("il", nlohmann::json::object());
  if (!al.contains("jobs")) al["jobs"] = c.jobs;
  if (!il.contains("jobs")) il["jobs"] = c.jobs;
  return {ALConfig::from_json(al), ILConfig::from_json(il)};
}

std::vector<ChannelKind> parse_channels(const std::string& csv) {
  std::vector<ChannelKind> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto end = std::min(csv.find(',', start), csv.size());
    out.push_back(channel_kind_from_string(csv.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

const Dataset& pick_split(const DataSplit& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "val") return d.val;
  if (name == "test") return d.test;
  throw ConfigError("unknown split '" + name + "' (train|val|test)");
}

std::string eval_report(Ensemble& e, const Dataset& data, const std::string& split_name) {
  const LabeledImages li = to_labeled(data, e.input_size());
  const DecisionSet d = e.decisions(li.images);
  std::ostringstream os;
  os << "split " << split_name << "\n";
  os << "weights";
  for (std::size_t c = 0; c < e.channels.size(); ++c)
    os << ' ' << to_string(e.channels[c].spec().kind) << '=' << fixed_2dp(e.weights.w[c]);
  os << "\n\n[fused]\n" << metric_report(evaluate_fused(d, e.weights.w, li.labels));
  for (std::size_t c = 0; c < e.channels.size(); ++c) {
    std::vector<double> one(e.channels.size(), 0.0);
    one[c] = 1.0;
    os << "\n[" << to_string(e.channels[c].spec().kind) << "]\n" << metric_report(evaluate_fused(d, one, li.labels));
  }
  return os.str();
}

void print_iteration(const IterationRecord& r) {
  std::printf("iteration %zu  val errors %zu -> %zu  annotated %zu  skipped %zu  stop %s\n", r.iteration,
              r.val_errors_before, r.val_errors_after, r.annotated.size(), r.skipped.size(), std::string(to_string(r.stop)).c_str());
  std::fflush(stdout);
}

int cmd_synth(const Common& c, std::size_t classes, std::size_t count, std::uint64_t seed, std::size_t size,
              std::size_t n_val, std::size_t n_test, const std::string& out) {
  if (n_val + n_test >= count) throw ConfigError("validation and test counts leave no training samples");
  SynthConfig sc;
  sc.classes = classes;
  sc.count = count;
  sc.seed = seed;
  sc.size = size;
  const double n = static_cast<double>(count);
  const SplitRatios r{(n - n_val - n_test) / n, n_val / n, n_test / n};
  const DataSplit d = split(synth_generate(sc), r, seed);
  save_dataset(c.path(out), d);
  std::printf("wrote %zu train / %zu val / %zu test to %s\n", d.train.size(), d.val.size(), d.test.size(),
              c.path(out).c_str());
  return kOk;
}

int cmd_train(const Common& c, const std::string& data, const std::string& channels, const std::string& plan,
              const std::string& out) {
  auto [al, il] = read_plan(plan, c);
  if (!channels.empty()) al.kinds = parse_channels(channels);
  al.validate();
  const DataSplit d = load_dataset(c.path(data));
  ALResult r = run_al_stage(d.train, d.val, al, [](const std::string& line) { std::printf("%s\n", line.c_str()); });
  const fs::path dir = c.path(out);
  r.ensemble.save(dir);
  write_text(dir / "al_summary.json", al_summary_json(r).dump(2) + "\n");
  for (const auto& log : r.logs) {
    std::string hist;
    if (log.pretrain) hist += log.pretrain->history_jsonl();
    if (log.finetune) hist += log.finetune->history_jsonl();
    write_text(dir / (std::string(to_string(log.kind)) + ".history.jsonl"), hist);
  }
  std::printf("weights %s  val acc %.4f  digest %s\n", nlohmann::json(r.ensemble.weights.w).dump().c_str(),
              r.grid.accuracy, hex64(r.ensemble.digest()).c_str());
  return kOk;
}

int cmd_fuse(const Common& c, const std::string& ckpt, const std::string& val, double step, bool write) {
  Ensemble e = Ensemble::load(c.path(ckpt));
  const DataSplit d = load_dataset(c.path(val));
  const LabeledImages li = to_labeled(d.val, e.input_size());
  const GridSearchResult g = grid_search_weights(e.decisions(li.images), li.labels, step);
  std::printf("%s\n", g.to_json().dump(2).c_str());
  if (write) {
    e.weights = g.best;
    e.save(c.path(ckpt));
  }
  return kOk;
}

int cmd_il_run(const Common& c, const std::string& data, const std::string& plan, const std::string& ckpt,
               const std::string& annotator, std::size_t max_iters, const std::string& policy, const std::string& out,
               int port, const std::string& state_dir) {
  auto [al, il] = read_plan(plan, c);
  if (max_iters) il.max_iterations = max_iters;
  if (!policy.empty()) il.policy = stop_policy_from_string(policy);
  il.validate();
  const fs::path out_dir = c.path(out);
  const DataSplit d = load_dataset(c.path(data));

  if (annotator == "service") {
    if (!ckpt.empty()) throw ConfigError("--annotator service trains its own ensemble; drop --checkpoints");
    const fs::path data_path = fs::weakly_canonical(fs::absolute(c.path(data)));
    Service svc({data_path.parent_path(), state_dir.empty() ? out_dir / "state" : c.path(state_dir)});
    if (!svc.bind("127.0.0.1", port)) throw ConfigError("cannot bind port " + std::to_string(port));
    std::thread loop([&] { svc.listen_after_bind(); });
    const Reply created =
        svc.create_run({{"data", data_path.filename().string()}, {"al", al.to_json()}, {"il", il.to_json()}});
    if (created.status != 201) {
      svc.stop();
      loop.join();
      throw ConfigError(created.body.value("error", "run rejected"));
    }
    const std::string id = created.body.at("id");
    std::printf("run %s on http://127.0.0.1:%d; waiting for annotations\n", id.c_str(), port);
    std::fflush(stdout);
    std::string status;
    do {
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
      status = svc.get_run(id).body.at("status");
    } while (status != "converged" && status != "failed");
    const Reply metrics = svc.get_metrics(id);
    svc.stop();
    loop.join();
    write_text(out_dir / "metrics.json", metrics.body.dump(2) + "\n");
    if (status == "failed") {
      std::fprintf(stderr, "run failed: %s\n", svc.get_run(id).body.value("error", "").c_str());
      return 1;
    }
    fs::copy(svc.run_directory(id) / "session", out_dir / "session",
             fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    return kOk;
  }
  if (annotator != "oracle") throw ConfigError("unknown annotator '" + annotator + "' (oracle|service)");

  OracleAnnotator oracle;
  nlohmann::json al_summary;
  std::optional<ILSession> session;
  if (ckpt.empty()) {
    ILRunOutput r = il_run(d, al, il, oracle, print_iteration);
    al_summary = std::move(r.al_summary);
    session.emplace(std::move(r.session));
  } else {
    session.emplace(Ensemble::load(c.path(ckpt)), initial_corpus(d.train, al), d.val, il);
    session->run(oracle, print_iteration);
  }
  session->save(out_dir);
  if (!al_summary.is_null()) write_text(out_dir / "al_summary.json", al_summary.dump(2) + "\n");
  const LeakReport leak = session->leak_report(d.test);
  write_text(out_dir / "leak_audit.json", leak.to_json().dump(2) + "\n");
  write_text(out_dir / "test_report.txt", eval_report(session->ensemble(), d.test, "test"));
  std::printf("stop %s after %zu iterations; val errors %zu -> %zu; audit %s\n",
              std::string(to_string(session->stop_reason())).c_str(), session->iteration(),
              session->initial_val_errors(), session->val_errors(), (out_dir / "audit.jsonl").c_str());
  return kOk;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data, const std::string& split_name,
             const std::string& out) {
  Ensemble e = Ensemble::load(c.path(ckpt));
  const DataSplit d = load_dataset(c.path(data));
  const std::string report = eval_report(e, pick_split(d, split_name), split_name);
  if (out.empty()) {
    std::fwrite(report.data(), 1, report.size(), stdout);
  } else {
    write_text(c.path(out), report);
  }
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t instances, double tol) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = gradcheck_suite(seed, instances, 1e-3, tol);
  bool ok = true;
  std::printf("%-28s %9s %9s %12s  %s\n", "op", "instances", "elements", "max_rel_err", "result");
  for (const auto& r : reports) {
    std::printf("%-28s %9zu %9zu %12.3e  %s\n", r.name.c_str(), r.instances, r.elements_checked, r.max_rel_error,
                r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%zu checks, %s, %.1f s\n", reports.size(), ok ? "all passed" : "FAILURES", secs);
  return ok ? kOk : kNumeric;
}

int cmd_serve(const Common& c, int port, const std::string& state_dir) {
  Service svc({c.data_root.empty() ? fs::current_path() : fs::path(c.data_root), state_dir});
  if (!svc.bind("0.0.0.0", port)) throw ConfigError("cannot bind port " + std::to_string(port));
  std::printf("serving on port %d\n", port);
  std::fflush(stdout);
  svc.listen_after_bind();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive-learning multichannel attention classifier"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--data-root", common.data_root, "Resolve relative paths against this directory");
  app.add_option("--jobs", common.jobs, "Channel trainers run in parallel (1-3)")->check(CLI::Range(1, 3));

  std::size_t classes = 2, count = 1400, size = 64, n_val = 200, n_test = 200;
  std::uint64_t seed = 0;
  std::string out, data, channels, plan, ckpt, split_name = "test", annotator = "oracle", policy, state_dir;
  std::size_t max_iters = 0, instances = 20;
  double step = 0.1, tol = 1e-3;
  bool write = false;
  int port = 8080;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic histology dataset");
  synth->add_option("--classes", classes)->check(CLI::IsMember({2, 9}));
  synth->add_option("--count", count);
  synth->add_option("--seed", seed);
  synth->add_option("--size", size, "Image side in pixels");
  synth->add_option("--val", n_val, "Validation samples");
  synth->add_option("--test", n_test, "Test samples");
  synth->add_option("--out", out)->required();

  auto* train = app.add_subcommand("train", "Automatic-learning stage for the channel ensemble");
  train->add_option("--data", data)->required();
  train->add_option("--channels", channels, "Comma-separated subset of sic,mgic,msic");
  train->add_option("--plan", plan, "JSON plan file");
  train->add_option("--out", out)->required();

  auto* fuse = app.add_subcommand("fuse", "Grid-search fusion weights on a validation split");
  fuse->add_option("--checkpoints", ckpt)->required();
  fuse->add_option("--val", data, "Dataset whose val split is searched")->required();
  fuse->add_option("--step", step);
  fuse->add_flag("--write", write, "Store the best weights with the checkpoints");

  auto* ilrun = app.add_subcommand("il-run", "Interactive-learning loop");
  ilrun->add_option("--data", data)->required();
  ilrun->add_option("--plan", plan);
  ilrun->add_option("--checkpoints", ckpt, "Start from a trained ensemble instead of training one");
  ilrun->add_option("--annotator", annotator)->check(CLI::IsMember({"oracle", "service"}));
  ilrun->add_option("--max-iters", max_iters);
  ilrun->add_option("--policy", policy)->check(CLI::IsMember({"zero-errors", "no-new-errors"}));
  ilrun->add_option("--port", port, "Port for --annotator service");
  ilrun->add_option("--state-dir", state_dir, "Service state for --annotator service");
  ilrun->add_option("--out", out)->required();

  auto* eval = app.add_subcommand("eval", "Metric report for a checkpoint");
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--split", split_name)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", out);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad->add_option("--seed", seed);
  grad->add_option("--instances", instances)->check(CLI::PositiveNumber);
  grad->add_option("--tol", tol, "Relative tolerance")->check(CLI::PositiveNumber);

  auto* serve = app.add_subcommand("serve", "HTTP annotation service");
  serve->add_option("--port", port);
  serve->add_option("--state-dir", state_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*synth) return cmd_synth(common, classes, count, seed, size, n_val, n_test, out);
    if (*train) return cmd_train(common, data, channels, plan, out);
    if (*fuse) return cmd_fuse(common, ckpt, data, step, write);
    if (*ilrun)
      return cmd_il_run(common, data, plan, ckpt, annotator, max_iters, policy, out, port, state_dir);
    if (*eval) return cmd_eval(common, ckpt, data, split_name, out);
    if (*grad) return cmd_gradcheck(seed, instances, tol);
    if (*serve) return cmd_serve(common, port, state_dir);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kValidation;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "invalid checkpoint: %s\n", e.what());
    return kValidation;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "invalid json: %s\n", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kOk;
}
