#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dhn/baselines.hpp"
#include "dhn/parallel.hpp"
#include "dhn/tasks.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dhn;

namespace {

// Per-invocation plumbing: a JSON config provides defaults, flags override,
// and the effective values (minus paths and thread counts) feed the config
// hash embedded in every output.
struct Ctx {
  CLI::App* cmd = nullptr;
  std::string config_path;
  std::string out_dir = ".";
  bool force = false;
  int threads = 0;
  json cfg = json::object();
  json eff = json::object();
  std::set<std::string> known;
  std::vector<std::string> violations;
};

std::string jkey(std::string flag) {
  std::replace(flag.begin(), flag.end(), '-', '_');
  return flag;
}

template <typename T>
void bind_opt(Ctx& c, const std::string& flag, T& val) {
  const std::string key = jkey(flag);
  c.known.insert(key);
  if (c.cmd->count("--" + flag) == 0 && c.cfg.contains(key)) {
    try {
      val = c.cfg.at(key).get<T>();
    } catch (const std::exception&) {
      c.violations.push_back("config field '" + key + "' has the wrong type");
    }
  }
  c.eff[key] = val;
}

int load_config(Ctx& c) {
  if (c.config_path.empty()) return 0;
  std::ifstream f(c.config_path);
  if (!f) {
    std::fprintf(stderr, "config error: cannot open %s\n",
                 c.config_path.c_str());
    return 2;
  }
  try {
    c.cfg = json::parse(f);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s: %s\n", c.config_path.c_str(),
                 e.what());
    return 2;
  }
  if (!c.cfg.is_object()) {
    std::fprintf(stderr, "config error: %s must hold a JSON object\n",
                 c.config_path.c_str());
    return 2;
  }
  return 0;
}

void bind_common(Ctx& c) {
  bind_opt(c, "out", c.out_dir);
  bind_opt(c, "threads", c.threads);
}

int finish_bind(Ctx& c) {
  for (const auto& [k, v] : c.cfg.items()) {
    if (c.known.find(k) == c.known.end()) {
      c.violations.push_back("unknown config field '" + k + "'");
    }
  }
  if (c.threads < 0) c.violations.push_back("thread count must be nonnegative");
  if (!c.violations.empty()) {
    std::fprintf(stderr, "invalid configuration:\n");
    for (const std::string& v : c.violations) {
      std::fprintf(stderr, "  - %s\n", v.c_str());
    }
    return 2;
  }
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  // paths and worker counts never change results, so they stay out of the hash
  c.eff.erase("out");
  c.eff.erase("threads");
  return 0;
}

std::uint64_t config_hash(const Ctx& c, const std::string& command) {
  json h = c.eff;
  h["command"] = command;
  h["version"] = std::string(kVersion);
  return fnv1a64(h.dump());
}

void write_run_info(const Ctx& c, const std::string& command,
                    std::uint64_t hash, const std::string& path) {
  json j;
  j["version"] = std::string(kVersion);
  j["config_hash"] = hex64(hash);
  j["command"] = command;
  j["effective_config"] = c.eff;
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f << j.dump(2) << "\n";
}

void refuse_existing(const Ctx& c, const std::vector<std::string>& paths) {
  if (c.force) return;
  std::string hits;
  for (const std::string& p : paths) {
    if (fs::exists(p)) hits += (hits.empty() ? "" : ", ") + p;
  }
  if (!hits.empty()) {
    throw ConfigError("refusing to overwrite without --force: " + hits);
  }
}

int guarded(const Ctx& c, const std::string& command, std::uint64_t hash,
            const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    const std::string diag = c.out_dir + "/" + command + "_failure.txt";
    std::FILE* f = std::fopen(diag.c_str(), "wb");
    if (f != nullptr) {
      std::fprintf(f, "%s\nconfig %s\ncommand %s\n%s\n",
                   std::string(kVersion).c_str(), hex64(hash).c_str(),
                   command.c_str(), e.what());
      std::fclose(f);
    }
    std::fprintf(stderr, "numeric failure: %s\n(diagnostics: %s)\n", e.what(),
                 diag.c_str());
    return 3;
  }
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    size_t pos = 0;
    const int v = std::stoi(part, &pos);
    if (pos != part.size()) throw ConfigError("bad integer list: " + text);
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

void check_match(const ModelConfig& mc, const Dataset& ds) {
  if (mc.kind != ds.kind || mc.dim != ds.dim()) {
    throw ConfigError("checkpoint system does not match the dataset");
  }
}

// Head rows come from the truth; rolled rows 1..horizon continue them.
Mat assemble_pred(const Mat& head, const Mat& rolled, int horizon) {
  Mat out(head.rows + horizon, head.cols);
  for (int t = 0; t < head.rows; ++t) {
    std::memcpy(out.row(t), head.row(t),
                sizeof(double) * static_cast<size_t>(head.cols));
  }
  for (int k = 1; k <= horizon; ++k) {
    std::memcpy(out.row(head.rows + k - 1), rolled.row(k),
                sizeof(double) * static_cast<size_t>(head.cols));
  }
  return out;
}

void append_trend(const std::string& path, const TrendTest& t) {
  std::FILE* f = std::fopen(path.c_str(), "ab");
  if (f == nullptr) throw ConfigError("cannot append to " + path);
  std::fprintf(f, "# trend_pairs %d\n# trend_positive %d\n# trend_p %.17g\n",
               t.pairs, t.positive, t.p_value);
  std::fclose(f);
}

int eval_count(const Dataset& ds, int limit) {
  const int n = static_cast<int>(ds.test.size());
  return limit > 0 ? std::min(limit, n) : n;
}

// Runs fn(i) over [0, n) in parallel, collecting per-slot errors; the first
// nonempty one aborts after the loop so failures stay deterministic.
template <typename Fn>
void eval_loop(int n, int threads, Fn&& fn) {
  std::vector<std::string> errs(static_cast<size_t>(n));
  parallel_for(n, threads, [&](std::int64_t i) {
    try {
      fn(static_cast<int>(i));
    } catch (const std::exception& e) {
      errs[static_cast<size_t>(i)] = e.what();
    }
  });
  for (size_t i = 0; i < errs.size(); ++i) {
    if (!errs[i].empty()) {
      throw NumericError("trajectory " + std::to_string(i) + ": " + errs[i]);
    }
  }
}

struct SegmentRow {
  int id = 0;
  std::string segment;
  double fit_loss = 0.0;
  double mse = 0.0;
};

void write_segment_csv(const std::string& path, std::uint64_t hash,
                       const std::vector<SegmentRow>& rows, double mean_seen,
                       double mean_unseen) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw ConfigError("cannot write metrics: " + path);
  std::fprintf(f, "# %s\n# config %s\n", std::string(kVersion).c_str(),
               hex64(hash).c_str());
  std::fputs("trajectory,segment,fit_loss,mse\n", f);
  for (const SegmentRow& r : rows) {
    std::fprintf(f, "%d,%s,%.17g,%.17g\n", r.id, r.segment.c_str(), r.fit_loss,
                 r.mse);
  }
  std::fprintf(f, "# mean_seen %.17g\n# mean_unseen %.17g\n", mean_seen,
               mean_unseen);
  std::fclose(f);
}

// ---------- gen-data ----------

struct GenOpts {
  std::string system = "single";
  std::uint64_t seed = 7;
  int n_train = 1000;
  int n_test = 200;
  double dt = 0.1;
  int n_states = 128;
  int substeps = 100;
  std::string name;
};

int run_gen(Ctx& c, GenOpts& o) {
  if (int rc = load_config(c)) return rc;
  bind_common(c);
  bind_opt(c, "system", o.system);
  bind_opt(c, "seed", o.seed);
  bind_opt(c, "n-train", o.n_train);
  bind_opt(c, "n-test", o.n_test);
  bind_opt(c, "dt", o.dt);
  bind_opt(c, "n-states", o.n_states);
  bind_opt(c, "substeps", o.substeps);
  bind_opt(c, "name", o.name);
  if (int rc = finish_bind(c)) return rc;
  const std::uint64_t hash = config_hash(c, "gen-data");
  return guarded(c, "gen-data", hash, [&] {
    GenSpec spec;
    spec.kind = system_from_name(o.system);
    spec.seed = o.seed;
    spec.n_train = o.n_train;
    spec.n_test = o.n_test;
    spec.dt = o.dt;
    spec.n_states = o.n_states;
    spec.substeps = o.substeps;
    spec.threads = c.threads;
    const std::string name =
        o.name.empty() ? "dataset_" + o.system : o.name;
    const std::string prefix = c.out_dir + "/" + name;
    refuse_existing(c, {prefix + ".json", prefix + ".bin"});
    const Dataset ds = generate_dataset(spec);
    double worst = 0.0;
    for (const Trajectory& tr : ds.train) {
      worst = std::max(worst, max_rel_energy_drift(tr));
    }
    for (const Trajectory& tr : ds.test) {
      worst = std::max(worst, max_rel_energy_drift(tr));
    }
    save_dataset(ds, prefix);
    write_run_info(c, "gen-data", hash, prefix + "_run.json");
    std::printf("wrote %s (%d train, %d test, %d states, g %.3f)\n",
                prefix.c_str(), o.n_train, o.n_test, o.n_states,
                ds.train.front().params.g);
    std::printf("worst relative energy drift %.3g\n", worst);
  });
}

// ---------- train ----------

struct TrainOpts {
  std::string dataset;
  int b = 2, s = 1;
  int width = 128, heads = 4, layers = 2;
  int mlp_hidden = 0, readout_hidden = 0;
  int schedule = 10;
  std::string mask = "autoregressive";
  double weight_lr = 1e-3, code_lr = 1e-2, lr_decay = 1.0;
  int batch = 64, epochs = 200, max_steps = 0;
  std::uint64_t seed = 1;
  std::string name;
};

void bind_train(Ctx& c, TrainOpts& o) {
  bind_opt(c, "dataset", o.dataset);
  bind_opt(c, "b", o.b);
  bind_opt(c, "s", o.s);
  bind_opt(c, "width", o.width);
  bind_opt(c, "heads", o.heads);
  bind_opt(c, "layers", o.layers);
  bind_opt(c, "mlp-hidden", o.mlp_hidden);
  bind_opt(c, "readout-hidden", o.readout_hidden);
  bind_opt(c, "schedule", o.schedule);
  bind_opt(c, "mask", o.mask);
  bind_opt(c, "weight-lr", o.weight_lr);
  bind_opt(c, "code-lr", o.code_lr);
  bind_opt(c, "lr-decay", o.lr_decay);
  bind_opt(c, "batch", o.batch);
  bind_opt(c, "epochs", o.epochs);
  bind_opt(c, "max-steps", o.max_steps);
  bind_opt(c, "seed", o.seed);
  bind_opt(c, "name", o.name);
}

int run_train(Ctx& c, TrainOpts& o) {
  if (int rc = load_config(c)) return rc;
  bind_common(c);
  bind_train(c, o);
  if (int rc = finish_bind(c)) return rc;
  const std::uint64_t hash = config_hash(c, "train");
  return guarded(c, "train", hash, [&] {
    const Dataset ds = load_dataset(o.dataset);
    TrainConfig tc;
    tc.model.b = o.b;
    tc.model.s = o.s;
    tc.model.width = o.width;
    tc.model.heads = o.heads;
    tc.model.layers = o.layers;
    tc.model.mlp_hidden = o.mlp_hidden;
    tc.model.readout_hidden = o.readout_hidden;
    tc.schedule_steps = o.schedule;
    tc.mask = mask_kind_from_name(o.mask);
    tc.weight_lr = o.weight_lr;
    tc.code_lr = o.code_lr;
    tc.lr_decay = o.lr_decay;
    tc.batch = o.batch;
    tc.epochs = o.epochs;
    tc.max_steps_per_epoch = o.max_steps;
    tc.seed = o.seed;
    tc.threads = c.threads;
    const std::string name =
        o.name.empty() ? "dhn_" + std::string(system_name(ds.kind)) + "_b" +
                             std::to_string(o.b) + "s" + std::to_string(o.s) +
                             "_seed" + std::to_string(o.seed)
                       : o.name;
    const std::string prefix = c.out_dir + "/" + name;
    refuse_existing(c, {prefix + ".json", prefix + ".bin"});
    tc.loss_csv = prefix + "_loss.csv";
    tc.checkpoint_prefix = prefix;
    const TrainResult res = train(ds, tc);
    write_run_info(c, "train", hash, prefix + "_run.json");
    std::printf("trained %s: loss %.6g -> %.6g over %zu epochs (%lld weights)\n",
                prefix.c_str(), res.history.front().loss,
                res.history.back().loss, res.history.size(),
                static_cast<long long>(res.model->weight_count()));
  });
}

// ---------- rollout / complete ----------

struct EvalOpts {
  std::string dataset, checkpoint;
  int given = 8;
  int horizon = 120;
  int schedule = 10;
  int fit_steps = 200;
  double fit_lr = 0.05;
  int limit = 0;
  std::uint64_t seed = 1;
  std::string name;
};

void bind_eval(Ctx& c, EvalOpts& o) {
  bind_opt(c, "dataset", o.dataset);
  bind_opt(c, "checkpoint", o.checkpoint);
  bind_opt(c, "given", o.given);
  bind_opt(c, "horizon", o.horizon);
  bind_opt(c, "schedule", o.schedule);
  bind_opt(c, "fit-steps", o.fit_steps);
  bind_opt(c, "fit-lr", o.fit_lr);
  bind_opt(c, "limit", o.limit);
  bind_opt(c, "seed", o.seed);
  bind_opt(c, "name", o.name);
}

int run_eval(Ctx& c, EvalOpts& o, const std::string& command) {
  if (int rc = load_config(c)) return rc;
  bind_common(c);
  bind_eval(c, o);
  if (int rc = finish_bind(c)) return rc;
  const std::uint64_t hash = config_hash(c, command);
  return guarded(c, command, hash, [&] {
    const Dataset ds = load_dataset(o.dataset);
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    check_match(ckpt.model->config(), ds);
    const int horizon =
        o.horizon > 0 ? o.horizon : ds.n_states - o.given;
    const NoiseSchedule sched = make_schedule(o.schedule);
    const int n = eval_count(ds, o.limit);
    std::vector<RolloutReport> reports(static_cast<size_t>(n));
    std::vector<double> fit_losses(static_cast<size_t>(n));
    eval_loop(n, c.threads, [&](int i) {
      const CompletionResult cr = completion_task(
          *ckpt.model, ds.test[static_cast<size_t>(i)], ckpt.norm, sched,
          o.given, o.fit_steps, o.fit_lr, o.seed + static_cast<std::uint64_t>(i),
          test_trajectory_id(i));
      reports[static_cast<size_t>(i)] = cr.report;
      fit_losses[static_cast<size_t>(i)] = cr.fit.loss;
    });
    const RolloutReport avg = average_reports(reports);
    if (!ids_disjoint_from_train(avg.trajectory_ids,
                                 static_cast<int>(ds.train.size()))) {
      throw NumericError("evaluation ids overlap the training split");
    }
    const TrendTest trend = trend_test(avg.energy_rel_err);
    const ModelConfig& mc = ckpt.model->config();
    const std::string task = command == "rollout" ? "rollout" : "completion";
    const std::string name =
        o.name.empty() ? metrics_filename(task, ds.kind, mc.b, mc.s, o.seed)
                       : o.name;
    const std::string path = c.out_dir + "/" + name;
    write_rollout_csv(path, avg, hash);
    append_trend(path, trend);
    write_run_info(c, command, hash,
                   path.substr(0, path.size() - 4) + "_run.json");
    double mean_fit = 0.0;
    for (double v : fit_losses) mean_fit += v;
    std::printf("%s %s: %d trajectories, mean mse %.6g, mean |dE|/E %.6g, "
                "trend p %.4g, mean fit loss %.6g\n",
                command.c_str(), path.c_str(), n, avg.mean_mse,
                avg.mean_energy_rel, trend.p_value, mean_fit / n);
  });
}

// ---------- probe ----------

struct ProbeOpts {
  std::string dataset;
  std::string checkpoint_dir;
  std::string geometries = "1,2,4,8";
  std::uint64_t train_seed = 1;
  int fit_steps = 200;
  double fit_lr = 0.05;
  std::string name;
};

int run_probe(Ctx& c, ProbeOpts& o) {
  if (int rc = load_config(c)) return rc;
  bind_common(c);
  bind_opt(c, "dataset", o.dataset);
  bind_opt(c, "checkpoint-dir", o.checkpoint_dir);
  bind_opt(c, "geometries", o.geometries);
  bind_opt(c, "train-seed", o.train_seed);
  bind_opt(c, "fit-steps", o.fit_steps);
  bind_opt(c, "fit-lr", o.fit_lr);
  bind_opt(c, "name", o.name);
  if (int rc = finish_bind(c)) return rc;
  const std::uint64_t hash = config_hash(c, "probe");
  return guarded(c, "probe", hash, [&] {
    const Dataset ds = load_dataset(o.dataset);
    const std::vector<int> bs = parse_int_list(o.geometries);
    const std::vector<double> train_labels = length_ratio_labels(ds.train);
    const std::vector<double> test_labels = length_ratio_labels(ds.test);
    const std::string dir =
        o.checkpoint_dir.empty() ? c.out_dir : o.checkpoint_dir;
    std::vector<std::pair<std::string, ProbeReport>> rows;
    for (const int b : bs) {
      const int s = std::max(1, b / 2);
      const std::string prefix =
          dir + "/dhn_" + std::string(system_name(ds.kind)) + "_b" +
          std::to_string(b) + "s" + std::to_string(s) + "_seed" +
          std::to_string(o.train_seed);
      const Checkpoint ckpt = load_checkpoint(prefix);
      check_match(ckpt.model->config(), ds);
      if (ckpt.codebook.rows != static_cast<int>(ds.train.size())) {
        throw ConfigError("codebook of " + prefix +
                          " does not cover the training split");
      }
      const Mat test_codes = fit_test_codes(*ckpt.model, ds.test, ckpt.norm,
                                            o.fit_steps, o.fit_lr, c.threads);
      const ProbeReport rep =
          linear_probe(ckpt.codebook, train_labels, test_codes, test_labels);
      rows.emplace_back("b" + std::to_string(b) + "s" + std::to_string(s),
                        rep);
      std::printf("probe b=%d s=%d: train mse %.6g, test mse %.6g%s\n", b, s,
                  rep.train_mse, rep.test_mse,
                  rep.rank_deficient ? " (rank deficient)" : "");
    }
    const std::string name =
        o.name.empty() ? "probe_" + std::string(system_name(ds.kind)) +
                             "_seed" + std::to_string(o.train_seed) + ".csv"
                       : o.name;
    const std::string path = c.out_dir + "/" + name;
    write_probe_csv(path, rows, hash);
    write_run_info(c, "probe", hash,
                   path.substr(0, path.size() - 4) + "_run.json");
    std::printf("wrote %s\n", path.c_str());
  });
}

// ---------- superres ----------

struct SuperresOpts {
  std::string dataset;
  int window = 64;
  int stride0 = 4;
  int width = 128, heads = 4, layers = 2;
  int mlp_hidden = 0, readout_hidden = 0;
  int schedule = 10;
  double weight_lr = 1e-3, code_lr = 1e-2, lr_decay = 1.0;
  int batch = 64, epochs = 200, max_steps = 0;
  int fit_steps = 200;
  double fit_lr = 0.05;
  int limit = 0;
  std::uint64_t seed = 1;
  bool eval_only = false;
  std::string name;
};

int run_superres(Ctx& c, SuperresOpts& o) {
  if (int rc = load_config(c)) return rc;
  bind_common(c);
  bind_opt(c, "dataset", o.dataset);
  bind_opt(c, "window", o.window);
  bind_opt(c, "stride0", o.stride0);
  bind_opt(c, "width", o.width);
  bind_opt(c, "heads", o.heads);
  bind_opt(c, "layers", o.layers);
  bind_opt(c, "mlp-hidden", o.mlp_hidden);
  bind_opt(c, "readout-hidden", o.readout_hidden);
  bind_opt(c, "schedule", o.schedule);
  bind_opt(c, "weight-lr", o.weight_lr);
  bind_opt(c, "code-lr", o.code_lr);
  bind_opt(c, "lr-decay", o.lr_decay);
  bind_opt(c, "batch", o.batch);
  bind_opt(c, "epochs", o.epochs);
  bind_opt(c, "max-steps", o.max_steps);
  bind_opt(c, "fit-steps", o.fit_steps);
  bind_opt(c, "fit-lr", o.fit_lr);
  bind_opt(c, "limit", o.limit);
  bind_opt(c, "seed", o.seed);
  bind_opt(c, "eval-only", o.eval_only);
  bind_opt(c, "name", o.name);
  if (int rc = finish_bind(c)) return rc;
  const std::uint64_t hash = config_hash(c, "superres");
  return guarded(c, "superres", hash, [&] {
    const Dataset ds = load_dataset(o.dataset);
    if (ds.n_states < 2 * o.window + 1) {
      throw ConfigError(
          "super-resolution evaluation needs 2*window + 1 recorded states");
    }
    const std::string name =
        o.name.empty() ? "superres_dhn_" + std::string(system_name(ds.kind)) +
                             "_seed" + std::to_string(o.seed)
                       : o.name;
    const std::string prefix = c.out_dir + "/" + name;

    SuperresConfig sc;
    sc.model.width = o.width;
    sc.model.heads = o.heads;
    sc.model.layers = o.layers;
    sc.model.mlp_hidden = o.mlp_hidden;
    sc.model.readout_hidden = o.readout_hidden;
    sc.schedule_steps = o.schedule;
    sc.window = o.window;
    sc.stride0 = o.stride0;
    sc.weight_lr = o.weight_lr;
    sc.code_lr = o.code_lr;
    sc.lr_decay = o.lr_decay;
    sc.batch = o.batch;
    sc.epochs = o.epochs;
    sc.max_steps_per_epoch = o.max_steps;
    sc.seed = o.seed;
    sc.threads = c.threads;

    std::vector<std::unique_ptr<DhnModel>> owned;
    NormStats norm = ds.norm;
    if (o.eval_only) {
      for (int k = 0; k < sc.stage_count(); ++k) {
        Checkpoint ck =
            load_checkpoint(prefix + "_stage" + std::to_string(k));
        check_match(ck.model->config(), ds);
        norm = ck.norm;
        owned.push_back(std::move(ck.model));
      }
    } else {
      std::vector<std::string> outputs;
      for (int k = 0; k < sc.stage_count(); ++k) {
        outputs.push_back(prefix + "_stage" + std::to_string(k) + ".json");
        outputs.push_back(prefix + "_stage" + std::to_string(k) + ".bin");
      }
      refuse_existing(c, outputs);
      sc.loss_csv = prefix + "_loss.csv";
      SuperresModels sm = train_superres(ds, sc);
      for (size_t k = 0; k < sm.stages.size(); ++k) {
        save_checkpoint(*sm.stages[k], sm.codebook, ds.norm,
                        prefix + "_stage" + std::to_string(k));
      }
      std::printf("superres trained: loss %.6g -> %.6g (%zu stages)\n",
                  sm.history.front().loss, sm.history.back().loss,
                  sm.stages.size());
      for (auto& m : sm.stages) owned.push_back(std::move(m));
    }

    std::vector<const DhnModel*> stages;
    for (const auto& m : owned) stages.push_back(m.get());
    const NoiseSchedule sched = make_schedule(o.schedule);
    const int n = eval_count(ds, o.limit);
    std::vector<SegmentRow> rows(static_cast<size_t>(2 * n));
    eval_loop(n, c.threads, [&](int i) {
      const Trajectory& tr = ds.test[static_cast<size_t>(i)];
      const Mat full = normalized_states(tr, norm);
      for (int seg = 0; seg < 2; ++seg) {
        const int start = seg == 0 ? 0 : o.window;
        const Mat window = slice(full, start, o.window + 1, 0, full.cols);
        const SuperresFill fill = superres_fill(
            stages, window, o.stride0, o.fit_steps, o.fit_lr, sched,
            o.seed + static_cast<std::uint64_t>(2 * i + seg));
        SegmentRow& r = rows[static_cast<size_t>(2 * i + seg)];
        r.id = test_trajectory_id(i);
        r.segment = seg == 0 ? "seen" : "unseen";
        r.fit_loss = fill.fit.loss;
        r.mse = filled_rows_mse(denormalized_states(fill.states, norm),
                                denormalized_states(window, norm), o.stride0);
      }
    });
    double mean_seen = 0.0, mean_unseen = 0.0;
    for (const SegmentRow& r : rows) {
      (r.segment == "seen" ? mean_seen : mean_unseen) += r.mse;
    }
    mean_seen /= n;
    mean_unseen /= n;
    const std::string path = prefix + ".csv";
    write_segment_csv(path, hash, rows, mean_seen, mean_unseen);
    write_run_info(c, "superres", hash, prefix + "_run.json");
    std::printf("superres %s: seen mse %.6g, unseen mse %.6g (%d trajectories)\n",
                path.c_str(), mean_seen, mean_unseen, n);
  });
}

// ---------- baseline ----------

struct BaselineOpts {
  std::string kind = "hnn";
  std::string mode = "train";
  std::string dataset, checkpoint;
  int zdim = 16, hidden = 32, layers = 2;
  int ksize = 5;
  int window = 64;
  int stride0 = 4;
  double weight_lr = 1e-3, code_lr = 1e-2;
  int batch = 64, epochs = 200, max_steps = 0;
  int given = 8, horizon = 120;
  int fit_steps = 200;
  double fit_lr = 0.05;
  int limit = 0;
  std::string integrator = "euler";
  std::uint64_t seed = 1;
  std::string name;
};

void baseline_train(Ctx& c, BaselineOpts& o, const Dataset& ds,
                    std::uint64_t hash, const std::string& prefix) {
  refuse_existing(c, {prefix + ".json", prefix + ".bin"});
  if (o.kind == "hnn") {
    HnnTrainConfig tc;
    tc.net.zdim = o.zdim;
    tc.net.hidden = o.hidden;
    tc.net.layers = o.layers;
    tc.weight_lr = o.weight_lr;
    tc.code_lr = o.code_lr;
    tc.batch = o.batch;
    tc.epochs = o.epochs;
    tc.max_steps_per_epoch = o.max_steps;
    tc.seed = o.seed;
    tc.threads = c.threads;
    tc.loss_csv = prefix + "_loss.csv";
    const HnnTrainResult res = train_hnn(ds, tc);
    save_hnn_checkpoint(*res.model, res.codebook, ds.norm, prefix);
    std::printf("trained %s: loss %.6g -> %.6g\n", prefix.c_str(),
                res.history.front().loss, res.history.back().loss);
  } else if (o.kind == "vanilla") {
    VanillaTrainConfig tc;
    tc.net.zdim = o.zdim;
    tc.net.hidden = o.hidden;
    tc.net.layers = o.layers;
    tc.weight_lr = o.weight_lr;
    tc.code_lr = o.code_lr;
    tc.batch = o.batch;
    tc.epochs = o.epochs;
    tc.max_steps_per_epoch = o.max_steps;
    tc.seed = o.seed;
    tc.threads = c.threads;
    tc.loss_csv = prefix + "_loss.csv";
    const VanillaTrainResult res = train_vanilla(ds, tc);
    save_vanilla_checkpoint(*res.model, res.codebook, ds.norm, prefix);
    std::printf("trained %s: loss %.6g -> %.6g\n", prefix.c_str(),
                res.history.front().loss, res.history.back().loss);
  } else if (o.kind == "conv") {
    ConvTrainConfig tc;
    tc.net.zdim = o.zdim;
    tc.net.hidden = o.hidden;
    tc.net.layers = o.layers;
    tc.net.ksize = o.ksize;
    tc.net.length = o.window + 1;
    tc.stride0 = o.stride0;
    tc.weight_lr = o.weight_lr;
    tc.code_lr = o.code_lr;
    tc.batch = o.batch;
    tc.epochs = o.epochs;
    tc.max_steps_per_epoch = o.max_steps;
    tc.seed = o.seed;
    tc.threads = c.threads;
    tc.loss_csv = prefix + "_loss.csv";
    const ConvTrainResult res = train_conv(ds, tc);
    save_conv_checkpoint(*res.model, res.codebook, ds.norm, prefix);
    std::printf("trained %s: loss %.6g -> %.6g\n", prefix.c_str(),
                res.history.front().loss, res.history.back().loss);
  } else {
    throw ConfigError("unknown baseline kind: " + o.kind);
  }
  write_run_info(c, "baseline", hash, prefix + "_run.json");
}

void baseline_rollout(Ctx& c, BaselineOpts& o, const Dataset& ds,
                      std::uint64_t hash, int given, int horizon,
                      const std::string& task) {
  const int n = eval_count(ds, o.limit);
  std::vector<RolloutReport> reports(static_cast<size_t>(n));
  if (o.kind == "hnn") {
    const HnnCheckpoint ckpt = load_hnn_checkpoint(o.checkpoint);
    if (ckpt.model->config().dim != ds.dim()) {
      throw ConfigError("checkpoint system does not match the dataset");
    }
    const Integrator method = integrator_from_name(o.integrator);
    eval_loop(n, c.threads, [&](int i) {
      const Trajectory& tr = ds.test[static_cast<size_t>(i)];
      const Mat raw = raw_states(tr);
      const Mat head = slice(raw, 0, given, 0, raw.cols);
      const LatentFit fit =
          fit_hnn_latent(*ckpt.model, head, ds.dt, o.fit_steps, o.fit_lr);
      const BoundHnn field(*ckpt.model, fit.z);
      const Mat init = slice(raw, given - 1, 1, 0, raw.cols);
      const Mat rolled = hnn_rollout(field, init, horizon, ds.dt, method);
      reports[static_cast<size_t>(i)] = score_rollout(
          assemble_pred(head, rolled, horizon), tr, given,
          test_trajectory_id(i));
    });
  } else if (o.kind == "vanilla") {
    const VanillaCheckpoint ckpt = load_vanilla_checkpoint(o.checkpoint);
    if (ckpt.model->config().dim != ds.dim()) {
      throw ConfigError("checkpoint system does not match the dataset");
    }
    eval_loop(n, c.threads, [&](int i) {
      const Trajectory& tr = ds.test[static_cast<size_t>(i)];
      const Mat full = normalized_states(tr, ckpt.norm);
      const Mat head = slice(full, 0, given, 0, full.cols);
      const LatentFit fit =
          fit_vanilla_latent(*ckpt.model, head, o.fit_steps, o.fit_lr);
      const Mat init = slice(full, given - 1, 1, 0, full.cols);
      const Mat rolled = vanilla_rollout(*ckpt.model, fit.z, init, horizon);
      reports[static_cast<size_t>(i)] = score_rollout(
          denormalized_states(assemble_pred(head, rolled, horizon),
                              ckpt.norm),
          tr, given, test_trajectory_id(i));
    });
  } else {
    throw ConfigError("baseline kind '" + o.kind +
                      "' does not support mode '" + o.mode + "'");
  }
  const RolloutReport avg = average_reports(reports);
  const TrendTest trend = trend_test(avg.energy_rel_err);
  const std::string name =
      o.name.empty()
          ? task + "_" + o.kind +
                (o.kind == "hnn" ? "_" + o.integrator : "") + "_" +
                std::string(system_name(ds.kind)) + "_seed" +
                std::to_string(o.seed) + ".csv"
          : o.name;
  const std::string path = c.out_dir + "/" + name;
  write_rollout_csv(path, avg, hash);
  append_trend(path, trend);
  write_run_info(c, "baseline", hash,
                 path.substr(0, path.size() - 4) + "_run.json");
  std::printf("baseline %s %s: mean mse %.6g, mean |dE|/E %.6g, trend p %.4g\n",
              o.kind.c_str(), path.c_str(), avg.mean_mse, avg.mean_energy_rel,
              trend.p_value);
}

void baseline_superres(Ctx& c, BaselineOpts& o, const Dataset& ds,
                       std::uint64_t hash) {
  if (o.kind != "conv") {
    throw ConfigError("superres mode expects the conv baseline");
  }
  const ConvCheckpoint ckpt = load_conv_checkpoint(o.checkpoint);
  if (ckpt.model->config().dim != ds.dim()) {
    throw ConfigError("checkpoint system does not match the dataset");
  }
  const int length = ckpt.model->config().length;
  if (length != o.window + 1) {
    throw ConfigError("checkpoint window does not match --window");
  }
  if (ds.n_states < 2 * o.window + 1) {
    throw ConfigError(
        "super-resolution evaluation needs 2*window + 1 recorded states");
  }
  const std::vector<ConvStage> stages = conv_stages(length, o.stride0);
  std::vector<int> known0;
  for (int t = 0; t < length; t += o.stride0) known0.push_back(t);
  const Mat z(1, ckpt.model->config().zdim);  // training-mean code
  const int n = eval_count(ds, o.limit);
  std::vector<SegmentRow> rows(static_cast<size_t>(2 * n));
  eval_loop(n, c.threads, [&](int i) {
    const Trajectory& tr = ds.test[static_cast<size_t>(i)];
    const Mat full = normalized_states(tr, ckpt.norm);
    for (int seg = 0; seg < 2; ++seg) {
      const int start = seg == 0 ? 0 : o.window;
      const Mat window = slice(full, start, length, 0, full.cols);
      const Mat dense =
          conv_interpolate(*ckpt.model, stages, window, known0, z);
      SegmentRow& r = rows[static_cast<size_t>(2 * i + seg)];
      r.id = test_trajectory_id(i);
      r.segment = seg == 0 ? "seen" : "unseen";
      r.fit_loss = 0.0;
      r.mse = filled_rows_mse(denormalized_states(dense, ckpt.norm),
                              denormalized_states(window, ckpt.norm),
                              o.stride0);
    }
  });
  double mean_seen = 0.0, mean_unseen = 0.0;
  for (const SegmentRow& r : rows) {
    (r.segment == "seen" ? mean_seen : mean_unseen) += r.mse;
  }
  mean_seen /= n;
  mean_unseen /= n;
  const std::string name =
      o.name.empty() ? "superres_conv_" + std::string(system_name(ds.kind)) +
                           "_seed" + std::to_string(o.seed) + ".csv"
                     : o.name;
  const std::string path = c.out_dir + "/" + name;
  write_segment_csv(path, hash, rows, mean_seen, mean_unseen);
  write_run_info(c, "baseline", hash,
                 path.substr(0, path.size() - 4) + "_run.json");
  std::printf("baseline conv %s: seen mse %.6g, unseen mse %.6g\n",
              path.c_str(), mean_seen, mean_unseen);
}

int run_baseline(Ctx& c, BaselineOpts& o) {
  if (int rc = load_config(c)) return rc;
  bind_common(c);
  bind_opt(c, "kind", o.kind);
  bind_opt(c, "mode", o.mode);
  bind_opt(c, "dataset", o.dataset);
  bind_opt(c, "checkpoint", o.checkpoint);
  bind_opt(c, "zdim", o.zdim);
  bind_opt(c, "hidden", o.hidden);
  bind_opt(c, "layers", o.layers);
  bind_opt(c, "ksize", o.ksize);
  bind_opt(c, "window", o.window);
  bind_opt(c, "stride0", o.stride0);
  bind_opt(c, "weight-lr", o.weight_lr);
  bind_opt(c, "code-lr", o.code_lr);
  bind_opt(c, "batch", o.batch);
  bind_opt(c, "epochs", o.epochs);
  bind_opt(c, "max-steps", o.max_steps);
  bind_opt(c, "given", o.given);
  bind_opt(c, "horizon", o.horizon);
  bind_opt(c, "fit-steps", o.fit_steps);
  bind_opt(c, "fit-lr", o.fit_lr);
  bind_opt(c, "limit", o.limit);
  bind_opt(c, "integrator", o.integrator);
  bind_opt(c, "seed", o.seed);
  bind_opt(c, "name", o.name);
  if (int rc = finish_bind(c)) return rc;
  const std::uint64_t hash = config_hash(c, "baseline");
  return guarded(c, "baseline", hash, [&] {
    const Dataset ds = load_dataset(o.dataset);
    if (o.mode == "train") {
      const std::string name =
          o.name.empty() ? o.kind + "_" + std::string(system_name(ds.kind)) +
                               "_seed" + std::to_string(o.seed)
                         : o.name;
      baseline_train(c, o, ds, hash, c.out_dir + "/" + name);
    } else if (o.mode == "rollout") {
      baseline_rollout(c, o, ds, hash, o.given, o.horizon, "rollout");
    } else if (o.mode == "complete") {
      const int given = o.given;
      const int horizon = o.horizon > 0 ? o.horizon : ds.n_states - given;
      baseline_rollout(c, o, ds, hash, given, horizon, "completion");
    } else if (o.mode == "superres") {
      baseline_superres(c, o, ds, hash);
    } else {
      throw ConfigError("unknown baseline mode: " + o.mode);
    }
  });
}

// ---------- plot ----------

struct PlotOpts {
  std::string input, output;
  std::string column;
  std::string title;
};

int run_plot(Ctx& c, PlotOpts& o) {
  if (int rc = load_config(c)) return rc;
  bind_common(c);
  bind_opt(c, "input", o.input);
  bind_opt(c, "output", o.output);
  bind_opt(c, "column", o.column);
  bind_opt(c, "title", o.title);
  if (int rc = finish_bind(c)) return rc;
  const std::uint64_t hash = config_hash(c, "plot");
  return guarded(c, "plot", hash, [&] {
    std::ifstream f(o.input);
    if (!f) throw ConfigError("cannot open " + o.input);
    std::vector<std::string> header;
    std::vector<double> xs, ys;
    int col = -1;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::stringstream ss(line);
      std::string cell;
      std::vector<std::string> cells;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (header.empty()) {
        header = cells;
        if (!o.column.empty()) {
          for (size_t i = 0; i < header.size(); ++i) {
            if (header[i] == o.column) col = static_cast<int>(i);
          }
          if (col < 0) throw ConfigError("column not found: " + o.column);
        } else {
          col = static_cast<int>(header.size()) - 1;
        }
        continue;
      }
      if (static_cast<int>(cells.size()) <= col) continue;
      xs.push_back(std::stod(cells[0]));
      ys.push_back(std::stod(cells[static_cast<size_t>(col)]));
    }
    if (ys.empty()) throw ConfigError("no data rows in " + o.input);
    double ymin = ys[0], ymax = ys[0];
    for (double v : ys) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
    if (ymax == ymin) ymax = ymin + 1.0;
    const double xmin = xs.front(), xmax = std::max(xs.back(), xmin + 1.0);
    const int w = 800, h = 400, ml = 60, mr = 20, mt = 40, mb = 40;
    const std::string out =
        o.output.empty() ? o.input.substr(0, o.input.rfind('.')) + ".svg"
                         : o.output;
    std::FILE* sf = std::fopen(out.c_str(), "wb");
    if (sf == nullptr) throw ConfigError("cannot write " + out);
    std::fprintf(sf,
                 "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" "
                 "height=\"%d\">\n<!-- %s config %s -->\n",
                 w, h, std::string(kVersion).c_str(), hex64(hash).c_str());
    std::fprintf(sf, "<rect width=\"%d\" height=\"%d\" fill=\"white\"/>\n", w,
                 h);
    const std::string title =
        o.title.empty() ? o.input + " : " + header[static_cast<size_t>(col)]
                        : o.title;
    std::fprintf(sf,
                 "<text x=\"%d\" y=\"24\" font-family=\"monospace\" "
                 "font-size=\"14\">%s</text>\n",
                 ml, title.c_str());
    std::fprintf(sf,
                 "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" "
                 "stroke=\"black\"/>\n",
                 ml, h - mb, w - mr, h - mb);
    std::fprintf(sf,
                 "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" "
                 "stroke=\"black\"/>\n",
                 ml, mt, ml, h - mb);
    std::fprintf(sf, "<polyline fill=\"none\" stroke=\"#1f77b4\" "
                     "stroke-width=\"1.5\" points=\"");
    for (size_t i = 0; i < ys.size(); ++i) {
      const double px =
          ml + (xs[i] - xmin) / (xmax - xmin) * (w - ml - mr);
      const double py =
          (h - mb) - (ys[i] - ymin) / (ymax - ymin) * (h - mt - mb);
      std::fprintf(sf, "%s%.2f,%.2f", i == 0 ? "" : " ", px, py);
    }
    std::fprintf(sf, "\"/>\n");
    std::fprintf(sf,
                 "<text x=\"4\" y=\"%d\" font-family=\"monospace\" "
                 "font-size=\"11\">%.4g</text>\n",
                 mt + 6, ymax);
    std::fprintf(sf,
                 "<text x=\"4\" y=\"%d\" font-family=\"monospace\" "
                 "font-size=\"11\">%.4g</text>\n",
                 h - mb, ymin);
    std::fprintf(sf, "</svg>\n");
    std::fclose(sf);
    std::printf("wrote %s (%zu points)\n", out.c_str(), ys.size());
  });
}

void add_common_flags(CLI::App* sub, Ctx& c) {
  sub->add_option("--config", c.config_path,
                  "JSON config file; flags override its fields");
  sub->add_option("--out", c.out_dir, "output directory");
  sub->add_flag("--force", c.force, "overwrite existing artifacts");
  sub->add_option("--threads", c.threads,
                  "cap worker threads (0 = all cores)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"block Hamiltonian toolkit: dataset generation, training, "
               "evaluation, probing, super-resolution, and plots"};
  app.require_subcommand(1);
  int rc = 0;

  Ctx gc;
  GenOpts go;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a dataset");
  gc.cmd = gen;
  add_common_flags(gen, gc);
  gen->add_option("--system", go.system, "single or double");
  gen->add_option("--seed", go.seed, "generator seed");
  gen->add_option("--n-train", go.n_train, "training trajectories");
  gen->add_option("--n-test", go.n_test, "test trajectories");
  gen->add_option("--dt", go.dt, "recording step");
  gen->add_option("--n-states", go.n_states, "recorded states per trajectory");
  gen->add_option("--substeps", go.substeps, "integrator substeps per dt");
  gen->add_option("--name", go.name, "dataset file prefix");
  gen->callback([&] { rc = run_gen(gc, go); });

  Ctx tc_ctx;
  TrainOpts to;
  CLI::App* tr = app.add_subcommand("train", "train the block model");
  tc_ctx.cmd = tr;
  add_common_flags(tr, tc_ctx);
  tr->add_option("--dataset", to.dataset, "dataset prefix")->required();
  tr->add_option("--b", to.b, "block size");
  tr->add_option("--s", to.s, "stride");
  tr->add_option("--width", to.width, "model width");
  tr->add_option("--heads", to.heads, "attention heads");
  tr->add_option("--layers", to.layers, "attention layers");
  tr->add_option("--mlp-hidden", to.mlp_hidden, "mlp width (0 = 4x width)");
  tr->add_option("--readout-hidden", to.readout_hidden,
                 "readout width (0 = width)");
  tr->add_option("--schedule", to.schedule, "noise schedule steps");
  tr->add_option("--mask", to.mask, "autoregressive, superres, or random");
  tr->add_option("--weight-lr", to.weight_lr, "weight learning rate");
  tr->add_option("--code-lr", to.code_lr, "code learning rate");
  tr->add_option("--lr-decay", to.lr_decay, "per-epoch lr factor");
  tr->add_option("--batch", to.batch, "batch size");
  tr->add_option("--epochs", to.epochs, "epochs");
  tr->add_option("--max-steps", to.max_steps, "cap optimizer steps per epoch");
  tr->add_option("--seed", to.seed, "training seed");
  tr->add_option("--name", to.name, "checkpoint name");
  tr->callback([&] { rc = run_train(tc_ctx, to); });

  Ctx rc_ctx, cc_ctx;
  EvalOpts ro, co;
  co.given = 16;
  co.horizon = 0;  // resolves to the remaining states
  CLI::App* ro_cmd = app.add_subcommand(
      "rollout", "fit a latent on a short prefix and roll forward");
  CLI::App* co_cmd = app.add_subcommand(
      "complete", "fit a latent on an observed head and predict the rest");
  rc_ctx.cmd = ro_cmd;
  cc_ctx.cmd = co_cmd;
  for (auto& [cmd, ctx, opts] :
       {std::tuple<CLI::App*, Ctx*, EvalOpts*>{ro_cmd, &rc_ctx, &ro},
        std::tuple<CLI::App*, Ctx*, EvalOpts*>{co_cmd, &cc_ctx, &co}}) {
    add_common_flags(cmd, *ctx);
    cmd->add_option("--dataset", opts->dataset, "dataset prefix")->required();
    cmd->add_option("--checkpoint", opts->checkpoint, "checkpoint prefix")
        ->required();
    cmd->add_option("--given", opts->given, "observed states");
    cmd->add_option("--horizon", opts->horizon,
                    "steps to predict (0 = the rest)");
    cmd->add_option("--schedule", opts->schedule, "noise schedule steps");
    cmd->add_option("--fit-steps", opts->fit_steps, "latent fit steps");
    cmd->add_option("--fit-lr", opts->fit_lr, "latent fit learning rate");
    cmd->add_option("--limit", opts->limit, "test trajectories (0 = all)");
    cmd->add_option("--seed", opts->seed, "inference noise seed");
    cmd->add_option("--name", opts->name, "metrics file name");
  }
  ro_cmd->callback([&] { rc = run_eval(rc_ctx, ro, "rollout"); });
  co_cmd->callback([&] { rc = run_eval(cc_ctx, co, "complete"); });

  Ctx pc;
  ProbeOpts po;
  CLI::App* pr = app.add_subcommand(
      "probe", "linear-probe trained codes for the length ratio");
  pc.cmd = pr;
  add_common_flags(pr, pc);
  pr->add_option("--dataset", po.dataset, "dataset prefix")->required();
  pr->add_option("--checkpoint-dir", po.checkpoint_dir,
                 "directory holding the per-geometry checkpoints");
  pr->add_option("--geometries", po.geometries,
                 "comma-separated block sizes (stride = b/2)");
  pr->add_option("--train-seed", po.train_seed,
                 "seed the checkpoints were trained with");
  pr->add_option("--fit-steps", po.fit_steps, "latent fit steps");
  pr->add_option("--fit-lr", po.fit_lr, "latent fit learning rate");
  pr->add_option("--name", po.name, "metrics file name");
  pr->callback([&] { rc = run_probe(pc, po); });

  Ctx sc_ctx;
  SuperresOpts so;
  CLI::App* sr = app.add_subcommand(
      "superres", "train and evaluate progressive temporal refinement");
  sc_ctx.cmd = sr;
  add_common_flags(sr, sc_ctx);
  sr->add_option("--dataset", so.dataset, "dataset prefix")->required();
  sr->add_option("--window", so.window, "training window length");
  sr->add_option("--stride0", so.stride0, "coarse grid spacing");
  sr->add_option("--width", so.width, "model width");
  sr->add_option("--heads", so.heads, "attention heads");
  sr->add_option("--layers", so.layers, "attention layers");
  sr->add_option("--mlp-hidden", so.mlp_hidden, "mlp width (0 = 4x width)");
  sr->add_option("--readout-hidden", so.readout_hidden,
                 "readout width (0 = width)");
  sr->add_option("--schedule", so.schedule, "noise schedule steps");
  sr->add_option("--weight-lr", so.weight_lr, "weight learning rate");
  sr->add_option("--code-lr", so.code_lr, "code learning rate");
  sr->add_option("--lr-decay", so.lr_decay, "per-epoch lr factor");
  sr->add_option("--batch", so.batch, "batch size");
  sr->add_option("--epochs", so.epochs, "epochs");
  sr->add_option("--max-steps", so.max_steps, "cap optimizer steps per epoch");
  sr->add_option("--fit-steps", so.fit_steps, "latent fit steps");
  sr->add_option("--fit-lr", so.fit_lr, "latent fit learning rate");
  sr->add_option("--limit", so.limit, "test trajectories (0 = all)");
  sr->add_option("--seed", so.seed, "training seed");
  sr->add_flag("--eval-only", so.eval_only,
               "reuse existing stage checkpoints");
  sr->add_option("--name", so.name, "artifact name prefix");
  sr->callback([&] { rc = run_superres(sc_ctx, so); });

  Ctx bc;
  BaselineOpts bo;
  CLI::App* bl = app.add_subcommand(
      "baseline", "train or evaluate the comparison models");
  bc.cmd = bl;
  add_common_flags(bl, bc);
  bl->add_option("--kind", bo.kind, "hnn, vanilla, or conv");
  bl->add_option("--mode", bo.mode, "train, rollout, complete, or superres");
  bl->add_option("--dataset", bo.dataset, "dataset prefix")->required();
  bl->add_option("--checkpoint", bo.checkpoint,
                 "checkpoint prefix (eval modes)");
  bl->add_option("--zdim", bo.zdim, "latent width");
  bl->add_option("--hidden", bo.hidden, "hidden width");
  bl->add_option("--layers", bo.layers, "hidden layers");
  bl->add_option("--ksize", bo.ksize, "conv kernel width");
  bl->add_option("--window", bo.window, "conv window length minus one");
  bl->add_option("--stride0", bo.stride0, "coarse grid spacing");
  bl->add_option("--weight-lr", bo.weight_lr, "weight learning rate");
  bl->add_option("--code-lr", bo.code_lr, "code learning rate");
  bl->add_option("--batch", bo.batch, "batch size");
  bl->add_option("--epochs", bo.epochs, "epochs");
  bl->add_option("--max-steps", bo.max_steps, "cap optimizer steps per epoch");
  bl->add_option("--given", bo.given, "observed states (eval modes)");
  bl->add_option("--horizon", bo.horizon, "steps to predict (0 = the rest)");
  bl->add_option("--fit-steps", bo.fit_steps, "latent fit steps");
  bl->add_option("--fit-lr", bo.fit_lr, "latent fit learning rate");
  bl->add_option("--limit", bo.limit, "test trajectories (0 = all)");
  bl->add_option("--integrator", bo.integrator, "euler, leapfrog, or rk4");
  bl->add_option("--seed", bo.seed, "seed");
  bl->add_option("--name", bo.name, "artifact name");
  bl->callback([&] { rc = run_baseline(bc, bo); });

  Ctx plc;
  PlotOpts plo;
  CLI::App* pl = app.add_subcommand("plot", "render a metrics CSV as SVG");
  plc.cmd = pl;
  add_common_flags(pl, plc);
  pl->add_option("--input", plo.input, "metrics CSV")->required();
  pl->add_option("--output", plo.output, "SVG path (default: input.svg)");
  pl->add_option("--column", plo.column, "column to plot (default: last)");
  pl->add_option("--title", plo.title, "plot title");
  pl->callback([&] { rc = run_plot(plc, plo); });

  CLI11_PARSE(app, argc, argv);
  return rc;
}
