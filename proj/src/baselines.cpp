#include "dhn/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>

#include "dhn/parallel.hpp"
#include "dhn/rng.hpp"
#include "json.hpp"

namespace dhn {
namespace {

using json = nlohmann::json;

constexpr char kMagic[9] = "DHNBASE1";

void bad_join(std::string& bad, const std::string& msg) {
  if (!bad.empty()) bad += "; ";
  bad += msg;
}

// Biases start at zero, everything else at N(0, 1/sqrt(fan-in)). Tensors
// listed in zero_names are cleared afterwards without disturbing the draw
// sequence of the others.
void init_mlp_store(ParamStore& store, std::uint64_t seed,
                    const std::vector<std::string>& zero_names = {}) {
  for (size_t i = 0; i < store.values.size(); ++i) {
    Mat& w = store.values[i];
    if (store.names[i].find("bias") != std::string::npos) {
      w.set_zero();
      continue;
    }
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(i));
    const double sigma = 1.0 / std::sqrt(static_cast<double>(w.rows));
    for (double& v : w.a) v = sigma * rng.normal();
  }
  for (const std::string& name : zero_names) {
    const int i = store.find(name);
    if (i < 0) throw ConfigError("no parameter named " + name);
    store.values[static_cast<size_t>(i)].set_zero();
  }
}

Graph build_hnn_graph(ParamStore* store, const HnnConfig& cfg) {
  GraphBuilder bld(store);
  const int d2 = 2 * cfg.dim;
  const int state = bld.input("state", 1, d2);
  const int z = bld.ext("z", 1, cfg.zdim);
  int x = bld.tanh_ew(bld.add(
      bld.add(bld.matmul(state, bld.param("hnn.l0.w", d2, cfg.hidden)),
              bld.matmul(z, bld.param("hnn.z.w", cfg.zdim, cfg.hidden))),
      bld.param("hnn.l0.bias", 1, cfg.hidden)));
  for (int l = 1; l < cfg.layers; ++l) {
    const std::string lp = "hnn.l" + std::to_string(l) + ".";
    x = bld.tanh_ew(
        bld.add(bld.matmul(x, bld.param(lp + "w", cfg.hidden, cfg.hidden)),
                bld.param(lp + "bias", 1, cfg.hidden)));
  }
  const int out = bld.add(bld.matmul(x, bld.param("hnn.out.w", cfg.hidden, 1)),
                          bld.param("hnn.out.bias", 1, 1));
  return bld.finish(out);
}

Graph build_vanilla_graph(ParamStore* store, const VanillaConfig& cfg) {
  GraphBuilder bld(store);
  const int d2 = 2 * cfg.dim;
  const int state = bld.data("state", 1, d2);
  const int target = bld.data("target", 1, d2);
  const int z = bld.ext("z", 1, cfg.zdim);
  int x = bld.tanh_ew(bld.add(
      bld.add(bld.matmul(state, bld.param("van.l0.w", d2, cfg.hidden)),
              bld.matmul(z, bld.param("van.z.w", cfg.zdim, cfg.hidden))),
      bld.param("van.l0.bias", 1, cfg.hidden)));
  for (int l = 1; l < cfg.layers; ++l) {
    const std::string lp = "van.l" + std::to_string(l) + ".";
    x = bld.tanh_ew(
        bld.add(bld.matmul(x, bld.param(lp + "w", cfg.hidden, cfg.hidden)),
                bld.param(lp + "bias", 1, cfg.hidden)));
  }
  const int delta = bld.add(bld.matmul(x, bld.param("van.out.w", cfg.hidden, d2)),
                            bld.param("van.out.bias", 1, d2));
  const int pred = bld.add(state, delta);
  bld.mark_aux(pred, "prediction");
  const int loss =
      bld.scale(bld.sum_sq(bld.sub(pred, target)), 1.0 / static_cast<double>(d2));
  return bld.finish(loss);
}

Graph build_conv_stage_graph(ParamStore* store, const ConvConfig& cfg,
                             int stage) {
  GraphBuilder bld(store);
  const std::string sp = "stage" + std::to_string(stage) + ".";
  const int d2 = 2 * cfg.dim;
  const int cin = d2 + 1;
  const int canvas = bld.data("canvas", cfg.length, cin);
  const int target = bld.data("target", cfg.length, d2);
  const int mask = bld.data("mask", cfg.length, cfg.length);
  const int z = bld.ext("z", 1, cfg.zdim);
  int x = bld.tanh_ew(bld.add_row(
      bld.add_row(
          bld.conv1d(canvas, bld.param(sp + "l0.w", cfg.ksize * cin, cfg.hidden),
                     cfg.ksize),
          bld.param(sp + "l0.bias", 1, cfg.hidden)),
      bld.matmul(z, bld.param(sp + "z.w", cfg.zdim, cfg.hidden))));
  for (int l = 1; l < cfg.layers; ++l) {
    const std::string lp = sp + "l" + std::to_string(l) + ".";
    x = bld.tanh_ew(bld.add_row(
        bld.conv1d(x, bld.param(lp + "w", cfg.ksize * cfg.hidden, cfg.hidden),
                   cfg.ksize),
        bld.param(lp + "bias", 1, cfg.hidden)));
  }
  const int pred = bld.add_row(
      bld.conv1d(x, bld.param(sp + "out.w", cfg.ksize * cfg.hidden, d2),
                 cfg.ksize),
      bld.param(sp + "out.bias", 1, d2));
  bld.mark_aux(pred, "prediction");
  // Row-selecting diagonal; its entries carry the mean normalizer, so the
  // squared sum is already the per-element average over the scored rows.
  const int loss = bld.sum_sq(bld.matmul(mask, bld.sub(pred, target)));
  return bld.finish(loss);
}

// L = sum over state channels of w * (dH/dstate - t)^2 with the target
// encoding Hamilton's equations; accumulates into the sinks when given.
double hnn_red_core(const Graph& g, const ParamStore& store, const Mat& state,
                    const Mat& deriv, const Mat& z, Workspace& ws,
                    const GradSinks& sinks) {
  const int d2 = state.cols;
  const int d = d2 / 2;
  Mat w2(1, d2), tgt(1, d2);
  const double w = 1.0 / static_cast<double>(d2);
  for (int i = 0; i < d; ++i) {
    w2.a[static_cast<size_t>(i)] = w;
    w2.a[static_cast<size_t>(d + i)] = w;
    tgt.a[static_cast<size_t>(i)] = -deriv.a[static_cast<size_t>(d + i)];
    tgt.a[static_cast<size_t>(d + i)] = deriv.a[static_cast<size_t>(i)];
  }
  GradReduction red;
  red.terms.push_back({0, &w2, &tgt, nullptr});
  Binding bind;
  bind.input = {&state};
  bind.ext = {&z};
  return grad_reduction_backward(g, store, bind, red, ws, sinks);
}

double vanilla_pair_core(const Graph& g, const ParamStore& store,
                         const Mat& state, const Mat& next, const Mat& z,
                         Workspace& ws, const GradSinks& sinks) {
  Binding bind;
  bind.data = {&state, &next};
  bind.ext = {&z};
  const double loss = forward(g, store, bind, ws);
  backward(g, store, bind, ws, sinks);
  return loss;
}

Mat scored_row_mask(int length, int d2, const std::vector<int>& scored) {
  if (scored.empty()) throw ConfigError("need at least one scored row");
  Mat mask(length, length);
  const double w =
      1.0 / std::sqrt(static_cast<double>(scored.size()) *
                      static_cast<double>(d2));
  int prev = -1;
  for (int r : scored) {
    if (r < 0 || r >= length) throw ConfigError("scored row out of range");
    if (r <= prev) throw ConfigError("scored rows must be strictly increasing");
    prev = r;
    mask(r, r) = w;
  }
  return mask;
}

double conv_stage_core(const Graph& g, const ParamStore& store,
                       const Mat& canvas, const Mat& target, const Mat& mask,
                       const Mat& z, Workspace& ws, const GradSinks& sinks) {
  Binding bind;
  bind.data = {&canvas, &target, &mask};
  bind.ext = {&z};
  const double loss = forward(g, store, bind, ws);
  backward(g, store, bind, ws, sinks);
  return loss;
}

struct PlanEntry {
  int traj = 0;
  int idx = 0;
};

struct LoopSpec {
  const char* label = "baseline";
  int n_traj = 0;
  int n_idx = 0;
  int width = 0;
  double weight_lr = 1e-3;
  double code_lr = 1e-2;
  int batch = 1;
  int epochs = 1;
  int cap = 0;
  std::uint64_t seed = 1;
  int threads = 0;
};

// Shared fixed-plan loop for every baseline trainer: the (trajectory, index)
// schedule is drawn once from the seed and revisited every epoch, gradients
// fold in chunk order, so runs repeat bitwise for any thread count. eval
// gets a zeroed latent-gradient buffer eg[0] and its chunk's parameter sink.
template <typename Eval>
std::vector<EpochStat> run_fixed_plan(ParamStore& store, Mat& codebook,
                                      const LoopSpec& lc, Eval&& eval) {
  const std::int64_t total =
      static_cast<std::int64_t>(lc.n_traj) * lc.n_idx;
  int steps = static_cast<int>(std::max<std::int64_t>(1, total / lc.batch));
  if (lc.cap > 0) steps = std::min(steps, lc.cap);

  Rng plan_rng = Rng::stream(lc.seed, std::uint64_t{1} << 20);
  std::vector<PlanEntry> plan(static_cast<size_t>(steps) *
                              static_cast<size_t>(lc.batch));
  for (PlanEntry& it : plan) {
    it.traj = static_cast<int>(
        plan_rng.uniform_index(static_cast<std::uint64_t>(lc.n_traj)));
    it.idx = static_cast<int>(
        plan_rng.uniform_index(static_cast<std::uint64_t>(lc.n_idx)));
  }

  codebook.resize(lc.n_traj, lc.width);
  Adam aw;
  aw.lr = lc.weight_lr;
  aw.init(store.values);
  RowAdam ac;
  ac.lr = lc.code_lr;
  ac.init(lc.n_traj, lc.width);

  const int nchunks = chunk_count(lc.batch);
  std::vector<std::vector<Mat>> cgw(static_cast<size_t>(nchunks));
  for (std::vector<Mat>& g : cgw) g = store.zeros_like();
  std::vector<Mat> gw = store.zeros_like();
  Mat z_grads(lc.batch, lc.width);
  Mat code_grad(lc.n_traj, lc.width);
  std::vector<double> losses(static_cast<size_t>(lc.batch));
  std::vector<std::string> errs(static_cast<size_t>(nchunks));

  std::vector<EpochStat> history;
  history.reserve(static_cast<size_t>(lc.epochs));
  for (int e = 1; e <= lc.epochs; ++e) {
    double eloss = 0.0;
    for (int st = 0; st < steps; ++st) {
      const PlanEntry* items = &plan[static_cast<size_t>(st) * lc.batch];
      for (std::string& m : errs) m.clear();
      parallel_chunks(
          lc.batch, lc.threads, [&](int c, std::int64_t lo, std::int64_t hi) {
            try {
              std::vector<Mat> eg(1);
              for (std::int64_t i = lo; i < hi; ++i) {
                const PlanEntry& it = items[i];
                Mat z(1, lc.width);
                std::memcpy(z.row(0), codebook.row(it.traj),
                            sizeof(double) * static_cast<size_t>(lc.width));
                eg[0].resize(1, lc.width);
                losses[static_cast<size_t>(i)] =
                    eval(c, it, z, cgw[static_cast<size_t>(c)], eg);
                std::memcpy(z_grads.row(static_cast<int>(i)), eg[0].row(0),
                            sizeof(double) * static_cast<size_t>(lc.width));
              }
            } catch (const std::exception& ex) {
              errs[static_cast<size_t>(c)] = ex.what();
            }
          });
      for (const std::string& m : errs) {
        if (!m.empty()) {
          throw NumericError(std::string(lc.label) +
                             " training diverged at epoch " +
                             std::to_string(e) + " step " +
                             std::to_string(st) + ": " + m);
        }
      }

      const double inv = 1.0 / lc.batch;
      for (Mat& m : gw) m.set_zero();
      for (int c = 0; c < nchunks; ++c) {
        std::vector<Mat>& gc = cgw[static_cast<size_t>(c)];
        for (size_t k = 0; k < gw.size(); ++k) {
          double* d = gw[k].a.data();
          double* g = gc[k].a.data();
          const size_t n = gw[k].a.size();
          for (size_t i = 0; i < n; ++i) {
            d[i] += g[i];
            g[i] = 0.0;
          }
        }
      }
      for (Mat& m : gw) {
        for (double& x : m.a) x *= inv;
      }

      double bloss = 0.0;
      std::vector<int> touched;
      touched.reserve(static_cast<size_t>(lc.batch));
      for (int i = 0; i < lc.batch; ++i) {
        bloss += losses[static_cast<size_t>(i)];
        const int tr = items[i].traj;
        double* cg = code_grad.row(tr);
        const double* zg = z_grads.row(i);
        for (int j = 0; j < lc.width; ++j) cg[j] += zg[j] * inv;
        touched.push_back(tr);
      }
      bloss *= inv;
      if (!std::isfinite(bloss)) {
        throw NumericError(std::string(lc.label) +
                           " training diverged at epoch " + std::to_string(e) +
                           " step " + std::to_string(st) +
                           ": non-finite batch loss");
      }
      aw.step(store.values, gw);
      std::sort(touched.begin(), touched.end());
      touched.erase(std::unique(touched.begin(), touched.end()),
                    touched.end());
      for (int tr : touched) {
        ac.step_row(codebook, tr, code_grad.row(tr));
        std::memset(code_grad.row(tr), 0,
                    sizeof(double) * static_cast<size_t>(lc.width));
      }
      eloss += bloss;
    }
    history.push_back({e, eloss / steps, 0.0});
  }
  return history;
}

void check_lrs(std::string& bad, double weight_lr, double code_lr, int batch,
               int epochs, int cap, int threads) {
  if (weight_lr < 0 || code_lr < 0) {
    bad_join(bad, "learning rates must be nonnegative");
  }
  if (batch < 1) bad_join(bad, "batch size must be positive");
  if (epochs < 1) bad_join(bad, "need at least one epoch");
  if (cap < 0) bad_join(bad, "step cap must be nonnegative");
  if (threads < 0) bad_join(bad, "thread count must be nonnegative");
}

json norm_to_json(const NormStats& norm) {
  json j{{"dim", norm.dim}};
  for (const char* key : {"q_mean", "q_std", "p_mean", "p_std"}) {
    j[key] = json::array();
  }
  for (int c = 0; c < norm.dim; ++c) {
    j["q_mean"].push_back(norm.q_mean[static_cast<size_t>(c)]);
    j["q_std"].push_back(norm.q_std[static_cast<size_t>(c)]);
    j["p_mean"].push_back(norm.p_mean[static_cast<size_t>(c)]);
    j["p_std"].push_back(norm.p_std[static_cast<size_t>(c)]);
  }
  return j;
}

NormStats norm_from_json(const json& j) {
  NormStats norm;
  norm.dim = j.at("dim").get<int>();
  if (norm.dim < 1 || norm.dim > 2) {
    throw ConfigError("bad normalization dimension in checkpoint");
  }
  for (int c = 0; c < norm.dim; ++c) {
    const auto idx = static_cast<size_t>(c);
    norm.q_mean[idx] = j.at("q_mean").at(idx).get<double>();
    norm.q_std[idx] = j.at("q_std").at(idx).get<double>();
    norm.p_mean[idx] = j.at("p_mean").at(idx).get<double>();
    norm.p_std[idx] = j.at("p_std").at(idx).get<double>();
  }
  return norm;
}

void write_mat(std::ofstream& out, const Mat& m) {
  out.write(reinterpret_cast<const char*>(m.a.data()),
            static_cast<std::streamsize>(m.a.size() * sizeof(double)));
}

void read_mat(std::ifstream& in, Mat& m) {
  in.read(reinterpret_cast<char*>(m.a.data()),
          static_cast<std::streamsize>(m.a.size() * sizeof(double)));
}

json store_meta(const ParamStore& store) {
  json arr = json::array();
  for (size_t i = 0; i < store.names.size(); ++i) {
    arr.push_back(json{{"name", store.names[i]},
                       {"rows", store.values[i].rows},
                       {"cols", store.values[i].cols}});
  }
  return arr;
}

void save_payload(const std::string& prefix, const char* type,
                  const json& config, const ParamStore& store,
                  const Mat& codebook, const NormStats& norm) {
  json meta{{"version", kVersion},
            {"magic", kMagic},
            {"type", type},
            {"config", config},
            {"codebook", {{"rows", codebook.rows}, {"cols", codebook.cols}}},
            {"norm", norm_to_json(norm)}};
  meta["params"] = store_meta(store);
  {
    std::ofstream jf(prefix + ".json");
    if (!jf) throw ConfigError("cannot write " + prefix + ".json");
    jf << meta.dump(2) << "\n";
  }
  std::ofstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw ConfigError("cannot write " + prefix + ".bin");
  bf.write(kMagic, 8);
  for (const Mat& w : store.values) write_mat(bf, w);
  write_mat(bf, codebook);
  if (!bf) throw ConfigError("failed writing " + prefix + ".bin");
}

json read_baseline_meta(const std::string& prefix, const char* type) {
  std::ifstream jf(prefix + ".json");
  if (!jf) throw ConfigError("cannot open " + prefix + ".json");
  json meta;
  try {
    meta = json::parse(jf);
  } catch (const json::exception& e) {
    throw ConfigError("bad checkpoint metadata: " + std::string(e.what()));
  }
  if (meta.value("magic", "") != kMagic) {
    throw ConfigError("not a baseline checkpoint: " + prefix + ".json");
  }
  if (meta.value("type", "") != type) {
    throw ConfigError("checkpoint holds a '" + meta.value("type", "") +
                      "' model, expected '" + type + "'");
  }
  return meta;
}

void load_payload(const std::string& prefix, const json& meta,
                  ParamStore& store, Mat& codebook) {
  const json& plist = meta.at("params");
  if (plist.size() != store.names.size()) {
    throw ConfigError("checkpoint parameter count mismatch");
  }
  for (size_t i = 0; i < store.names.size(); ++i) {
    const json& p = plist.at(i);
    if (p.at("name").get<std::string>() != store.names[i] ||
        p.at("rows").get<int>() != store.values[i].rows ||
        p.at("cols").get<int>() != store.values[i].cols) {
      throw ConfigError("checkpoint parameter mismatch at " + store.names[i]);
    }
  }
  std::ifstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw ConfigError("cannot open " + prefix + ".bin");
  char magic[8];
  bf.read(magic, 8);
  if (!bf || std::string(magic, 8) != kMagic) {
    throw ConfigError("bad checkpoint payload magic");
  }
  for (Mat& w : store.values) read_mat(bf, w);
  codebook.resize(meta.at("codebook").at("rows").get<int>(),
                  meta.at("codebook").at("cols").get<int>());
  read_mat(bf, codebook);
  if (!bf) throw ConfigError("checkpoint payload truncated");
  bf.get();
  if (!bf.eof()) throw ConfigError("checkpoint payload has trailing bytes");
  for (const Mat& w : store.values) {
    if (!w.all_finite()) throw NumericError("checkpoint holds non-finite weights");
  }
  if (!codebook.all_finite()) {
    throw NumericError("checkpoint holds non-finite latent codes");
  }
}

}  // namespace

void HnnConfig::validate() const {
  std::string bad;
  if (dim < 1) bad_join(bad, "state dimension must be positive");
  if (zdim < 1) bad_join(bad, "latent width must be positive");
  if (hidden < 1) bad_join(bad, "hidden width must be positive");
  if (layers < 1) bad_join(bad, "need at least one hidden layer");
  if (!bad.empty()) throw ConfigError("hnn config: " + bad);
}

HnnMlp::HnnMlp(const HnnConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  graph_ = build_hnn_graph(&store_, cfg_);
  init_mlp_store(store_, init_seed);
}

double HnnMlp::eval(const Mat& state, const Mat& z, Mat* grad) const {
  if (state.rows != 1 || state.cols != 2 * cfg_.dim) {
    throw ConfigError("state must be 1x" + std::to_string(2 * cfg_.dim));
  }
  if (z.rows != 1 || z.cols != cfg_.zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg_.zdim));
  }
  Binding bind;
  bind.input = {&state};
  bind.ext = {&z};
  Workspace ws;
  ws.prepare(graph_, false);
  if (grad == nullptr) return forward(graph_, store_, bind, ws);
  std::vector<Mat> grads = graph_.zeros_for(graph_.input_nodes);
  const double h = input_gradients(graph_, store_, bind, ws, grads);
  *grad = std::move(grads[0]);
  return h;
}

double hamiltonian_residual(const Mat& h_grad, const Mat& deriv) {
  if (h_grad.rows != 1 || deriv.rows != 1 || h_grad.cols != deriv.cols ||
      h_grad.cols % 2 != 0 || h_grad.cols == 0) {
    throw ConfigError("gradient and derivative must be matching state rows");
  }
  const int d = h_grad.cols / 2;
  double sum = 0.0;
  for (int i = 0; i < d; ++i) {
    const double rq = h_grad.a[static_cast<size_t>(d + i)] -
                      deriv.a[static_cast<size_t>(i)];
    const double rp = h_grad.a[static_cast<size_t>(i)] +
                      deriv.a[static_cast<size_t>(d + i)];
    sum += rq * rq + rp * rp;
  }
  return sum / static_cast<double>(2 * d);
}

double hnn_loss(const HnnMlp& net, const Mat& state, const Mat& deriv,
                const Mat& z) {
  Mat grad;
  net.eval(state, z, &grad);
  return hamiltonian_residual(grad, deriv);
}

double hnn_loss_grad(const HnnMlp& net, const Mat& state, const Mat& deriv,
                     const Mat& z, std::vector<Mat>* param_grads,
                     Mat* z_grad) {
  const HnnConfig& cfg = net.config();
  if (state.rows != 1 || state.cols != 2 * cfg.dim || deriv.rows != 1 ||
      deriv.cols != 2 * cfg.dim) {
    throw ConfigError("state and derivative must be 1x" +
                      std::to_string(2 * cfg.dim));
  }
  if (z.rows != 1 || z.cols != cfg.zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg.zdim));
  }
  Workspace ws;
  ws.prepare(net.graph(), true);
  std::vector<Mat> eg;
  GradSinks sinks;
  sinks.params = param_grads;
  if (z_grad != nullptr) {
    if (z_grad->rows != 1 || z_grad->cols != cfg.zdim) {
      throw ConfigError("z gradient sink must be a single latent row");
    }
    eg.assign(1, Mat(1, cfg.zdim));
    sinks.ext = &eg;
  }
  const double loss =
      hnn_red_core(net.graph(), net.params(), state, deriv, z, ws, sinks);
  if (z_grad != nullptr) axpy(*z_grad, 1.0, eg[0]);
  return loss;
}

BoundHnn::BoundHnn(const HnnMlp& net, const Mat& z) : net_(&net), z_(&z) {
  if (z.rows != 1 || z.cols != net.config().zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(net.config().zdim));
  }
}

void BoundHnn::h_grad(const Mat& state, Mat* grad) const {
  net_->eval(state, *z_, grad);
}

void AnalyticHamiltonian::h_grad(const Mat& state, Mat* grad) const {
  const int d = sp_.dim();
  if (state.rows != 1 || state.cols != 2 * d) {
    throw ConfigError("state must be 1x" + std::to_string(2 * d));
  }
  PhasePoint x;
  for (int c = 0; c < d; ++c) {
    x.q[static_cast<size_t>(c)] = state.a[static_cast<size_t>(c)];
    x.p[static_cast<size_t>(c)] = state.a[static_cast<size_t>(d + c)];
  }
  const PhaseVelocity v = phase_velocity(sp_, x);
  grad->resize(1, 2 * d);
  for (int c = 0; c < d; ++c) {
    grad->a[static_cast<size_t>(c)] = -v.dp[static_cast<size_t>(c)];
    grad->a[static_cast<size_t>(d + c)] = v.dq[static_cast<size_t>(c)];
  }
}

Mat hnn_rollout(const HnnField& field, const Mat& init, int steps, double dt,
                Integrator method) {
  const int d = field.dim();
  const int d2 = 2 * d;
  if (init.rows != 1 || init.cols != d2) {
    throw ConfigError("rollout needs one state row of " + std::to_string(d2) +
                      " channels");
  }
  if (steps < 0) throw ConfigError("rollout needs steps >= 0");
  if (!(dt > 0.0) || !is_finite(dt)) throw ConfigError("rollout needs dt > 0");

  Mat out(steps + 1, d2);
  std::memcpy(out.row(0), init.a.data(),
              sizeof(double) * static_cast<size_t>(d2));
  Mat y = init;
  Mat g(1, d2);
  // v = (dq/dt, dp/dt) from the field's (dH/dq, dH/dp)
  auto vel = [&](const Mat& s, Mat& v) {
    field.h_grad(s, &g);
    for (int i = 0; i < d; ++i) {
      v.a[static_cast<size_t>(i)] = g.a[static_cast<size_t>(d + i)];
      v.a[static_cast<size_t>(d + i)] = -g.a[static_cast<size_t>(i)];
    }
  };
  Mat k1(1, d2), k2(1, d2), k3(1, d2), k4(1, d2), tmp(1, d2);
  for (int k = 1; k <= steps; ++k) {
    try {
      switch (method) {
        case Integrator::kEuler: {
          vel(y, k1);
          for (int i = 0; i < d2; ++i) {
            y.a[static_cast<size_t>(i)] += dt * k1.a[static_cast<size_t>(i)];
          }
          break;
        }
        case Integrator::kRk4: {
          vel(y, k1);
          for (int i = 0; i < d2; ++i) {
            tmp.a[static_cast<size_t>(i)] =
                y.a[static_cast<size_t>(i)] +
                0.5 * dt * k1.a[static_cast<size_t>(i)];
          }
          vel(tmp, k2);
          for (int i = 0; i < d2; ++i) {
            tmp.a[static_cast<size_t>(i)] =
                y.a[static_cast<size_t>(i)] +
                0.5 * dt * k2.a[static_cast<size_t>(i)];
          }
          vel(tmp, k3);
          for (int i = 0; i < d2; ++i) {
            tmp.a[static_cast<size_t>(i)] =
                y.a[static_cast<size_t>(i)] + dt * k3.a[static_cast<size_t>(i)];
          }
          vel(tmp, k4);
          for (int i = 0; i < d2; ++i) {
            y.a[static_cast<size_t>(i)] +=
                dt / 6.0 *
                (k1.a[static_cast<size_t>(i)] +
                 2.0 * k2.a[static_cast<size_t>(i)] +
                 2.0 * k3.a[static_cast<size_t>(i)] +
                 k4.a[static_cast<size_t>(i)]);
          }
          break;
        }
        case Integrator::kLeapfrog: {
          // kick-drift-kick, matching the reference integrator
          vel(y, k1);
          for (int i = 0; i < d; ++i) {
            y.a[static_cast<size_t>(d + i)] +=
                0.5 * dt * k1.a[static_cast<size_t>(d + i)];
          }
          vel(y, k2);
          for (int i = 0; i < d; ++i) {
            y.a[static_cast<size_t>(i)] += dt * k2.a[static_cast<size_t>(i)];
          }
          vel(y, k3);
          for (int i = 0; i < d; ++i) {
            y.a[static_cast<size_t>(d + i)] +=
                0.5 * dt * k3.a[static_cast<size_t>(d + i)];
          }
          break;
        }
      }
    } catch (const NumericError& e) {
      throw NumericError("rollout step " + std::to_string(k) + ": " +
                         e.what());
    }
    if (!y.all_finite()) {
      throw NumericError("non-finite state at rollout step " +
                         std::to_string(k));
    }
    std::memcpy(out.row(k), y.a.data(),
                sizeof(double) * static_cast<size_t>(d2));
  }
  return out;
}

void HnnTrainConfig::validate() const {
  std::string bad;
  check_lrs(bad, weight_lr, code_lr, batch, epochs, max_steps_per_epoch,
            threads);
  if (!bad.empty()) throw ConfigError("hnn train config: " + bad);
}

HnnTrainResult train_hnn(const Dataset& data, const HnnTrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) {
    throw ConfigError("dataset has no training trajectories");
  }
  if (data.n_states < 3) {
    throw ConfigError("derivative targets need at least three states");
  }
  if (!(data.dt > 0.0)) throw ConfigError("dataset step size must be positive");
  HnnConfig nc = cfg.net;
  nc.dim = data.dim();
  nc.validate();
  const int d2 = 2 * nc.dim;
  const int n_train = static_cast<int>(data.train.size());

  std::vector<Mat> states, derivs;
  states.reserve(static_cast<size_t>(n_train));
  derivs.reserve(static_cast<size_t>(n_train));
  for (const Trajectory& tr : data.train) {
    Mat raw = raw_states(tr);
    Mat dv(raw.rows - 2, d2);
    const double inv2dt = 1.0 / (2.0 * data.dt);
    for (int t = 0; t < dv.rows; ++t) {
      for (int c = 0; c < d2; ++c) {
        dv(t, c) = (raw(t + 2, c) - raw(t, c)) * inv2dt;
      }
    }
    states.push_back(std::move(raw));
    derivs.push_back(std::move(dv));
  }

  auto net = std::make_unique<HnnMlp>(nc, cfg.seed);
  ParamStore& store = net->params();
  LoopSpec lc{"hnn",          n_train,  data.n_states - 2,
              nc.zdim,        cfg.weight_lr, cfg.code_lr,
              cfg.batch,      cfg.epochs,    cfg.max_steps_per_epoch,
              cfg.seed,       cfg.threads};
  std::vector<Workspace> wsv(static_cast<size_t>(chunk_count(cfg.batch)));
  for (Workspace& ws : wsv) ws.prepare(net->graph(), true);

  HnnTrainResult out;
  out.history = run_fixed_plan(
      store, out.codebook, lc,
      [&](int c, const PlanEntry& it, const Mat& z, std::vector<Mat>& pg,
          std::vector<Mat>& eg) {
        const Mat srow =
            slice(states[static_cast<size_t>(it.traj)], it.idx + 1, 1, 0, d2);
        const Mat drow =
            slice(derivs[static_cast<size_t>(it.traj)], it.idx, 1, 0, d2);
        GradSinks sinks;
        sinks.params = &pg;
        sinks.ext = &eg;
        return hnn_red_core(net->graph(), store, srow, drow, z,
                            wsv[static_cast<size_t>(c)], sinks);
      });
  if (!cfg.loss_csv.empty()) write_loss_csv(cfg.loss_csv, out.history);
  out.model = std::move(net);
  return out;
}

LatentFit fit_hnn_latent(const HnnMlp& net, const Mat& window, double dt,
                         int steps, double lr) {
  const HnnConfig& nc = net.config();
  const int d2 = 2 * nc.dim;
  if (window.cols != d2) {
    throw ConfigError("observed window must hold " + std::to_string(d2) +
                      " channels");
  }
  if (window.rows < 3) {
    throw ConfigError("latent fit needs at least three observed states");
  }
  if (steps < 0 || lr < 0) {
    throw ConfigError("latent fit needs steps >= 0 and lr >= 0");
  }
  if (!(dt > 0.0)) throw ConfigError("latent fit needs dt > 0");

  const std::uint64_t before = store_checksum(net.params());
  const int n = window.rows - 2;
  std::vector<Mat> srows, drows;
  srows.reserve(static_cast<size_t>(n));
  drows.reserve(static_cast<size_t>(n));
  const double inv2dt = 1.0 / (2.0 * dt);
  for (int t = 1; t + 1 < window.rows; ++t) {
    srows.push_back(slice(window, t, 1, 0, d2));
    Mat dv(1, d2);
    for (int c = 0; c < d2; ++c) {
      dv.a[static_cast<size_t>(c)] =
          (window(t + 1, c) - window(t - 1, c)) * inv2dt;
    }
    drows.push_back(std::move(dv));
  }

  Workspace ws;
  ws.prepare(net.graph(), true);
  std::vector<Mat> zv(1);
  zv[0] = Mat(1, nc.zdim);
  Adam az;
  az.lr = lr;
  az.init(zv);
  std::vector<Mat> zg(1);
  const double inv = 1.0 / static_cast<double>(n);
  for (int it = 0; it < steps; ++it) {
    zg[0].resize(1, nc.zdim);
    GradSinks sinks;
    sinks.ext = &zg;
    for (int i = 0; i < n; ++i) {
      hnn_red_core(net.graph(), net.params(), srows[static_cast<size_t>(i)],
                   drows[static_cast<size_t>(i)], zv[0], ws, sinks);
    }
    for (double& x : zg[0].a) x *= inv;
    az.step(zv, zg);
  }

  LatentFit fit;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    total += hnn_red_core(net.graph(), net.params(),
                          srows[static_cast<size_t>(i)],
                          drows[static_cast<size_t>(i)], zv[0], ws,
                          GradSinks{});
  }
  fit.loss = total * inv;
  fit.z = std::move(zv[0]);
  if (store_checksum(net.params()) != before) {
    throw NumericError("latent fit modified frozen weights");
  }
  return fit;
}

void VanillaConfig::validate() const {
  std::string bad;
  if (dim < 1) bad_join(bad, "state dimension must be positive");
  if (zdim < 1) bad_join(bad, "latent width must be positive");
  if (hidden < 1) bad_join(bad, "hidden width must be positive");
  if (layers < 1) bad_join(bad, "need at least one hidden layer");
  if (!bad.empty()) throw ConfigError("vanilla config: " + bad);
}

VanillaNet::VanillaNet(const VanillaConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  graph_ = build_vanilla_graph(&store_, cfg_);
  // zero update head: the untrained net is the identity map
  init_mlp_store(store_, init_seed, {"van.out.w"});
}

Mat VanillaNet::predict(const Mat& state, const Mat& z) const {
  if (state.rows != 1 || state.cols != 2 * cfg_.dim) {
    throw ConfigError("state must be 1x" + std::to_string(2 * cfg_.dim));
  }
  if (z.rows != 1 || z.cols != cfg_.zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg_.zdim));
  }
  const Mat target(1, 2 * cfg_.dim);
  Binding bind;
  bind.data = {&state, &target};
  bind.ext = {&z};
  Workspace ws;
  ws.prepare(graph_, false);
  forward(graph_, store_, bind, ws);
  return aux_value(graph_, ws, "prediction");
}

double VanillaNet::pair_loss(const Mat& state, const Mat& next,
                             const Mat& z) const {
  if (state.rows != 1 || state.cols != 2 * cfg_.dim || next.rows != 1 ||
      next.cols != 2 * cfg_.dim) {
    throw ConfigError("states must be 1x" + std::to_string(2 * cfg_.dim));
  }
  if (z.rows != 1 || z.cols != cfg_.zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg_.zdim));
  }
  Binding bind;
  bind.data = {&state, &next};
  bind.ext = {&z};
  Workspace ws;
  ws.prepare(graph_, false);
  return forward(graph_, store_, bind, ws);
}

double VanillaNet::pair_loss_grad(const Mat& state, const Mat& next,
                                  const Mat& z, std::vector<Mat>* param_grads,
                                  Mat* z_grad) const {
  if (state.rows != 1 || state.cols != 2 * cfg_.dim || next.rows != 1 ||
      next.cols != 2 * cfg_.dim) {
    throw ConfigError("states must be 1x" + std::to_string(2 * cfg_.dim));
  }
  if (z.rows != 1 || z.cols != cfg_.zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg_.zdim));
  }
  Workspace ws;
  ws.prepare(graph_, false);
  std::vector<Mat> eg;
  GradSinks sinks;
  sinks.params = param_grads;
  if (z_grad != nullptr) {
    if (z_grad->rows != 1 || z_grad->cols != cfg_.zdim) {
      throw ConfigError("z gradient sink must be a single latent row");
    }
    eg.assign(1, Mat(1, cfg_.zdim));
    sinks.ext = &eg;
  }
  const double loss =
      vanilla_pair_core(graph_, store_, state, next, z, ws, sinks);
  if (z_grad != nullptr) axpy(*z_grad, 1.0, eg[0]);
  return loss;
}

void VanillaTrainConfig::validate() const {
  std::string bad;
  check_lrs(bad, weight_lr, code_lr, batch, epochs, max_steps_per_epoch,
            threads);
  if (!bad.empty()) throw ConfigError("vanilla train config: " + bad);
}

VanillaTrainResult train_vanilla(const Dataset& data,
                                 const VanillaTrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) {
    throw ConfigError("dataset has no training trajectories");
  }
  if (data.n_states < 2) {
    throw ConfigError("next-state pairs need at least two states");
  }
  VanillaConfig nc = cfg.net;
  nc.dim = data.dim();
  nc.validate();
  const int d2 = 2 * nc.dim;
  const int n_train = static_cast<int>(data.train.size());

  std::vector<Mat> states;
  states.reserve(static_cast<size_t>(n_train));
  for (const Trajectory& tr : data.train) {
    states.push_back(normalized_states(tr, data.norm));
  }

  auto net = std::make_unique<VanillaNet>(nc, cfg.seed);
  ParamStore& store = net->params();
  LoopSpec lc{"vanilla",      n_train,  data.n_states - 1,
              nc.zdim,        cfg.weight_lr, cfg.code_lr,
              cfg.batch,      cfg.epochs,    cfg.max_steps_per_epoch,
              cfg.seed,       cfg.threads};
  std::vector<Workspace> wsv(static_cast<size_t>(chunk_count(cfg.batch)));
  for (Workspace& ws : wsv) ws.prepare(net->graph(), false);

  VanillaTrainResult out;
  out.history = run_fixed_plan(
      store, out.codebook, lc,
      [&](int c, const PlanEntry& it, const Mat& z, std::vector<Mat>& pg,
          std::vector<Mat>& eg) {
        const Mat srow =
            slice(states[static_cast<size_t>(it.traj)], it.idx, 1, 0, d2);
        const Mat nrow =
            slice(states[static_cast<size_t>(it.traj)], it.idx + 1, 1, 0, d2);
        GradSinks sinks;
        sinks.params = &pg;
        sinks.ext = &eg;
        return vanilla_pair_core(net->graph(), store, srow, nrow, z,
                                 wsv[static_cast<size_t>(c)], sinks);
      });
  if (!cfg.loss_csv.empty()) write_loss_csv(cfg.loss_csv, out.history);
  out.model = std::move(net);
  return out;
}

LatentFit fit_vanilla_latent(const VanillaNet& net, const Mat& window,
                             int steps, double lr) {
  const VanillaConfig& nc = net.config();
  const int d2 = 2 * nc.dim;
  if (window.cols != d2) {
    throw ConfigError("observed window must hold " + std::to_string(d2) +
                      " channels");
  }
  if (window.rows < 2) {
    throw ConfigError("latent fit needs at least two observed states");
  }
  if (steps < 0 || lr < 0) {
    throw ConfigError("latent fit needs steps >= 0 and lr >= 0");
  }

  const std::uint64_t before = store_checksum(net.params());
  const int n = window.rows - 1;
  std::vector<Mat> srows, nrows;
  srows.reserve(static_cast<size_t>(n));
  nrows.reserve(static_cast<size_t>(n));
  for (int t = 0; t + 1 < window.rows; ++t) {
    srows.push_back(slice(window, t, 1, 0, d2));
    nrows.push_back(slice(window, t + 1, 1, 0, d2));
  }

  Workspace ws;
  ws.prepare(net.graph(), false);
  std::vector<Mat> zv(1);
  zv[0] = Mat(1, nc.zdim);
  Adam az;
  az.lr = lr;
  az.init(zv);
  std::vector<Mat> zg(1);
  const double inv = 1.0 / static_cast<double>(n);
  for (int it = 0; it < steps; ++it) {
    zg[0].resize(1, nc.zdim);
    GradSinks sinks;
    sinks.ext = &zg;
    for (int i = 0; i < n; ++i) {
      vanilla_pair_core(net.graph(), net.params(), srows[static_cast<size_t>(i)],
                        nrows[static_cast<size_t>(i)], zv[0], ws, sinks);
    }
    for (double& x : zg[0].a) x *= inv;
    az.step(zv, zg);
  }

  LatentFit fit;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    Binding bind;
    bind.data = {&srows[static_cast<size_t>(i)], &nrows[static_cast<size_t>(i)]};
    bind.ext = {&zv[0]};
    total += forward(net.graph(), net.params(), bind, ws);
  }
  fit.loss = total * inv;
  fit.z = std::move(zv[0]);
  if (store_checksum(net.params()) != before) {
    throw NumericError("latent fit modified frozen weights");
  }
  return fit;
}

Mat vanilla_rollout(const VanillaNet& net, const Mat& z, const Mat& init,
                    int steps) {
  const int d2 = 2 * net.config().dim;
  if (init.rows != 1 || init.cols != d2) {
    throw ConfigError("rollout needs one state row of " + std::to_string(d2) +
                      " channels");
  }
  if (steps < 0) throw ConfigError("rollout needs steps >= 0");
  Mat out(steps + 1, d2);
  std::memcpy(out.row(0), init.a.data(),
              sizeof(double) * static_cast<size_t>(d2));
  Mat y = init;
  for (int k = 1; k <= steps; ++k) {
    try {
      y = net.predict(y, z);
    } catch (const NumericError& e) {
      throw NumericError("rollout step " + std::to_string(k) + ": " +
                         e.what());
    }
    if (!y.all_finite()) {
      throw NumericError("non-finite state at rollout step " +
                         std::to_string(k));
    }
    std::memcpy(out.row(k), y.a.data(),
                sizeof(double) * static_cast<size_t>(d2));
  }
  return out;
}

void ConvConfig::validate() const {
  std::string bad;
  if (dim < 1) bad_join(bad, "state dimension must be positive");
  if (zdim < 1) bad_join(bad, "latent width must be positive");
  if (hidden < 1) bad_join(bad, "hidden width must be positive");
  if (layers < 1) bad_join(bad, "need at least one hidden layer");
  if (ksize < 1 || ksize % 2 == 0) bad_join(bad, "kernel width must be odd");
  if (length < 2) bad_join(bad, "window needs at least two rows");
  if (!bad.empty()) throw ConfigError("conv config: " + bad);
}

std::vector<ConvStage> conv_stages(int length, int stride0) {
  if (length < 2) throw ConfigError("stage grids need at least two rows");
  if (stride0 < 2) throw ConfigError("initial stride must be at least 2");
  if ((stride0 & (stride0 - 1)) != 0) {
    throw ConfigError("initial stride must be a power of two");
  }
  if ((length - 1) % stride0 != 0) {
    throw ConfigError("window length minus one must be divisible by the stride");
  }
  std::vector<ConvStage> out;
  for (int stride = stride0; stride > 1; stride /= 2) {
    ConvStage st;
    for (int r = 0; r < length; r += stride) st.known.push_back(r);
    for (int r = stride / 2; r < length; r += stride) st.scored.push_back(r);
    out.push_back(std::move(st));
  }
  return out;
}

Mat sparse_canvas(const Mat& dense, const std::vector<int>& known) {
  if (dense.rows < 1 || dense.cols < 1) {
    throw ConfigError("canvas needs a non-empty window");
  }
  Mat canvas(dense.rows, dense.cols + 1);
  for (int r : known) {
    if (r < 0 || r >= dense.rows) throw ConfigError("known row out of range");
    std::memcpy(canvas.row(r), dense.row(r),
                sizeof(double) * static_cast<size_t>(dense.cols));
    canvas(r, dense.cols) = 1.0;
  }
  return canvas;
}

ConvNet::ConvNet(const ConvConfig& cfg, int n_stages, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  if (n_stages < 1) throw ConfigError("need at least one conv stage");
  graphs_.reserve(static_cast<size_t>(n_stages));
  for (int s = 0; s < n_stages; ++s) {
    graphs_.push_back(build_conv_stage_graph(&store_, cfg_, s));
  }
  init_mlp_store(store_, init_seed);
}

const Graph& ConvNet::graph(int stage) const {
  if (stage < 0 || stage >= stage_count()) {
    throw ConfigError("stage index out of range");
  }
  return graphs_[static_cast<size_t>(stage)];
}

Mat ConvNet::interpolate(int stage, const Mat& canvas, const Mat& z) const {
  const Graph& g = graph(stage);
  const int d2 = 2 * cfg_.dim;
  if (canvas.rows != cfg_.length || canvas.cols != d2 + 1) {
    throw ConfigError("canvas must be " + std::to_string(cfg_.length) + "x" +
                      std::to_string(d2 + 1));
  }
  if (z.rows != 1 || z.cols != cfg_.zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg_.zdim));
  }
  const Mat target(cfg_.length, d2);
  const Mat mask(cfg_.length, cfg_.length);
  Binding bind;
  bind.data = {&canvas, &target, &mask};
  bind.ext = {&z};
  Workspace ws;
  ws.prepare(g, false);
  forward(g, store_, bind, ws);
  return aux_value(g, ws, "prediction");
}

double ConvNet::masked_loss(int stage, const Mat& canvas, const Mat& target,
                            const std::vector<int>& scored,
                            const Mat& z) const {
  const Graph& g = graph(stage);
  const int d2 = 2 * cfg_.dim;
  if (canvas.rows != cfg_.length || canvas.cols != d2 + 1 ||
      target.rows != cfg_.length || target.cols != d2) {
    throw ConfigError("canvas or target shape does not match the window");
  }
  if (z.rows != 1 || z.cols != cfg_.zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg_.zdim));
  }
  const Mat mask = scored_row_mask(cfg_.length, d2, scored);
  Binding bind;
  bind.data = {&canvas, &target, &mask};
  bind.ext = {&z};
  Workspace ws;
  ws.prepare(g, false);
  return forward(g, store_, bind, ws);
}

double ConvNet::masked_loss_grad(int stage, const Mat& canvas,
                                 const Mat& target,
                                 const std::vector<int>& scored, const Mat& z,
                                 std::vector<Mat>* param_grads,
                                 Mat* z_grad) const {
  const Graph& g = graph(stage);
  const int d2 = 2 * cfg_.dim;
  if (canvas.rows != cfg_.length || canvas.cols != d2 + 1 ||
      target.rows != cfg_.length || target.cols != d2) {
    throw ConfigError("canvas or target shape does not match the window");
  }
  if (z.rows != 1 || z.cols != cfg_.zdim) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg_.zdim));
  }
  const Mat mask = scored_row_mask(cfg_.length, d2, scored);
  Workspace ws;
  ws.prepare(g, false);
  std::vector<Mat> eg;
  GradSinks sinks;
  sinks.params = param_grads;
  if (z_grad != nullptr) {
    if (z_grad->rows != 1 || z_grad->cols != cfg_.zdim) {
      throw ConfigError("z gradient sink must be a single latent row");
    }
    eg.assign(1, Mat(1, cfg_.zdim));
    sinks.ext = &eg;
  }
  const double loss =
      conv_stage_core(g, store_, canvas, target, mask, z, ws, sinks);
  if (z_grad != nullptr) axpy(*z_grad, 1.0, eg[0]);
  return loss;
}

void ConvTrainConfig::validate() const {
  std::string bad;
  check_lrs(bad, weight_lr, code_lr, batch, epochs, max_steps_per_epoch,
            threads);
  if (stride0 < 2 || (stride0 & (stride0 - 1)) != 0) {
    bad_join(bad, "initial stride must be a power of two and at least 2");
  }
  if (!bad.empty()) throw ConfigError("conv train config: " + bad);
}

ConvTrainResult train_conv(const Dataset& data, const ConvTrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) {
    throw ConfigError("dataset has no training trajectories");
  }
  ConvConfig nc = cfg.net;
  nc.dim = data.dim();
  nc.validate();
  if (data.n_states < nc.length) {
    throw ConfigError("trajectories are shorter than the window");
  }
  const std::vector<ConvStage> stages = conv_stages(nc.length, cfg.stride0);
  const int n_stages = static_cast<int>(stages.size());
  const int d2 = 2 * nc.dim;
  const int n_train = static_cast<int>(data.train.size());

  std::vector<Mat> windows;
  windows.reserve(static_cast<size_t>(n_train));
  for (const Trajectory& tr : data.train) {
    windows.push_back(
        slice(normalized_states(tr, data.norm), 0, nc.length, 0, d2));
  }
  // ground-truth canvases and scoring masks, fixed per stage
  std::vector<std::vector<Mat>> canvases(static_cast<size_t>(n_stages));
  std::vector<Mat> masks;
  masks.reserve(static_cast<size_t>(n_stages));
  for (int s = 0; s < n_stages; ++s) {
    canvases[static_cast<size_t>(s)].reserve(static_cast<size_t>(n_train));
    for (int i = 0; i < n_train; ++i) {
      canvases[static_cast<size_t>(s)].push_back(sparse_canvas(
          windows[static_cast<size_t>(i)], stages[static_cast<size_t>(s)].known));
    }
    // extra 1/stages inside the squared normalizer: the summed stage losses
    // then equal the stage mean, and the gradients match it exactly
    Mat mask =
        scored_row_mask(nc.length, d2, stages[static_cast<size_t>(s)].scored);
    const double fold = 1.0 / std::sqrt(static_cast<double>(n_stages));
    for (double& v : mask.a) v *= fold;
    masks.push_back(std::move(mask));
  }

  auto net = std::make_unique<ConvNet>(nc, n_stages, cfg.seed);
  ParamStore& store = net->params();
  LoopSpec lc{"conv",         n_train,  1,
              nc.zdim,        cfg.weight_lr, cfg.code_lr,
              cfg.batch,      cfg.epochs,    cfg.max_steps_per_epoch,
              cfg.seed,       cfg.threads};
  std::vector<std::vector<Workspace>> wsv(
      static_cast<size_t>(chunk_count(cfg.batch)));
  for (std::vector<Workspace>& per : wsv) {
    per.resize(static_cast<size_t>(n_stages));
    for (int s = 0; s < n_stages; ++s) {
      per[static_cast<size_t>(s)].prepare(net->graph(s), false);
    }
  }

  ConvTrainResult out;
  out.history = run_fixed_plan(
      store, out.codebook, lc,
      [&](int c, const PlanEntry& it, const Mat& z, std::vector<Mat>& pg,
          std::vector<Mat>& eg) {
        GradSinks sinks;
        sinks.params = &pg;
        sinks.ext = &eg;
        double sum = 0.0;
        for (int s = 0; s < n_stages; ++s) {
          sum += conv_stage_core(
              net->graph(s), store,
              canvases[static_cast<size_t>(s)][static_cast<size_t>(it.traj)],
              windows[static_cast<size_t>(it.traj)],
              masks[static_cast<size_t>(s)], z,
              wsv[static_cast<size_t>(c)][static_cast<size_t>(s)], sinks);
        }
        return sum;
      });
  if (!cfg.loss_csv.empty()) write_loss_csv(cfg.loss_csv, out.history);
  out.model = std::move(net);
  return out;
}

Mat conv_interpolate(const ConvNet& net, const std::vector<ConvStage>& stages,
                     const Mat& values, const std::vector<int>& known0,
                     const Mat& z) {
  const ConvConfig& cfg = net.config();
  const int d2 = 2 * cfg.dim;
  if (values.rows != cfg.length || values.cols != d2) {
    throw ConfigError("window must be " + std::to_string(cfg.length) + "x" +
                      std::to_string(d2));
  }
  if (static_cast<int>(stages.size()) != net.stage_count()) {
    throw ConfigError("stage list does not match the net");
  }
  if (known0.empty()) {
    throw ConfigError("progressive fill needs at least one known row");
  }
  std::vector<char> is_known(static_cast<size_t>(cfg.length), 0);
  Mat vals(cfg.length, d2);
  for (int r : known0) {
    if (r < 0 || r >= cfg.length) throw ConfigError("known row out of range");
    std::memcpy(vals.row(r), values.row(r),
                sizeof(double) * static_cast<size_t>(d2));
    is_known[static_cast<size_t>(r)] = 1;
  }
  Mat last;
  for (int s = 0; s < net.stage_count(); ++s) {
    std::vector<int> cur;
    for (int r = 0; r < cfg.length; ++r) {
      if (is_known[static_cast<size_t>(r)]) cur.push_back(r);
    }
    last = net.interpolate(s, sparse_canvas(vals, cur), z);
    for (int r : stages[static_cast<size_t>(s)].scored) {
      if (is_known[static_cast<size_t>(r)]) continue;
      std::memcpy(vals.row(r), last.row(r),
                  sizeof(double) * static_cast<size_t>(d2));
      is_known[static_cast<size_t>(r)] = 1;
    }
  }
  // rows no stage claims (sparser starts than the stage grids) fall back to
  // the final stage's dense prediction
  for (int r = 0; r < cfg.length; ++r) {
    if (!is_known[static_cast<size_t>(r)]) {
      std::memcpy(vals.row(r), last.row(r),
                  sizeof(double) * static_cast<size_t>(d2));
    }
  }
  return vals;
}

namespace {

json hnn_config_json(const HnnConfig& c) {
  return json{{"dim", c.dim},
              {"zdim", c.zdim},
              {"hidden", c.hidden},
              {"layers", c.layers}};
}

HnnConfig hnn_config_from(const json& j) {
  HnnConfig c;
  c.dim = j.at("dim").get<int>();
  c.zdim = j.at("zdim").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.layers = j.at("layers").get<int>();
  return c;
}

json vanilla_config_json(const VanillaConfig& c) {
  return json{{"dim", c.dim},
              {"zdim", c.zdim},
              {"hidden", c.hidden},
              {"layers", c.layers}};
}

VanillaConfig vanilla_config_from(const json& j) {
  VanillaConfig c;
  c.dim = j.at("dim").get<int>();
  c.zdim = j.at("zdim").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.layers = j.at("layers").get<int>();
  return c;
}

json conv_config_json(const ConvConfig& c, int n_stages) {
  return json{{"dim", c.dim},     {"zdim", c.zdim},
              {"hidden", c.hidden}, {"layers", c.layers},
              {"ksize", c.ksize}, {"length", c.length},
              {"stages", n_stages}};
}

}  // namespace

void save_hnn_checkpoint(const HnnMlp& net, const Mat& codebook,
                         const NormStats& norm, const std::string& prefix) {
  if (codebook.rows > 0 && codebook.cols != net.config().zdim) {
    throw ConfigError("codebook width does not match the model");
  }
  save_payload(prefix, "hnn", hnn_config_json(net.config()), net.params(),
               codebook, norm);
}

HnnCheckpoint load_hnn_checkpoint(const std::string& prefix) {
  const json meta = read_baseline_meta(prefix, "hnn");
  HnnCheckpoint ck;
  ck.model = std::make_unique<HnnMlp>(hnn_config_from(meta.at("config")), 0);
  ck.norm = norm_from_json(meta.at("norm"));
  load_payload(prefix, meta, ck.model->params(), ck.codebook);
  return ck;
}

void save_vanilla_checkpoint(const VanillaNet& net, const Mat& codebook,
                             const NormStats& norm,
                             const std::string& prefix) {
  if (codebook.rows > 0 && codebook.cols != net.config().zdim) {
    throw ConfigError("codebook width does not match the model");
  }
  save_payload(prefix, "vanilla", vanilla_config_json(net.config()),
               net.params(), codebook, norm);
}

VanillaCheckpoint load_vanilla_checkpoint(const std::string& prefix) {
  const json meta = read_baseline_meta(prefix, "vanilla");
  VanillaCheckpoint ck;
  ck.model =
      std::make_unique<VanillaNet>(vanilla_config_from(meta.at("config")), 0);
  ck.norm = norm_from_json(meta.at("norm"));
  load_payload(prefix, meta, ck.model->params(), ck.codebook);
  return ck;
}

void save_conv_checkpoint(const ConvNet& net, const Mat& codebook,
                          const NormStats& norm, const std::string& prefix) {
  if (codebook.rows > 0 && codebook.cols != net.config().zdim) {
    throw ConfigError("codebook width does not match the model");
  }
  save_payload(prefix, "conv",
               conv_config_json(net.config(), net.stage_count()), net.params(),
               codebook, norm);
}

ConvCheckpoint load_conv_checkpoint(const std::string& prefix) {
  const json meta = read_baseline_meta(prefix, "conv");
  const json& cj = meta.at("config");
  ConvConfig c;
  c.dim = cj.at("dim").get<int>();
  c.zdim = cj.at("zdim").get<int>();
  c.hidden = cj.at("hidden").get<int>();
  c.layers = cj.at("layers").get<int>();
  c.ksize = cj.at("ksize").get<int>();
  c.length = cj.at("length").get<int>();
  ConvCheckpoint ck;
  ck.model = std::make_unique<ConvNet>(c, cj.at("stages").get<int>(), 0);
  ck.norm = norm_from_json(meta.at("norm"));
  load_payload(prefix, meta, ck.model->params(), ck.codebook);
  return ck;
}

}  // namespace dhn
