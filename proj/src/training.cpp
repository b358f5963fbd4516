#include "dhn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <utility>

#include "dhn/parallel.hpp"

namespace dhn {

void Adam::init(const std::vector<Mat>& like) {
  m.clear();
  v.clear();
  m.reserve(like.size());
  v.reserve(like.size());
  for (const Mat& x : like) {
    m.emplace_back(x.rows, x.cols);
    v.emplace_back(x.rows, x.cols);
  }
  t = 0;
}

void Adam::step(std::vector<Mat>& w, const std::vector<Mat>& g) {
  t += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t k = 0; k < w.size(); ++k) {
    double* wk = w[k].a.data();
    double* mk = m[k].a.data();
    double* vk = v[k].a.data();
    const double* gk = g[k].a.data();
    const size_t n = w[k].a.size();
    for (size_t i = 0; i < n; ++i) {
      mk[i] = beta1 * mk[i] + (1.0 - beta1) * gk[i];
      vk[i] = beta2 * vk[i] + (1.0 - beta2) * gk[i] * gk[i];
      wk[i] -= lr * (mk[i] / c1) / (std::sqrt(vk[i] / c2) + eps);
    }
  }
}

void RowAdam::init(int rows, int cols) {
  m.resize(rows, cols);
  v.resize(rows, cols);
  t.assign(static_cast<size_t>(rows), 0);
}

void RowAdam::step_row(Mat& w, int row, const double* g) {
  std::int64_t& tr = t[static_cast<size_t>(row)];
  tr += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(tr));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(tr));
  double* wr = w.row(row);
  double* mr = m.row(row);
  double* vr = v.row(row);
  for (int i = 0; i < w.cols; ++i) {
    mr[i] = beta1 * mr[i] + (1.0 - beta1) * g[i];
    vr[i] = beta2 * vr[i] + (1.0 - beta2) * g[i] * g[i];
    wr[i] -= lr * (mr[i] / c1) / (std::sqrt(vr[i] / c2) + eps);
  }
}

void TrainConfig::validate() const {
  model.validate();
  std::vector<std::string> bad;
  if (schedule_steps < 1) bad.push_back("schedule needs at least 1 step");
  if (weight_lr < 0) bad.push_back("weight lr must be >= 0");
  if (code_lr < 0) bad.push_back("code lr must be >= 0");
  if (lr_decay <= 0) bad.push_back("lr decay must be > 0");
  if (batch < 1) bad.push_back("batch must be >= 1");
  if (epochs < 1) bad.push_back("epochs must be >= 1");
  if (max_steps_per_epoch < 0) bad.push_back("step cap must be >= 0");
  if (checkpoint_every < 0) bad.push_back("checkpoint interval must be >= 0");
  if (!bad.empty()) {
    std::string msg = "train config: " + bad[0];
    for (size_t i = 1; i < bad.size(); ++i) msg += "; " + bad[i];
    throw ConfigError(msg);
  }
}

std::uint64_t store_checksum(const ParamStore& store) {
  std::uint64_t h = fnv1a64("");
  for (const Mat& m : store.values) {
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.a.data()),
                                 m.a.size() * sizeof(double)),
                h);
  }
  return h;
}

namespace {

// Per-element weights 1/(b*dim) split by whether a predicted row lies on the
// doubly-constrained overlap [s, b) of the span. Blocks over the base span
// have row i at span position i; blocks over the shifted span have row i at
// span position s+i.
struct TermMats {
  Mat shift_overlap, shift_rest, base_overlap, base_rest;
};

TermMats make_term_mats(int b, int s, int dim) {
  const double w = 1.0 / (static_cast<double>(b) * dim);
  TermMats tm;
  tm.shift_overlap = Mat(b, dim);
  tm.shift_rest = Mat(b, dim);
  tm.base_overlap = Mat(b, dim);
  tm.base_rest = Mat(b, dim);
  for (int i = 0; i < b; ++i) {
    for (int c = 0; c < dim; ++c) {
      (i < b - s ? tm.shift_overlap : tm.shift_rest)(i, c) = w;
      (i >= s ? tm.base_overlap : tm.base_rest)(i, c) = w;
    }
  }
  return tm;
}

struct SpanEval {
  double total = 0.0, plus = 0.0, minus = 0.0, coherence = 0.0;
};

// One span's loss and (through sinks) its gradients. Term order per
// reduction: overlap then rest for the Q-side prediction, overlap then rest
// for the P-side prediction, so coherence = terms 0 and 2 of each.
SpanEval eval_span(const DhnModel& model, const NoiseSchedule& sched,
                   const TermMats& tm, const Mat& clean_span,
                   const CorruptionDraw& draw, const Mat& z, Workspace& wsp,
                   Workspace& wsm, const GradSinks& sinks) {
  const ModelConfig& mc = model.config();
  const int b = mc.b, s = mc.s, dim = mc.dim, span = b + s;
  if (clean_span.rows != span || clean_span.cols != 2 * dim) {
    throw ConfigError("span must hold " + std::to_string(span) + " states of " +
                      std::to_string(2 * dim) + " channels");
  }
  if (static_cast<int>(draw.mask.size()) != span ||
      static_cast<int>(draw.scale_idx.size()) != span ||
      draw.eps.rows != span || draw.eps.cols != 2 * dim) {
    throw ConfigError("corruption draw does not match the span geometry");
  }
  const std::vector<double> eff = effective_scales(sched, draw);
  const Mat corrupted = corrupt(clean_span, draw.mask, eff, draw.eps);

  const Mat ql = slice(corrupted, 0, b, 0, dim);
  const Mat qh = slice(corrupted, s, b, 0, dim);
  const Mat pl = slice(corrupted, 0, b, dim, dim);
  const Mat ph = slice(corrupted, s, b, dim, dim);

  // Clean targets; the mirrored operator predicts negated gradients, so its
  // targets enter with flipped sign.
  const Mat tq_hi = slice(clean_span, s, b, 0, dim);
  const Mat tp_lo = slice(clean_span, 0, b, dim, dim);
  Mat tq_lo_neg = slice(clean_span, 0, b, 0, dim);
  Mat tp_hi_neg = slice(clean_span, s, b, dim, dim);
  for (double& x : tq_lo_neg.a) x = -x;
  for (double& x : tp_hi_neg.a) x = -x;

  const Mat emb_p = model.noise_embedding(token_scales(eff, b, 0, s));
  const Mat emb_m = model.noise_embedding(token_scales(eff, b, s, 0));

  Binding bp;
  bp.input = {&ql, &ph};
  bp.data = {&emb_p};
  bp.ext = {&z};
  Binding bm;
  bm.input = {&qh, &pl};
  bm.data = {&emb_m};
  bm.ext = {&z};

  std::vector<double> tvp, tvm;
  GradReduction rp;
  rp.term_values = &tvp;
  rp.terms = {{1, &tm.shift_overlap, &tq_hi, nullptr},
              {1, &tm.shift_rest, &tq_hi, nullptr},
              {0, &tm.base_overlap, &tp_lo, nullptr},
              {0, &tm.base_rest, &tp_lo, nullptr}};
  GradReduction rm;
  rm.term_values = &tvm;
  rm.terms = {{1, &tm.base_overlap, &tq_lo_neg, nullptr},
              {1, &tm.base_rest, &tq_lo_neg, nullptr},
              {0, &tm.shift_overlap, &tp_hi_neg, nullptr},
              {0, &tm.shift_rest, &tp_hi_neg, nullptr}};

  SpanEval ev;
  ev.plus = grad_reduction_backward(model.graph(Side::kPlus), model.params(),
                                    bp, rp, wsp, sinks);
  ev.minus = grad_reduction_backward(model.graph(Side::kMinus), model.params(),
                                     bm, rm, wsm, sinks);
  ev.total = ev.plus + ev.minus;
  ev.coherence = tvp[0] + tvp[2] + tvm[0] + tvm[2];
  return ev;
}

struct PlanItem {
  int traj = 0;
  int start = 0;
  CorruptionDraw draw;
};

}  // namespace

BlockLossParts block_loss(const DhnModel& model, const Mat& z,
                          const Mat& clean_span, const CorruptionDraw& draw,
                          const NoiseSchedule& sched) {
  sched.validate();
  const ModelConfig& mc = model.config();
  const TermMats tm = make_term_mats(mc.b, mc.s, mc.dim);
  Workspace wsp, wsm;
  wsp.prepare(model.graph(Side::kPlus), true);
  wsm.prepare(model.graph(Side::kMinus), true);
  const SpanEval ev = eval_span(model, sched, tm, clean_span, draw, z, wsp,
                                wsm, GradSinks{});
  return {ev.total, ev.plus, ev.minus, ev.coherence};
}

BlockLossParts block_loss_grad(const DhnModel& model, const Mat& z,
                               const Mat& clean_span,
                               const CorruptionDraw& draw,
                               const NoiseSchedule& sched,
                               std::vector<Mat>* param_grads, Mat* z_grad) {
  sched.validate();
  const ModelConfig& mc = model.config();
  if (z_grad != nullptr && (z_grad->rows != 1 || z_grad->cols != mc.width)) {
    throw ConfigError("z gradient sink must be a single latent row");
  }
  const TermMats tm = make_term_mats(mc.b, mc.s, mc.dim);
  Workspace wsp, wsm;
  wsp.prepare(model.graph(Side::kPlus), true);
  wsm.prepare(model.graph(Side::kMinus), true);
  std::vector<Mat> eg(1);
  eg[0] = Mat(1, mc.width);
  GradSinks sinks;
  sinks.params = param_grads;
  if (z_grad != nullptr) sinks.ext = &eg;
  const SpanEval ev =
      eval_span(model, sched, tm, clean_span, draw, z, wsp, wsm, sinks);
  if (z_grad != nullptr) axpy(*z_grad, 1.0, eg[0]);
  return {ev.total, ev.plus, ev.minus, ev.coherence};
}

TrainResult train(const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) {
    throw ConfigError("dataset has no training trajectories");
  }
  ModelConfig mc = cfg.model;
  mc.kind = data.kind;
  mc.dim = data.dim();
  mc.validate();
  const int b = mc.b, s = mc.s, dim = mc.dim, span = b + s;
  const int n_states = data.n_states;
  const int starts = n_states - span + 1;
  if (starts < 1) {
    throw ConfigError("trajectories are shorter than one block span");
  }
  const int n_train = static_cast<int>(data.train.size());
  const int width = mc.width;

  const NoiseSchedule sched = make_schedule(cfg.schedule_steps);
  std::vector<Mat> states;
  states.reserve(static_cast<size_t>(n_train));
  for (const Trajectory& tr : data.train) {
    states.push_back(normalized_states(tr, data.norm));
  }

  auto model = std::make_unique<DhnModel>(mc, cfg.seed);
  ParamStore& store = model->params();
  Mat codebook(n_train, width);

  // Fixed sampling plan, drawn once and revisited every epoch: a frozen
  // optimizer then reproduces its loss history exactly, and the serial draw
  // keeps results independent of the thread count.
  const std::int64_t blocks = static_cast<std::int64_t>(n_train) * starts;
  int steps =
      static_cast<int>(std::max<std::int64_t>(1, blocks / cfg.batch));
  if (cfg.max_steps_per_epoch > 0) {
    steps = std::min(steps, cfg.max_steps_per_epoch);
  }
  Rng plan_rng = Rng::stream(cfg.seed, std::uint64_t{1} << 20);
  std::vector<PlanItem> plan;
  plan.reserve(static_cast<size_t>(steps) * cfg.batch);
  for (int i = 0; i < steps * cfg.batch; ++i) {
    PlanItem it;
    it.traj = static_cast<int>(
        plan_rng.uniform_index(static_cast<std::uint64_t>(n_train)));
    it.start = static_cast<int>(
        plan_rng.uniform_index(static_cast<std::uint64_t>(starts)));
    it.draw =
        sample_training_corruption(plan_rng, cfg.mask, b, s, 2 * dim, sched);
    plan.push_back(std::move(it));
  }

  Adam aw;
  aw.lr = cfg.weight_lr;
  aw.init(store.values);
  RowAdam ac;
  ac.lr = cfg.code_lr;
  ac.init(n_train, width);

  const TermMats tm = make_term_mats(b, s, dim);
  const int nchunks = chunk_count(cfg.batch);
  std::vector<std::vector<Mat>> cgw(static_cast<size_t>(nchunks));
  std::vector<Workspace> wsp(static_cast<size_t>(nchunks)),
      wsm(static_cast<size_t>(nchunks));
  for (int c = 0; c < nchunks; ++c) {
    cgw[static_cast<size_t>(c)] = store.zeros_like();
    wsp[static_cast<size_t>(c)].prepare(model->graph(Side::kPlus), true);
    wsm[static_cast<size_t>(c)].prepare(model->graph(Side::kMinus), true);
  }
  std::vector<Mat> gw = store.zeros_like();
  Mat z_grads(cfg.batch, width);
  Mat code_grad(n_train, width);
  std::vector<SpanEval> evals(static_cast<size_t>(cfg.batch));
  std::vector<std::string> errs(static_cast<size_t>(nchunks));

  TrainResult out;
  out.history.reserve(static_cast<size_t>(cfg.epochs));

  for (int e = 1; e <= cfg.epochs; ++e) {
    const double decay = std::pow(cfg.lr_decay, e - 1);
    aw.lr = cfg.weight_lr * decay;
    ac.lr = cfg.code_lr * decay;
    double eloss = 0.0, ecoh = 0.0;
    for (int st = 0; st < steps; ++st) {
      const PlanItem* items = &plan[static_cast<size_t>(st) * cfg.batch];
      for (std::string& m : errs) m.clear();
      parallel_chunks(
          cfg.batch, cfg.threads,
          [&](int c, std::int64_t lo, std::int64_t hi) {
            try {
              std::vector<Mat> eg(1);
              for (std::int64_t i = lo; i < hi; ++i) {
                const PlanItem& it = items[i];
                const Mat spanm = slice(states[static_cast<size_t>(it.traj)],
                                        it.start, span, 0, 2 * dim);
                Mat z(1, width);
                std::memcpy(z.row(0), codebook.row(it.traj),
                            sizeof(double) * static_cast<size_t>(width));
                eg[0].resize(1, width);
                GradSinks sinks;
                sinks.params = &cgw[static_cast<size_t>(c)];
                sinks.ext = &eg;
                evals[static_cast<size_t>(i)] =
                    eval_span(*model, sched, tm, spanm, it.draw, z,
                              wsp[static_cast<size_t>(c)],
                              wsm[static_cast<size_t>(c)], sinks);
                std::memcpy(z_grads.row(static_cast<int>(i)), eg[0].row(0),
                            sizeof(double) * static_cast<size_t>(width));
              }
            } catch (const std::exception& ex) {
              errs[static_cast<size_t>(c)] = ex.what();
            }
          });
      for (const std::string& m : errs) {
        if (!m.empty()) {
          throw NumericError("training diverged at epoch " +
                             std::to_string(e) + " step " +
                             std::to_string(st) + ": " + m);
        }
      }

      // Chunk-ordered fold; gradients scale to the batch mean.
      const double inv = 1.0 / cfg.batch;
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

      double bloss = 0.0, bcoh = 0.0;
      std::vector<int> touched;
      touched.reserve(static_cast<size_t>(cfg.batch));
      for (int i = 0; i < cfg.batch; ++i) {
        bloss += evals[static_cast<size_t>(i)].total;
        bcoh += evals[static_cast<size_t>(i)].coherence;
        const int tr = items[i].traj;
        double* cg = code_grad.row(tr);
        const double* zg = z_grads.row(i);
        for (int j = 0; j < width; ++j) cg[j] += zg[j] * inv;
        touched.push_back(tr);
      }
      bloss *= inv;
      bcoh *= inv;
      if (!std::isfinite(bloss)) {
        throw NumericError("training diverged at epoch " + std::to_string(e) +
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
                    sizeof(double) * static_cast<size_t>(width));
      }
      eloss += bloss;
      ecoh += bcoh;
    }
    out.history.push_back({e, eloss / steps, ecoh / steps});
    if (!cfg.checkpoint_prefix.empty()) {
      if (e == cfg.epochs) {
        save_checkpoint(*model, codebook, data.norm, cfg.checkpoint_prefix);
      } else if (cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0) {
        save_checkpoint(*model, codebook, data.norm,
                        cfg.checkpoint_prefix + "_ep" + std::to_string(e));
      }
    }
  }
  if (!cfg.loss_csv.empty()) write_loss_csv(cfg.loss_csv, out.history);
  out.model = std::move(model);
  out.codebook = std::move(codebook);
  return out;
}

LatentFit fit_latent(const DhnModel& model, const std::vector<Mat>& spans,
                     int steps, double lr) {
  const ModelConfig& mc = model.config();
  const int span = mc.b + mc.s, dim = mc.dim, width = mc.width;
  if (spans.empty()) {
    throw ConfigError(
        "latent fit needs at least one full span of observed states");
  }
  for (const Mat& m : spans) {
    if (m.rows != span || m.cols != 2 * dim) {
      throw ConfigError("latent fit spans must hold " + std::to_string(span) +
                        " states of " + std::to_string(2 * dim) + " channels");
    }
  }
  if (steps < 0 || lr < 0) {
    throw ConfigError("latent fit needs steps >= 0 and lr >= 0");
  }

  // Clean fit: every state known, zero effective noise.
  CorruptionDraw draw;
  draw.mask.assign(static_cast<size_t>(span), 1);
  draw.scale_idx.assign(static_cast<size_t>(span), 0);
  draw.eps = Mat(span, 2 * dim);
  const NoiseSchedule sched = make_schedule(1);

  const std::uint64_t before = store_checksum(model.params());
  const TermMats tm = make_term_mats(mc.b, mc.s, dim);
  Workspace wsp, wsm;
  wsp.prepare(model.graph(Side::kPlus), true);
  wsm.prepare(model.graph(Side::kMinus), true);

  std::vector<Mat> zv(1);
  zv[0] = Mat(1, width);
  Adam az;
  az.lr = lr;
  az.init(zv);
  std::vector<Mat> zg(1);
  const double inv = 1.0 / static_cast<double>(spans.size());
  for (int it = 0; it < steps; ++it) {
    zg[0].resize(1, width);
    GradSinks sinks;
    sinks.ext = &zg;
    for (const Mat& sp : spans) {
      eval_span(model, sched, tm, sp, draw, zv[0], wsp, wsm, sinks);
    }
    for (double& x : zg[0].a) x *= inv;
    az.step(zv, zg);
  }

  LatentFit fit;
  double total = 0.0;
  for (const Mat& sp : spans) {
    total +=
        eval_span(model, sched, tm, sp, draw, zv[0], wsp, wsm, GradSinks{})
            .total;
  }
  fit.loss = total * inv;
  fit.z = std::move(zv[0]);
  if (store_checksum(model.params()) != before) {
    throw NumericError("latent fit modified frozen weights");
  }
  return fit;
}

LatentFit fit_latent_window(const DhnModel& model, const Mat& window,
                            int steps, double lr) {
  const ModelConfig& mc = model.config();
  const int span = mc.b + mc.s;
  if (window.cols != 2 * mc.dim) {
    throw ConfigError("observed window must hold " +
                      std::to_string(2 * mc.dim) + " channels");
  }
  if (window.rows < span) {
    throw ConfigError("observed window is shorter than one block span");
  }
  std::vector<Mat> spans;
  spans.reserve(static_cast<size_t>(window.rows - span + 1));
  for (int t = 0; t + span <= window.rows; ++t) {
    spans.push_back(slice(window, t, span, 0, window.cols));
  }
  return fit_latent(model, spans, steps, lr);
}

void write_loss_csv(const std::string& path,
                    const std::vector<EpochStat>& history) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) {
    throw ConfigError("cannot write loss table: " + path);
  }
  std::fputs("epoch,mean_loss,coherence\n", f);
  char buf[128];
  for (const EpochStat& h : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", h.epoch, h.loss,
                  h.coherence);
    std::fputs(buf, f);
  }
  std::fclose(f);
}

}  // namespace dhn
