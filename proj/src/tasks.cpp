#include "dhn/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "dhn/common.hpp"
#include "dhn/parallel.hpp"
#include "dhn/rng.hpp"

namespace dhn {
namespace {

double sq(double x) { return x * x; }

std::string join_lines(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += "; ";
    out += parts[i];
  }
  return out;
}

void finalize_means(RolloutReport& rep) {
  double mse = 0.0, en = 0.0;
  for (double v : rep.state_mse) mse += v;
  for (double v : rep.energy_rel_err) en += std::fabs(v);
  const size_t n = rep.state_mse.size();
  rep.mean_mse = n > 0 ? mse / static_cast<double>(n) : 0.0;
  rep.mean_energy_rel = n > 0 ? en / static_cast<double>(n) : 0.0;
}

PhasePoint row_to_point(const double* row, int dim) {
  PhasePoint pt{};
  for (int c = 0; c < dim; ++c) {
    pt.q[static_cast<size_t>(c)] = row[c];
    pt.p[static_cast<size_t>(c)] = row[dim + c];
  }
  return pt;
}

// Exact upper tail P(X >= k) for X ~ Binomial(n, 1/2), via log factorials.
double binom_half_upper_tail(int n, int k) {
  if (k <= 0) return 1.0;
  if (k > n) return 0.0;
  double tail = 0.0;
  const double log_half_n = static_cast<double>(n) * std::log(2.0);
  for (int i = k; i <= n; ++i) {
    const double lc = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) -
                      std::lgamma(n - i + 1.0);
    tail += std::exp(lc - log_half_n);
  }
  return std::min(1.0, tail);
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix: a is destroyed,
// eigenvalues land on its diagonal, columns of v become the eigenvectors.
void jacobi_eigen(Mat& a, Mat& v) {
  const int n = a.rows;
  v.resize(n, n);
  for (int i = 0; i < n; ++i) v(i, i) = 1.0;
  double frob = 0.0;
  for (const double& x : a.a) frob += x * x;
  for (int sweep = 0; sweep < 128; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) off += sq(a(p, q));
    }
    if (off <= 1e-26 * std::max(frob, 1e-300)) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
}

// Solves a w = rhs for symmetric positive semidefinite a, dropping
// directions whose eigenvalue is below 1e-12 of the largest.
Mat solve_psd_pinv(Mat a, const Mat& rhs, bool* dropped) {
  const int n = a.rows;
  Mat v;
  jacobi_eigen(a, v);
  double lmax = 0.0;
  for (int i = 0; i < n; ++i) lmax = std::max(lmax, std::fabs(a(i, i)));
  const double cut = lmax * 1e-12;
  *dropped = false;
  std::vector<double> y(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = 0; k < n; ++k) acc += v(k, i) * rhs(k, 0);
    const double lam = a(i, i);
    if (lam > cut && lam > 0.0) {
      y[static_cast<size_t>(i)] = acc / lam;
    } else {
      *dropped = true;
    }
  }
  Mat w(n, 1);
  for (int k = 0; k < n; ++k) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += v(k, i) * y[static_cast<size_t>(i)];
    w(k, 0) = acc;
  }
  return w;
}

double probe_predict(const Mat& weights, const double* row, int features) {
  double acc = weights(features, 0);
  for (int i = 0; i < features; ++i) acc += weights(i, 0) * row[i];
  return acc;
}

}  // namespace

Mat slide_rollout(int b, int s, const SpanFiller& fill, const Mat& prefix,
                  int horizon) {
  if (b < 1 || s < 1 || s > b) {
    throw ConfigError("rollout needs block size >= 1 and 1 <= stride <= block");
  }
  if (prefix.rows < b) {
    throw ConfigError("rollout prefix must cover at least " +
                      std::to_string(b) + " states");
  }
  if (horizon < 0) throw ConfigError("rollout horizon must be nonnegative");
  const int given = prefix.rows;
  const int total = given + horizon;
  const int span = b + s;
  Mat out(total, prefix.cols);
  for (int t = 0; t < given; ++t) {
    std::memcpy(out.row(t), prefix.row(t),
                sizeof(double) * static_cast<size_t>(prefix.cols));
  }
  std::vector<int> mask(static_cast<size_t>(span), 1);
  for (int i = b; i < span; ++i) mask[static_cast<size_t>(i)] = 0;
  Mat spanm(span, prefix.cols);
  for (int t = given; t < total; t += s) {
    const int base = t - b;
    for (int i = 0; i < span; ++i) {
      const int src = base + i;
      if (src < t) {
        std::memcpy(spanm.row(i), out.row(src),
                    sizeof(double) * static_cast<size_t>(prefix.cols));
      } else {
        std::memset(spanm.row(i), 0,
                    sizeof(double) * static_cast<size_t>(prefix.cols));
      }
    }
    const Mat filled = fill(spanm, mask, base);
    if (filled.rows != span || filled.cols != prefix.cols) {
      throw NumericError("span filler returned the wrong shape");
    }
    for (int i = b; i < span; ++i) {
      const int dst = base + i;
      if (dst >= total) break;
      std::memcpy(out.row(dst), filled.row(i),
                  sizeof(double) * static_cast<size_t>(prefix.cols));
    }
  }
  return out;
}

RolloutReport score_rollout(const Mat& raw_pred, const Trajectory& truth,
                            int given, int trajectory_id) {
  const int dim = truth.params.dim();
  if (raw_pred.cols != 2 * dim) {
    throw ConfigError("prediction must hold " + std::to_string(2 * dim) +
                      " channels");
  }
  if (raw_pred.rows > static_cast<int>(truth.states.size())) {
    throw ConfigError("prediction runs past the ground truth");
  }
  if (given < 0 || given > raw_pred.rows) {
    throw ConfigError("given prefix must lie inside the prediction");
  }
  RolloutReport rep;
  rep.given = given;
  rep.trajectory_ids.push_back(trajectory_id);
  const double e_ref = total_energy(truth.params, truth.states[0]);
  if (!(e_ref > 0.0)) {
    throw NumericError("relative energy error needs a positive reference");
  }
  rep.state_mse.reserve(static_cast<size_t>(raw_pred.rows - given));
  rep.energy_rel_err.reserve(static_cast<size_t>(raw_pred.rows - given));
  for (int t = given; t < raw_pred.rows; ++t) {
    const PhasePoint& gt = truth.states[static_cast<size_t>(t)];
    const double* row = raw_pred.row(t);
    double se = 0.0;
    for (int c = 0; c < dim; ++c) {
      se += sq(row[c] - gt.q[static_cast<size_t>(c)]);
      se += sq(row[dim + c] - gt.p[static_cast<size_t>(c)]);
    }
    rep.state_mse.push_back(se / (2.0 * dim));
    const double e = total_energy(truth.params, row_to_point(row, dim));
    rep.energy_rel_err.push_back((e - e_ref) / e_ref);
  }
  finalize_means(rep);
  return rep;
}

RolloutReport rollout_forward(const DhnModel& model, const Mat& z,
                              const Trajectory& truth, const NormStats& norm,
                              int given, int horizon,
                              const NoiseSchedule& sched, std::uint64_t seed,
                              int trajectory_id) {
  const int b = model.block_size();
  const int s = model.config().s;
  if (given + horizon > static_cast<int>(truth.states.size())) {
    throw ConfigError("rollout runs past the trajectory");
  }
  const Mat all = normalized_states(truth, norm);
  const Mat prefix = slice(all, 0, given, 0, all.cols);
  Rng rng(seed);
  const SpanFiller fill = [&](const Mat& span, const std::vector<int>& mask,
                              int) {
    return denoise_infer(model, s, span, mask, z, sched, rng);
  };
  const Mat pred = slide_rollout(b, s, fill, prefix, horizon);
  return score_rollout(denormalized_states(pred, norm), truth, given,
                       trajectory_id);
}

RolloutReport average_reports(const std::vector<RolloutReport>& reports) {
  if (reports.empty()) throw ConfigError("no rollout reports to average");
  RolloutReport avg;
  avg.given = reports[0].given;
  const size_t n = reports[0].state_mse.size();
  avg.state_mse.assign(n, 0.0);
  avg.energy_rel_err.assign(n, 0.0);
  for (const RolloutReport& r : reports) {
    if (r.given != avg.given || r.state_mse.size() != n ||
        r.energy_rel_err.size() != n) {
      throw ConfigError("rollout reports must share their geometry");
    }
    for (size_t i = 0; i < n; ++i) {
      avg.state_mse[i] += r.state_mse[i];
      avg.energy_rel_err[i] += r.energy_rel_err[i];
    }
    avg.mean_mse += r.mean_mse;
    avg.mean_energy_rel += r.mean_energy_rel;
    avg.trajectory_ids.insert(avg.trajectory_ids.end(),
                              r.trajectory_ids.begin(),
                              r.trajectory_ids.end());
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  for (size_t i = 0; i < n; ++i) {
    avg.state_mse[i] *= inv;
    avg.energy_rel_err[i] *= inv;
  }
  avg.mean_mse *= inv;
  avg.mean_energy_rel *= inv;
  return avg;
}

TrendTest trend_test(const std::vector<double>& series) {
  TrendTest t;
  const int n = static_cast<int>(series.size());
  const int c = (n + 1) / 2;
  for (int i = 0; i + c < n; ++i) {
    const double lo = series[static_cast<size_t>(i)];
    const double hi = series[static_cast<size_t>(i + c)];
    if (hi > lo) {
      ++t.pairs;
      ++t.positive;
    } else if (hi < lo) {
      ++t.pairs;
    }
  }
  if (t.pairs == 0) return t;
  const int k = std::max(t.positive, t.pairs - t.positive);
  t.p_value = std::min(1.0, 2.0 * binom_half_upper_tail(t.pairs, k));
  return t;
}

CompletionResult completion_task(const DhnModel& model, const Trajectory& truth,
                                 const NormStats& norm,
                                 const NoiseSchedule& sched, int given,
                                 int fit_steps, double fit_lr,
                                 std::uint64_t seed, int trajectory_id) {
  const int total = static_cast<int>(truth.states.size());
  if (given < 1 || given >= total) {
    throw ConfigError("completion needs an observed head and a hidden tail");
  }
  const Mat all = normalized_states(truth, norm);
  const Mat head = slice(all, 0, given, 0, all.cols);
  CompletionResult out;
  out.fit = fit_latent_window(model, head, fit_steps, fit_lr);
  out.report = rollout_forward(model, out.fit.z, truth, norm, given,
                               total - given, sched, seed, trajectory_id);
  return out;
}

ProbeReport linear_probe(const Mat& train_codes,
                         const std::vector<double>& train_labels,
                         const Mat& test_codes,
                         const std::vector<double>& test_labels) {
  const int n = train_codes.rows;
  const int k = train_codes.cols;
  if (n < 1) throw ConfigError("probe needs at least one training row");
  if (static_cast<int>(train_labels.size()) != n) {
    throw ConfigError("probe needs one label per training row");
  }
  if (static_cast<int>(test_labels.size()) != test_codes.rows) {
    throw ConfigError("probe needs one label per test row");
  }
  if (test_codes.rows > 0 && test_codes.cols != k) {
    throw ConfigError("train and test codes must share the feature width");
  }
  const int d = k + 1;  // trailing intercept feature
  Mat a(d, d), rhs(d, 1);
  for (int r = 0; r < n; ++r) {
    const double* row = train_codes.row(r);
    for (int i = 0; i < d; ++i) {
      const double xi = i < k ? row[i] : 1.0;
      rhs(i, 0) += xi * train_labels[static_cast<size_t>(r)];
      for (int j = i; j < d; ++j) {
        const double xj = j < k ? row[j] : 1.0;
        a(i, j) += xi * xj;
      }
    }
  }
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) a(j, i) = a(i, j);
  }
  ProbeReport rep;
  rep.weights = solve_psd_pinv(std::move(a), rhs, &rep.rank_deficient);
  if (rep.rank_deficient) {
    std::fprintf(stderr,
                 "warning: probe design matrix is rank deficient; "
                 "null directions dropped\n");
  }
  double se = 0.0;
  for (int r = 0; r < n; ++r) {
    se += sq(probe_predict(rep.weights, train_codes.row(r), k) -
             train_labels[static_cast<size_t>(r)]);
  }
  rep.train_mse = se / n;
  if (test_codes.rows > 0) {
    se = 0.0;
    for (int r = 0; r < test_codes.rows; ++r) {
      se += sq(probe_predict(rep.weights, test_codes.row(r), k) -
               test_labels[static_cast<size_t>(r)]);
    }
    rep.test_mse = se / test_codes.rows;
  }
  return rep;
}

std::vector<double> length_ratio_labels(const std::vector<Trajectory>& trs) {
  std::vector<double> out;
  out.reserve(trs.size());
  for (const Trajectory& tr : trs) out.push_back(tr.params.l2 / tr.params.l1);
  return out;
}

Mat fit_test_codes(const DhnModel& model, const std::vector<Trajectory>& test,
                   const NormStats& norm, int steps, double lr, int threads) {
  const int n = static_cast<int>(test.size());
  const int width = model.config().width;
  Mat codes(n, width);
  std::vector<std::string> errs(static_cast<size_t>(n));
  parallel_for(n, threads, [&](std::int64_t i) {
    try {
      const Mat window = normalized_states(test[static_cast<size_t>(i)], norm);
      const LatentFit fit = fit_latent_window(model, window, steps, lr);
      std::memcpy(codes.row(static_cast<int>(i)), fit.z.row(0),
                  sizeof(double) * static_cast<size_t>(width));
    } catch (const std::exception& ex) {
      errs[static_cast<size_t>(i)] = ex.what();
    }
  });
  for (size_t i = 0; i < errs.size(); ++i) {
    if (!errs[i].empty()) {
      throw NumericError("latent fit for held-out trajectory " +
                         std::to_string(i) + ": " + errs[i]);
    }
  }
  return codes;
}

int SuperresConfig::stage_count() const {
  int k = 0;
  for (int sp = stride0; sp >= 1; sp /= 2) ++k;
  return k;
}

void SuperresConfig::validate() const {
  std::vector<std::string> bad;
  if (model.b != 2 || model.s != 1) {
    bad.push_back("stage geometry must be b = 2, s = 1");
  }
  if (stride0 < 2 || (stride0 & (stride0 - 1)) != 0) {
    bad.push_back("coarse stride must be a power of two >= 2");
  } else if (window < 2 * stride0 || window % stride0 != 0) {
    bad.push_back("window must be a multiple of the coarse stride covering "
                  "at least two coarse steps");
  }
  if (schedule_steps < 1) bad.push_back("schedule needs at least one level");
  if (weight_lr < 0 || code_lr < 0) {
    bad.push_back("learning rates must be nonnegative");
  }
  if (lr_decay <= 0) bad.push_back("decay factor must be positive");
  if (batch < 1) bad.push_back("batch size must be positive");
  if (epochs < 1) bad.push_back("need at least one epoch");
  if (max_steps_per_epoch < 0) bad.push_back("step cap must be nonnegative");
  if (threads < 0) bad.push_back("thread count must be nonnegative");
  if (!bad.empty()) throw ConfigError("superres config: " + join_lines(bad));
}

SuperresModels train_superres(const Dataset& data, const SuperresConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) {
    throw ConfigError("dataset has no training trajectories");
  }
  if (data.n_states < cfg.window + 1) {
    throw ConfigError("trajectories are shorter than the training window");
  }
  ModelConfig mc = cfg.model;
  mc.kind = data.kind;
  mc.dim = data.dim();
  mc.validate();
  const int dim = mc.dim, width = mc.width;
  const int span = 3;  // b + s with the pinned geometry
  const int n_train = static_cast<int>(data.train.size());
  const int n_stages = cfg.stage_count();
  const NoiseSchedule sched = make_schedule(cfg.schedule_steps);

  std::vector<int> spacing(static_cast<size_t>(n_stages));
  std::vector<int> starts(static_cast<size_t>(n_stages));
  std::vector<std::vector<Mat>> grids(static_cast<size_t>(n_stages));
  for (int k = 0; k < n_stages; ++k) {
    spacing[static_cast<size_t>(k)] = cfg.stride0 >> k;
    const int len = cfg.window / spacing[static_cast<size_t>(k)] + 1;
    starts[static_cast<size_t>(k)] = len - span + 1;
    grids[static_cast<size_t>(k)].reserve(static_cast<size_t>(n_train));
  }
  for (const Trajectory& tr : data.train) {
    const Mat full = normalized_states(tr, data.norm);
    for (int k = 0; k < n_stages; ++k) {
      const int sp = spacing[static_cast<size_t>(k)];
      const int len = cfg.window / sp + 1;
      Mat g(len, 2 * dim);
      for (int i = 0; i < len; ++i) {
        std::memcpy(g.row(i), full.row(i * sp),
                    sizeof(double) * static_cast<size_t>(2 * dim));
      }
      grids[static_cast<size_t>(k)].push_back(std::move(g));
    }
  }

  SuperresModels out;
  for (int k = 0; k < n_stages; ++k) {
    out.stages.push_back(std::make_unique<DhnModel>(
        mc, cfg.seed + static_cast<std::uint64_t>(k)));
  }
  out.codebook = Mat(n_train, width);

  // Fixed plan over (trajectory, stage, grid start, corruption), mirroring
  // the single-model trainer so runs repeat exactly for any thread count.
  std::int64_t blocks = 0;
  for (int k = 0; k < n_stages; ++k) {
    blocks += static_cast<std::int64_t>(n_train) * starts[static_cast<size_t>(k)];
  }
  int steps = static_cast<int>(std::max<std::int64_t>(1, blocks / cfg.batch));
  if (cfg.max_steps_per_epoch > 0) steps = std::min(steps, cfg.max_steps_per_epoch);
  struct Item {
    int traj = 0, stage = 0, start = 0;
    CorruptionDraw draw;
  };
  Rng plan_rng = Rng::stream(cfg.seed, std::uint64_t{1} << 21);
  std::vector<Item> plan;
  plan.reserve(static_cast<size_t>(steps) * cfg.batch);
  for (int i = 0; i < steps * cfg.batch; ++i) {
    Item it;
    it.traj = static_cast<int>(
        plan_rng.uniform_index(static_cast<std::uint64_t>(n_train)));
    it.stage = static_cast<int>(
        plan_rng.uniform_index(static_cast<std::uint64_t>(n_stages)));
    it.start = static_cast<int>(plan_rng.uniform_index(
        static_cast<std::uint64_t>(starts[static_cast<size_t>(it.stage)])));
    const MaskKind kind =
        it.stage == 0 ? MaskKind::kRandom : MaskKind::kSuperres;
    it.draw = sample_training_corruption(plan_rng, kind, 2, 1, 2 * dim, sched);
    plan.push_back(std::move(it));
  }

  std::vector<Adam> aw(static_cast<size_t>(n_stages));
  for (int k = 0; k < n_stages; ++k) {
    aw[static_cast<size_t>(k)].lr = cfg.weight_lr;
    aw[static_cast<size_t>(k)].init(out.stages[static_cast<size_t>(k)]->params().values);
  }
  RowAdam ac;
  ac.lr = cfg.code_lr;
  ac.init(n_train, width);

  const int nchunks = chunk_count(cfg.batch);
  std::vector<std::vector<std::vector<Mat>>> cgw(static_cast<size_t>(nchunks));
  for (int c = 0; c < nchunks; ++c) {
    for (int k = 0; k < n_stages; ++k) {
      cgw[static_cast<size_t>(c)].push_back(
          out.stages[static_cast<size_t>(k)]->params().zeros_like());
    }
  }
  std::vector<std::vector<Mat>> gw(static_cast<size_t>(n_stages));
  for (int k = 0; k < n_stages; ++k) {
    gw[static_cast<size_t>(k)] =
        out.stages[static_cast<size_t>(k)]->params().zeros_like();
  }
  Mat z_grads(cfg.batch, width);
  Mat code_grad(n_train, width);
  std::vector<BlockLossParts> evals(static_cast<size_t>(cfg.batch));
  std::vector<std::string> errs(static_cast<size_t>(nchunks));

  out.history.reserve(static_cast<size_t>(cfg.epochs));
  for (int e = 1; e <= cfg.epochs; ++e) {
    const double decay = std::pow(cfg.lr_decay, e - 1);
    for (Adam& opt : aw) opt.lr = cfg.weight_lr * decay;
    ac.lr = cfg.code_lr * decay;
    double eloss = 0.0, ecoh = 0.0;
    for (int st = 0; st < steps; ++st) {
      const Item* items = &plan[static_cast<size_t>(st) * cfg.batch];
      for (std::string& m : errs) m.clear();
      parallel_chunks(cfg.batch, cfg.threads,
                      [&](int c, std::int64_t lo, std::int64_t hi) {
                        try {
                          Mat z(1, width), zg(1, width);
                          for (std::int64_t i = lo; i < hi; ++i) {
                            const Item& it = items[i];
                            const Mat spanm = slice(
                                grids[static_cast<size_t>(it.stage)]
                                     [static_cast<size_t>(it.traj)],
                                it.start, span, 0, 2 * dim);
                            std::memcpy(z.row(0), out.codebook.row(it.traj),
                                        sizeof(double) *
                                            static_cast<size_t>(width));
                            zg.resize(1, width);
                            evals[static_cast<size_t>(i)] = block_loss_grad(
                                *out.stages[static_cast<size_t>(it.stage)], z,
                                spanm, it.draw, sched,
                                &cgw[static_cast<size_t>(c)]
                                    [static_cast<size_t>(it.stage)],
                                &zg);
                            std::memcpy(z_grads.row(static_cast<int>(i)),
                                        zg.row(0),
                                        sizeof(double) *
                                            static_cast<size_t>(width));
                          }
                        } catch (const std::exception& ex) {
                          errs[static_cast<size_t>(c)] = ex.what();
                        }
                      });
      for (const std::string& m : errs) {
        if (!m.empty()) {
          throw NumericError("superres training diverged at epoch " +
                             std::to_string(e) + " step " +
                             std::to_string(st) + ": " + m);
        }
      }

      const double inv = 1.0 / cfg.batch;
      for (int k = 0; k < n_stages; ++k) {
        std::vector<Mat>& dst = gw[static_cast<size_t>(k)];
        for (Mat& m : dst) m.set_zero();
        for (int c = 0; c < nchunks; ++c) {
          std::vector<Mat>& src =
              cgw[static_cast<size_t>(c)][static_cast<size_t>(k)];
          for (size_t t = 0; t < dst.size(); ++t) {
            double* d = dst[t].a.data();
            double* g = src[t].a.data();
            const size_t cnt = dst[t].a.size();
            for (size_t i = 0; i < cnt; ++i) {
              d[i] += g[i];
              g[i] = 0.0;
            }
          }
        }
        for (Mat& m : dst) {
          for (double& x : m.a) x *= inv;
        }
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
        throw NumericError("superres training diverged at epoch " +
                           std::to_string(e) + " step " + std::to_string(st) +
                           ": non-finite batch loss");
      }

      for (int k = 0; k < n_stages; ++k) {
        aw[static_cast<size_t>(k)].step(
            out.stages[static_cast<size_t>(k)]->params().values,
            gw[static_cast<size_t>(k)]);
      }
      std::sort(touched.begin(), touched.end());
      touched.erase(std::unique(touched.begin(), touched.end()),
                    touched.end());
      for (int tr : touched) {
        ac.step_row(out.codebook, tr, code_grad.row(tr));
        std::memset(code_grad.row(tr), 0,
                    sizeof(double) * static_cast<size_t>(width));
      }
      eloss += bloss;
      ecoh += bcoh;
    }
    out.history.push_back({e, eloss / steps, ecoh / steps});
  }
  if (!cfg.loss_csv.empty()) write_loss_csv(cfg.loss_csv, out.history);
  return out;
}

SuperresFill superres_fill(const std::vector<const DhnModel*>& stages,
                           const Mat& window_states, int stride0,
                           int fit_steps, double fit_lr,
                           const NoiseSchedule& sched, std::uint64_t seed) {
  const int n_stages = static_cast<int>(stages.size());
  if (n_stages < 2) {
    throw ConfigError("superres needs a coarse stage and at least one filler");
  }
  if (stride0 != (1 << (n_stages - 1))) {
    throw ConfigError("stage count must match the coarse stride");
  }
  for (const DhnModel* m : stages) {
    if (m->block_size() != 2 || m->config().s != 1) {
      throw ConfigError("superres stages must use b = 2, s = 1");
    }
  }
  const int dim = stages[0]->state_dim();
  const int rows = window_states.rows;
  if (window_states.cols != 2 * dim) {
    throw ConfigError("window must hold " + std::to_string(2 * dim) +
                      " channels");
  }
  if (rows < 2 * stride0 + 1 || (rows - 1) % stride0 != 0) {
    throw ConfigError("window length must cover at least two coarse steps");
  }
  const int nc = (rows - 1) / stride0 + 1;
  Mat coarse(nc, 2 * dim);
  for (int i = 0; i < nc; ++i) {
    std::memcpy(coarse.row(i), window_states.row(i * stride0),
                sizeof(double) * static_cast<size_t>(2 * dim));
  }
  SuperresFill out;
  out.fit = fit_latent_window(*stages[0], coarse, fit_steps, fit_lr);
  out.states = window_states;
  Rng rng(seed);
  const std::vector<int> mask = {1, 0, 1};
  Mat span(3, 2 * dim);
  for (int k = 1; k < n_stages; ++k) {
    const int sp_in = stride0 >> (k - 1);
    const int half = sp_in / 2;
    for (int g = 0; g + sp_in < rows; g += sp_in) {
      std::memcpy(span.row(0), out.states.row(g),
                  sizeof(double) * static_cast<size_t>(2 * dim));
      std::memcpy(span.row(1), out.states.row(g + half),
                  sizeof(double) * static_cast<size_t>(2 * dim));
      std::memcpy(span.row(2), out.states.row(g + sp_in),
                  sizeof(double) * static_cast<size_t>(2 * dim));
      const Mat filled = denoise_infer(*stages[static_cast<size_t>(k)], 1,
                                       span, mask, out.fit.z, sched, rng);
      std::memcpy(out.states.row(g + half), filled.row(1),
                  sizeof(double) * static_cast<size_t>(2 * dim));
    }
  }
  return out;
}

double filled_rows_mse(const Mat& raw_pred, const Mat& raw_truth, int stride0) {
  if (!raw_pred.same_shape(raw_truth)) {
    throw ConfigError("prediction and truth must share their shape");
  }
  if (stride0 < 1) throw ConfigError("stride must be positive");
  double total = 0.0;
  std::int64_t cnt = 0;
  for (int t = 0; t < raw_pred.rows; ++t) {
    if (t % stride0 == 0) continue;
    for (int c = 0; c < raw_pred.cols; ++c) {
      total += sq(raw_pred(t, c) - raw_truth(t, c));
      ++cnt;
    }
  }
  if (cnt == 0) throw ConfigError("no rows between coarse grid points");
  return total / static_cast<double>(cnt);
}

Mat denormalized_states(const Mat& states, const NormStats& norm) {
  if (states.cols != 2 * norm.dim) {
    throw ConfigError("state matrix width must match the normalization");
  }
  Mat out(states.rows, states.cols);
  for (int t = 0; t < states.rows; ++t) {
    const PhasePoint pt = denormalize_state(states.row(t), norm);
    for (int c = 0; c < norm.dim; ++c) {
      out(t, c) = pt.q[static_cast<size_t>(c)];
      out(t, norm.dim + c) = pt.p[static_cast<size_t>(c)];
    }
  }
  return out;
}

bool ids_disjoint_from_train(const std::vector<int>& ids, int n_train) {
  for (int id : ids) {
    if (id >= 0 && id < n_train) return false;
  }
  return true;
}

std::string metrics_filename(const std::string& task, SystemKind kind, int b,
                             int s, std::uint64_t seed) {
  return task + "_" + (kind == SystemKind::kSingle ? "single" : "double") +
         "_b" + std::to_string(b) + "s" + std::to_string(s) + "_seed" +
         std::to_string(seed) + ".csv";
}

void write_rollout_csv(const std::string& path, const RolloutReport& report,
                       std::uint64_t config_hash) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw ConfigError("cannot write metrics: " + path);
  std::fprintf(f, "# %s\n# config %s\n# trajectories",
               std::string(kVersion).c_str(), hex64(config_hash).c_str());
  for (int id : report.trajectory_ids) std::fprintf(f, " %d", id);
  std::fputs("\nstep,state_mse,energy_rel_err\n", f);
  for (size_t i = 0; i < report.state_mse.size(); ++i) {
    std::fprintf(f, "%d,%.17g,%.17g\n",
                 report.given + static_cast<int>(i), report.state_mse[i],
                 report.energy_rel_err[i]);
  }
  std::fprintf(f, "# mean_mse %.17g\n# mean_energy_rel %.17g\n",
               report.mean_mse, report.mean_energy_rel);
  std::fclose(f);
}

void write_probe_csv(
    const std::string& path,
    const std::vector<std::pair<std::string, ProbeReport>>& rows,
    std::uint64_t config_hash) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw ConfigError("cannot write metrics: " + path);
  std::fprintf(f, "# %s\n# config %s\n", std::string(kVersion).c_str(),
               hex64(config_hash).c_str());
  std::fputs("geometry,target,train_mse,test_mse,rank_deficient\n", f);
  for (const auto& [name, rep] : rows) {
    std::fprintf(f, "%s,%s,%.17g,%.17g,%d\n", name.c_str(),
                 rep.target.c_str(), rep.train_mse, rep.test_mse,
                 rep.rank_deficient ? 1 : 0);
  }
  std::fclose(f);
}

}  // namespace dhn
