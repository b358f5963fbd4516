#include "dhn/tasks.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dhn/dataset.hpp"
#include "dhn/training.hpp"
#include "doctest.h"
#include "support.hpp"

namespace {

using namespace dhn;
using dhn::testing::check_close;
using dhn::testing::randm;

Mat wave_states(int rows, int cols) {
  Mat m(rows, cols);
  for (int t = 0; t < rows; ++t) {
    for (int c = 0; c < cols; ++c) {
      m(t, c) = std::sin(0.3 * t + 0.7 * c) + 0.1 * c;
    }
  }
  return m;
}

ModelConfig tiny_model(SystemKind kind, int b, int s) {
  ModelConfig mc;
  mc.kind = kind;
  mc.b = b;
  mc.s = s;
  mc.dim = kind == SystemKind::kSingle ? 1 : 2;
  mc.width = 12;
  mc.heads = 2;
  mc.layers = 1;
  mc.mlp_hidden = 24;
  mc.readout_hidden = 12;
  return mc;
}

const Dataset& toy_data() {
  static const Dataset ds = [] {
    GenSpec spec;
    spec.kind = SystemKind::kSingle;
    spec.seed = 13;
    spec.n_train = 3;
    spec.n_test = 3;
    spec.dt = 0.1;
    spec.n_states = 12;
    spec.substeps = 20;
    return generate_dataset(spec);
  }();
  return ds;
}

bool same_bits(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.a.data(), b.a.data(), sizeof(double) * a.a.size()) == 0;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

double predict_row(const Mat& w, const double* row, int features) {
  double acc = w(features, 0);
  for (int i = 0; i < features; ++i) acc += w(i, 0) * row[i];
  return acc;
}

}  // namespace

TEST_CASE("a truth oracle drives the slide rollout to zero error") {
  const Mat truth = wave_states(16, 4);
  int calls = 0;
  const SpanFiller oracle = [&](const Mat& span, const std::vector<int>& mask,
                                int t0) {
    ++calls;
    REQUIRE(span.rows == 3);
    REQUIRE(mask == std::vector<int>({1, 1, 0}));
    Mat out = span;
    for (int i = 0; i < 3; ++i) {
      for (int c = 0; c < 4; ++c) {
        if (mask[static_cast<size_t>(i)] != 0) {
          // clamped rows carry the running prediction, here exact truth
          CHECK(out(i, c) == truth(t0 + i, c));
        } else {
          out(i, c) = truth(t0 + i, c);
        }
      }
    }
    return out;
  };
  const Mat prefix = slice(truth, 0, 4, 0, 4);
  const Mat rolled = slide_rollout(2, 1, oracle, prefix, 12);
  REQUIRE(rolled.rows == 16);
  CHECK(same_bits(rolled, truth));
  CHECK(calls == 12);
}

TEST_CASE("stride slides truncate cleanly at the horizon") {
  const Mat truth = wave_states(20, 2);
  std::vector<int> starts;
  const SpanFiller oracle = [&](const Mat& span, const std::vector<int>& mask,
                                int t0) {
    starts.push_back(t0);
    REQUIRE(mask == std::vector<int>({1, 1, 1, 0, 0}));
    Mat out = span;
    for (int i = 0; i < 5; ++i) {
      if (mask[static_cast<size_t>(i)] != 0) continue;
      for (int c = 0; c < 2; ++c) out(i, c) = truth(t0 + i, c);
    }
    return out;
  };
  const Mat prefix = slice(truth, 0, 5, 0, 2);
  // horizon 5 is not a multiple of the stride: the overshoot is discarded
  const Mat rolled = slide_rollout(3, 2, oracle, prefix, 5);
  REQUIRE(rolled.rows == 10);
  CHECK(same_bits(rolled, slice(truth, 0, 10, 0, 2)));
  CHECK(starts == std::vector<int>({2, 4, 6}));

  CHECK(same_bits(slide_rollout(3, 2, oracle, prefix, 0), prefix));
}

TEST_CASE("rollout argument errors are rejected") {
  const SpanFiller noop = [](const Mat& span, const std::vector<int>&, int) {
    return span;
  };
  const Mat prefix = wave_states(1, 2);
  CHECK_THROWS_AS(slide_rollout(2, 1, noop, prefix, 4), ConfigError);
  CHECK_THROWS_AS(slide_rollout(2, 1, noop, wave_states(4, 2), -1),
                  ConfigError);
  CHECK_THROWS_AS(slide_rollout(0, 1, noop, prefix, 1), ConfigError);
  const SpanFiller bad_shape = [](const Mat&, const std::vector<int>&, int) {
    return Mat(1, 1);
  };
  CHECK_THROWS_AS(slide_rollout(2, 1, bad_shape, wave_states(4, 2), 2),
                  NumericError);
}

TEST_CASE("scoring a perfect prediction reports zero error") {
  SystemParams sp;
  sp.l1 = 0.8;
  const Trajectory tr =
      integrate_fine(sp, initial_condition(sp), 0.1, 20, 30);
  const Mat raw = raw_states(tr);
  const RolloutReport rep = score_rollout(raw, tr, 6, 42);
  REQUIRE(rep.state_mse.size() == 14);
  REQUIRE(rep.energy_rel_err.size() == 14);
  CHECK(rep.given == 6);
  CHECK(rep.trajectory_ids == std::vector<int>({42}));
  for (double v : rep.state_mse) CHECK(v == 0.0);
  CHECK(rep.mean_mse == 0.0);
  // the integrator's own drift is the only energy error left
  for (double e : rep.energy_rel_err) CHECK(std::fabs(e) < 1e-10);
}

TEST_CASE("a known perturbation moves the mse by its square") {
  SystemParams sp;
  const Trajectory tr =
      integrate_fine(sp, initial_condition(sp), 0.1, 16, 25);
  Mat raw = raw_states(tr);
  raw(9, 0) += 0.01;
  const RolloutReport rep = score_rollout(raw, tr, 4, 7);
  for (size_t i = 0; i < rep.state_mse.size(); ++i) {
    if (static_cast<int>(i) == 9 - 4) {
      check_close(rep.state_mse[i], 0.0001 / 2.0, 1e-12);
    } else {
      CHECK(rep.state_mse[i] == 0.0);
    }
  }
  check_close(rep.mean_mse, 0.0001 / 2.0 / 12.0, 1e-12);
}

TEST_CASE("energy scoring needs a positive reference") {
  SystemParams sp;
  Trajectory rest;
  rest.params = sp;
  rest.states.assign(5, PhasePoint{});
  const Mat zeros(5, 2);
  CHECK_THROWS_AS(score_rollout(zeros, rest, 1, 0), NumericError);
}

TEST_CASE("trend test matches hand-computed binomial tails") {
  std::vector<double> rising;
  for (int i = 0; i < 10; ++i) rising.push_back(0.1 * i);
  TrendTest t = trend_test(rising);
  CHECK(t.pairs == 5);
  CHECK(t.positive == 5);
  check_close(t.p_value, 1.0 / 16.0, 1e-12);

  std::vector<double> falling(rising.rbegin(), rising.rend());
  t = trend_test(falling);
  CHECK(t.pairs == 5);
  CHECK(t.positive == 0);
  check_close(t.p_value, 1.0 / 16.0, 1e-12);

  std::vector<double> longer;
  for (int i = 0; i < 20; ++i) longer.push_back(0.1 * i);
  t = trend_test(longer);
  CHECK(t.pairs == 10);
  check_close(t.p_value, 1.0 / 512.0, 1e-12);
  CHECK(t.p_value < 0.05);

  t = trend_test(std::vector<double>(9, 1.25));
  CHECK(t.pairs == 0);
  CHECK(t.p_value == 1.0);

  // balanced signs: k = 2 of 4 gives 2 * (11/16), capped at 1
  const std::vector<double> mixed = {0.1,   -0.2,  0.15, -0.05,
                                     0.02, -0.12, 0.08, -0.03};
  t = trend_test(mixed);
  CHECK(t.pairs == 4);
  CHECK(t.positive == 2);
  CHECK(t.p_value == 1.0);

  // ties drop out of the count
  const std::vector<double> tied = {1.0, 1.0, 1.0, 2.0, 1.0, 1.0};
  t = trend_test(tied);
  CHECK(t.pairs == 1);
  CHECK(t.positive == 1);
  CHECK(t.p_value == 1.0);
}

TEST_CASE("linear probe recovers an affine map") {
  Rng rng(31);
  Mat train = randm(40, 2, rng);
  Mat test = randm(10, 2, rng);
  std::vector<double> ytr, yte;
  for (int r = 0; r < train.rows; ++r) {
    ytr.push_back(2.0 * train(r, 0) - train(r, 1) + 0.5);
  }
  for (int r = 0; r < test.rows; ++r) {
    yte.push_back(2.0 * test(r, 0) - test(r, 1) + 0.5);
  }
  const ProbeReport rep = linear_probe(train, ytr, test, yte);
  CHECK_FALSE(rep.rank_deficient);
  check_close(rep.weights(0, 0), 2.0, 1e-8);
  check_close(rep.weights(1, 0), -1.0, 1e-8);
  check_close(rep.weights(2, 0), 0.5, 1e-8);
  CHECK(rep.train_mse < 1e-16);
  CHECK(rep.test_mse < 1e-16);
  CHECK(rep.target == "l2/l1");
}

TEST_CASE("degenerate probe targets still score zero") {
  Rng rng(32);
  const Mat train = randm(30, 3, rng);
  const Mat test = randm(8, 3, rng);
  const std::vector<double> ctr(30, 3.7), cte(8, 3.7);
  ProbeReport rep = linear_probe(train, ctr, test, cte);
  CHECK(rep.test_mse < 1e-16);
  check_close(rep.weights(3, 0), 3.7, 1e-8);

  std::vector<double> ytr, yte;
  for (int r = 0; r < train.rows; ++r) ytr.push_back(train(r, 0));
  for (int r = 0; r < test.rows; ++r) yte.push_back(test(r, 0));
  rep = linear_probe(train, ytr, test, yte);
  CHECK(rep.test_mse < 1e-16);
  CHECK_FALSE(rep.rank_deficient);
}

TEST_CASE("a duplicated feature flags rank deficiency but still predicts") {
  Rng rng(33);
  Mat train(40, 2), test(10, 2);
  std::vector<double> ytr, yte;
  for (int r = 0; r < 40; ++r) {
    const double x = rng.normal();
    train(r, 0) = x;
    train(r, 1) = x;
    ytr.push_back(x);
  }
  for (int r = 0; r < 10; ++r) {
    const double x = rng.normal();
    test(r, 0) = x;
    test(r, 1) = x;
    yte.push_back(x);
  }
  const ProbeReport rep = linear_probe(train, ytr, test, yte);
  CHECK(rep.rank_deficient);
  CHECK(rep.test_mse >= 0.0);
  CHECK(rep.test_mse < 1e-12);
  // the pseudoinverse splits the weight across the twin columns
  check_close(rep.weights(0, 0) + rep.weights(1, 0), 1.0, 1e-8);
}

TEST_CASE("least squares beats nearby weight perturbations") {
  Rng rng(34);
  const Mat train = randm(25, 3, rng);
  std::vector<double> ytr;
  for (int r = 0; r < train.rows; ++r) {
    ytr.push_back(0.3 * train(r, 1) + rng.normal());
  }
  const ProbeReport rep = linear_probe(train, ytr, Mat(0, 3), {});
  for (int trial = 0; trial < 5; ++trial) {
    Mat w = rep.weights;
    for (double& x : w.a) x += 1e-3 * rng.normal();
    double se = 0.0;
    for (int r = 0; r < train.rows; ++r) {
      const double d =
          predict_row(w, train.row(r), 3) - ytr[static_cast<size_t>(r)];
      se += d * d;
    }
    CHECK(se / train.rows >= rep.train_mse - 1e-12);
  }
}

TEST_CASE("probe shape mismatches are rejected") {
  const Mat codes = wave_states(4, 2);
  CHECK_THROWS_AS(linear_probe(codes, {1.0, 2.0}, Mat(0, 2), {}), ConfigError);
  CHECK_THROWS_AS(
      linear_probe(codes, {1.0, 2.0, 3.0, 4.0}, wave_states(2, 3), {1.0, 2.0}),
      ConfigError);
  CHECK_THROWS_AS(linear_probe(Mat(0, 2), {}, Mat(0, 2), {}), ConfigError);
}

TEST_CASE("length ratios read off the parameters") {
  Trajectory a, b;
  a.params.l1 = 2.0;
  a.params.l2 = 3.0;
  const std::vector<double> labels = length_ratio_labels({a, b});
  CHECK(labels == std::vector<double>({1.5, 1.0}));
}

TEST_CASE("held-out codes repeat across thread counts and match serial fits") {
  const Dataset& ds = toy_data();
  const DhnModel model(tiny_model(ds.kind, 2, 1), 5);
  const Mat codes = fit_test_codes(model, ds.test, ds.norm, 6, 0.05, 1);
  const Mat codes4 = fit_test_codes(model, ds.test, ds.norm, 6, 0.05, 4);
  REQUIRE(codes.rows == 3);
  REQUIRE(codes.cols == 12);
  CHECK(same_bits(codes, codes4));
  for (int i = 0; i < codes.rows; ++i) {
    const LatentFit fit = fit_latent_window(
        model, normalized_states(ds.test[static_cast<size_t>(i)], ds.norm), 6,
        0.05);
    CHECK(std::memcmp(codes.row(i), fit.z.row(0), sizeof(double) * 12) == 0);
  }
}

TEST_CASE("completion fits a head and rolls out the tail deterministically") {
  const Dataset& ds = toy_data();
  const DhnModel model(tiny_model(ds.kind, 2, 1), 6);
  const NoiseSchedule sched = make_schedule(4);
  const CompletionResult a =
      completion_task(model, ds.test[0], ds.norm, sched, 6, 5, 0.05, 3,
                      test_trajectory_id(0));
  CHECK(a.report.given == 6);
  REQUIRE(a.report.state_mse.size() == 6);
  CHECK(a.report.trajectory_ids == std::vector<int>({1000000}));
  CHECK(is_finite(a.fit.loss));
  CHECK(is_finite(a.report.mean_mse));
  const CompletionResult b =
      completion_task(model, ds.test[0], ds.norm, sched, 6, 5, 0.05, 3,
                      test_trajectory_id(0));
  CHECK(a.report.state_mse == b.report.state_mse);
  CHECK(a.report.energy_rel_err == b.report.energy_rel_err);
  CHECK(a.fit.loss == b.fit.loss);

  CHECK_THROWS_AS(completion_task(model, ds.test[0], ds.norm, sched, 12, 1,
                                  0.05, 3, 0),
                  ConfigError);
}

TEST_CASE("model rollouts are deterministic in the inference seed") {
  const Dataset& ds = toy_data();
  const DhnModel model(tiny_model(ds.kind, 2, 1), 7);
  const Mat z(1, 12);
  const NoiseSchedule sched = make_schedule(3);
  const RolloutReport a =
      rollout_forward(model, z, ds.test[1], ds.norm, 2, 6, sched, 5, 1);
  const RolloutReport b =
      rollout_forward(model, z, ds.test[1], ds.norm, 2, 6, sched, 5, 1);
  CHECK(a.state_mse == b.state_mse);
  CHECK(a.energy_rel_err == b.energy_rel_err);
  const RolloutReport c =
      rollout_forward(model, z, ds.test[1], ds.norm, 2, 6, sched, 11, 1);
  CHECK(a.state_mse != c.state_mse);
  CHECK_THROWS_AS(
      rollout_forward(model, z, ds.test[1], ds.norm, 10, 6, sched, 5, 1),
      ConfigError);
}

TEST_CASE("report averaging keeps geometry and concatenates ids") {
  RolloutReport r1, r2;
  r1.given = r2.given = 4;
  r1.trajectory_ids = {1000000};
  r2.trajectory_ids = {1000001};
  r1.state_mse = {0.2, 0.4};
  r2.state_mse = {0.4, 0.8};
  r1.energy_rel_err = {0.1, -0.3};
  r2.energy_rel_err = {-0.1, 0.1};
  r1.mean_mse = 0.3;
  r2.mean_mse = 0.6;
  r1.mean_energy_rel = 0.2;
  r2.mean_energy_rel = 0.1;
  const RolloutReport avg = average_reports({r1, r2});
  REQUIRE(avg.state_mse.size() == 2);
  check_close(avg.state_mse[0], 0.3, 1e-15);
  check_close(avg.state_mse[1], 0.6, 1e-15);
  CHECK(avg.energy_rel_err[0] == 0.0);
  check_close(avg.energy_rel_err[1], -0.1, 1e-15);
  check_close(avg.mean_mse, 0.45, 1e-15);
  check_close(avg.mean_energy_rel, 0.15, 1e-15);
  CHECK(avg.trajectory_ids == std::vector<int>({1000000, 1000001}));

  RolloutReport r3 = r1;
  r3.state_mse.push_back(0.1);
  CHECK_THROWS_AS(average_reports({r1, r3}), ConfigError);
  CHECK_THROWS_AS(average_reports({}), ConfigError);
}

TEST_CASE("superres config validation aggregates complaints") {
  SuperresConfig cfg;
  cfg.model = tiny_model(SystemKind::kSingle, 2, 1);
  cfg.window = 8;
  cfg.stride0 = 2;
  CHECK(cfg.stage_count() == 2);
  cfg.validate();
  cfg.stride0 = 4;
  CHECK(cfg.stage_count() == 3);
  cfg.stride0 = 8;
  CHECK(cfg.stage_count() == 4);

  cfg.stride0 = 3;
  CHECK_THROWS_WITH_AS(cfg.validate(),
                       doctest::Contains("power of two"), ConfigError);
  cfg.stride0 = 4;
  cfg.window = 10;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("multiple"),
                       ConfigError);
  cfg.window = 8;
  cfg.model.b = 3;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("b = 2"),
                       ConfigError);
  cfg.model.b = 2;
  cfg.batch = 0;
  cfg.epochs = 0;
  try {
    cfg.validate();
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch") != std::string::npos);
    CHECK(msg.find("epoch") != std::string::npos);
  }
}

TEST_CASE("superres training learns and repeats across thread counts") {
  const Dataset& ds = toy_data();
  SuperresConfig cfg;
  cfg.model = tiny_model(ds.kind, 2, 1);
  cfg.schedule_steps = 4;
  cfg.window = 8;
  cfg.stride0 = 2;
  cfg.weight_lr = 3e-3;
  cfg.code_lr = 1e-2;
  cfg.batch = 8;
  cfg.epochs = 12;
  cfg.max_steps_per_epoch = 3;
  cfg.seed = 9;
  cfg.threads = 1;
  const SuperresModels a = train_superres(ds, cfg);
  REQUIRE(a.stages.size() == 2);
  REQUIRE(a.history.size() == 12);
  CHECK(a.codebook.rows == 3);
  CHECK(a.history.back().loss < a.history.front().loss);
  for (const EpochStat& st : a.history) CHECK(is_finite(st.loss));

  cfg.threads = 4;
  const SuperresModels b = train_superres(ds, cfg);
  CHECK(same_bits(a.codebook, b.codebook));
  for (size_t k = 0; k < a.stages.size(); ++k) {
    CHECK(store_checksum(a.stages[k]->params()) ==
          store_checksum(b.stages[k]->params()));
  }
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].loss == b.history[i].loss);
    CHECK(a.history[i].coherence == b.history[i].coherence);
  }
}

TEST_CASE("superres fill clamps the coarse grid and halves the spacing") {
  const ModelConfig mc = tiny_model(SystemKind::kSingle, 2, 1);
  const DhnModel s0(mc, 1), s1(mc, 2), s2(mc, 3);
  const std::vector<const DhnModel*> stages = {&s0, &s1, &s2};
  const NoiseSchedule sched = make_schedule(3);
  const Mat window = wave_states(9, 2);
  const SuperresFill fill =
      superres_fill(stages, window, 4, 3, 0.05, sched, 11);
  REQUIRE(fill.states.rows == 9);
  for (int t = 0; t < 9; ++t) {
    if (t % 4 == 0) {
      CHECK(std::memcmp(fill.states.row(t), window.row(t),
                        sizeof(double) * 2) == 0);
    } else {
      CHECK(is_finite(fill.states(t, 0)));
      CHECK(fill.states(t, 0) != window(t, 0));
    }
  }
  CHECK(is_finite(fill.fit.loss));

  // rows between coarse grid points are inputs in name only
  Mat garbled = window;
  for (int t = 0; t < 9; ++t) {
    if (t % 4 == 0) continue;
    garbled(t, 0) = 1e6;
    garbled(t, 1) = -1e6;
  }
  const SuperresFill again =
      superres_fill(stages, garbled, 4, 3, 0.05, sched, 11);
  CHECK(same_bits(fill.states, again.states));
  CHECK(fill.fit.loss == again.fit.loss);

  CHECK_THROWS_AS(superres_fill({&s0, &s1}, window, 4, 1, 0.05, sched, 1),
                  ConfigError);
  CHECK_THROWS_AS(superres_fill(stages, wave_states(8, 2), 4, 1, 0.05, sched,
                                1),
                  ConfigError);
  const DhnModel wide(tiny_model(SystemKind::kSingle, 4, 2), 4);
  CHECK_THROWS_AS(superres_fill({&s0, &s1, &wide}, window, 4, 1, 0.05, sched,
                                1),
                  ConfigError);
}

TEST_CASE("filled rows mse scores only the interior") {
  const Mat a = wave_states(5, 2);
  Mat c = a;
  c(1, 0) += 0.1;
  c(2, 0) += 5.0;  // coarse row: must not be scored
  c(3, 1) -= 0.2;
  check_close(filled_rows_mse(c, a, 2), (0.01 + 0.04) / 4.0, 1e-12);
  CHECK(filled_rows_mse(a, a, 2) == 0.0);
  CHECK_THROWS_AS(filled_rows_mse(a, wave_states(5, 4), 2), ConfigError);
  CHECK_THROWS_AS(filled_rows_mse(a, a, 1), ConfigError);
}

TEST_CASE("normalization round trips to machine precision") {
  for (const SystemKind kind : {SystemKind::kSingle, SystemKind::kDouble}) {
    GenSpec spec;
    spec.kind = kind;
    spec.seed = 17;
    spec.n_train = 3;
    spec.n_test = 1;
    spec.n_states = 10;
    spec.substeps = 15;
    const Dataset ds = generate_dataset(spec);
    const Mat norm = normalized_states(ds.test[0], ds.norm);
    const Mat back = denormalized_states(norm, ds.norm);
    const Mat raw = raw_states(ds.test[0]);
    REQUIRE(back.rows == raw.rows);
    double worst = 0.0;
    for (size_t i = 0; i < raw.a.size(); ++i) {
      worst = std::max(worst, std::fabs(back.a[i] - raw.a[i]));
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("trajectory id bookkeeping flags split leaks") {
  CHECK(test_trajectory_id(3) == 1000003);
  CHECK(ids_disjoint_from_train({1000000, 1000005}, 1000));
  CHECK_FALSE(ids_disjoint_from_train({999, 1000000}, 1000));
  CHECK(ids_disjoint_from_train({}, 1000));
  CHECK(metrics_filename("rollout", SystemKind::kSingle, 2, 1, 7) ==
        "rollout_single_b2s1_seed7.csv");
  CHECK(metrics_filename("probe", SystemKind::kDouble, 4, 2, 12) ==
        "probe_double_b4s2_seed12.csv");
}

TEST_CASE("metric files are byte-identical on rewrite") {
  RolloutReport rep;
  rep.given = 4;
  rep.trajectory_ids = {1000000, 1000001};
  rep.state_mse = {0.5, 0.25};
  rep.energy_rel_err = {0.01, -0.02};
  rep.mean_mse = 0.375;
  rep.mean_energy_rel = 0.015;
  const std::string path = "test_tasks_rollout.csv";
  write_rollout_csv(path, rep, 255);
  const std::string first = slurp(path);
  write_rollout_csv(path, rep, 255);
  CHECK(first == slurp(path));
  CHECK(first.find("# dhn 0.1.0\n") == 0);
  CHECK(first.find("# config 00000000000000ff\n") != std::string::npos);
  CHECK(first.find("# trajectories 1000000 1000001\n") != std::string::npos);
  CHECK(first.find("step,state_mse,energy_rel_err\n") != std::string::npos);
  CHECK(first.find("4,0.5,0.01\n") != std::string::npos);
  CHECK(first.find("5,0.25,-0.02\n") != std::string::npos);
  CHECK(first.find("# mean_mse 0.375\n") != std::string::npos);
  std::remove(path.c_str());

  ProbeReport pr;
  pr.train_mse = 0.125;
  pr.test_mse = 0.25;
  pr.rank_deficient = true;
  const std::string ppath = "test_tasks_probe.csv";
  write_probe_csv(ppath, {{"b4s2", pr}}, 255);
  const std::string pfirst = slurp(ppath);
  write_probe_csv(ppath, {{"b4s2", pr}}, 255);
  CHECK(pfirst == slurp(ppath));
  CHECK(pfirst.find("geometry,target,train_mse,test_mse,rank_deficient\n") !=
        std::string::npos);
  CHECK(pfirst.find("b4s2,l2/l1,0.125,0.25,1\n") != std::string::npos);
  std::remove(ppath.c_str());
}
