#include "dhn/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "support.hpp"

using namespace dhn;
using dhn::testing::check_close;
using dhn::testing::randm;

namespace {

ModelConfig tiny_config(SystemKind kind, int b, int s) {
  ModelConfig mc;
  mc.kind = kind;
  mc.b = b;
  mc.s = s;
  mc.dim = kind == SystemKind::kSingle ? 1 : 2;
  mc.width = 8;
  mc.heads = 2;
  mc.layers = 1;
  mc.mlp_hidden = 16;
  mc.readout_hidden = 8;
  return mc;
}

void zero_params_with_prefix(ParamStore& store, const std::string& prefix) {
  for (size_t i = 0; i < store.names.size(); ++i) {
    if (store.names[i].rfind(prefix, 0) == 0) store.values[i].set_zero();
  }
}

// All states known, zero noise: the corrupted span equals the clean span.
CorruptionDraw clean_draw(int span, int channels) {
  CorruptionDraw d;
  d.mask.assign(static_cast<size_t>(span), 1);
  d.scale_idx.assign(static_cast<size_t>(span), 0);
  d.eps = Mat(span, channels);
  return d;
}

const Dataset& toy_data() {
  static Dataset d = [] {
    GenSpec gs;
    gs.kind = SystemKind::kSingle;
    gs.seed = 11;
    gs.n_train = 6;
    gs.n_test = 2;
    gs.dt = 0.1;
    gs.n_states = 24;
    gs.substeps = 25;
    return generate_dataset(gs);
  }();
  return d;
}

TrainConfig toy_train_config() {
  TrainConfig cfg;
  cfg.model = tiny_config(SystemKind::kSingle, 2, 1);
  cfg.schedule_steps = 5;
  cfg.batch = 8;
  cfg.epochs = 4;
  cfg.max_steps_per_epoch = 8;
  cfg.seed = 21;
  cfg.threads = 1;
  return cfg;
}

const TrainResult& toy_trained() {
  static TrainResult r = [] {
    TrainConfig cfg = toy_train_config();
    cfg.epochs = 12;
    cfg.max_steps_per_epoch = 12;
    return train(toy_data(), cfg);
  }();
  return r;
}

std::string read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  REQUIRE(f != nullptr);
  std::string out;
  char buf[256];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
  std::fclose(f);
  return out;
}

}  // namespace

TEST_CASE("adam steps match the hand-computed trajectory") {
  Adam a;
  a.lr = 0.1;
  std::vector<Mat> w{Mat(1, 1)};
  w[0](0, 0) = 1.0;
  a.init(w);
  std::vector<Mat> g{Mat(1, 1)};

  // f(w) = w^2/2, grad = w. First step: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
  g[0](0, 0) = w[0](0, 0);
  a.step(w, g);
  check_close(w[0](0, 0), 1.0 - 0.1, 1e-7);

  // Second step by explicit recurrence.
  const double g2 = w[0](0, 0);
  const double m = 0.9 * (0.1 * 1.0) + 0.1 * g2;
  const double v = 0.999 * (0.001 * 1.0) + 0.001 * g2 * g2;
  const double mh = m / (1.0 - 0.9 * 0.9);
  const double vh = v / (1.0 - 0.999 * 0.999);
  const double want = g2 - 0.1 * mh / (std::sqrt(vh) + 1e-8);
  g[0](0, 0) = g2;
  a.step(w, g);
  check_close(w[0](0, 0), want, 1e-12);

  SUBCASE("zero learning rate freezes the weights") {
    Adam f;
    f.lr = 0.0;
    std::vector<Mat> w2{Mat(2, 2)};
    w2[0](0, 0) = 3.0;
    f.init(w2);
    std::vector<Mat> g2m{Mat(2, 2)};
    g2m[0](0, 0) = 17.0;
    f.step(w2, g2m);
    CHECK(w2[0](0, 0) == 3.0);
  }
}

TEST_CASE("row adam tracks per-row step counts") {
  RowAdam ra;
  ra.lr = 0.05;
  ra.init(3, 2);
  Mat w(3, 2);
  const double g[2] = {1.0, -2.0};

  // Row 1 twice, row 2 once; row 0 untouched.
  ra.step_row(w, 1, g);
  ra.step_row(w, 1, g);
  ra.step_row(w, 2, g);

  for (int j = 0; j < 2; ++j) CHECK(w(0, j) == 0.0);

  // A row updated once matches a scalar Adam after one step, regardless of
  // how many times other rows were stepped.
  Adam a;
  a.lr = 0.05;
  std::vector<Mat> sw{Mat(1, 2)};
  a.init(sw);
  std::vector<Mat> sg{Mat(1, 2)};
  sg[0](0, 0) = g[0];
  sg[0](0, 1) = g[1];
  a.step(sw, sg);
  for (int j = 0; j < 2; ++j) CHECK(w(2, j) == sw[0](0, j));

  // And the twice-stepped row matches a scalar Adam after two steps.
  a.step(sw, sg);
  for (int j = 0; j < 2; ++j) CHECK(w(1, j) == sw[0](0, j));
}

TEST_CASE("train config validation aggregates complaints") {
  TrainConfig cfg = toy_train_config();
  CHECK_NOTHROW(cfg.validate());

  cfg.batch = 0;
  cfg.schedule_steps = 0;
  try {
    cfg.validate();
    CHECK(false);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("schedule") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }

  TrainConfig bad = toy_train_config();
  bad.weight_lr = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_train_config();
  bad.lr_decay = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_train_config();
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_train_config();
  bad.model.s = bad.model.b + 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("perfect fit gives exactly zero loss") {
  DhnModel model(tiny_config(SystemKind::kDouble, 2, 1), 5);
  zero_params_with_prefix(model.params(), "head_plus.");
  zero_params_with_prefix(model.params(), "head_minus.");
  Mat z(1, 8);
  z(0, 3) = 0.7;

  const NoiseSchedule sched = make_schedule(4);
  const Mat span(3, 4);  // all-zero states: predictions (0) equal targets (0)
  const BlockLossParts parts =
      block_loss(model, z, span, clean_draw(3, 4), sched);
  CHECK(parts.total == 0.0);
  CHECK(parts.plus == 0.0);
  CHECK(parts.minus == 0.0);
  CHECK(parts.coherence == 0.0);

  // Any nonzero residual breaks the fixed point.
  Mat span2(3, 4);
  span2(1, 2) = 0.25;
  const BlockLossParts p2 =
      block_loss(model, z, span2, clean_draw(3, 4), sched);
  CHECK(p2.total > 0.0);
}

TEST_CASE("doubling all prediction errors multiplies the loss by four") {
  DhnModel model(tiny_config(SystemKind::kDouble, 2, 1), 9);
  zero_params_with_prefix(model.params(), "head_plus.");
  zero_params_with_prefix(model.params(), "head_minus.");
  Mat z(1, 8);

  Rng rng(31);
  const Mat span = randm(3, 4, rng);
  Mat span2 = span;
  for (double& x : span2.a) x *= 2.0;

  // Corruption only perturbs the operator inputs; with the read-out heads
  // zeroed the predictions stay 0, so errors are exactly the clean targets.
  CorruptionDraw draw = clean_draw(3, 4);
  draw.mask = {1, 0, 0};
  draw.scale_idx = {0, 2, 4};
  draw.eps = randm(3, 4, rng);
  const NoiseSchedule sched = make_schedule(4);

  const BlockLossParts l1 = block_loss(model, z, span, draw, sched);
  const BlockLossParts l2 = block_loss(model, z, span2, draw, sched);
  CHECK(l1.total > 0.0);
  CHECK(l2.total == 4.0 * l1.total);
  CHECK(l2.plus == 4.0 * l1.plus);
  CHECK(l2.minus == 4.0 * l1.minus);
  CHECK(l2.coherence == 4.0 * l1.coherence);
}

TEST_CASE("single-step geometry reduces to the classic paired loss") {
  DhnModel model(tiny_config(SystemKind::kSingle, 1, 1), 13);
  Rng rng(41);
  const Mat span = randm(2, 2, rng);
  Mat z = randm(1, 8, rng, 0.5);

  const Mat q0 = slice(span, 0, 1, 0, 1);
  const Mat q1 = slice(span, 1, 1, 0, 1);
  const Mat p0 = slice(span, 0, 1, 1, 1);
  const Mat p1 = slice(span, 1, 1, 1, 1);
  const std::vector<double> zero_scales{0.0, 0.0};

  Mat dq(1, 1), dp(1, 1);
  model.eval_grad(Side::kPlus, q0, p1, z, zero_scales, &dq, &dp);
  const double classic_plus = (dp(0, 0) - q1(0, 0)) * (dp(0, 0) - q1(0, 0)) +
                              (dq(0, 0) - p0(0, 0)) * (dq(0, 0) - p0(0, 0));
  model.eval_grad(Side::kMinus, q1, p0, z, zero_scales, &dq, &dp);
  const double classic_minus =
      (-dp(0, 0) - q0(0, 0)) * (-dp(0, 0) - q0(0, 0)) +
      (-dq(0, 0) - p1(0, 0)) * (-dq(0, 0) - p1(0, 0));

  const BlockLossParts parts =
      block_loss(model, z, span, clean_draw(2, 2), make_schedule(1));
  check_close(parts.plus, classic_plus, 1e-12);
  check_close(parts.minus, classic_minus, 1e-12);
  check_close(parts.total, classic_plus + classic_minus, 1e-12);
  CHECK(parts.coherence == 0.0);  // b = s leaves no doubly-constrained row
}

TEST_CASE("coherence isolates the doubly constrained rows") {
  DhnModel model(tiny_config(SystemKind::kSingle, 2, 1), 17);
  zero_params_with_prefix(model.params(), "head_plus.");
  zero_params_with_prefix(model.params(), "head_minus.");
  Mat z(1, 8);

  Rng rng(43);
  const Mat span = randm(3, 2, rng);
  const double q1 = span(1, 0), p1 = span(1, 1);

  const BlockLossParts parts =
      block_loss(model, z, span, clean_draw(3, 2), make_schedule(1));
  // Span position 1 is predicted by both operators; with predictions pinned
  // at zero each of its four residuals contributes target²·(1/b).
  const double want =
      0.5 * q1 * q1 + 0.5 * p1 * p1 + 0.5 * q1 * q1 + 0.5 * p1 * p1;
  CHECK(parts.coherence == want);
  CHECK(parts.coherence > 0.0);
  CHECK(parts.coherence < parts.total);

  // Hand total over every block element.
  const double q0 = span(0, 0), q2 = span(2, 0);
  const double p0 = span(0, 1), p2 = span(2, 1);
  const double plus = 0.5 * (q1 * q1 + q2 * q2) + 0.5 * (p0 * p0 + p1 * p1);
  const double minus = 0.5 * (q0 * q0 + q1 * q1) + 0.5 * (p1 * p1 + p2 * p2);
  check_close(parts.total, plus + minus, 1e-15);
}

TEST_CASE("loss gradients match finite differences") {
  DhnModel model(tiny_config(SystemKind::kDouble, 2, 1), 23);
  Rng rng(47);
  const Mat span = randm(3, 4, rng, 0.6);
  const Mat z = randm(1, 8, rng, 0.5);

  CorruptionDraw draw;
  draw.mask = {1, 0, 1};
  draw.scale_idx = {1, 3, 2};
  draw.eps = randm(3, 4, rng, 0.8);
  const NoiseSchedule sched = make_schedule(4);

  ParamStore& store = model.params();
  std::vector<Mat> gp = store.zeros_like();
  Mat gz(1, 8);
  const BlockLossParts parts =
      block_loss_grad(model, z, span, draw, sched, &gp, &gz);
  const BlockLossParts again = block_loss(model, z, span, draw, sched);
  CHECK(parts.total == again.total);
  CHECK(parts.coherence == again.coherence);

  const double h = 1e-5;
  auto loss_at = [&] {
    return block_loss(model, z, span, draw, sched).total;
  };

  // Every latent channel.
  for (int j = 0; j < 8; ++j) {
    Mat zp = z, zm = z;
    zp(0, j) += h;
    zm(0, j) -= h;
    const double lp = block_loss(model, zp, span, draw, sched).total;
    const double lm = block_loss(model, zm, span, draw, sched).total;
    check_close(gz(0, j), (lp - lm) / (2 * h), 2e-5);
  }

  // A spread of weight entries across every tensor.
  int probes = 0;
  for (size_t k = 0; k < store.values.size(); ++k) {
    Mat& w = store.values[k];
    const size_t stride = std::max<size_t>(1, w.a.size() / 2);
    for (size_t i = 0; i < w.a.size(); i += stride) {
      const double keep = w.a[i];
      w.a[i] = keep + h;
      const double lp = loss_at();
      w.a[i] = keep - h;
      const double lm = loss_at();
      w.a[i] = keep;
      check_close(gp[k].a[i], (lp - lm) / (2 * h), 2e-5);
      ++probes;
    }
  }
  CHECK(probes > 30);
}

TEST_CASE("block loss is bitwise repeatable") {
  DhnModel model(tiny_config(SystemKind::kSingle, 2, 2), 29);
  Rng rng(53);
  const Mat span = randm(4, 2, rng);
  const Mat z = randm(1, 8, rng);
  CorruptionDraw draw;
  draw.mask = {1, 1, 0, 0};
  draw.scale_idx = {0, 1, 2, 3};
  draw.eps = randm(4, 2, rng);
  const NoiseSchedule sched = make_schedule(3);

  const BlockLossParts a = block_loss(model, z, span, draw, sched);
  const BlockLossParts b = block_loss(model, z, span, draw, sched);
  CHECK(a.total == b.total);
  CHECK(a.plus == b.plus);
  CHECK(a.minus == b.minus);
  CHECK(a.coherence == b.coherence);
  CHECK(a.total > 0.0);
  CHECK(a.coherence == 0.0);  // b = s: no overlap rows
}

TEST_CASE("training is deterministic and thread invariant") {
  TrainConfig cfg = toy_train_config();
  const TrainResult r1 = train(toy_data(), cfg);
  const TrainResult r2 = train(toy_data(), cfg);
  REQUIRE(r1.history.size() == r2.history.size());
  for (size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].loss == r2.history[i].loss);
    CHECK(r1.history[i].coherence == r2.history[i].coherence);
  }
  CHECK(store_checksum(r1.model->params()) ==
        store_checksum(r2.model->params()));
  REQUIRE(r1.codebook.a.size() == r2.codebook.a.size());
  CHECK(std::memcmp(r1.codebook.a.data(), r2.codebook.a.data(),
                    r1.codebook.a.size() * sizeof(double)) == 0);

  SUBCASE("four workers reproduce the serial run bit for bit") {
    TrainConfig par = cfg;
    par.threads = 4;
    const TrainResult r4 = train(toy_data(), par);
    REQUIRE(r4.history.size() == r1.history.size());
    for (size_t i = 0; i < r1.history.size(); ++i) {
      CHECK(r4.history[i].loss == r1.history[i].loss);
      CHECK(r4.history[i].coherence == r1.history[i].coherence);
    }
    CHECK(store_checksum(r4.model->params()) ==
          store_checksum(r1.model->params()));
    CHECK(std::memcmp(r4.codebook.a.data(), r1.codebook.a.data(),
                      r1.codebook.a.size() * sizeof(double)) == 0);
  }

  SUBCASE("a different seed changes the history") {
    TrainConfig other = cfg;
    other.seed = 22;
    const TrainResult r3 = train(toy_data(), other);
    CHECK(r3.history.back().loss != r1.history.back().loss);
  }
}

TEST_CASE("frozen optimizer reproduces its loss every epoch") {
  TrainConfig cfg = toy_train_config();
  cfg.weight_lr = 0.0;
  cfg.code_lr = 0.0;
  cfg.epochs = 3;
  const TrainResult r = train(toy_data(), cfg);
  REQUIRE(r.history.size() == 3);
  for (size_t i = 1; i < r.history.size(); ++i) {
    CHECK(r.history[i].loss == r.history[0].loss);
    CHECK(r.history[i].coherence == r.history[0].coherence);
  }

  // Weights equal a fresh init; codes never leave zero.
  ModelConfig mc = cfg.model;
  mc.kind = toy_data().kind;
  mc.dim = toy_data().dim();
  const DhnModel fresh(mc, cfg.seed);
  CHECK(store_checksum(r.model->params()) == store_checksum(fresh.params()));
  for (double v : r.codebook.a) CHECK(v == 0.0);
}

TEST_CASE("loss falls on a toy dataset") {
  const TrainResult& r = toy_trained();
  REQUIRE(r.history.size() == 12);
  for (size_t i = 0; i < r.history.size(); ++i) {
    CHECK(r.history[i].epoch == static_cast<int>(i) + 1);
    CHECK(std::isfinite(r.history[i].loss));
    CHECK(r.history[i].loss >= 0.0);
    CHECK(r.history[i].coherence >= 0.0);
    CHECK(r.history[i].coherence <= r.history[i].loss);
  }
  CHECK(r.history.back().loss < r.history.front().loss);
  CHECK(r.codebook.rows == 6);
  CHECK(r.codebook.all_finite());

  // The codes were actually exercised.
  double norm = 0.0;
  for (double v : r.codebook.a) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("training aborts with diagnostics on non-finite states") {
  Dataset d;
  d.kind = SystemKind::kSingle;
  d.dt = 0.1;
  d.seed = 1;
  d.n_states = 8;
  Trajectory tr;
  tr.params.kind = SystemKind::kSingle;
  tr.dt = 0.1;
  tr.states.assign(8, PhasePoint{});
  for (PhasePoint& st : tr.states) {
    st.q[0] = std::numeric_limits<double>::quiet_NaN();
  }
  d.train.push_back(tr);
  d.norm.dim = 1;
  d.norm.q_std = {1.0, 1.0};
  d.norm.p_std = {1.0, 1.0};

  TrainConfig cfg = toy_train_config();
  cfg.epochs = 1;
  cfg.max_steps_per_epoch = 1;
  cfg.batch = 2;
  try {
    train(d, cfg);
    CHECK(false);
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("diverged at epoch 1") != std::string::npos);
  }
}

TEST_CASE("loss table bytes are exact and repeatable") {
  const std::vector<EpochStat> hist{{1, 0.5, 0.25}, {2, 0.125, 0.0}};
  const std::string path = "loss_gold.csv";
  write_loss_csv(path, hist);
  CHECK(read_file(path) ==
        "epoch,mean_loss,coherence\n"
        "1,0.5,0.25\n"
        "2,0.125,0\n");

  const TrainResult& r = toy_trained();
  const std::string p1 = "loss_a.csv", p2 = "loss_b.csv";
  write_loss_csv(p1, r.history);
  write_loss_csv(p2, r.history);
  CHECK(read_file(p1) == read_file(p2));
  std::remove(path.c_str());
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoints land at the configured epochs") {
  TrainConfig cfg = toy_train_config();
  cfg.epochs = 4;
  cfg.max_steps_per_epoch = 2;
  cfg.checkpoint_prefix = "ckpt_toy";
  cfg.checkpoint_every = 2;
  cfg.loss_csv = "ckpt_toy_loss.csv";
  const TrainResult r = train(toy_data(), cfg);

  const Checkpoint mid = load_checkpoint("ckpt_toy_ep2");
  CHECK(mid.codebook.rows == 6);
  CHECK(mid.model->config().b == cfg.model.b);

  const Checkpoint fin = load_checkpoint("ckpt_toy");
  CHECK(store_checksum(fin.model->params()) ==
        store_checksum(r.model->params()));
  CHECK(std::memcmp(fin.codebook.a.data(), r.codebook.a.data(),
                    r.codebook.a.size() * sizeof(double)) == 0);

  const std::string csv = read_file("ckpt_toy_loss.csv");
  CHECK(csv.rfind("epoch,mean_loss,coherence\n", 0) == 0);

  for (const char* p : {"ckpt_toy_ep2.json", "ckpt_toy_ep2.bin",
                        "ckpt_toy.json", "ckpt_toy.bin", "ckpt_toy_loss.csv"}) {
    std::remove(p);
  }
}

TEST_CASE("latent fitting honors its budget and freezes the weights") {
  const TrainResult& r = toy_trained();
  const DhnModel& model = *r.model;
  const Dataset& data = toy_data();
  const Mat window = normalized_states(data.train[0], data.norm);

  const std::uint64_t before = store_checksum(model.params());

  SUBCASE("zero steps returns the zero initialization") {
    const LatentFit f = fit_latent_window(model, window, 0, 1e-2);
    for (double v : f.z.a) CHECK(v == 0.0);
    CHECK(std::isfinite(f.loss));
    CHECK(f.loss > 0.0);
  }

  SUBCASE("optimization reduces the observed-span loss") {
    const LatentFit f0 = fit_latent_window(model, window, 0, 1e-2);
    const LatentFit f = fit_latent_window(model, window, 80, 1e-2);
    CHECK(f.loss < f0.loss);
    CHECK(store_checksum(model.params()) == before);
  }

  SUBCASE("window enumeration equals the explicit span list") {
    std::vector<Mat> spans;
    for (int t = 0; t + 3 <= window.rows; ++t) {
      spans.push_back(slice(window, t, 3, 0, 2));
    }
    const LatentFit a = fit_latent(model, spans, 15, 1e-2);
    const LatentFit b = fit_latent_window(model, window, 15, 1e-2);
    CHECK(a.loss == b.loss);
    CHECK(std::memcmp(a.z.a.data(), b.z.a.data(),
                      a.z.a.size() * sizeof(double)) == 0);
  }

  SUBCASE("a refit code lands within twice the trained code's loss") {
    const LatentFit f = fit_latent_window(model, window, 200, 1e-2);
    Mat zc(1, model.config().width);
    std::memcpy(zc.row(0), r.codebook.row(0),
                sizeof(double) * static_cast<size_t>(model.config().width));
    double cb_loss = 0.0;
    int n = 0;
    const CorruptionDraw d = clean_draw(3, 2);
    const NoiseSchedule sched = make_schedule(1);
    for (int t = 0; t + 3 <= window.rows; ++t) {
      cb_loss +=
          block_loss(model, zc, slice(window, t, 3, 0, 2), d, sched).total;
      ++n;
    }
    cb_loss /= n;
    CHECK(f.loss <= 2.0 * cb_loss + 1e-12);
  }

  SUBCASE("insufficient observations are rejected") {
    CHECK_THROWS_AS(fit_latent(model, {}, 10, 1e-2), ConfigError);
    const Mat tiny(2, 2);  // shorter than one span of b+s = 3 states
    CHECK_THROWS_AS(fit_latent_window(model, tiny, 10, 1e-2), ConfigError);
    const Mat wrong(6, 4);
    CHECK_THROWS_AS(fit_latent_window(model, wrong, 10, 1e-2), ConfigError);
    CHECK_THROWS_AS(fit_latent_window(model, window, -1, 1e-2), ConfigError);
  }
}
