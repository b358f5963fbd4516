#include "dhn/baselines.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "support.hpp"

using namespace dhn;
using dhn::testing::check_close;
using dhn::testing::randm;

namespace {

HnnConfig tiny_hnn(int dim) {
  HnnConfig c;
  c.dim = dim;
  c.zdim = 4;
  c.hidden = 10;
  c.layers = 2;
  return c;
}

VanillaConfig tiny_vanilla(int dim) {
  VanillaConfig c;
  c.dim = dim;
  c.zdim = 4;
  c.hidden = 12;
  c.layers = 1;
  return c;
}

ConvConfig tiny_conv(int dim) {
  ConvConfig c;
  c.dim = dim;
  c.zdim = 4;
  c.hidden = 6;
  c.layers = 1;
  c.ksize = 3;
  c.length = 9;
  return c;
}

void zero_params_with_prefix(ParamStore& store, const std::string& prefix) {
  for (size_t i = 0; i < store.names.size(); ++i) {
    if (store.names[i].rfind(prefix, 0) == 0) store.values[i].set_zero();
  }
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

Mat state_row(const PhasePoint& x, int dim) {
  Mat m(1, 2 * dim);
  for (int c = 0; c < dim; ++c) {
    m.a[static_cast<size_t>(c)] = x.q[static_cast<size_t>(c)];
    m.a[static_cast<size_t>(dim + c)] = x.p[static_cast<size_t>(c)];
  }
  return m;
}

bool same_bits(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.a.data(), b.a.data(), a.a.size() * sizeof(double)) == 0;
}

bool same_history(const std::vector<EpochStat>& a,
                  const std::vector<EpochStat>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].epoch != b[i].epoch || a[i].loss != b[i].loss ||
        a[i].coherence != b[i].coherence) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("exact field satisfies the residual identities") {
  for (SystemKind kind : {SystemKind::kSingle, SystemKind::kDouble}) {
    SystemParams sp;
    sp.kind = kind;
    if (kind == SystemKind::kDouble) sp.l2 = 0.8;
    const int d = sp.dim();
    const Trajectory tr =
        integrate_fine(sp, initial_condition(sp), 0.1, 20, 25);
    for (int t = 0; t < 20; t += 4) {
      const PhasePoint& x = tr.states[static_cast<size_t>(t)];
      const PhaseVelocity v = phase_velocity(sp, x);
      Mat grad(1, 2 * d), deriv(1, 2 * d);
      for (int c = 0; c < d; ++c) {
        grad.a[static_cast<size_t>(c)] = -v.dp[static_cast<size_t>(c)];
        grad.a[static_cast<size_t>(d + c)] = v.dq[static_cast<size_t>(c)];
        deriv.a[static_cast<size_t>(c)] = v.dq[static_cast<size_t>(c)];
        deriv.a[static_cast<size_t>(d + c)] = v.dp[static_cast<size_t>(c)];
      }
      CHECK(hamiltonian_residual(grad, deriv) == 0.0);
    }
  }
}

TEST_CASE("residual scales quadratically in its arguments") {
  Rng rng(43);
  for (int d : {1, 2}) {
    const Mat grad = randm(1, 2 * d, rng);
    const Mat deriv = randm(1, 2 * d, rng);
    const double base = hamiltonian_residual(grad, deriv);
    CHECK(base > 0.0);
    Mat g3 = grad, d3 = deriv;
    for (double& v : g3.a) v *= 3.0;
    for (double& v : d3.a) v *= 3.0;
    check_close(hamiltonian_residual(g3, d3), 9.0 * base, 1e-13);
  }
}

TEST_CASE("zero network scores the mean squared derivative magnitude") {
  HnnMlp net(tiny_hnn(1), 17);
  zero_params_with_prefix(net.params(), "hnn.");
  Rng rng(5);
  const Mat state = randm(1, 2, rng);
  const Mat deriv = randm(1, 2, rng);
  const Mat z = randm(1, 4, rng);
  const double want =
      (deriv.a[0] * deriv.a[0] + deriv.a[1] * deriv.a[1]) / 2.0;
  check_close(hnn_loss(net, state, deriv, z), want, 1e-15);
}

TEST_CASE("energy gradient matches finite differences of the scalar") {
  for (int dim : {1, 2}) {
    HnnMlp net(tiny_hnn(dim), 23 + dim);
    Rng rng(31);
    const Mat state = randm(1, 2 * dim, rng, 0.5);
    const Mat z = randm(1, 4, rng, 0.5);
    Mat grad;
    net.eval(state, z, &grad);
    REQUIRE(grad.rows == 1);
    REQUIRE(grad.cols == 2 * dim);
    const double h = 1e-6;
    for (int c = 0; c < 2 * dim; ++c) {
      Mat sp = state, sm = state;
      sp.a[static_cast<size_t>(c)] += h;
      sm.a[static_cast<size_t>(c)] -= h;
      const double fd =
          (net.eval(sp, z, nullptr) - net.eval(sm, z, nullptr)) / (2.0 * h);
      check_close(grad.a[static_cast<size_t>(c)], fd, 1e-6);
    }
  }
}

TEST_CASE("loss routes agree and vanish on the net's own field") {
  HnnMlp net(tiny_hnn(2), 41);
  Rng rng(7);
  const Mat state = randm(1, 4, rng, 0.3);
  const Mat deriv = randm(1, 4, rng);
  const Mat z = randm(1, 4, rng, 0.3);
  const double via_eval = hnn_loss(net, state, deriv, z);
  const double via_reduction = hnn_loss_grad(net, state, deriv, z, nullptr, nullptr);
  check_close(via_eval, via_reduction, 1e-13);

  // derivatives read off the net's own gradient leave nothing to penalize
  Mat grad;
  net.eval(state, z, &grad);
  Mat own(1, 4);
  own.a[0] = grad.a[2];
  own.a[1] = grad.a[3];
  own.a[2] = -grad.a[0];
  own.a[3] = -grad.a[1];
  CHECK(hnn_loss(net, state, own, z) == 0.0);
}

TEST_CASE("residual gradients match finite differences") {
  HnnMlp net(tiny_hnn(1), 53);
  Rng rng(11);
  const Mat state = randm(1, 2, rng, 0.4);
  const Mat deriv = randm(1, 2, rng);
  const Mat z = randm(1, 4, rng, 0.4);
  std::vector<Mat> pg = net.params().zeros_like();
  Mat zg(1, 4);
  const double base = hnn_loss_grad(net, state, deriv, z, &pg, &zg);
  check_close(base, hnn_loss(net, state, deriv, z), 1e-13);

  const double h = 1e-5;
  ParamStore& store = net.params();
  for (size_t k = 0; k < store.values.size(); ++k) {
    Mat& w = store.values[k];
    const size_t stride = w.a.size() > 3 ? w.a.size() / 3 : 1;
    for (size_t i = 0; i < w.a.size(); i += stride) {
      const double keep = w.a[i];
      w.a[i] = keep + h;
      const double lp = hnn_loss(net, state, deriv, z);
      w.a[i] = keep - h;
      const double lm = hnn_loss(net, state, deriv, z);
      w.a[i] = keep;
      check_close(pg[k].a[i], (lp - lm) / (2.0 * h), 2e-5);
    }
  }
  for (int c = 0; c < 4; ++c) {
    Mat zp = z, zm = z;
    zp.a[static_cast<size_t>(c)] += h;
    zm.a[static_cast<size_t>(c)] -= h;
    const double fd =
        (hnn_loss(net, state, deriv, zp) - hnn_loss(net, state, deriv, zm)) /
        (2.0 * h);
    check_close(zg.a[static_cast<size_t>(c)], fd, 2e-5);
  }
}

TEST_CASE("analytic rollouts reproduce the reference integrator") {
  for (SystemKind kind : {SystemKind::kSingle, SystemKind::kDouble}) {
    SystemParams sp;
    sp.kind = kind;
    if (kind == SystemKind::kDouble) sp.l2 = 1.2;
    const int d = sp.dim();
    const AnalyticHamiltonian field(sp);
    const PhasePoint x0 = initial_condition(sp);
    const Mat init = state_row(x0, d);
    for (Integrator m :
         {Integrator::kEuler, Integrator::kLeapfrog, Integrator::kRk4}) {
      const Mat roll = hnn_rollout(field, init, 40, 0.1, m);
      const Trajectory ref = integrate(sp, x0, 0.1, 40, m);
      REQUIRE(roll.rows == 41);
      for (int k = 0; k <= 40; ++k) {
        for (int c = 0; c < d; ++c) {
          check_close(roll(k, c), ref.states[static_cast<size_t>(k)].q[c],
                      1e-12);
          check_close(roll(k, d + c), ref.states[static_cast<size_t>(k)].p[c],
                      1e-12);
        }
      }
    }
  }
}

TEST_CASE("fine rk4 tracks the ground truth to a micro tolerance") {
  SystemParams sp;
  const AnalyticHamiltonian field(sp);
  const PhasePoint x0 = initial_condition(sp);
  const int sub = 20;
  const Mat roll = hnn_rollout(field, state_row(x0, 1), 127 * sub, 0.1 / sub,
                               Integrator::kRk4);
  const Trajectory fine = integrate_fine(sp, x0, 0.1, 128, 100);
  double worst = 0.0;
  for (int k = 0; k < 128; ++k) {
    worst = std::max(worst, std::abs(roll(k * sub, 0) -
                                     fine.states[static_cast<size_t>(k)].q[0]));
    worst = std::max(worst, std::abs(roll(k * sub, 1) -
                                     fine.states[static_cast<size_t>(k)].p[0]));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("euler inflates the energy while leapfrog keeps it bounded") {
  SystemParams sp;
  const AnalyticHamiltonian field(sp);
  const PhasePoint x0 = initial_condition(sp);
  const Mat init = state_row(x0, 1);

  const Mat eu = hnn_rollout(field, init, 127, 0.1, Integrator::kEuler);
  std::vector<double> energy(128);
  for (int k = 0; k < 128; ++k) {
    PhasePoint x;
    x.q[0] = eu(k, 0);
    x.p[0] = eu(k, 1);
    energy[static_cast<size_t>(k)] = total_energy(sp, x);
  }
  CHECK(energy[127] > 1.02 * energy[0]);
  int drops = 0;
  for (int k = 0; k + 1 < 128; ++k) {
    if (energy[static_cast<size_t>(k + 1)] < energy[static_cast<size_t>(k)]) {
      ++drops;
    }
  }
  CHECK(drops <= 2);

  const Mat lf = hnn_rollout(field, init, 127, 0.1, Integrator::kLeapfrog);
  const double e0 = energy[0];
  for (int k = 0; k < 128; ++k) {
    PhasePoint x;
    x.q[0] = lf(k, 0);
    x.p[0] = lf(k, 1);
    CHECK(std::abs(total_energy(sp, x) - e0) / e0 < 0.01);
  }
}

TEST_CASE("zero readout field is a fixed point for every scheme") {
  HnnMlp net(tiny_hnn(1), 71);
  zero_params_with_prefix(net.params(), "hnn.out.");
  Rng rng(3);
  const Mat z = randm(1, 4, rng);
  const Mat init = randm(1, 2, rng);
  const BoundHnn field(net, z);
  for (Integrator m :
       {Integrator::kEuler, Integrator::kLeapfrog, Integrator::kRk4}) {
    const Mat roll = hnn_rollout(field, init, 20, 0.1, m);
    for (int k = 0; k <= 20; ++k) {
      CHECK(roll(k, 0) == init.a[0]);
      CHECK(roll(k, 1) == init.a[1]);
    }
  }
}

namespace {

// dH/dp grows with q, so iterating doubles up into overflow within two steps
struct BlowupField : HnnField {
  int dim() const override { return 1; }
  void h_grad(const Mat& state, Mat* grad) const override {
    grad->resize(1, 2);
    grad->a[0] = 0.0;
    grad->a[1] = state.a[0] * 1e200;
  }
};

}  // namespace

TEST_CASE("rollouts abort with the failing step index") {
  BlowupField field;
  Mat init(1, 2);
  init.a[0] = 1.0;
  try {
    hnn_rollout(field, init, 10, 0.1, Integrator::kEuler);
    CHECK(false);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }

  HnnMlp net(tiny_hnn(1), 5);
  net.params().values[0].a[0] = std::nan("");
  Rng rng(9);
  const Mat z = randm(1, 4, rng);
  const BoundHnn poisoned(net, z);
  try {
    hnn_rollout(poisoned, randm(1, 2, rng), 4, 0.1, Integrator::kRk4);
    CHECK(false);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("rollout step 1") != std::string::npos);
  }
}

TEST_CASE("hnn training fits a toy dataset and repeats bitwise") {
  HnnTrainConfig cfg;
  cfg.net = tiny_hnn(1);
  cfg.net.hidden = 12;
  cfg.net.layers = 1;
  cfg.weight_lr = 3e-3;
  cfg.code_lr = 1e-2;
  cfg.batch = 8;
  cfg.epochs = 6;
  cfg.max_steps_per_epoch = 6;
  cfg.seed = 5;
  cfg.threads = 1;

  const HnnTrainResult a = train_hnn(toy_data(), cfg);
  REQUIRE(a.history.size() == 6);
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].epoch == static_cast<int>(i) + 1);
    CHECK(std::isfinite(a.history[i].loss));
    CHECK(a.history[i].loss >= 0.0);
    CHECK(a.history[i].coherence == 0.0);
  }
  CHECK(a.history.back().loss < a.history.front().loss);
  REQUIRE(a.codebook.rows == 6);
  CHECK(a.codebook.all_finite());

  const HnnTrainResult b = train_hnn(toy_data(), cfg);
  CHECK(same_history(a.history, b.history));
  CHECK(store_checksum(a.model->params()) == store_checksum(b.model->params()));
  CHECK(same_bits(a.codebook, b.codebook));

  HnnTrainConfig cfg4 = cfg;
  cfg4.threads = 4;
  const HnnTrainResult c = train_hnn(toy_data(), cfg4);
  CHECK(same_history(a.history, c.history));
  CHECK(store_checksum(a.model->params()) == store_checksum(c.model->params()));
  CHECK(same_bits(a.codebook, c.codebook));
}

TEST_CASE("hnn latent fit uses interior differences and freezes weights") {
  HnnMlp net(tiny_hnn(1), 77);
  const Mat window = slice(raw_states(toy_data().train[0]), 0, 8, 0, 2);
  const std::uint64_t before = store_checksum(net.params());

  const LatentFit init = fit_hnn_latent(net, window, 0.1, 0, 0.05);
  for (double v : init.z.a) CHECK(v == 0.0);
  CHECK(init.loss > 0.0);
  CHECK(std::isfinite(init.loss));

  // the reported loss is the mean residual over the window's interior
  Mat z0(1, 4);
  double want = 0.0;
  for (int t = 1; t + 1 < 8; ++t) {
    const Mat srow = slice(window, t, 1, 0, 2);
    Mat drow(1, 2);
    for (int c = 0; c < 2; ++c) {
      drow.a[static_cast<size_t>(c)] =
          (window(t + 1, c) - window(t - 1, c)) / 0.2;
    }
    want += hnn_loss(net, srow, drow, z0);
  }
  check_close(init.loss, want / 6.0, 1e-12);

  const LatentFit fit = fit_hnn_latent(net, window, 0.1, 60, 0.05);
  CHECK(fit.loss < init.loss);
  CHECK(store_checksum(net.params()) == before);

  CHECK_THROWS_AS(fit_hnn_latent(net, slice(window, 0, 2, 0, 2), 0.1, 5, 0.05),
                  ConfigError);
  CHECK_THROWS_AS(fit_hnn_latent(net, window, 0.0, 5, 0.05), ConfigError);
  CHECK_THROWS_AS(fit_hnn_latent(net, window, 0.1, -1, 0.05), ConfigError);
}

TEST_CASE("next state predictor starts as the identity") {
  for (int dim : {1, 2}) {
    VanillaNet net(tiny_vanilla(dim), 91 + dim);
    Rng rng(13);
    for (int trial = 0; trial < 3; ++trial) {
      const Mat state = randm(1, 2 * dim, rng);
      const Mat z = randm(1, 4, rng);
      const Mat pred = net.predict(state, z);
      for (int c = 0; c < 2 * dim; ++c) {
        CHECK(pred.a[static_cast<size_t>(c)] ==
              state.a[static_cast<size_t>(c)]);
      }
    }
  }
}

TEST_CASE("predictor memorizes a two-step dataset") {
  Dataset ds;
  ds.kind = SystemKind::kSingle;
  ds.dt = 0.1;
  ds.seed = 0;
  ds.n_states = 2;
  ds.substeps = 1;
  ds.norm.dim = 1;
  const double qs[2][2] = {{0.2, 0.5}, {-0.4, 0.1}};
  const double ps[2][2] = {{-0.1, 0.3}, {0.2, -0.6}};
  for (int i = 0; i < 2; ++i) {
    Trajectory tr;
    tr.dt = 0.1;
    for (int t = 0; t < 2; ++t) {
      PhasePoint x;
      x.q[0] = qs[i][t];
      x.p[0] = ps[i][t];
      tr.states.push_back(x);
    }
    ds.train.push_back(tr);
  }

  VanillaTrainConfig cfg;
  cfg.net = tiny_vanilla(1);
  cfg.weight_lr = 1e-2;
  cfg.code_lr = 1e-2;
  cfg.batch = 8;
  cfg.epochs = 800;
  cfg.seed = 3;
  cfg.threads = 1;
  const VanillaTrainResult r = train_vanilla(ds, cfg);
  CHECK(r.history.back().loss < 1e-6);

  for (int i = 0; i < 2; ++i) {
    Mat z(1, 4);
    std::memcpy(z.row(0), r.codebook.row(i), 4 * sizeof(double));
    Mat x0(1, 2);
    x0.a[0] = qs[i][0];
    x0.a[1] = ps[i][0];
    const Mat pred = r.model->predict(x0, z);
    check_close(pred.a[0], qs[i][1], 1e-3);
    check_close(pred.a[1], ps[i][1], 1e-3);
  }
}

TEST_CASE("pair loss gradients match finite differences") {
  VanillaNet net(tiny_vanilla(1), 101);
  Rng rng(17);
  const Mat state = randm(1, 2, rng, 0.5);
  const Mat next = randm(1, 2, rng, 0.5);
  const Mat z = randm(1, 4, rng, 0.5);
  std::vector<Mat> pg = net.params().zeros_like();
  Mat zg(1, 4);
  const double base = net.pair_loss_grad(state, next, z, &pg, &zg);
  check_close(base, net.pair_loss(state, next, z), 1e-13);

  const double h = 1e-5;
  ParamStore& store = net.params();
  for (size_t k = 0; k < store.values.size(); ++k) {
    Mat& w = store.values[k];
    const size_t stride = w.a.size() > 3 ? w.a.size() / 3 : 1;
    for (size_t i = 0; i < w.a.size(); i += stride) {
      const double keep = w.a[i];
      w.a[i] = keep + h;
      const double lp = net.pair_loss(state, next, z);
      w.a[i] = keep - h;
      const double lm = net.pair_loss(state, next, z);
      w.a[i] = keep;
      check_close(pg[k].a[i], (lp - lm) / (2.0 * h), 2e-5);
    }
  }
  for (int c = 0; c < 4; ++c) {
    Mat zp = z, zm = z;
    zp.a[static_cast<size_t>(c)] += h;
    zm.a[static_cast<size_t>(c)] -= h;
    const double fd =
        (net.pair_loss(state, next, zp) - net.pair_loss(state, next, zm)) /
        (2.0 * h);
    check_close(zg.a[static_cast<size_t>(c)], fd, 2e-5);
  }
}

TEST_CASE("vanilla rollout iterates the map and flags blowups") {
  VanillaNet net(tiny_vanilla(1), 111);
  zero_params_with_prefix(net.params(), "van.");
  Rng rng(19);
  const Mat z = randm(1, 4, rng);
  const Mat init = randm(1, 2, rng);
  const Mat roll = vanilla_rollout(net, z, init, 12);
  REQUIRE(roll.rows == 13);
  for (int k = 0; k <= 12; ++k) {
    CHECK(roll(k, 0) == init.a[0]);
    CHECK(roll(k, 1) == init.a[1]);
  }

  VanillaNet bad(tiny_vanilla(1), 113);
  bad.params().values[0].a[0] = std::nan("");
  try {
    vanilla_rollout(bad, z, init, 4);
    CHECK(false);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("vanilla latent fit freezes weights and honors its budget") {
  VanillaNet net(tiny_vanilla(1), 121);
  // the zero output head blocks every latent gradient, so give it signal
  Rng wrng(3);
  ParamStore& ps = net.params();
  ps.values[static_cast<size_t>(ps.find("van.out.w"))] = randm(12, 2, wrng, 0.3);
  const Mat window =
      slice(normalized_states(toy_data().train[1], toy_data().norm), 0, 6, 0, 2);
  const std::uint64_t before = store_checksum(net.params());

  const LatentFit init = fit_vanilla_latent(net, window, 0, 0.05);
  for (double v : init.z.a) CHECK(v == 0.0);
  CHECK(init.loss > 0.0);

  const LatentFit fit = fit_vanilla_latent(net, window, 60, 0.05);
  CHECK(fit.loss < init.loss);
  CHECK(store_checksum(net.params()) == before);

  CHECK_THROWS_AS(fit_vanilla_latent(net, slice(window, 0, 1, 0, 2), 5, 0.05),
                  ConfigError);
  CHECK_THROWS_AS(fit_vanilla_latent(net, Mat(6, 4), 5, 0.05), ConfigError);
  CHECK_THROWS_AS(fit_vanilla_latent(net, window, -1, 0.05), ConfigError);
}

TEST_CASE("stage grids halve the spacing down to dense") {
  const std::vector<ConvStage> st = conv_stages(65, 4);
  REQUIRE(st.size() == 2);
  REQUIRE(st[0].known.size() == 17);
  REQUIRE(st[0].scored.size() == 16);
  CHECK(st[0].known.front() == 0);
  CHECK(st[0].known.back() == 64);
  CHECK(st[0].known[1] == 4);
  CHECK(st[0].scored.front() == 2);
  CHECK(st[0].scored.back() == 62);
  REQUIRE(st[1].known.size() == 33);
  REQUIRE(st[1].scored.size() == 32);
  CHECK(st[1].scored.front() == 1);
  CHECK(st[1].scored.back() == 63);

  const std::vector<ConvStage> small = conv_stages(9, 4);
  REQUIRE(small.size() == 2);
  CHECK(small[0].known == std::vector<int>{0, 4, 8});
  CHECK(small[0].scored == std::vector<int>{2, 6});
  CHECK(small[1].known == std::vector<int>{0, 2, 4, 6, 8});
  CHECK(small[1].scored == std::vector<int>{1, 3, 5, 7});

  CHECK_THROWS_AS(conv_stages(9, 3), ConfigError);
  CHECK_THROWS_AS(conv_stages(10, 4), ConfigError);

  Rng rng(23);
  const Mat dense = randm(9, 2, rng);
  const Mat canvas = sparse_canvas(dense, small[0].known);
  REQUIRE(canvas.rows == 9);
  REQUIRE(canvas.cols == 3);
  for (int r = 0; r < 9; ++r) {
    const bool known = r % 4 == 0;
    CHECK(canvas(r, 2) == (known ? 1.0 : 0.0));
    for (int c = 0; c < 2; ++c) {
      CHECK(canvas(r, c) == (known ? dense(r, c) : 0.0));
    }
  }
}

TEST_CASE("zeroed kernels leave only the output bias") {
  ConvNet net(tiny_conv(1), 2, 131);
  for (Mat& w : net.params().values) w.set_zero();
  for (int s = 0; s < 2; ++s) {
    const std::string name = "stage" + std::to_string(s) + ".out.bias";
    Mat& b = net.params().values[static_cast<size_t>(net.params().find(name))];
    b.a[0] = 0.7;
    b.a[1] = -0.3;
  }
  Rng rng(29);
  const Mat values = randm(9, 2, rng);
  const Mat z = randm(1, 4, rng);
  const std::vector<ConvStage> stages = conv_stages(9, 4);

  const Mat pred = net.interpolate(0, sparse_canvas(values, stages[0].known), z);
  for (int r = 0; r < 9; ++r) {
    CHECK(pred(r, 0) == 0.7);
    CHECK(pred(r, 1) == -0.3);
  }

  const Mat filled =
      conv_interpolate(net, stages, values, stages[0].known, z);
  for (int r = 0; r < 9; ++r) {
    if (r % 4 == 0) {
      CHECK(filled(r, 0) == values(r, 0));
      CHECK(filled(r, 1) == values(r, 1));
    } else {
      CHECK(filled(r, 0) == 0.7);
      CHECK(filled(r, 1) == -0.3);
    }
  }
}

TEST_CASE("masked loss sees only the scored rows") {
  ConvNet net(tiny_conv(1), 1, 137);
  Rng rng(31);
  const Mat canvas = randm(9, 3, rng);
  const Mat z = randm(1, 4, rng);
  const std::vector<int> scored{1, 3};
  Mat ta = randm(9, 2, rng);
  Mat tb = ta;
  tb(5, 0) += 2.0;
  tb(8, 1) -= 1.0;
  CHECK(net.masked_loss(0, canvas, ta, scored, z) ==
        net.masked_loss(0, canvas, tb, scored, z));
  Mat tc = ta;
  tc(3, 1) += 0.5;
  CHECK(net.masked_loss(0, canvas, ta, scored, z) !=
        net.masked_loss(0, canvas, tc, scored, z));

  // zeroed net predicts zero, so the loss is the scored rows' mean square
  ConvNet zero(tiny_conv(1), 1, 139);
  for (Mat& w : zero.params().values) w.set_zero();
  double want = 0.0;
  for (int r : scored) {
    want += ta(r, 0) * ta(r, 0) + ta(r, 1) * ta(r, 1);
  }
  want /= 4.0;
  check_close(zero.masked_loss(0, canvas, ta, scored, z), want, 1e-13);
}

TEST_CASE("conv stage gradients match finite differences") {
  ConvNet net(tiny_conv(1), 1, 149);
  Rng rng(37);
  const Mat canvas = randm(9, 3, rng, 0.5);
  const Mat target = randm(9, 2, rng, 0.5);
  const Mat z = randm(1, 4, rng, 0.5);
  const std::vector<int> scored{1, 2, 5, 7};
  std::vector<Mat> pg = net.params().zeros_like();
  Mat zg(1, 4);
  const double base =
      net.masked_loss_grad(0, canvas, target, scored, z, &pg, &zg);
  check_close(base, net.masked_loss(0, canvas, target, scored, z), 1e-13);

  const double h = 1e-5;
  ParamStore& store = net.params();
  for (size_t k = 0; k < store.values.size(); ++k) {
    Mat& w = store.values[k];
    const size_t stride = w.a.size() > 3 ? w.a.size() / 3 : 1;
    for (size_t i = 0; i < w.a.size(); i += stride) {
      const double keep = w.a[i];
      w.a[i] = keep + h;
      const double lp = net.masked_loss(0, canvas, target, scored, z);
      w.a[i] = keep - h;
      const double lm = net.masked_loss(0, canvas, target, scored, z);
      w.a[i] = keep;
      check_close(pg[k].a[i], (lp - lm) / (2.0 * h), 2e-5);
    }
  }
  for (int c = 0; c < 4; ++c) {
    Mat zp = z, zm = z;
    zp.a[static_cast<size_t>(c)] += h;
    zm.a[static_cast<size_t>(c)] -= h;
    const double fd = (net.masked_loss(0, canvas, target, scored, zp) -
                       net.masked_loss(0, canvas, target, scored, zm)) /
                      (2.0 * h);
    check_close(zg.a[static_cast<size_t>(c)], fd, 2e-5);
  }
}

TEST_CASE("conv training learns and repeats across thread counts") {
  ConvTrainConfig cfg;
  cfg.net = tiny_conv(1);
  cfg.stride0 = 4;
  cfg.weight_lr = 3e-3;
  cfg.code_lr = 1e-2;
  cfg.batch = 4;
  cfg.epochs = 8;
  cfg.max_steps_per_epoch = 4;
  cfg.seed = 9;
  cfg.threads = 1;

  const ConvTrainResult a = train_conv(toy_data(), cfg);
  REQUIRE(a.model->stage_count() == 2);
  REQUIRE(a.history.size() == 8);
  for (const EpochStat& st : a.history) {
    CHECK(std::isfinite(st.loss));
    CHECK(st.loss >= 0.0);
  }
  CHECK(a.history.back().loss < a.history.front().loss);
  REQUIRE(a.codebook.rows == 6);

  ConvTrainConfig cfg4 = cfg;
  cfg4.threads = 4;
  const ConvTrainResult b = train_conv(toy_data(), cfg4);
  CHECK(same_history(a.history, b.history));
  CHECK(store_checksum(a.model->params()) == store_checksum(b.model->params()));
  CHECK(same_bits(a.codebook, b.codebook));
}

TEST_CASE("vanilla training repeats across thread counts") {
  VanillaTrainConfig cfg;
  cfg.net = tiny_vanilla(1);
  cfg.batch = 8;
  cfg.epochs = 4;
  cfg.max_steps_per_epoch = 5;
  cfg.seed = 15;
  cfg.threads = 1;
  const VanillaTrainResult a = train_vanilla(toy_data(), cfg);
  VanillaTrainConfig cfg4 = cfg;
  cfg4.threads = 4;
  const VanillaTrainResult b = train_vanilla(toy_data(), cfg4);
  CHECK(same_history(a.history, b.history));
  CHECK(store_checksum(a.model->params()) == store_checksum(b.model->params()));
  CHECK(same_bits(a.codebook, b.codebook));
}

TEST_CASE("trainer config validation aggregates complaints") {
  HnnTrainConfig h;
  h.batch = 0;
  h.epochs = 0;
  try {
    h.validate();
    CHECK(false);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch") != std::string::npos);
    CHECK(msg.find("epoch") != std::string::npos);
  }
  VanillaTrainConfig v;
  v.weight_lr = -1.0;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  ConvTrainConfig c;
  c.stride0 = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ConvConfig cc = tiny_conv(1);
  cc.ksize = 4;
  CHECK_THROWS_AS(cc.validate(), ConfigError);
}

TEST_CASE("weight counts follow the configuration") {
  const HnnConfig hc = tiny_hnn(1);
  const HnnMlp hnn(hc, 1);
  const std::int64_t hnn_want =
      (2 * hc.dim) * hc.hidden + hc.zdim * hc.hidden + hc.hidden +
      (hc.layers - 1) * (hc.hidden * hc.hidden + hc.hidden) + hc.hidden + 1;
  CHECK(hnn.weight_count() == hnn_want);

  const VanillaConfig vc = tiny_vanilla(2);
  const VanillaNet van(vc, 1);
  const std::int64_t van_want =
      (4 * vc.hidden + vc.zdim * vc.hidden + vc.hidden) +
      (vc.layers - 1) * (vc.hidden * vc.hidden + vc.hidden) +
      (vc.hidden * 4 + 4);
  CHECK(van.weight_count() == van_want);

  const ConvConfig cc = tiny_conv(1);
  const ConvNet conv(cc, 2, 1);
  const std::int64_t per_stage =
      cc.ksize * 3 * cc.hidden + cc.hidden + cc.zdim * cc.hidden +
      (cc.layers - 1) * (cc.ksize * cc.hidden * cc.hidden + cc.hidden) +
      cc.ksize * cc.hidden * 2 + 2;
  CHECK(conv.weight_count() == 2 * per_stage);
}

TEST_CASE("baseline checkpoints round trip every array") {
  Rng rng(41);
  const NormStats norm = toy_data().norm;

  const HnnMlp hnn(tiny_hnn(1), 201);
  const Mat hcb = randm(5, 4, rng);
  save_hnn_checkpoint(hnn, hcb, norm, "ckpt_base_hnn");
  const HnnCheckpoint hload = load_hnn_checkpoint("ckpt_base_hnn");
  CHECK(store_checksum(hload.model->params()) == store_checksum(hnn.params()));
  CHECK(same_bits(hload.codebook, hcb));
  CHECK(hload.norm.dim == norm.dim);
  CHECK(hload.norm.q_mean[0] == norm.q_mean[0]);
  CHECK(hload.norm.p_std[0] == norm.p_std[0]);
  CHECK(hload.model->config().hidden == 10);

  const VanillaNet van(tiny_vanilla(1), 203);
  const Mat vcb = randm(3, 4, rng);
  save_vanilla_checkpoint(van, vcb, norm, "ckpt_base_van");
  const VanillaCheckpoint vload = load_vanilla_checkpoint("ckpt_base_van");
  CHECK(store_checksum(vload.model->params()) == store_checksum(van.params()));
  CHECK(same_bits(vload.codebook, vcb));

  const ConvNet conv(tiny_conv(1), 2, 205);
  const Mat ccb = randm(4, 4, rng);
  save_conv_checkpoint(conv, ccb, norm, "ckpt_base_conv");
  const ConvCheckpoint cload = load_conv_checkpoint("ckpt_base_conv");
  CHECK(cload.model->stage_count() == 2);
  CHECK(store_checksum(cload.model->params()) == store_checksum(conv.params()));
  CHECK(same_bits(cload.codebook, ccb));

  CHECK_THROWS_AS(load_vanilla_checkpoint("ckpt_base_hnn"), ConfigError);
  CHECK_THROWS_AS(load_hnn_checkpoint("ckpt_base_missing"), ConfigError);

  for (const char* p : {"ckpt_base_hnn", "ckpt_base_van", "ckpt_base_conv"}) {
    std::remove((std::string(p) + ".json").c_str());
    std::remove((std::string(p) + ".bin").c_str());
  }
}
