#include <cmath>
#include <cstdio>
#include <fstream>

#include "dhn/dataset.hpp"
#include "dhn/parallel.hpp"
#include "json.hpp"

namespace dhn {
namespace {

constexpr char kMagic[9] = "DHNDATA1";

using json = nlohmann::json;

json params_to_json(const SystemParams& sp) {
  return json{{"m1", sp.m1}, {"m2", sp.m2}, {"l1", sp.l1},
              {"l2", sp.l2}, {"g", sp.g}};
}

SystemParams params_from_json(SystemKind kind, const json& j) {
  SystemParams sp;
  sp.kind = kind;
  sp.m1 = j.at("m1").get<double>();
  sp.m2 = j.at("m2").get<double>();
  sp.l1 = j.at("l1").get<double>();
  sp.l2 = j.at("l2").get<double>();
  sp.g = j.at("g").get<double>();
  return sp;
}

void write_split(std::ofstream& out, const std::vector<Trajectory>& split,
                 int dim) {
  for (const Trajectory& tr : split) {
    for (const PhasePoint& x : tr.states) {
      out.write(reinterpret_cast<const char*>(x.q.data()),
                dim * static_cast<std::streamsize>(sizeof(double)));
      out.write(reinterpret_cast<const char*>(x.p.data()),
                dim * static_cast<std::streamsize>(sizeof(double)));
    }
  }
}

void read_split(std::ifstream& in, std::vector<Trajectory>& split, int dim,
                int n_states) {
  for (Trajectory& tr : split) {
    tr.states.assign(static_cast<size_t>(n_states), PhasePoint{});
    for (PhasePoint& x : tr.states) {
      in.read(reinterpret_cast<char*>(x.q.data()),
              dim * static_cast<std::streamsize>(sizeof(double)));
      in.read(reinterpret_cast<char*>(x.p.data()),
              dim * static_cast<std::streamsize>(sizeof(double)));
    }
  }
}

}  // namespace

SystemParams sample_params(SystemKind kind, Rng& rng) {
  SystemParams sp;
  sp.kind = kind;
  if (kind == SystemKind::kSingle) {
    sp.l1 = rng.uniform(0.5, 1.0);
  } else {
    sp.l1 = 1.0;
    sp.l2 = rng.uniform(0.5, 1.5);
  }
  return sp;
}

Dataset generate_dataset(const GenSpec& spec) {
  if (spec.n_train < 1 || spec.n_test < 0) {
    throw ConfigError("dataset needs n_train >= 1, n_test >= 0");
  }
  Dataset ds;
  ds.kind = spec.kind;
  ds.dt = spec.dt;
  ds.seed = spec.seed;
  ds.n_states = spec.n_states;
  ds.substeps = spec.substeps;
  ds.train.resize(static_cast<size_t>(spec.n_train));
  ds.test.resize(static_cast<size_t>(spec.n_test));

  // Test streams offset so draws never depend on the split sizes.
  constexpr std::uint64_t kTestStreamBase = 1000000;
  auto gen_one = [&](Trajectory& slot, std::uint64_t stream_index) {
    Rng rng = Rng::stream(spec.seed, stream_index);
    const SystemParams sp = sample_params(spec.kind, rng);
    slot = integrate_fine(sp, initial_condition(sp), spec.dt, spec.n_states,
                          spec.substeps);
  };
  parallel_for(spec.n_train, spec.threads, [&](std::int64_t i) {
    gen_one(ds.train[static_cast<size_t>(i)], static_cast<std::uint64_t>(i));
  });
  parallel_for(spec.n_test, spec.threads, [&](std::int64_t i) {
    gen_one(ds.test[static_cast<size_t>(i)],
            kTestStreamBase + static_cast<std::uint64_t>(i));
  });

  ds.norm = compute_norm_stats(ds.train, ds.dim());
  return ds;
}

NormStats compute_norm_stats(const std::vector<Trajectory>& train, int dim) {
  NormStats ns;
  ns.dim = dim;
  std::int64_t count = 0;
  std::array<double, 2> qs{{0, 0}}, ps{{0, 0}};
  for (const Trajectory& tr : train) {
    for (const PhasePoint& x : tr.states) {
      for (int c = 0; c < dim; ++c) {
        qs[c] += x.q[c];
        ps[c] += x.p[c];
      }
      ++count;
    }
  }
  if (count == 0) throw ConfigError("no states to compute statistics from");
  for (int c = 0; c < dim; ++c) {
    ns.q_mean[c] = qs[c] / count;
    ns.p_mean[c] = ps[c] / count;
  }
  std::array<double, 2> qv{{0, 0}}, pv{{0, 0}};
  for (const Trajectory& tr : train) {
    for (const PhasePoint& x : tr.states) {
      for (int c = 0; c < dim; ++c) {
        const double dq = x.q[c] - ns.q_mean[c];
        const double dp = x.p[c] - ns.p_mean[c];
        qv[c] += dq * dq;
        pv[c] += dp * dp;
      }
    }
  }
  for (int c = 0; c < dim; ++c) {
    const double sq = std::sqrt(qv[c] / count);
    const double sp = std::sqrt(pv[c] / count);
    ns.q_std[c] = sq > 1e-12 ? sq : 1.0;
    ns.p_std[c] = sp > 1e-12 ? sp : 1.0;
  }
  return ns;
}

Mat normalized_states(const Trajectory& tr, const NormStats& norm) {
  const int dim = norm.dim;
  Mat m(static_cast<int>(tr.states.size()), 2 * dim);
  for (int t = 0; t < m.rows; ++t) {
    const PhasePoint& x = tr.states[static_cast<size_t>(t)];
    double* row = m.row(t);
    for (int c = 0; c < dim; ++c) {
      row[c] = norm.norm_q(x.q[c], c);
      row[dim + c] = norm.norm_p(x.p[c], c);
    }
  }
  return m;
}

Mat raw_states(const Trajectory& tr) {
  const int dim = tr.params.dim();
  Mat m(static_cast<int>(tr.states.size()), 2 * dim);
  for (int t = 0; t < m.rows; ++t) {
    const PhasePoint& x = tr.states[static_cast<size_t>(t)];
    double* row = m.row(t);
    for (int c = 0; c < dim; ++c) {
      row[c] = x.q[c];
      row[dim + c] = x.p[c];
    }
  }
  return m;
}

PhasePoint denormalize_state(const double* row, const NormStats& norm) {
  PhasePoint x;
  for (int c = 0; c < norm.dim; ++c) {
    x.q[c] = norm.denorm_q(row[c], c);
    x.p[c] = norm.denorm_p(row[norm.dim + c], c);
  }
  return x;
}

double max_rel_energy_drift(const Trajectory& tr) {
  if (tr.states.empty()) return 0.0;
  const double e0 = total_energy(tr.params, tr.states.front());
  double worst = 0.0;
  for (const PhasePoint& x : tr.states) {
    const double e = total_energy(tr.params, x);
    worst = std::max(worst, std::abs(e - e0));
  }
  return worst / std::max(std::abs(e0), 1e-9);
}

void save_dataset(const Dataset& ds, const std::string& prefix) {
  const int dim = ds.dim();
  json meta;
  meta["version"] = std::string(kVersion);
  meta["magic"] = kMagic;
  meta["system"] = system_name(ds.kind);
  meta["dt"] = ds.dt;
  meta["seed"] = ds.seed;
  meta["n_states"] = ds.n_states;
  meta["substeps"] = ds.substeps;
  meta["n_train"] = ds.train.size();
  meta["n_test"] = ds.test.size();
  meta["dim"] = dim;
  json train_params = json::array();
  for (const Trajectory& tr : ds.train) train_params.push_back(params_to_json(tr.params));
  json test_params = json::array();
  for (const Trajectory& tr : ds.test) test_params.push_back(params_to_json(tr.params));
  meta["train_params"] = std::move(train_params);
  meta["test_params"] = std::move(test_params);
  meta["norm"] = {
      {"q_mean", std::vector<double>(ds.norm.q_mean.begin(), ds.norm.q_mean.begin() + dim)},
      {"q_std", std::vector<double>(ds.norm.q_std.begin(), ds.norm.q_std.begin() + dim)},
      {"p_mean", std::vector<double>(ds.norm.p_mean.begin(), ds.norm.p_mean.begin() + dim)},
      {"p_std", std::vector<double>(ds.norm.p_std.begin(), ds.norm.p_std.begin() + dim)},
  };

  std::ofstream jf(prefix + ".json");
  if (!jf) throw ConfigError("cannot write " + prefix + ".json");
  jf << meta.dump(2) << "\n";
  jf.close();
  if (!jf) throw ConfigError("failed writing " + prefix + ".json");

  std::ofstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw ConfigError("cannot write " + prefix + ".bin");
  bf.write(kMagic, 8);
  write_split(bf, ds.train, dim);
  write_split(bf, ds.test, dim);
  bf.close();
  if (!bf) throw ConfigError("failed writing " + prefix + ".bin");
}

Dataset load_dataset(const std::string& prefix) {
  std::ifstream jf(prefix + ".json");
  if (!jf) throw ConfigError("cannot open " + prefix + ".json");
  json meta = json::parse(jf, nullptr, true);

  Dataset ds;
  ds.kind = system_from_name(meta.at("system").get<std::string>());
  ds.dt = meta.at("dt").get<double>();
  ds.seed = meta.at("seed").get<std::uint64_t>();
  ds.n_states = meta.at("n_states").get<int>();
  ds.substeps = meta.at("substeps").get<int>();
  const int dim = meta.at("dim").get<int>();
  if (dim != ds.dim()) {
    throw ConfigError("dataset dim does not match system kind");
  }
  const auto n_train = meta.at("n_train").get<size_t>();
  const auto n_test = meta.at("n_test").get<size_t>();
  ds.train.resize(n_train);
  ds.test.resize(n_test);
  for (size_t i = 0; i < n_train; ++i) {
    ds.train[i].params = params_from_json(ds.kind, meta.at("train_params").at(i));
    ds.train[i].dt = ds.dt;
  }
  for (size_t i = 0; i < n_test; ++i) {
    ds.test[i].params = params_from_json(ds.kind, meta.at("test_params").at(i));
    ds.test[i].dt = ds.dt;
  }
  ds.norm.dim = dim;
  for (int c = 0; c < dim; ++c) {
    ds.norm.q_mean[c] = meta.at("norm").at("q_mean").at(c).get<double>();
    ds.norm.q_std[c] = meta.at("norm").at("q_std").at(c).get<double>();
    ds.norm.p_mean[c] = meta.at("norm").at("p_mean").at(c).get<double>();
    ds.norm.p_std[c] = meta.at("norm").at("p_std").at(c).get<double>();
  }

  std::ifstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw ConfigError("cannot open " + prefix + ".bin");
  char magic[8] = {};
  bf.read(magic, 8);
  if (std::string(magic, 8) != std::string(kMagic, 8)) {
    throw ConfigError(prefix + ".bin has the wrong header magic");
  }
  read_split(bf, ds.train, dim, ds.n_states);
  read_split(bf, ds.test, dim, ds.n_states);
  if (!bf) throw ConfigError(prefix + ".bin is truncated");
  return ds;
}

}  // namespace dhn
