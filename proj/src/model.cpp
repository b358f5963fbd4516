#include "dhn/model.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "dhn/rng.hpp"
#include "json.hpp"

namespace dhn {
namespace {

constexpr char kMagic[9] = "DHNCKPT1";

using json = nlohmann::json;

std::string trunk_prefix(const ModelConfig& cfg, Side side) {
  if (cfg.shared_trunk) return "trunk.";
  return side == Side::kPlus ? "plus." : "minus.";
}

std::string head_prefix(const ModelConfig& cfg, Side side) {
  if (cfg.shared_trunk) {
    return side == Side::kPlus ? "head_plus." : "head_minus.";
  }
  return trunk_prefix(cfg, side) + "head.";
}

Graph build_tower(ParamStore* store, const ModelConfig& cfg, Side side) {
  const int d = cfg.width;
  const int T = cfg.tokens();
  const int dh = d / cfg.heads;
  const std::string tk = trunk_prefix(cfg, side);
  const std::string hd = head_prefix(cfg, side);

  GraphBuilder bld(store);
  const int q_in = bld.input("q_block", cfg.b, cfg.dim);
  const int p_in = bld.input("p_block", cfg.b, cfg.dim);
  const int noise = bld.data("noise_embedding", T, d);
  const int z = bld.ext("z", 1, d);

  const int q_tok =
      bld.add_row(bld.matmul(q_in, bld.param(tk + "lift_q.w", cfg.dim, d)),
                  bld.param(tk + "lift_q.bias", 1, d));
  const int p_tok =
      bld.add_row(bld.matmul(p_in, bld.param(tk + "lift_p.w", cfg.dim, d)),
                  bld.param(tk + "lift_p.bias", 1, d));
  int x = bld.concat_rows(bld.concat_rows(q_tok, p_tok), z);
  x = bld.add(bld.add(x, bld.param(tk + "pos", T, d)), noise);

  for (int layer = 0; layer < cfg.layers; ++layer) {
    const std::string lp = tk + "layer" + std::to_string(layer) + ".";
    int attn = -1;
    for (int h = 0; h < cfg.heads; ++h) {
      const std::string hp = lp + "attn" + std::to_string(h) + ".";
      const int qh = bld.matmul(x, bld.param(hp + "wq", d, dh));
      const int kh = bld.matmul(x, bld.param(hp + "wk", d, dh));
      const int vh = bld.matmul(x, bld.param(hp + "wv", d, dh));
      const int scores =
          bld.scale(bld.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
      const int mixed = bld.matmul(bld.softmax_rows(scores), vh);
      const int proj = bld.matmul(mixed, bld.param(hp + "wo", dh, d));
      attn = attn < 0 ? proj : bld.add(attn, proj);
    }
    x = bld.add(x, attn);
    const int mh = cfg.resolved_mlp_hidden();
    const int hidden = bld.tanh_ew(
        bld.add_row(bld.matmul(x, bld.param(lp + "mlp.w1", d, mh)),
                    bld.param(lp + "mlp.bias1", 1, mh)));
    const int mlp_out =
        bld.add_row(bld.matmul(hidden, bld.param(lp + "mlp.w2", mh, d)),
                    bld.param(lp + "mlp.bias2", 1, d));
    x = bld.add(x, mlp_out);
  }

  const int zq = bld.pick_row(x, T - 1);
  const int rh = cfg.resolved_readout_hidden();
  const int mid = bld.tanh_ew(
      bld.add_row(bld.matmul(zq, bld.param(hd + "w1", d, rh)),
                  bld.param(hd + "bias1", 1, rh)));
  const int out = bld.add_row(bld.matmul(mid, bld.param(hd + "w2", rh, 1)),
                              bld.param(hd + "bias2", 1, 1));
  return bld.finish(out);
}

void init_store(ParamStore& store, std::uint64_t seed) {
  for (size_t i = 0; i < store.values.size(); ++i) {
    Mat& w = store.values[i];
    const std::string& name = store.names[i];
    if (name.find("bias") != std::string::npos) {
      w.set_zero();
      continue;
    }
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(i));
    const double sigma =
        name.ends_with("pos") ? 0.1 : 1.0 / std::sqrt(double(w.rows));
    for (double& v : w.a) v = sigma * rng.normal();
  }
}

}  // namespace

void ModelConfig::validate() const {
  std::string bad;
  auto fail = [&bad](const std::string& msg) {
    if (!bad.empty()) bad += "; ";
    bad += msg;
  };
  if (b < 1) fail("block size must be at least 1");
  if (s < 1 || s > b) fail("stride must satisfy 1 <= s <= b");
  if (dim < 1) fail("state dimension must be positive");
  if (width < 2 || width % 2 != 0) fail("width must be even and at least 2");
  if (heads < 1 || (width >= 2 && width % heads != 0)) {
    fail("heads must divide the width");
  }
  if (layers < 1) fail("need at least one layer");
  if (mlp_hidden < 0 || readout_hidden < 0) fail("hidden sizes cannot be negative");
  if (!bad.empty()) throw ConfigError("model config: " + bad);
}

DhnModel::DhnModel(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  plus_ = build_tower(&store_, cfg_, Side::kPlus);
  minus_ = build_tower(&store_, cfg_, Side::kMinus);
  init_store(store_, init_seed);
}

Mat DhnModel::noise_embedding(const std::vector<double>& noise_scales) const {
  if (static_cast<int>(noise_scales.size()) != 2 * cfg_.b) {
    throw ConfigError("expected " + std::to_string(2 * cfg_.b) +
                      " noise scales, got " +
                      std::to_string(noise_scales.size()));
  }
  Mat e(cfg_.tokens(), cfg_.width);
  const int nfreq = cfg_.width / 2;
  for (int i = 0; i < 2 * cfg_.b; ++i) {
    const double alpha = noise_scales[static_cast<size_t>(i)];
    for (int k = 0; k < nfreq; ++k) {
      const double omega =
          std::numbers::pi *
          std::pow(100.0, nfreq == 1 ? 0.0 : double(k) / (nfreq - 1));
      e(i, 2 * k) = std::sin(alpha * omega);
      e(i, 2 * k + 1) = std::cos(alpha * omega);
    }
  }
  return e;  // latent-token row stays zero
}

double DhnModel::eval_grad(Side side, const Mat& q_block, const Mat& p_block,
                           const Mat& z, const std::vector<double>& noise_scales,
                           Mat* dq, Mat* dp) const {
  if (q_block.rows != cfg_.b || q_block.cols != cfg_.dim ||
      p_block.rows != cfg_.b || p_block.cols != cfg_.dim) {
    throw ConfigError("block shape mismatch: expected " +
                      std::to_string(cfg_.b) + "x" + std::to_string(cfg_.dim));
  }
  if (z.rows != 1 || z.cols != cfg_.width) {
    throw ConfigError("latent width mismatch: expected 1x" +
                      std::to_string(cfg_.width));
  }
  const Graph& g = graph(side);
  const Mat emb = noise_embedding(noise_scales);
  Binding bind;
  bind.input = {&q_block, &p_block};
  bind.data = {&emb};
  bind.ext = {&z};
  Workspace ws;
  ws.prepare(g, false);
  if (dq == nullptr && dp == nullptr) return forward(g, store_, bind, ws);
  std::vector<Mat> grads = g.zeros_for(g.input_nodes);
  const double h = input_gradients(g, store_, bind, ws, grads);
  if (dq != nullptr) *dq = std::move(grads[0]);
  if (dp != nullptr) *dp = std::move(grads[1]);
  return h;
}

BlockPrediction h_plus_apply(const BlockHamiltonian& ham, const Mat& q_block,
                             const Mat& p_block, const Mat& z,
                             const std::vector<double>& noise_scales) {
  BlockPrediction out;
  Mat dq, dp;
  out.h = ham.eval_grad(Side::kPlus, q_block, p_block, z, noise_scales, &dq, &dp);
  out.q = std::move(dp);
  out.p = std::move(dq);
  return out;
}

BlockPrediction h_minus_apply(const BlockHamiltonian& ham, const Mat& q_block,
                              const Mat& p_block, const Mat& z,
                              const std::vector<double>& noise_scales) {
  BlockPrediction out;
  Mat dq, dp;
  out.h = ham.eval_grad(Side::kMinus, q_block, p_block, z, noise_scales, &dq, &dp);
  for (double& v : dp.a) v = -v;
  for (double& v : dq.a) v = -v;
  out.q = std::move(dp);
  out.p = std::move(dq);
  return out;
}

namespace {

json config_to_json(const ModelConfig& cfg) {
  return json{{"system", system_name(cfg.kind)},
              {"b", cfg.b},
              {"s", cfg.s},
              {"dim", cfg.dim},
              {"width", cfg.width},
              {"heads", cfg.heads},
              {"layers", cfg.layers},
              {"mlp_hidden", cfg.mlp_hidden},
              {"readout_hidden", cfg.readout_hidden},
              {"shared_trunk", cfg.shared_trunk}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.kind = system_from_name(j.at("system").get<std::string>());
  cfg.b = j.at("b").get<int>();
  cfg.s = j.at("s").get<int>();
  cfg.dim = j.at("dim").get<int>();
  cfg.width = j.at("width").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
  cfg.readout_hidden = j.at("readout_hidden").get<int>();
  cfg.shared_trunk = j.at("shared_trunk").get<bool>();
  return cfg;
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
  if (norm.dim < 1 || norm.dim > 2) throw ConfigError("bad norm dimension");
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

}  // namespace

void save_checkpoint(const DhnModel& model, const Mat& codebook,
                     const NormStats& norm, const std::string& prefix) {
  if (codebook.rows > 0 && codebook.cols != model.config().width) {
    throw ConfigError("codebook width does not match the model");
  }
  const ParamStore& store = model.params();
  json meta{{"version", kVersion},
            {"magic", kMagic},
            {"config", config_to_json(model.config())},
            {"codebook", {{"rows", codebook.rows}, {"cols", codebook.cols}}},
            {"norm", norm_to_json(norm)}};
  meta["params"] = json::array();
  for (size_t i = 0; i < store.names.size(); ++i) {
    meta["params"].push_back(json{{"name", store.names[i]},
                                  {"rows", store.values[i].rows},
                                  {"cols", store.values[i].cols}});
  }
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

Checkpoint load_checkpoint(const std::string& prefix) {
  std::ifstream jf(prefix + ".json");
  if (!jf) throw ConfigError("cannot open " + prefix + ".json");
  json meta;
  try {
    meta = json::parse(jf);
  } catch (const json::exception& e) {
    throw ConfigError("bad checkpoint metadata: " + std::string(e.what()));
  }
  if (meta.value("magic", "") != kMagic) {
    throw ConfigError("not a checkpoint file: " + prefix + ".json");
  }

  Checkpoint ck;
  ck.model = std::make_unique<DhnModel>(config_from_json(meta.at("config")), 0);
  ck.norm = norm_from_json(meta.at("norm"));

  const ParamStore& store = ck.model->params();
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
  for (Mat& w : ck.model->params().values) read_mat(bf, w);
  ck.codebook.resize(meta.at("codebook").at("rows").get<int>(),
                     meta.at("codebook").at("cols").get<int>());
  read_mat(bf, ck.codebook);
  if (!bf) throw ConfigError("checkpoint payload truncated");
  bf.get();
  if (!bf.eof()) throw ConfigError("checkpoint payload has trailing bytes");

  for (const Mat& w : ck.model->params().values) {
    if (!w.all_finite()) throw NumericError("checkpoint holds non-finite weights");
  }
  if (!ck.codebook.all_finite()) {
    throw NumericError("checkpoint holds non-finite latent codes");
  }
  return ck;
}

}  // namespace dhn
