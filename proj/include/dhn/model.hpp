#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dhn/dataset.hpp"
#include "dhn/graph.hpp"

namespace dhn {

// Which discrete Hamiltonian an evaluation refers to. The plus operator ties
// Q over [t, t+b) to P over [t+s, t+s+b); the minus operator ties Q over
// [t+s, t+s+b) to P over [t, t+b).
enum class Side { kPlus, kMinus };

struct ModelConfig {
  SystemKind kind = SystemKind::kSingle;
  int b = 2;
  int s = 1;
  int dim = 1;
  int width = 128;
  int heads = 4;
  int layers = 2;
  int mlp_hidden = 0;     // 0 resolves to 4 * width
  int readout_hidden = 0; // 0 resolves to width
  bool shared_trunk = true;

  int tokens() const { return 2 * b + 1; }
  int resolved_mlp_hidden() const { return mlp_hidden > 0 ? mlp_hidden : 4 * width; }
  int resolved_readout_hidden() const { return readout_hidden > 0 ? readout_hidden : width; }
  void validate() const;
};

// A scalar function of (Q block, P block, latent row, per-state noise scales)
// together with its gradients w.r.t. the two blocks. Implemented by the
// transformer below and by closed-form stand-ins in tests.
class BlockHamiltonian {
 public:
  virtual ~BlockHamiltonian() = default;
  virtual int block_size() const = 0;
  virtual int state_dim() const = 0;
  virtual int latent_dim() const = 0;
  // Returns H; when non-null, dq/dp receive the gradients of H w.r.t. the Q
  // and P arguments (overwritten, shape [b x dim]).
  virtual double eval_grad(Side side, const Mat& q_block, const Mat& p_block,
                           const Mat& z, const std::vector<double>& noise_scales,
                           Mat* dq, Mat* dp) const = 0;
};

struct BlockPrediction {
  Mat q;  // plus: states over [t+s, t+s+b); minus: states over [t, t+b)
  Mat p;  // plus: states over [t, t+b);     minus: states over [t+s, t+s+b)
  double h = 0.0;
};

// q_block covers [t, t+b), p_block covers [t+s, t+s+b).
// Predicts Q over the shifted span and P over the base span as gradients of H.
BlockPrediction h_plus_apply(const BlockHamiltonian& ham, const Mat& q_block,
                             const Mat& p_block, const Mat& z,
                             const std::vector<double>& noise_scales);

// q_block covers [t+s, t+s+b), p_block covers [t, t+b).
// Predicts Q over the base span and P over the shifted span as negated
// gradients of H.
BlockPrediction h_minus_apply(const BlockHamiltonian& ham, const Mat& q_block,
                              const Mat& p_block, const Mat& z,
                              const std::vector<double>& noise_scales);

// Two-layer full-attention transformer over the token sequence
// [q_0..q_{b-1}, p_0..p_{b-1}, z]; the latent row is the query token whose
// output position feeds a small read-out head producing the scalar H. The
// plus and minus operators are separate read-out heads over one trunk (or two
// full towers when shared_trunk is off), always built against a single
// parameter store.
class DhnModel : public BlockHamiltonian {
 public:
  DhnModel(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Graph& graph(Side side) const {
    return side == Side::kPlus ? plus_ : minus_;
  }

  // Sinusoidal embedding of the 2b per-state noise scales, one row per token;
  // the latent-token row stays zero. Bound as the graph's only data leaf.
  Mat noise_embedding(const std::vector<double>& noise_scales) const;

  std::int64_t weight_count() const { return store_.scalar_count(); }

  int block_size() const override { return cfg_.b; }
  int state_dim() const override { return cfg_.dim; }
  int latent_dim() const override { return cfg_.width; }
  double eval_grad(Side side, const Mat& q_block, const Mat& p_block,
                   const Mat& z, const std::vector<double>& noise_scales,
                   Mat* dq, Mat* dp) const override;

 private:
  ModelConfig cfg_;
  ParamStore store_;
  Graph plus_;
  Graph minus_;
};

// On-disk container: config + normalization + every weight array + codebook,
// JSON header next to a little-endian float64 payload.
struct Checkpoint {
  std::unique_ptr<DhnModel> model;
  Mat codebook;  // one latent row per trajectory
  NormStats norm;
};

void save_checkpoint(const DhnModel& model, const Mat& codebook,
                     const NormStats& norm, const std::string& prefix);
Checkpoint load_checkpoint(const std::string& prefix);

}  // namespace dhn
