#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dhn/dataset.hpp"
#include "dhn/graph.hpp"
#include "dhn/physics.hpp"
#include "dhn/training.hpp"

namespace dhn {

// Reference models trained and evaluated alongside the block predictor:
// a continuous-time Hamiltonian network integrated by classical schemes,
// a residual next-state stepper, and a convolutional sequence interpolator.
// All of them condition on a per-trajectory latent code.

struct HnnConfig {
  int dim = 1;     // coordinate count; states carry 2*dim channels
  int zdim = 16;   // latent width
  int hidden = 32;
  int layers = 2;  // hidden tanh layers

  void validate() const;
};

// MLP (q, p, z) -> scalar H. Smooth activations throughout, so the state
// gradient that feeds the loss and the integrators is itself differentiable.
class HnnMlp {
 public:
  HnnMlp(const HnnConfig& cfg, std::uint64_t init_seed);

  const HnnConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Graph& graph() const { return graph_; }
  std::int64_t weight_count() const { return store_.scalar_count(); }

  // H at one state row [1 x 2 dim]; grad, if non-null, receives dH/dstate.
  double eval(const Mat& state, const Mat& z, Mat* grad) const;

 private:
  HnnConfig cfg_;
  ParamStore store_;
  Graph graph_;
};

// Mean-squared violation of Hamilton's equations at one state:
// h_grad = (dH/dq, dH/dp) and deriv = (dq/dt, dp/dt), averaged per element
// of ||dH/dp - dq/dt||^2 + ||dH/dq + dp/dt||^2.
double hamiltonian_residual(const Mat& h_grad, const Mat& deriv);

double hnn_loss(const HnnMlp& net, const Mat& state, const Mat& deriv,
                const Mat& z);

// Same value with d(loss)/d(weights) and d(loss)/dz accumulated (+=) into
// the optional sinks; param_grads store-shaped, z_grad [1 x zdim].
double hnn_loss_grad(const HnnMlp& net, const Mat& state, const Mat& deriv,
                     const Mat& z, std::vector<Mat>* param_grads, Mat* z_grad);

// Continuous-time field dq/dt = dH/dp, dp/dt = -dH/dq for the integrators.
class HnnField {
 public:
  virtual ~HnnField() = default;
  virtual int dim() const = 0;
  // state [1 x 2 dim] -> (dH/dq, dH/dp) into grad [1 x 2 dim]
  virtual void h_grad(const Mat& state, Mat* grad) const = 0;
};

// Network plus a fixed latent code.
class BoundHnn : public HnnField {
 public:
  BoundHnn(const HnnMlp& net, const Mat& z);
  int dim() const override { return net_->config().dim; }
  void h_grad(const Mat& state, Mat* grad) const override;

 private:
  const HnnMlp* net_;
  const Mat* z_;
};

// Closed-form mechanical system as a field (reference runs and tests).
class AnalyticHamiltonian : public HnnField {
 public:
  explicit AnalyticHamiltonian(const SystemParams& sp) : sp_(sp) {}
  int dim() const override { return sp_.dim(); }
  void h_grad(const Mat& state, Mat* grad) const override;

 private:
  SystemParams sp_;
};

// steps integrator steps of size dt from init [1 x 2 dim]; the result holds
// steps+1 rows. Non-finite states abort with the failing step index.
Mat hnn_rollout(const HnnField& field, const Mat& init, int steps, double dt,
                Integrator method);

struct HnnTrainConfig {
  HnnConfig net;  // dim is overwritten from the dataset
  double weight_lr = 1e-3;
  double code_lr = 1e-2;
  int batch = 64;
  int epochs = 200;
  int max_steps_per_epoch = 0;  // 0 = every interior state once in expectation
  std::uint64_t seed = 1;
  int threads = 0;
  std::string loss_csv;

  void validate() const;
};

struct HnnTrainResult {
  std::unique_ptr<HnnMlp> model;
  Mat codebook;  // row i = latent code of training trajectory i
  std::vector<EpochStat> history;  // coherence column stays zero
};

// Fits H on raw states against central-difference time derivatives, jointly
// with the per-trajectory codes; same fixed sampling plan as train().
HnnTrainResult train_hnn(const Dataset& data, const HnnTrainConfig& cfg);

// Latent for a raw observed window [rows x 2 dim] (rows >= 3), weights
// frozen; derivative targets come from the window's own interior.
LatentFit fit_hnn_latent(const HnnMlp& net, const Mat& window, double dt,
                         int steps, double lr);

struct VanillaConfig {
  int dim = 1;
  int zdim = 16;
  int hidden = 32;
  int layers = 2;

  void validate() const;
};

// Residual next-state predictor on normalized states. The update head is
// zero-initialized, so an untrained net is exactly the identity map.
class VanillaNet {
 public:
  VanillaNet(const VanillaConfig& cfg, std::uint64_t init_seed);

  const VanillaConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Graph& graph() const { return graph_; }
  std::int64_t weight_count() const { return store_.scalar_count(); }

  Mat predict(const Mat& state, const Mat& z) const;  // [1 x 2 dim]
  double pair_loss(const Mat& state, const Mat& next, const Mat& z) const;
  double pair_loss_grad(const Mat& state, const Mat& next, const Mat& z,
                        std::vector<Mat>* param_grads, Mat* z_grad) const;

 private:
  VanillaConfig cfg_;
  ParamStore store_;
  Graph graph_;
};

struct VanillaTrainConfig {
  VanillaConfig net;  // dim is overwritten from the dataset
  double weight_lr = 1e-3;
  double code_lr = 1e-2;
  int batch = 64;
  int epochs = 200;
  int max_steps_per_epoch = 0;  // 0 = every adjacent pair once in expectation
  std::uint64_t seed = 1;
  int threads = 0;
  std::string loss_csv;

  void validate() const;
};

struct VanillaTrainResult {
  std::unique_ptr<VanillaNet> model;
  Mat codebook;
  std::vector<EpochStat> history;
};

// Adjacent normalized state pairs under the shared fixed sampling plan.
VanillaTrainResult train_vanilla(const Dataset& data,
                                 const VanillaTrainConfig& cfg);

// Latent for a normalized window [rows x 2 dim] (rows >= 2), weights frozen.
LatentFit fit_vanilla_latent(const VanillaNet& net, const Mat& window,
                             int steps, double lr);

// Iterated prediction; steps+1 rows, aborts with the step index if the
// state leaves the finite range.
Mat vanilla_rollout(const VanillaNet& net, const Mat& z, const Mat& init,
                    int steps);

struct ConvConfig {
  int dim = 1;
  int zdim = 16;
  int hidden = 16;
  int layers = 2;   // hidden conv blocks
  int ksize = 5;    // odd kernel width over time
  int length = 65;  // rows per window

  void validate() const;
};

// Stage grids for progressive refinement of a window: values every stride0
// rows to start with, each stage filling the midpoints of the current grid.
struct ConvStage {
  std::vector<int> known;   // rows carrying values on the stage's canvas
  std::vector<int> scored;  // rows the stage is trained to fill
};

std::vector<ConvStage> conv_stages(int length, int stride0);

// Canvas for a window: the listed rows keep their values and get a 1 in an
// extra indicator column; every other row is zero.
Mat sparse_canvas(const Mat& dense, const std::vector<int>& known);

// 1-D convolution stack over time that fills unobserved rows of a fixed
// window, one subnetwork per refinement stage against a shared parameter
// store. The latent code conditions the first layer of each stage.
class ConvNet {
 public:
  ConvNet(const ConvConfig& cfg, int n_stages, std::uint64_t init_seed);

  const ConvConfig& config() const { return cfg_; }
  int stage_count() const { return static_cast<int>(graphs_.size()); }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Graph& graph(int stage) const;
  std::int64_t weight_count() const { return store_.scalar_count(); }

  // canvas [length x 2 dim + 1] -> dense prediction [length x 2 dim]
  Mat interpolate(int stage, const Mat& canvas, const Mat& z) const;
  // Mean-squared error against target, scored rows only.
  double masked_loss(int stage, const Mat& canvas, const Mat& target,
                     const std::vector<int>& scored, const Mat& z) const;
  double masked_loss_grad(int stage, const Mat& canvas, const Mat& target,
                          const std::vector<int>& scored, const Mat& z,
                          std::vector<Mat>* param_grads, Mat* z_grad) const;

 private:
  ConvConfig cfg_;
  ParamStore store_;
  std::vector<Graph> graphs_;
};

struct ConvTrainConfig {
  ConvConfig net;   // dim is overwritten from the dataset
  int stride0 = 4;  // initial grid spacing; must reach 1 by halving
  double weight_lr = 1e-3;
  double code_lr = 1e-2;
  int batch = 32;
  int epochs = 200;
  int max_steps_per_epoch = 0;  // 0 = every window once in expectation
  std::uint64_t seed = 1;
  int threads = 0;
  std::string loss_csv;

  void validate() const;
};

struct ConvTrainResult {
  std::unique_ptr<ConvNet> model;  // one stage per grid refinement
  Mat codebook;
  std::vector<EpochStat> history;  // loss = mean over stages
};

// One window per trajectory (the first `length` states, normalized); every
// stage trains on ground-truth canvases against its own scored rows, all
// stages updating one codebook.
ConvTrainResult train_conv(const Dataset& data, const ConvTrainConfig& cfg);

// Progressive fill: stage nets applied in order on whatever rows are known
// so far. Known rows pass through unchanged; each stage's scored rows take
// its prediction, and rows no stage claims fall back to the last stage.
Mat conv_interpolate(const ConvNet& net, const std::vector<ConvStage>& stages,
                     const Mat& values, const std::vector<int>& known0,
                     const Mat& z);

struct HnnCheckpoint {
  std::unique_ptr<HnnMlp> model;
  Mat codebook;
  NormStats norm;
};

struct VanillaCheckpoint {
  std::unique_ptr<VanillaNet> model;
  Mat codebook;
  NormStats norm;
};

struct ConvCheckpoint {
  std::unique_ptr<ConvNet> model;
  Mat codebook;
  NormStats norm;
};

// prefix.json (metadata) + prefix.bin (magic + parameter payload), same
// conventions as the block-model checkpoints.
void save_hnn_checkpoint(const HnnMlp& net, const Mat& codebook,
                         const NormStats& norm, const std::string& prefix);
HnnCheckpoint load_hnn_checkpoint(const std::string& prefix);

void save_vanilla_checkpoint(const VanillaNet& net, const Mat& codebook,
                             const NormStats& norm, const std::string& prefix);
VanillaCheckpoint load_vanilla_checkpoint(const std::string& prefix);

void save_conv_checkpoint(const ConvNet& net, const Mat& codebook,
                          const NormStats& norm, const std::string& prefix);
ConvCheckpoint load_conv_checkpoint(const std::string& prefix);

}  // namespace dhn
