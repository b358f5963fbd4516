#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dhn/dataset.hpp"
#include "dhn/denoise.hpp"
#include "dhn/model.hpp"

namespace dhn {

// Adam with bias correction, one moment pair per parameter tensor.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Mat> m, v;
  std::int64_t t = 0;

  void init(const std::vector<Mat>& like);
  void step(std::vector<Mat>& w, const std::vector<Mat>& g);
};

// Adam over the rows of one matrix with per-row step counts, used for the
// codebook where a batch touches only the sampled trajectories' rows.
struct RowAdam {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Mat m, v;
  std::vector<std::int64_t> t;

  void init(int rows, int cols);
  void step_row(Mat& w, int row, const double* g);
};

struct TrainConfig {
  ModelConfig model;  // kind and dim are overwritten from the dataset
  int schedule_steps = 10;
  MaskKind mask = MaskKind::kAutoregressive;
  double weight_lr = 1e-3;
  double code_lr = 1e-2;
  double lr_decay = 1.0;  // per-epoch multiplicative factor; 1 = constant
  int batch = 64;
  int epochs = 200;
  // 0 sizes an epoch so every (trajectory, start) block is visited once in
  // expectation; otherwise caps the number of optimizer steps per epoch.
  int max_steps_per_epoch = 0;
  std::uint64_t seed = 1;
  int threads = 0;
  std::string loss_csv;           // per-epoch loss table; empty = not written
  std::string checkpoint_prefix;  // empty = no checkpoints
  int checkpoint_every = 0;       // extra saves every k epochs; 0 = final only

  void validate() const;
};

// Byte hash over every parameter tensor, used to assert frozen weights.
std::uint64_t store_checksum(const ParamStore& store);

struct EpochStat {
  int epoch = 0;        // 1-based
  double loss = 0.0;    // mean per-block loss over the epoch
  double coherence = 0.0;  // part of the loss from doubly-constrained rows
};

struct BlockLossParts {
  double total = 0.0;
  double plus = 0.0;       // forward-operator half
  double minus = 0.0;      // mirrored half
  double coherence = 0.0;  // overlap-row contribution (zero when s = b)
};

// Mean-squared block reconstruction loss for one span of b+s states:
// corrupted inputs against clean targets, forward and mirrored operators
// summed, each of the four prediction terms averaged per element.
BlockLossParts block_loss(const DhnModel& model, const Mat& z,
                          const Mat& clean_span, const CorruptionDraw& draw,
                          const NoiseSchedule& sched);

// Same loss with gradients accumulated (+=) into the optional sinks:
// param_grads must be store-shaped, z_grad [1 x width].
BlockLossParts block_loss_grad(const DhnModel& model, const Mat& z,
                               const Mat& clean_span,
                               const CorruptionDraw& draw,
                               const NoiseSchedule& sched,
                               std::vector<Mat>* param_grads, Mat* z_grad);

struct TrainResult {
  std::unique_ptr<DhnModel> model;
  Mat codebook;  // row i = latent code of training trajectory i
  std::vector<EpochStat> history;
};

// Joint stochastic optimization of weights and codebook. The sampling plan
// (trajectory, block start, corruption) is drawn once from the seed and
// revisited every epoch, so a frozen optimizer reproduces its loss exactly
// and runs are deterministic for any thread count.
TrainResult train(const Dataset& data, const TrainConfig& cfg);

struct LatentFit {
  Mat z;              // [1 x width]
  double loss = 0.0;  // mean clean-span loss at the returned code
};

// Optimizes a single latent code on clean observed spans with the weights
// frozen (asserted by checksum). Full-batch over the given spans, zero
// initialization; zero steps returns the initialization.
LatentFit fit_latent(const DhnModel& model, const std::vector<Mat>& spans,
                     int steps, double lr);

// Convenience: enumerates every aligned span inside a contiguous window of
// observed states ([rows x 2 dim], normalized) and fits on all of them.
LatentFit fit_latent_window(const DhnModel& model, const Mat& window,
                            int steps, double lr);

void write_loss_csv(const std::string& path,
                    const std::vector<EpochStat>& history);

}  // namespace dhn
