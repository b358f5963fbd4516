#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dhn/dataset.hpp"
#include "dhn/denoise.hpp"
#include "dhn/linalg.hpp"
#include "dhn/model.hpp"
#include "dhn/physics.hpp"
#include "dhn/training.hpp"

namespace dhn {

// Fills the masked-out rows of one span of states and returns the completed
// span; rows with mask 1 must pass through unchanged. t0 is the absolute index
// of the span's first row, so stand-ins (e.g. a ground-truth oracle in tests)
// can look up their answer.
using SpanFiller =
    std::function<Mat(const Mat& span, const std::vector<int>& mask, int t0)>;

// Extends the prefix by `horizon` rows: each slide feeds the last b states to
// the filler and appends the s new ones, which become known states for later
// slides. The prefix must cover at least one block; horizon 0 returns it
// unchanged.
Mat slide_rollout(int b, int s, const SpanFiller& fill, const Mat& prefix,
                  int horizon);

struct RolloutReport {
  int given = 0;
  std::vector<int> trajectory_ids;
  std::vector<double> state_mse;       // per predicted step, physical units
  std::vector<double> energy_rel_err;  // signed (E_t - E_true0) / E_true0
  double mean_mse = 0.0;
  double mean_energy_rel = 0.0;  // mean absolute relative energy error
};

// Scores the predicted tail of a trajectory in physical units; rows align
// with the ground truth and the energy reference is the true initial state.
RolloutReport score_rollout(const Mat& raw_pred, const Trajectory& truth,
                            int given, int trajectory_id);

// Autoregressive rollout of a trained model at a fixed latent code, scored
// against the ground truth. Deterministic in (model, z, seed).
RolloutReport rollout_forward(const DhnModel& model, const Mat& z,
                              const Trajectory& truth, const NormStats& norm,
                              int given, int horizon,
                              const NoiseSchedule& sched, std::uint64_t seed,
                              int trajectory_id);

// Mean over reports with identical geometry: the error series average
// element-wise (keeping sign), the scalar summaries average the members'
// summaries, and the id lists concatenate.
RolloutReport average_reports(const std::vector<RolloutReport>& reports);

// Cox-Stuart test for a monotone trend: pairs each element of the first half
// with its counterpart in the second (middle dropped when odd) and counts
// strict increases. p_value is the exact two-sided binomial probability of a
// count at least as lopsided under no trend.
struct TrendTest {
  int pairs = 0;     // non-tied pairs entering the count
  int positive = 0;  // pairs where the later element is strictly larger
  double p_value = 1.0;
};
TrendTest trend_test(const std::vector<double>& series);

struct CompletionResult {
  LatentFit fit;         // latent code fitted on the observed head
  RolloutReport report;  // scored continuation over the remaining rows
};

// Fits a latent on the first `given` states of an unseen trajectory (weights
// frozen) and rolls the model forward through the rest of it.
CompletionResult completion_task(const DhnModel& model, const Trajectory& truth,
                                 const NormStats& norm,
                                 const NoiseSchedule& sched, int given,
                                 int fit_steps, double fit_lr,
                                 std::uint64_t seed, int trajectory_id);

struct ProbeReport {
  double train_mse = 0.0;
  double test_mse = 0.0;
  Mat weights;  // [features + 1 x 1]; the last entry is the intercept
  std::string target = "l2/l1";
  bool rank_deficient = false;
};

// Ordinary least squares with an intercept, solved in closed form from the
// normal equations. Near-null directions of the design are dropped
// (pseudoinverse), flagged, and warned about on stderr.
ProbeReport linear_probe(const Mat& train_codes,
                         const std::vector<double>& train_labels,
                         const Mat& test_codes,
                         const std::vector<double>& test_labels);

// Regression target: ratio of the varied length to the fixed one.
std::vector<double> length_ratio_labels(const std::vector<Trajectory>& trs);

// One latent per held-out trajectory, fitted over its full window. Parallel
// and deterministic: each trajectory owns its fit.
Mat fit_test_codes(const DhnModel& model, const std::vector<Trajectory>& test,
                   const NormStats& norm, int steps, double lr, int threads);

struct SuperresConfig {
  ModelConfig model;  // geometry is pinned to b = 2, s = 1 per stage
  int schedule_steps = 10;
  int window = 64;  // training sees rows [0..window] of each trajectory
  int stride0 = 4;  // stage-0 grid spacing; power of two >= 2, divides window
  double weight_lr = 1e-3;
  double code_lr = 1e-2;
  double lr_decay = 1.0;
  int batch = 64;
  int epochs = 200;
  int max_steps_per_epoch = 0;
  std::uint64_t seed = 1;
  int threads = 0;
  std::string loss_csv;

  int stage_count() const;  // stride0 = 4 gives 3 stages (grids 4, 2, 1)
  void validate() const;
};

struct SuperresModels {
  std::vector<std::unique_ptr<DhnModel>> stages;  // coarsest grid first
  Mat codebook;  // shared across stages, row i = training trajectory i
  std::vector<EpochStat> history;
};

// Trains one model per grid spacing (stride0, stride0/2, ..., 1) against the
// shared codebook, all stages mixed into one sampling plan. Stage 0 sees
// randomly hidden states on the coarse grid so it supports latent fitting;
// finer stages always reconstruct the middle state between known neighbors.
SuperresModels train_superres(const Dataset& data, const SuperresConfig& cfg);

struct SuperresFill {
  Mat states;     // dense window, normalized units
  LatentFit fit;  // stage-0 latent fitted on the coarse rows
};

// Densifies a window given every stride0-th state: fits the latent on the
// known coarse grid, then each finer stage denoises the midpoints of the
// previous one. Rows at multiples of stride0 pass through unchanged; the
// other input rows are ignored.
SuperresFill superres_fill(const std::vector<const DhnModel*>& stages,
                           const Mat& window_states, int stride0,
                           int fit_steps, double fit_lr,
                           const NoiseSchedule& sched, std::uint64_t seed);

// Mean squared error over the rows the stages filled in (indices that are
// not multiples of stride0), physical units.
double filled_rows_mse(const Mat& raw_pred, const Mat& raw_truth, int stride0);

// Inverse of normalized_states for predicted matrices.
Mat denormalized_states(const Mat& states, const NormStats& norm);

// Held-out trajectories are reported under ids offset far past any training
// index, so metric files can be audited for split leaks.
inline constexpr int kTestIdOffset = 1000000;
inline int test_trajectory_id(int index) { return kTestIdOffset + index; }
bool ids_disjoint_from_train(const std::vector<int>& ids, int n_train);

// e.g. "rollout_single_b2s1_seed7.csv"
std::string metrics_filename(const std::string& task, SystemKind kind, int b,
                             int s, std::uint64_t seed);

// CSV writers. Every file opens with the code version and config hash and
// prints doubles with %.17g, so a rerun is byte-identical.
void write_rollout_csv(const std::string& path, const RolloutReport& report,
                       std::uint64_t config_hash);
void write_probe_csv(
    const std::string& path,
    const std::vector<std::pair<std::string, ProbeReport>>& rows,
    std::uint64_t config_hash);

}  // namespace dhn
