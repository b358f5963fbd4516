#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dhn/linalg.hpp"
#include "dhn/physics.hpp"
#include "dhn/rng.hpp"

namespace dhn {

// Per-channel standardization fitted on the train split only.
struct NormStats {
  int dim = 1;
  std::array<double, 2> q_mean{{0.0, 0.0}};
  std::array<double, 2> q_std{{1.0, 1.0}};
  std::array<double, 2> p_mean{{0.0, 0.0}};
  std::array<double, 2> p_std{{1.0, 1.0}};

  double norm_q(double v, int ch) const { return (v - q_mean[ch]) / q_std[ch]; }
  double norm_p(double v, int ch) const { return (v - p_mean[ch]) / p_std[ch]; }
  double denorm_q(double v, int ch) const { return v * q_std[ch] + q_mean[ch]; }
  double denorm_p(double v, int ch) const { return v * p_std[ch] + p_mean[ch]; }
};

struct Dataset {
  SystemKind kind = SystemKind::kSingle;
  double dt = 0.1;
  std::uint64_t seed = 0;
  int n_states = 128;
  int substeps = 100;
  std::vector<Trajectory> train, test;
  NormStats norm;

  int dim() const { return kind == SystemKind::kSingle ? 1 : 2; }
};

struct GenSpec {
  SystemKind kind = SystemKind::kSingle;
  std::uint64_t seed = 7;
  int n_train = 1000;
  int n_test = 200;
  double dt = 0.1;
  int n_states = 128;
  int substeps = 100;
  int threads = 0;
};

// One uniform draw of the varied length per trajectory (single: l in
// [0.5, 1.0]; double: l2 in [0.5, 1.5], l1 = 1, unit masses).
SystemParams sample_params(SystemKind kind, Rng& rng);

Dataset generate_dataset(const GenSpec& spec);

NormStats compute_norm_stats(const std::vector<Trajectory>& train, int dim);

// [time x 2*dim] with channels q0..q_{dim-1}, p0..p_{dim-1}, standardized.
Mat normalized_states(const Trajectory& tr, const NormStats& norm);

// Same layout without standardization.
Mat raw_states(const Trajectory& tr);

PhasePoint denormalize_state(const double* row, const NormStats& norm);

double max_rel_energy_drift(const Trajectory& tr);

// prefix.json (metadata) + prefix.bin (magic + little-endian float64 payload,
// layout [trajectory][time][q then p][coordinate], train split then test).
void save_dataset(const Dataset& ds, const std::string& prefix);
Dataset load_dataset(const std::string& prefix);

}  // namespace dhn
