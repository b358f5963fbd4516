#pragma once

#include <string_view>
#include <vector>

#include "dhn/model.hpp"
#include "dhn/rng.hpp"

namespace dhn {

// Increasing noise levels α_0 = 0 < … < α_N = 1.
struct NoiseSchedule {
  std::vector<double> levels;
  int steps() const { return static_cast<int>(levels.size()) - 1; }
  void validate() const;
};

// Linear spacing: α_i = i/N.
NoiseSchedule make_schedule(int n);

enum class MaskKind { kAutoregressive, kSuperres, kRandom };
const char* mask_kind_name(MaskKind kind);
MaskKind mask_kind_from_name(std::string_view name);

// One training-time corruption over a span of b+s states: binary mask
// (1 = known), per-state schedule indices, and per-entry Gaussian noise.
struct CorruptionDraw {
  std::vector<int> mask;
  std::vector<int> scale_idx;
  Mat eps;  // [span x channels]
};

// Mask over b+s states for the given kind: autoregressive hides the last s,
// superres hides the middle s, random hides each state with probability 1/2.
std::vector<int> make_mask(MaskKind kind, int b, int s, Rng& rng);

// Draw order: mask, then schedule indices (uniform over {0..N}), then noise
// row by row.
CorruptionDraw sample_training_corruption(Rng& rng, MaskKind kind, int b,
                                          int s, int channels,
                                          const NoiseSchedule& sched);

// Per-state effective scales α·(1−M); zero at every known state.
std::vector<double> effective_scales(const NoiseSchedule& sched,
                                     const CorruptionDraw& draw);

// Per-token scales for one operator: q tokens read span positions
// [q_start, q_start+b), p tokens read [p_start, p_start+b).
std::vector<double> token_scales(const std::vector<double>& span_scales, int b,
                                 int q_start, int p_start);

// Elementwise Q̃ = (1−A′)·Q + A′·ε with A′ = A·(1−M); rows are states.
Mat corrupt(const Mat& values, const std::vector<int>& mask,
            const std::vector<double>& scales, const Mat& eps);

// Iterative inference over one span of b+stride states ([q-channels,
// p-channels] per row, normalized units). Unknown rows start as pure noise
// and are jointly denoised by the plus and minus operators, with positions
// predicted by both taking the mean; known rows are clamped throughout. The
// rng is only consulted for unknown-state draws.
Mat denoise_infer(const BlockHamiltonian& ham, int stride,
                  const Mat& known_states, const std::vector<int>& mask,
                  const Mat& z, const NoiseSchedule& sched, Rng& rng);

}  // namespace dhn
