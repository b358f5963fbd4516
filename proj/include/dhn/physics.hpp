#pragma once

#include <array>
#include <string_view>
#include <vector>

#include "dhn/common.hpp"

namespace dhn {

enum class SystemKind { kSingle, kDouble };

const char* system_name(SystemKind kind);
SystemKind system_from_name(std::string_view name);

struct SystemParams {
  SystemKind kind = SystemKind::kSingle;
  double m1 = 1.0;  // single uses m1/l1 only
  double m2 = 1.0;
  double l1 = 1.0;
  double l2 = 1.0;
  double g = 0.981;

  int dim() const { return kind == SystemKind::kSingle ? 1 : 2; }
  void validate() const;
};

// Fixed two-slot storage; only the first dim() entries are meaningful.
struct PhasePoint {
  std::array<double, 2> q{{0.0, 0.0}};
  std::array<double, 2> p{{0.0, 0.0}};
};

struct PhaseVelocity {
  std::array<double, 2> dq{{0.0, 0.0}};
  std::array<double, 2> dp{{0.0, 0.0}};
};

double lagrangian(const SystemParams& sp, const std::array<double, 2>& q,
                  const std::array<double, 2>& qdot);

std::array<double, 2> momenta(const SystemParams& sp,
                              const std::array<double, 2>& q,
                              const std::array<double, 2>& qdot);

std::array<double, 2> velocities_from_momenta(const SystemParams& sp,
                                              const std::array<double, 2>& q,
                                              const std::array<double, 2>& p);

// Kinetic plus potential energy. The potential is referenced to the hanging
// rest configuration for both systems, so reported energies are nonnegative
// and the value at the standard initial condition is strictly positive.
double total_energy(const SystemParams& sp, const PhasePoint& x);

// Symplectic gradient of the energy: dq/dt and dp/dt.
PhaseVelocity phase_velocity(const SystemParams& sp, const PhasePoint& x);

enum class Integrator { kRk4, kLeapfrog, kEuler };

const char* integrator_name(Integrator m);
Integrator integrator_from_name(std::string_view name);

struct Trajectory {
  SystemParams params;
  double dt = 0.1;
  std::vector<PhasePoint> states;
};

// All angles start at pi/2 with zero momentum.
PhasePoint initial_condition(const SystemParams& sp);

// steps method-steps of size dt from init; the result holds steps+1 states.
Trajectory integrate(const SystemParams& sp, const PhasePoint& init, double dt,
                     int steps, Integrator method);

// Ground-truth path: rk4 at dt/substeps, recording every substeps-th state,
// n_states recorded states total.
Trajectory integrate_fine(const SystemParams& sp, const PhasePoint& init,
                          double dt, int n_states, int substeps);

}  // namespace dhn
