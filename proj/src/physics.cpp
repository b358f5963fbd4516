#include "dhn/physics.hpp"

#include <cmath>
#include <string>

namespace dhn {
namespace {

bool finite2(const std::array<double, 2>& v) {
  return std::isfinite(v[0]) && std::isfinite(v[1]);
}

}  // namespace

const char* system_name(SystemKind kind) {
  return kind == SystemKind::kSingle ? "single" : "double";
}

SystemKind system_from_name(std::string_view name) {
  if (name == "single") return SystemKind::kSingle;
  if (name == "double") return SystemKind::kDouble;
  throw ConfigError("unknown system '" + std::string(name) +
                    "' (expected single or double)");
}

void SystemParams::validate() const {
  if (m1 <= 0.0 || l1 <= 0.0 ||
      (kind == SystemKind::kDouble && (m2 <= 0.0 || l2 <= 0.0))) {
    throw ConfigError("masses and lengths must be positive");
  }
  if (g <= 0.0) throw ConfigError("g must be positive");
}

double lagrangian(const SystemParams& sp, const std::array<double, 2>& q,
                  const std::array<double, 2>& qdot) {
  if (sp.kind == SystemKind::kSingle) {
    return 0.5 * sp.m1 * sp.l1 * sp.l1 * qdot[0] * qdot[0] -
           sp.m1 * sp.g * sp.l1 * (1.0 - std::cos(q[0]));
  }
  const double c = std::cos(q[0] - q[1]);
  return 0.5 * (sp.m1 + sp.m2) * sp.l1 * sp.l1 * qdot[0] * qdot[0] +
         0.5 * sp.m2 * sp.l2 * sp.l2 * qdot[1] * qdot[1] +
         sp.m2 * sp.l1 * sp.l2 * qdot[0] * qdot[1] * c +
         (sp.m1 + sp.m2) * sp.g * sp.l1 * std::cos(q[0]) +
         sp.m2 * sp.g * sp.l2 * std::cos(q[1]);
}

std::array<double, 2> momenta(const SystemParams& sp,
                              const std::array<double, 2>& q,
                              const std::array<double, 2>& qdot) {
  if (sp.kind == SystemKind::kSingle) {
    return {sp.m1 * sp.l1 * sp.l1 * qdot[0], 0.0};
  }
  const double c = std::cos(q[0] - q[1]);
  const double coupling = sp.m2 * sp.l1 * sp.l2 * c;
  return {(sp.m1 + sp.m2) * sp.l1 * sp.l1 * qdot[0] + coupling * qdot[1],
          sp.m2 * sp.l2 * sp.l2 * qdot[1] + coupling * qdot[0]};
}

std::array<double, 2> velocities_from_momenta(const SystemParams& sp,
                                              const std::array<double, 2>& q,
                                              const std::array<double, 2>& p) {
  if (sp.kind == SystemKind::kSingle) {
    return {p[0] / (sp.m1 * sp.l1 * sp.l1), 0.0};
  }
  // 2x2 mass matrix [[a, b], [b, d]]; det >= m1*m2*l1^2*l2^2 > 0.
  const double c = std::cos(q[0] - q[1]);
  const double a = (sp.m1 + sp.m2) * sp.l1 * sp.l1;
  const double b = sp.m2 * sp.l1 * sp.l2 * c;
  const double d = sp.m2 * sp.l2 * sp.l2;
  const double det = a * d - b * b;
  if (!(det > 0.0) || !std::isfinite(det)) {
    throw NumericError("singular mass matrix");
  }
  return {(d * p[0] - b * p[1]) / det, (a * p[1] - b * p[0]) / det};
}

double total_energy(const SystemParams& sp, const PhasePoint& x) {
  const std::array<double, 2> qdot = velocities_from_momenta(sp, x.q, x.p);
  const double kinetic = 0.5 * (x.p[0] * qdot[0] + x.p[1] * qdot[1]);
  if (sp.kind == SystemKind::kSingle) {
    return kinetic + sp.m1 * sp.g * sp.l1 * (1.0 - std::cos(x.q[0]));
  }
  return kinetic +
         (sp.m1 + sp.m2) * sp.g * sp.l1 * (1.0 - std::cos(x.q[0])) +
         sp.m2 * sp.g * sp.l2 * (1.0 - std::cos(x.q[1]));
}

PhaseVelocity phase_velocity(const SystemParams& sp, const PhasePoint& x) {
  PhaseVelocity v;
  v.dq = velocities_from_momenta(sp, x.q, x.p);
  if (sp.kind == SystemKind::kSingle) {
    v.dp[0] = -sp.m1 * sp.g * sp.l1 * std::sin(x.q[0]);
    return v;
  }
  // dp/dt = dL/dq at fixed momenta
  const double s = std::sin(x.q[0] - x.q[1]);
  const double cross = sp.m2 * sp.l1 * sp.l2 * v.dq[0] * v.dq[1] * s;
  v.dp[0] = -cross - (sp.m1 + sp.m2) * sp.g * sp.l1 * std::sin(x.q[0]);
  v.dp[1] = cross - sp.m2 * sp.g * sp.l2 * std::sin(x.q[1]);
  return v;
}

const char* integrator_name(Integrator m) {
  switch (m) {
    case Integrator::kRk4: return "rk4";
    case Integrator::kLeapfrog: return "leapfrog";
    case Integrator::kEuler: return "euler";
  }
  return "?";
}

Integrator integrator_from_name(std::string_view name) {
  if (name == "rk4") return Integrator::kRk4;
  if (name == "leapfrog") return Integrator::kLeapfrog;
  if (name == "euler") return Integrator::kEuler;
  throw ConfigError("unknown integrator '" + std::string(name) + "'");
}

PhasePoint initial_condition(const SystemParams& sp) {
  PhasePoint x;
  const double half_pi = std::acos(0.0);
  x.q[0] = half_pi;
  if (sp.kind == SystemKind::kDouble) x.q[1] = half_pi;
  return x;
}

namespace {

PhasePoint axpy_state(const PhasePoint& y, double h, const PhaseVelocity& v) {
  PhasePoint r = y;
  for (int i = 0; i < 2; ++i) {
    r.q[i] += h * v.dq[i];
    r.p[i] += h * v.dp[i];
  }
  return r;
}

PhasePoint rk4_step(const SystemParams& sp, const PhasePoint& y, double dt) {
  const PhaseVelocity k1 = phase_velocity(sp, y);
  const PhaseVelocity k2 = phase_velocity(sp, axpy_state(y, 0.5 * dt, k1));
  const PhaseVelocity k3 = phase_velocity(sp, axpy_state(y, 0.5 * dt, k2));
  const PhaseVelocity k4 = phase_velocity(sp, axpy_state(y, dt, k3));
  PhasePoint r = y;
  for (int i = 0; i < 2; ++i) {
    r.q[i] += dt / 6.0 * (k1.dq[i] + 2.0 * k2.dq[i] + 2.0 * k3.dq[i] + k4.dq[i]);
    r.p[i] += dt / 6.0 * (k1.dp[i] + 2.0 * k2.dp[i] + 2.0 * k3.dp[i] + k4.dp[i]);
  }
  return r;
}

// kick-drift-kick; exact Stormer-Verlet for the separable single pendulum,
// semi-explicit for the coupled double pendulum
PhasePoint leapfrog_step(const SystemParams& sp, const PhasePoint& y,
                         double dt) {
  PhasePoint half = y;
  const PhaseVelocity v0 = phase_velocity(sp, y);
  for (int i = 0; i < 2; ++i) half.p[i] += 0.5 * dt * v0.dp[i];
  const PhaseVelocity vq = phase_velocity(sp, half);
  for (int i = 0; i < 2; ++i) half.q[i] += dt * vq.dq[i];
  const PhaseVelocity v1 = phase_velocity(sp, half);
  for (int i = 0; i < 2; ++i) half.p[i] += 0.5 * dt * v1.dp[i];
  return half;
}

PhasePoint euler_step(const SystemParams& sp, const PhasePoint& y, double dt) {
  return axpy_state(y, dt, phase_velocity(sp, y));
}

PhasePoint method_step(const SystemParams& sp, const PhasePoint& y, double dt,
                       Integrator m) {
  switch (m) {
    case Integrator::kRk4: return rk4_step(sp, y, dt);
    case Integrator::kLeapfrog: return leapfrog_step(sp, y, dt);
    case Integrator::kEuler: return euler_step(sp, y, dt);
  }
  throw ConfigError("bad integrator");
}

[[noreturn]] void throw_step(int k) {
  throw NumericError("non-finite state at step " + std::to_string(k));
}

}  // namespace

Trajectory integrate(const SystemParams& sp, const PhasePoint& init, double dt,
                     int steps, Integrator method) {
  sp.validate();
  if (steps < 1) throw ConfigError("integrate needs steps >= 1");
  if (dt < 0.0) throw ConfigError("integrate needs dt >= 0");
  Trajectory tr;
  tr.params = sp;
  tr.dt = dt;
  tr.states.reserve(static_cast<size_t>(steps) + 1);
  tr.states.push_back(init);
  PhasePoint y = init;
  for (int k = 1; k <= steps; ++k) {
    y = method_step(sp, y, dt, method);
    if (!finite2(y.q) || !finite2(y.p)) throw_step(k);
    tr.states.push_back(y);
  }
  return tr;
}

Trajectory integrate_fine(const SystemParams& sp, const PhasePoint& init,
                          double dt, int n_states, int substeps) {
  sp.validate();
  if (n_states < 1 || substeps < 1 || dt <= 0.0) {
    throw ConfigError("integrate_fine needs n_states, substeps >= 1, dt > 0");
  }
  Trajectory tr;
  tr.params = sp;
  tr.dt = dt;
  tr.states.reserve(static_cast<size_t>(n_states));
  tr.states.push_back(init);
  PhasePoint y = init;
  const double h = dt / substeps;
  for (int k = 1; k < n_states; ++k) {
    for (int s = 0; s < substeps; ++s) y = rk4_step(sp, y, h);
    if (!finite2(y.q) || !finite2(y.p)) throw_step(k);
    tr.states.push_back(y);
  }
  return tr;
}

}  // namespace dhn
