#pragma once

#include "metakkl/sim.hpp"

#include <optional>

namespace metakkl {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Linear filter dz/dt = A z + B y with diagonal Hurwitz A.
struct ObserverDesign {
  int dz = 0;
  Vector a_diag;     // diagonal of A, all entries < 0
  Matrix b;          // dz x dy
  double eig_min_abs = 0.0;
  double cond_v = 1.0;

  int dy() const { return static_cast<int>(b.cols()); }
  Matrix a() const { return a_diag.asDiagonal(); }
};

struct BackwardSamplingConfig {
  double epsilon = 1e-6;
  /// Bound on |z(tau)|; a nonpositive value selects the steady-state bound
  /// estimated from the simulated output.
  double z_norm_bound = 0.0;
  double safety_factor = 2.0;
  double tau = 0.0;
};

/// A = -diag(1, ..., dz), B = ones, dz = 2 dx + 1.
ObserverDesign default_design(int dx, int dy = 1);

/// Checks Hurwitz and controllability conditions for a diagonal design.
void validate_design(const ObserverDesign& design);

/// Horizon tau <= 0 after which the homogeneous response of a state bounded
/// by `cfg.z_norm_bound` has decayed below `cfg.epsilon`.
double compute_tau(const ObserverDesign& design,
                   const BackwardSamplingConfig& cfg);

/// Steady-state bound sqrt(sum_i (|b_i| y_sup / |a_i|)^2) times `safety`.
double steady_state_bound(const ObserverDesign& design, double y_sup,
                          double safety);

Vector observer_rhs(const ObserverDesign& design, const Vector& z,
                    const Vector& y);

/// Integrates the filter over the sample grid of `y_samples` (one row per
/// sample); y is linearly interpolated for the RK4 half steps.
Trajectory run_observer(const ObserverDesign& design, const Vector& z0,
                        const Matrix& y_samples, double dt, double t0 = 0.0);

struct BackwardSample {
  Vector z0;
  Trajectory x_traj;  // forward-ordered over [tau, 0]
  Trajectory z_traj;
  double tau = 0.0;   // realised horizon, a multiple of -dt
  double z_norm_bound = 0.0;
};

/// Simulates x backward over [tau, 0], then the filter forward from z(tau)
/// driven by h(x); the final filter state approximates F(x0).
BackwardSample backward_sample_init(const SystemModel& model,
                                    const ObserverDesign& design,
                                    const Vector& x0,
                                    const BackwardSamplingConfig& cfg,
                                    double dt,
                                    const std::optional<Vector>& z_tau = {});

}  // namespace metakkl
