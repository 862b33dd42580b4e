#include "metakkl/observer.hpp"

#include <cmath>
#include <string>

namespace metakkl {

ObserverDesign default_design(int dx, int dy) {
  if (dx < 1 || dy < 1)
    throw ConfigError("default_design: dx and dy must be >= 1");
  ObserverDesign d;
  d.dz = 2 * dx + 1;
  d.a_diag = -Vector::LinSpaced(d.dz, 1.0, static_cast<double>(d.dz));
  d.b = Matrix::Ones(d.dz, dy);
  d.eig_min_abs = 1.0;
  d.cond_v = 1.0;
  return d;
}

void validate_design(const ObserverDesign& design) {
  if (design.a_diag.size() != design.dz || design.b.rows() != design.dz)
    throw ConfigError("observer design: inconsistent dimensions");
  if ((design.a_diag.array() >= 0).any())
    throw ConfigError("observer design: A must be Hurwitz");
  for (int i = 0; i < design.dz; ++i)
    for (int j = i + 1; j < design.dz; ++j)
      if (design.a_diag(i) == design.a_diag(j))
        throw ConfigError("observer design: diagonal of A must be distinct");
  for (int i = 0; i < design.dz; ++i)
    if ((design.b.row(i).array() == 0).all())
      throw ConfigError("observer design: (A, B) not controllable, row " +
                        std::to_string(i) + " of B is zero");
}

double compute_tau(const ObserverDesign& design,
                   const BackwardSamplingConfig& cfg) {
  if (!(cfg.epsilon > 0))
    throw ConfigError("compute_tau: epsilon must be positive");
  if (!(design.eig_min_abs > 0))
    throw ConfigError("compute_tau: eig_min_abs must be positive");
  const double scale = design.cond_v * cfg.z_norm_bound;
  if (cfg.epsilon >= scale) return 0.0;
  return std::log(cfg.epsilon / scale) / design.eig_min_abs;
}

double steady_state_bound(const ObserverDesign& design, double y_sup,
                          double safety) {
  double s = 0.0;
  for (int i = 0; i < design.dz; ++i) {
    const double gain = design.b.row(i).cwiseAbs().sum() / std::abs(design.a_diag(i));
    s += gain * gain;
  }
  return safety * y_sup * std::sqrt(s);
}

Vector observer_rhs(const ObserverDesign& design, const Vector& z,
                    const Vector& y) {
  if (z.size() != design.dz || y.size() != design.b.cols())
    throw std::invalid_argument(
        "observer_rhs: got z of length " + std::to_string(z.size()) +
        " and y of length " + std::to_string(y.size()) + " for dz=" +
        std::to_string(design.dz) + ", dy=" + std::to_string(design.b.cols()));
  return design.a_diag.cwiseProduct(z) + design.b * y;
}

Trajectory run_observer(const ObserverDesign& design, const Vector& z0,
                        const Matrix& y_samples, double dt, double t0) {
  if (!(dt > 0)) throw std::invalid_argument("run_observer: dt must be positive");
  if (y_samples.rows() < 1)
    throw std::invalid_argument("run_observer: need at least one output sample");
  if (z0.size() != design.dz)
    throw std::invalid_argument("run_observer: z0 has wrong length");
  const Eigen::Index n = y_samples.rows();
  Trajectory traj;
  traj.times.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) traj.times(k) = t0 + static_cast<double>(k) * dt;
  traj.states.resize(n, design.dz);
  traj.states.row(0) = z0.transpose();

  Vector z = z0;
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    const Vector y0 = y_samples.row(k).transpose();
    const Vector y1 = y_samples.row(k + 1).transpose();
    const double tk = traj.times(k);
    // Linear interpolation of the sampled output inside the step.
    auto field = [&](const Vector& zz, double t) {
      const double s = (t - tk) / dt;
      return observer_rhs(design, zz, (1 - s) * y0 + s * y1);
    };
    z = rk4_step(field, z, tk, dt, static_cast<long>(k + 1));
    if (z.norm() > 1e6)
      throw SimulationError("run_observer: filter state diverged",
                            static_cast<long>(k + 1));
    traj.states.row(k + 1) = z.transpose();
  }
  return traj;
}

namespace {

Trajectory backward_states(const SystemModel& model, const Vector& x0,
                           double tau, double dt) {
  const long steps = tau < 0 ? static_cast<long>(std::ceil(-tau / dt - 1e-9)) : 0;
  return simulate(model, x0, SimGrid{0.0, -dt, steps});
}

}  // namespace

BackwardSample backward_sample_init(const SystemModel& model,
                                    const ObserverDesign& design,
                                    const Vector& x0,
                                    const BackwardSamplingConfig& cfg,
                                    double dt,
                                    const std::optional<Vector>& z_tau) {
  if (!(dt > 0))
    throw std::invalid_argument("backward_sample_init: dt must be positive");

  Trajectory back;
  double tau = 0.0;
  double bound = cfg.z_norm_bound;
  if (cfg.z_norm_bound > 0) {
    tau = compute_tau(design, cfg);
    back = backward_states(model, x0, tau, dt);
  } else {
    // The bound depends on sup|y| over [tau, 0], which depends on tau: grow
    // the horizon until the estimate stops increasing.
    BackwardSamplingConfig probe = cfg;
    probe.z_norm_bound = 1.0;
    tau = compute_tau(design, probe);
    for (int iter = 0; iter < 16; ++iter) {
      back = backward_states(model, x0, tau, dt);
      const double y_sup = model.outputs(back.states).cwiseAbs().maxCoeff();
      probe.z_norm_bound = steady_state_bound(design, y_sup, cfg.safety_factor);
      const double next = probe.z_norm_bound > 0 ? compute_tau(design, probe) : 0.0;
      bound = probe.z_norm_bound;
      const double covered = -static_cast<double>(back.size() - 1) * dt;
      if (next >= covered) {
        tau = next;
        back = backward_states(model, x0, tau, dt);
        break;
      }
      tau = next;
    }
  }

  BackwardSample out;
  out.z_norm_bound = bound;
  const Eigen::Index n = back.size();
  out.tau = -static_cast<double>(n - 1) * dt;
  out.x_traj.times.resize(n);
  out.x_traj.states.resize(n, model.dx);
  for (Eigen::Index k = 0; k < n; ++k) {
    out.x_traj.times(k) = out.tau + static_cast<double>(k) * dt;
    out.x_traj.states.row(k) = back.states.row(n - 1 - k);
  }
  out.x_traj.times(n - 1) = 0.0;

  const Matrix y = model.outputs(out.x_traj.states);
  const Vector zt = z_tau ? *z_tau : Vector::Zero(design.dz);
  out.z_traj = run_observer(design, zt, y, dt, out.tau);
  out.z0 = out.z_traj.states.row(n - 1).transpose();
  return out;
}

}  // namespace metakkl
