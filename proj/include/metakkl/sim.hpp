#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>

namespace metakkl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when an integration produces non-finite values or leaves the
/// divergence bound. Carries the offending step index.
class SimulationError : public std::runtime_error {
 public:
  SimulationError(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"),
        step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class InvalidState : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Autonomous plant dx/dt = rhs(x, param), y = output(x).
struct SystemModel {
  int dx = 0;
  int dy = 0;
  std::function<Vector(const Vector&, const Vector&)> rhs;
  std::function<Vector(const Vector&)> output;
  Vector param;

  Vector f(const Vector& x) const { return rhs(x, param); }
  Vector h(const Vector& x) const { return output(x); }

  /// Applies h to every row of `states`.
  Matrix outputs(const Matrix& states) const;
  /// Applies f to every row of `states`.
  Matrix vector_field(const Matrix& states) const;
};

struct SimGrid {
  double t0 = 0.0;
  double dt = 0.01;
  long n_steps = 1;
};

/// Sampled trajectory; row k of `states` belongs to `times[k]`.
struct Trajectory {
  Vector times;
  Matrix states;

  Eigen::Index size() const { return times.size(); }
};

struct NoiseSpec {
  double var_x = 0.0;
  double var_y = 0.0;
  std::uint64_t seed = 0;
};

Vector duffing_rhs(const Vector& x, double lambda);
Vector duffing_output(const Vector& x);

/// Duffing variant dx = lambda [x2^3, -x1], y = x1.
SystemModel duffing_model(double lambda);

/// First integral x1^2/2 + x2^4/4 of the Duffing variant.
template <typename Derived>
typename Derived::Scalar duffing_energy(const Eigen::MatrixBase<Derived>& x) {
  using std::pow;
  return x(0) * x(0) / 2 + pow(x(1), 4) / 4;
}

/// One classical Runge-Kutta step. `rhs` is called as rhs(x, t); `step` is
/// only used to label a non-finite result.
template <typename Rhs, typename Derived>
Eigen::Matrix<typename Derived::Scalar, Derived::RowsAtCompileTime, 1> rk4_step(
    Rhs&& rhs, const Eigen::MatrixBase<Derived>& x, typename Derived::Scalar t,
    typename Derived::Scalar dt, long step = 0) {
  using State =
      Eigen::Matrix<typename Derived::Scalar, Derived::RowsAtCompileTime, 1>;
  if (dt == 0) throw std::invalid_argument("rk4_step: dt must be nonzero");
  const State x0 = x;
  const State k1 = rhs(x0, t);
  const State k2 = rhs(State(x0 + dt / 2 * k1), t + dt / 2);
  const State k3 = rhs(State(x0 + dt / 2 * k2), t + dt / 2);
  const State k4 = rhs(State(x0 + dt * k3), t + dt);
  State next = x0 + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
  if (!next.allFinite())
    throw SimulationError("rk4_step: non-finite state", step);
  return next;
}

/// Fixed-step RK4 from x0 over `grid`; negative dt integrates backward.
/// Throws SimulationError when the state norm exceeds `divergence_bound`.
Trajectory simulate(const SystemModel& model, const Vector& x0,
                    const SimGrid& grid, double divergence_bound = 1e6);

/// Adds i.i.d. zero-mean Gaussian noise to sampled states and outputs.
/// Zero variances leave the respective input untouched.
std::pair<Trajectory, Matrix> apply_noise(const Trajectory& traj,
                                          const Matrix& y,
                                          const NoiseSpec& noise);

}  // namespace metakkl
