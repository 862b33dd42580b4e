#include "metakkl/sim.hpp"

#include <random>

namespace metakkl {

Matrix SystemModel::outputs(const Matrix& states) const {
  Matrix y(states.rows(), dy);
  for (Eigen::Index k = 0; k < states.rows(); ++k)
    y.row(k) = output(states.row(k).transpose()).transpose();
  return y;
}

Matrix SystemModel::vector_field(const Matrix& states) const {
  Matrix f(states.rows(), dx);
  for (Eigen::Index k = 0; k < states.rows(); ++k)
    f.row(k) = rhs(states.row(k).transpose(), param).transpose();
  return f;
}

Vector duffing_rhs(const Vector& x, double lambda) {
  if (x.size() != 2)
    throw std::invalid_argument("duffing_rhs: state must have length 2");
  if (!x.allFinite() || !std::isfinite(lambda))
    throw InvalidState("duffing_rhs: non-finite state or parameter");
  Vector dx(2);
  dx << lambda * x(1) * x(1) * x(1), -lambda * x(0);
  return dx;
}

Vector duffing_output(const Vector& x) {
  if (x.size() != 2)
    throw std::invalid_argument("duffing_output: state must have length 2");
  return x.head<1>();
}

SystemModel duffing_model(double lambda) {
  SystemModel m;
  m.dx = 2;
  m.dy = 1;
  m.param = Vector::Constant(1, lambda);
  m.rhs = [](const Vector& x, const Vector& p) { return duffing_rhs(x, p(0)); };
  m.output = [](const Vector& x) { return duffing_output(x); };
  return m;
}

Trajectory simulate(const SystemModel& model, const Vector& x0,
                    const SimGrid& grid, double divergence_bound) {
  if (x0.size() != model.dx)
    throw std::invalid_argument("simulate: x0 has length " +
                                std::to_string(x0.size()) + ", expected " +
                                std::to_string(model.dx));
  if (grid.dt == 0) throw std::invalid_argument("simulate: dt must be nonzero");
  if (grid.n_steps < 0)
    throw std::invalid_argument("simulate: n_steps must be nonnegative");

  Trajectory traj;
  traj.times.resize(grid.n_steps + 1);
  traj.states.resize(grid.n_steps + 1, model.dx);
  traj.times(0) = grid.t0;
  traj.states.row(0) = x0.transpose();

  auto field = [&model](const Vector& x, double) { return model.f(x); };
  Vector x = x0;
  for (long k = 0; k < grid.n_steps; ++k) {
    const double t = grid.t0 + static_cast<double>(k) * grid.dt;
    x = rk4_step(field, x, t, grid.dt, k + 1);
    if (x.norm() > divergence_bound)
      throw SimulationError("simulate: state norm exceeded divergence bound",
                            k + 1);
    traj.times(k + 1) = grid.t0 + static_cast<double>(k + 1) * grid.dt;
    traj.states.row(k + 1) = x.transpose();
  }
  return traj;
}

std::pair<Trajectory, Matrix> apply_noise(const Trajectory& traj,
                                          const Matrix& y,
                                          const NoiseSpec& noise) {
  if (noise.var_x < 0 || noise.var_y < 0)
    throw std::invalid_argument("apply_noise: variances must be nonnegative");
  Trajectory out_traj = traj;
  Matrix out_y = y;
  // Separate streams so enabling one noise source never shifts the other.
  std::mt19937_64 rng_x(noise.seed);
  std::mt19937_64 rng_y(noise.seed ^ 0x9e3779b97f4a7c15ULL);
  if (noise.var_x > 0) {
    std::normal_distribution<double> n(0.0, std::sqrt(noise.var_x));
    for (Eigen::Index i = 0; i < out_traj.states.rows(); ++i)
      for (Eigen::Index j = 0; j < out_traj.states.cols(); ++j)
        out_traj.states(i, j) += n(rng_x);
  }
  if (noise.var_y > 0) {
    std::normal_distribution<double> n(0.0, std::sqrt(noise.var_y));
    for (Eigen::Index i = 0; i < out_y.rows(); ++i)
      for (Eigen::Index j = 0; j < out_y.cols(); ++j) out_y(i, j) += n(rng_y);
  }
  return {std::move(out_traj), std::move(out_y)};
}

}  // namespace metakkl
