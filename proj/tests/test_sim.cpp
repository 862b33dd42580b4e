#include "metakkl/sim.hpp"

#include <doctest.h>

#include <cmath>

using namespace metakkl;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// Classical RK4 stages for dx/dt = -x evaluated by hand.
double rk4_decay_oracle(double x, double h) {
  const double k1 = -x;
  const double k2 = -(x + h / 2 * k1);
  const double k3 = -(x + h / 2 * k2);
  const double k4 = -(x + h * k3);
  return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
}

auto decay = [](const Eigen::Matrix<double, 1, 1>& x, double) {
  return Eigen::Matrix<double, 1, 1>(-x);
};

}  // namespace

TEST_SUITE("sim") {

TEST_CASE("duffing_rhs examples") {
  CHECK(duffing_rhs(vec({0.5, 0.5}), 1.0).isApprox(vec({0.125, -0.5})));
  CHECK(duffing_rhs(vec({0, 0}), 3.0).isZero());
  CHECK(duffing_rhs(vec({1, 2}), 2.0).isApprox(vec({16, -2})));
}

TEST_CASE("duffing_rhs rejects invalid states") {
  CHECK_THROWS_AS(duffing_rhs(vec({NAN, 0}), 1.0), InvalidState);
  CHECK_THROWS_AS(duffing_rhs(vec({1, 2, 3}), 1.0), std::invalid_argument);
}

TEST_CASE("duffing_output projects the first coordinate") {
  CHECK(duffing_output(vec({0.5, 0.5}))(0) == 0.5);
  CHECK(duffing_output(vec({0, 1}))(0) == 0.0);
  CHECK(duffing_output(vec({-2, 3}))(0) == -2.0);
  CHECK_THROWS(duffing_output(vec({1})));
}

TEST_CASE("rk4_step matches hand-evaluated stages") {
  Eigen::Matrix<double, 1, 1> one;
  one << 1.0;
  const double fwd = rk4_step(decay, one, 0.0, 0.1)(0);
  CHECK(fwd == doctest::Approx(rk4_decay_oracle(1.0, 0.1)).epsilon(1e-15));
  CHECK(std::abs(fwd - 0.90483750) < 5e-9);
  CHECK(std::abs(fwd - std::exp(-0.1)) < 1e-7);

  const double bwd = rk4_step(decay, one, 0.0, -0.1)(0);
  CHECK(bwd == doctest::Approx(rk4_decay_oracle(1.0, -0.1)).epsilon(1e-15));
  CHECK(std::abs(bwd - 1.10517083) < 5e-9);
}

TEST_CASE("rk4_step with a zero field is the identity") {
  Eigen::Vector3d c(1.5, -2.0, 0.25);
  auto zero = [](const Eigen::Vector3d&, double) { return Eigen::Vector3d::Zero().eval(); };
  for (double dt : {0.1, -3.0, 17.0}) CHECK(rk4_step(zero, c, 0.0, dt) == c);
}

TEST_CASE("rk4_step guards") {
  Eigen::Matrix<double, 1, 1> one;
  one << 1.0;
  CHECK_THROWS_AS(rk4_step(decay, one, 0.0, 0.0), std::invalid_argument);
  auto blowup = [](const Eigen::Matrix<double, 1, 1>&, double) {
    return Eigen::Matrix<double, 1, 1>(std::numeric_limits<double>::infinity());
  };
  try {
    rk4_step(blowup, one, 0.0, 0.1, 42);
    FAIL("expected SimulationError");
  } catch (const SimulationError& e) {
    CHECK(e.step() == 42);
  }
}

TEST_CASE("simulate conserves the Duffing first integral") {
  const Vector x0 = vec({0.5, 0.5});
  const Trajectory tr = simulate(duffing_model(1.0), x0, {0.0, 0.01, 5000});
  REQUIRE(tr.size() == 5001);
  CHECK(duffing_energy(x0) == doctest::Approx(0.140625).epsilon(1e-15));
  CHECK(tr.states.row(0).transpose() == x0);
  double drift = 0;
  for (Eigen::Index k = 0; k < tr.size(); ++k)
    drift = std::max(drift, std::abs(duffing_energy(tr.states.row(k)) - 0.140625));
  CHECK(drift < 1e-6);
}

TEST_CASE("simulate times are monotone and backward roundtrip returns x0") {
  const Vector x0 = vec({0.3, -0.7});
  const SystemModel m = duffing_model(2.0);
  const Trajectory back = simulate(m, x0, {0.0, -0.01, 2000});
  for (Eigen::Index k = 1; k < back.size(); ++k) CHECK(back.times(k) < back.times(k - 1));
  const Vector end = back.states.bottomRows(1).transpose();
  const Trajectory fwd = simulate(m, end, {back.times(back.size() - 1), 0.01, 2000});
  CHECK((fwd.states.bottomRows(1).transpose() - x0).norm() < 1e-8);
}

TEST_CASE("simulate with one step equals rk4_step") {
  const SystemModel m = duffing_model(1.5);
  const Vector x0 = vec({0.2, 0.9});
  const Trajectory tr = simulate(m, x0, {0.0, 0.05, 1});
  const Vector step = rk4_step([&](const Vector& x, double) { return m.f(x); }, x0, 0.0, 0.05);
  CHECK(tr.states.row(1).transpose() == step);
}

TEST_CASE("simulate reports divergence with the step") {
  SystemModel m = duffing_model(1.0);
  m.rhs = [](const Vector& x, const Vector&) { return Vector(x * 10.0); };
  CHECK_THROWS_AS(simulate(m, vec({1.0, 1.0}), {0.0, 0.1, 1000}), SimulationError);
}

TEST_CASE("RK4 order from a step-halving study") {
  const SystemModel m = duffing_model(1.0);
  const Vector x0 = vec({0.5, 0.5});
  const double h = 0.1;
  const Trajectory ref = simulate(m, x0, {0.0, h / 64, 64 * 10});
  auto err = [&](int div) {
    const Trajectory tr = simulate(m, x0, {0.0, h / div, 10L * div});
    double e = 0;
    for (Eigen::Index k = 0; k < tr.size(); ++k)
      e = std::max(e, (tr.states.row(k) - ref.states.row(k * (64 / div))).norm());
    return e;
  };
  const double ratio = err(1) / err(2);
  CHECK(ratio > 14.0);
  CHECK(ratio < 18.0);
}

TEST_CASE("apply_noise contracts") {
  const Trajectory tr = simulate(duffing_model(1.0), vec({0.5, 0.5}), {0.0, 0.01, 100});
  const Matrix y = duffing_model(1.0).outputs(tr.states);

  auto [same_tr, same_y] = apply_noise(tr, y, {0.0, 0.0, 3});
  CHECK(same_tr.states == tr.states);
  CHECK(same_y == y);

  auto [a_tr, a_y] = apply_noise(tr, y, {0.1, 0.2, 9});
  auto [b_tr, b_y] = apply_noise(tr, y, {0.1, 0.2, 9});
  CHECK(a_tr.states == b_tr.states);
  CHECK(a_y == b_y);

  auto [c_tr, c_y] = apply_noise(tr, y, {0.1, 0.0, 9});
  CHECK(c_y == y);
  CHECK(c_tr.states == a_tr.states);

  CHECK_THROWS(apply_noise(tr, y, {-1.0, 0.0, 0}));
}

TEST_CASE("apply_noise output variance") {
  Trajectory tr;
  tr.times = Vector::LinSpaced(100000, 0, 1);
  tr.states = Matrix::Zero(100000, 2);
  const Matrix y = Matrix::Zero(100000, 1);
  const Matrix noisy = apply_noise(tr, y, {0.0, 0.1, 1234}).second;
  const double mean = noisy.mean();
  const double var = (noisy.array() - mean).square().sum() / noisy.size();
  CHECK(var >= 0.095);
  CHECK(var <= 0.105);
}

}  // TEST_SUITE
