#include "metakkl/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace metakkl;
using namespace metakkl::nn;

namespace {

MlpSpec spec_2_5() {
  MlpSpec s;
  s.in_dim = 2;
  s.out_dim = 5;
  return s;
}

Matrix random_rows(int n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("default spec shapes and parameter count") {
  const MapParams p = init_params(spec_2_5(), 1);
  REQUIRE(p.weights.size() == 6);
  CHECK(p.weights[0].rows() == 50);
  CHECK(p.weights[0].cols() == 2);
  for (int l = 1; l <= 4; ++l) {
    CHECK(p.weights[l].rows() == 50);
    CHECK(p.weights[l].cols() == 50);
  }
  CHECK(p.weights[5].rows() == 5);
  CHECK(p.weights[5].cols() == 50);
  // Count from the layer widths 2 -> 50 x 5 -> 5.
  const int widths[] = {2, 50, 50, 50, 50, 50, 5};
  std::size_t expect = 0;
  for (int l = 0; l < 6; ++l) expect += widths[l] * widths[l + 1] + widths[l + 1];
  CHECK(expect == 10605);
  CHECK(p.parameter_count() == expect);
}

TEST_CASE("init is He-uniform with zero biases and deterministic") {
  const MapParams a = init_params(spec_2_5(), 42);
  const MapParams b = init_params(spec_2_5(), 42);
  const MapParams c = init_params(spec_2_5(), 43);
  for (size_t l = 0; l < a.weights.size(); ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(a.weights[l].cols()));
    CHECK(a.weights[l].cwiseAbs().maxCoeff() <= bound);
    CHECK(a.biases[l].isZero());
    CHECK(a.weights[l] == b.weights[l]);
  }
  CHECK(a.weights[0] != c.weights[0]);
  CHECK(a.norm_in.mean.isZero());
  CHECK(a.norm_in.std.isOnes());
}

TEST_CASE("fit_normalization example and floor") {
  const MapParams p = init_params(spec_2_5(), 0);
  Matrix in(2, 2);
  in << 0, 5, 2, 5;
  const Matrix out = random_rows(2, 5, 1);
  std::vector<std::string> floored;
  const MapParams q = fit_normalization(p, in, out, &floored);
  CHECK(q.norm_in.mean(0) == doctest::Approx(1.0));
  CHECK(q.norm_in.std(0) == doctest::Approx(1.0));
  CHECK(q.norm_in.mean(1) == doctest::Approx(5.0));
  CHECK(q.norm_in.std(1) == kStdFloor);
  CHECK(floored.size() == 1);
}

TEST_CASE("standardize round trip") {
  const Matrix v = random_rows(20, 3, 4);
  Normalization n;
  n.mean = (RowVector(3) << 1, -2, 0.5).finished();
  n.std = (RowVector(3) << 2, 0.1, 3).finished();
  CHECK((n.destandardize(n.standardize(v)) - v).cwiseAbs().maxCoeff() < 1e-13);
  CHECK(Normalization::identity(3).standardize(v) == v);
}

TEST_CASE("forward matches predict and is row-equivariant") {
  MapParams p = init_params(spec_2_5(), 9);
  const Matrix x = random_rows(7, 2, 10);
  p = fit_normalization(p, x, random_rows(7, 5, 11));
  ad::Graph g;
  const Matrix recorded = forward(p, bind(g, p, false), g.constant(x)).data();
  const Matrix direct = predict(p, x);
  CHECK((recorded - direct).cwiseAbs().maxCoeff() < 1e-12);
  for (int i = 0; i < x.rows(); ++i)
    CHECK((predict(p, x.row(i)) - direct.row(i)).cwiseAbs().maxCoeff() < 1e-12);
  // Permuting rows permutes outputs.
  Matrix rev = x.colwise().reverse();
  CHECK((predict(p, rev) - direct.colwise().reverse()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("hand-computed one-hidden-unit forward") {
  MlpSpec s;
  s.in_dim = 1;
  s.out_dim = 1;
  s.hidden = {1};
  MapParams p = init_params(s, 0);
  p.weights[0](0, 0) = 2.0;
  p.biases[0](0) = -1.0;
  p.weights[1](0, 0) = 3.0;
  p.biases[1](0) = 0.5;
  Matrix x(2, 1);
  x << 1.0, 0.25;
  const Matrix y = predict(p, x);
  CHECK(y(0, 0) == doctest::Approx(3.5));  // relu(1) * 3 + 0.5
  CHECK(y(1, 0) == doctest::Approx(0.5));  // relu(-0.5) = 0
}

TEST_CASE("tensors round trip") {
  const MapParams p = init_params(spec_2_5(), 5);
  const auto t = tensors(p);
  CHECK(t.size() == 12);
  const MapParams q = with_tensors(p, t);
  for (size_t l = 0; l < p.weights.size(); ++l) {
    CHECK(q.weights[l] == p.weights[l]);
    CHECK(q.biases[l] == p.biases[l]);
  }
}

TEST_CASE("input gradient passes a finite-difference check") {
  MapParams p = init_params(spec_2_5(), 12);
  const Matrix x = random_rows(5, 2, 13);
  p = fit_normalization(p, x, random_rows(5, 5, 14));
  auto f = [&](ad::Graph& g, const ad::Value& in) {
    return ad::sum(forward(p, bind(g, p, false), in));
  };
  CHECK(ad::finite_diff_check(f, x, 1e-5).passed);
}

}  // TEST_SUITE
