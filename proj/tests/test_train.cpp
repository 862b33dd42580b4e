#include "metakkl/train.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace metakkl;
using namespace metakkl::train;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// Net whose output is the constant `value` (zero last-layer weights).
MapParams constant_map(int in_dim, const Vector& value) {
  nn::MlpSpec s;
  s.in_dim = in_dim;
  s.out_dim = static_cast<int>(value.size());
  s.hidden = {3};
  MapParams p = nn::init_params(s, 0);
  p.weights[1].setZero();
  p.biases[1] = value.transpose();
  return p;
}

data::MixedDataset small_pool(int n_tasks, long n_steps = 60) {
  const ObserverDesign design = default_design(2);
  data::GenerationConfig gen;
  gen.n_steps = n_steps;
  std::vector<data::TaskDataset> sets;
  for (const auto& t : data::make_training_tasks(data::TaskDistribution{}, n_tasks, 0))
    sets.push_back(data::generate_task_dataset(t, data::task_model(t), design, gen));
  return data::MixedDataset::from(std::move(sets));
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 32;
  c.hidden = {8, 8};
  c.seed = 3;
  return c;
}

bool same(const MapParams& a, const MapParams& b) {
  for (size_t l = 0; l < a.weights.size(); ++l)
    if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
  return true;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("loss examples") {
  ad::Graph g;
  const MapParams fwd = constant_map(2, Vector::Zero(5));
  const auto fb = nn::bind(g, fwd, false);
  const Matrix x = vec({0.3, 0.4}).transpose();
  CHECK(loss_Lz(g.constant(vec({1, 0, 0, 0, 0}).transpose()), g.constant(x), fwd, fb).item() ==
        doctest::Approx(1.0));
  CHECK(loss_Lz(g.constant(Matrix::Zero(1, 5)), g.constant(x), fwd, fb).item() == 0.0);

  const MapParams inv = constant_map(5, vec({0, 9}));
  const auto ib = nn::bind(g, inv, false);
  const Matrix z = Matrix::Zero(1, 5);
  CHECK(loss_Ly(g.constant(Matrix::Ones(1, 1)), g.constant(z), inv, ib, duffing_output_map())
            .item() == doctest::Approx(1.0));
  CHECK(loss_Lx_parallel(g.constant(vec({1, 9}).transpose()), g.constant(z), inv, ib).item() ==
        doctest::Approx(1.0));
  CHECK(loss_Lx_parallel(g.constant(vec({0, 9}).transpose()), g.constant(z), inv, ib).item() ==
        0.0);
  // Batch mean: residuals 1 and 2 give (1 + 4) / 2.
  Matrix y2(2, 1);
  y2 << 1, 2;
  CHECK(loss_Ly(g.constant(y2), g.constant(Matrix::Zero(2, 5)), inv, ib, duffing_output_map())
            .item() == doctest::Approx(2.5));
  CHECK_THROWS(mean_squared_residual(g.constant(Matrix::Zero(0, 2)),
                                     g.constant(Matrix::Zero(0, 2))));
}

TEST_CASE("sequential loss composes the maps") {
  ad::Graph g;
  const MapParams fwd = constant_map(2, Vector::Zero(5));
  const MapParams inv = constant_map(5, vec({0.3, 0.4}));
  const Matrix x = vec({0.3, 0.4}).transpose();
  CHECK(loss_Lx_sequential(g.constant(x), fwd, nn::bind(g, fwd, false), inv,
                           nn::bind(g, inv, false))
            .item() == 0.0);
}

TEST_CASE("PDE residual at the equilibrium is |A F(0)|^2") {
  const ObserverDesign design = default_design(2);
  nn::MlpSpec s;
  s.in_dim = 2;
  s.out_dim = 5;
  s.hidden = {6, 6};
  MapParams fwd = nn::init_params(s, 8);
  fwd.biases[2] = vec({0.1, -0.2, 0.3, 0.05, -0.4}).transpose();
  ad::Graph g;
  const Matrix x0 = Matrix::Zero(1, 2);
  const double r = loss_pde_residual(g, x0, fwd, nn::bind(g, fwd, false), duffing_model(1.0),
                                     design)
                       .item();
  const Vector f0 = nn::predict(fwd, x0).row(0).transpose();
  CHECK(r == doctest::Approx((design.a() * f0).squaredNorm()).epsilon(1e-12));
}

TEST_CASE("PDE residual matches a central-difference directional derivative") {
  const ObserverDesign design = default_design(2);
  const SystemModel model = duffing_model(2.0);
  nn::MlpSpec s;
  s.in_dim = 2;
  s.out_dim = 5;
  s.hidden = {6, 6};
  const MapParams fwd = nn::init_params(s, 9);
  Matrix x(3, 2);
  x << 0.3, -0.2, 0.7, 0.5, -0.4, 0.9;
  ad::Graph g;
  const double r = loss_pde_residual(g, x, fwd, nn::bind(g, fwd, false), model, design).item();
  double expect = 0;
  const double e = 1e-6;
  for (int i = 0; i < 3; ++i) {
    const Vector xi = x.row(i).transpose();
    const Vector fi = model.f(xi);
    const Vector dF = (nn::predict(fwd, (xi + e * fi).transpose()) -
                       nn::predict(fwd, (xi - e * fi).transpose()))
                          .row(0)
                          .transpose() /
                      (2 * e);
    const Vector F = nn::predict(fwd, xi.transpose()).row(0).transpose();
    expect += (dF - design.a() * F - design.b * model.h(xi)).squaredNorm();
  }
  CHECK(r == doctest::Approx(expect / 3).epsilon(1e-6));
  CHECK(r > 0);
}

TEST_CASE("loss gradients pass finite-difference checks") {
  const ObserverDesign design = default_design(2);
  nn::MlpSpec s;
  s.in_dim = 2;
  s.out_dim = 5;
  s.hidden = {4, 4};
  const MapParams fwd = nn::init_params(s, 10);
  Matrix x(4, 2);
  x << 0.3, -0.2, 0.7, 0.5, -0.4, 0.9, 0.1, 0.1;
  auto pde = [&](ad::Graph& g, const ad::Value& w1) {
    auto b = nn::bind(g, fwd, false);
    b.weights[1] = w1;
    return loss_pde_residual(g, x, fwd, b, duffing_model(1.0), design);
  };
  CHECK(ad::finite_diff_check(pde, fwd.weights[1], 1e-4).passed);
  const Matrix z = Matrix::Random(4, 5);
  auto lz = [&](ad::Graph& g, const ad::Value& w0) {
    auto b = nn::bind(g, fwd, false);
    b.weights[0] = w0;
    return loss_Lz(g.constant(z), g.constant(x), fwd, b);
  };
  CHECK(ad::finite_diff_check(lz, fwd.weights[0], 1e-4).passed);
}

TEST_CASE("optimizer examples") {
  std::vector<Matrix> p{Matrix::Constant(1, 1, 1.0)};
  AdamState st;
  adam_step(p, {Matrix::Constant(1, 1, 1.0)}, st, 1e-3, {});
  CHECK(p[0](0, 0) == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
  std::vector<Matrix> q{Matrix::Constant(1, 1, -2.0)};
  AdamState st2;
  adam_step(q, {Matrix::Constant(1, 1, -50.0)}, st2, 1e-3, {});
  CHECK(q[0](0, 0) == doctest::Approx(-2.0 + 1e-3).epsilon(1e-9));
  adam_step(q, {Matrix::Zero(1, 1)}, st2, 1e-3, {});
  CHECK(std::abs(st2.m[0](0, 0)) < 50.0 * 0.1);  // moment decayed by beta1

  CHECK(sgd_step({Matrix::Constant(1, 1, 1.0)}, {Matrix::Constant(1, 1, 2.0)}, 0.1)[0](0, 0) ==
        doctest::Approx(0.8));
  const Matrix w = Matrix::Random(2, 3);
  CHECK(sgd_step({w}, {Matrix::Random(2, 3)}, 0.0)[0] == w);
  CHECK_THROWS(adam_step(p, {}, st, 1e-3, {}));
}

TEST_CASE("parallel training is deterministic and theta ignores the eta seed") {
  const auto pool = small_pool(2);
  TrainConfig c = small_config();
  const TrainResult a = train_parallel_mixed(pool, c);
  const TrainResult b = train_parallel_mixed(pool, c);
  CHECK(same(a.theta, b.theta));
  CHECK(same(a.eta, b.eta));
  c.eta_seed = 99;
  const TrainResult d = train_parallel_mixed(pool, c);
  CHECK(same(a.theta, d.theta));
  CHECK_FALSE(same(a.eta, d.eta));
  CHECK(a.history.size() == 2);
  c.jobs = 2;
  CHECK(same(train_parallel_mixed(pool, c).eta, d.eta));
}

TEST_CASE("pinn with zero weight reproduces sequential bit for bit") {
  const auto pool = small_pool(2);
  const ObserverDesign design = default_design(2);
  TrainConfig c = small_config();
  c.method = Method::sequential;
  const TrainResult seq = train_sequential_mixed(pool, c, design);
  c.method = Method::pinn;
  c.pinn_weight = 0.0;
  const TrainResult pinn0 = train_sequential_mixed(pool, c, design);
  CHECK(same(seq.theta, pinn0.theta));
  CHECK(same(seq.eta, pinn0.eta));
  c.pinn_weight = 1.0;
  CHECK_FALSE(same(seq.theta, train_sequential_mixed(pool, c, design).theta));
}

TEST_CASE("single-task training loss decreases when smoothed") {
  const auto pool = small_pool(1, 1000);
  TrainConfig c;
  c.epochs = 30;
  const TrainResult r = train_parallel_mixed(pool, c);
  auto window = [&](int from) {
    double s = 0;
    for (int i = from; i < from + 10; ++i) s += r.history[static_cast<size_t>(i)].loss_lx;
    return s / 10;
  };
  CHECK(window(10) < window(0));
  CHECK(window(20) < window(10));
}

TEST_CASE("meta training contracts") {
  const auto pool = small_pool(3);
  TrainConfig c = small_config();
  MetaConfig m;
  m.iterations = 3;
  m.n_adapt = 2;
  m.n_adapt_points = 8;
  m.n_query = 16;
  m.n_batch_meta = 2;
  const auto h = duffing_output_map();
  const MetaState a = train_meta(pool, c, m, h);
  const MetaState b = train_meta(pool, c, m, h);
  CHECK(same(a.eta, b.eta));
  CHECK(a.alpha == b.alpha);
  CHECK(a.history.size() == 3);
  CHECK(a.alpha != m.alpha_init);

  m.first_order = true;
  const MetaState fo = train_meta(pool, c, m, h);
  CHECK(fo.history[0].loss_lx == a.history[0].loss_lx);
  CHECK(fo.history[0].loss_ly == a.history[0].loss_ly);
  CHECK_FALSE(same(fo.eta, a.eta));

  m.first_order = false;
  m.n_adapt = 0;
  const MetaState plain = train_meta(pool, c, m, h);
  CHECK(plain.alpha == doctest::Approx(m.alpha_init).epsilon(1e-15));
  CHECK(std::isnan(plain.history[0].loss_ly));

  m.n_batch_meta = 0;
  CHECK_THROWS_AS(train_meta(pool, c, m, h), ConfigError);
}

TEST_CASE("adapt_inverse descends for a small rate and is identity without batches") {
  const auto pool = small_pool(1);
  const TrainResult r = train_parallel_mixed(pool, small_config());
  const auto& ds = pool.tasks[0];
  std::vector<std::pair<Matrix, Matrix>> batches(3, {ds.z.topRows(20), ds.y.topRows(20)});
  std::vector<double> losses;
  const MapParams adapted = adapt_inverse(r.eta, 1e-3, batches, duffing_output_map(), &losses);
  REQUIRE(losses.size() == 3);
  CHECK(losses[1] < losses[0]);
  CHECK(losses[2] < losses[1]);
  CHECK(same(adapt_inverse(r.eta, 0.1, {}, duffing_output_map()), r.eta));
  CHECK_FALSE(same(adapted, r.eta));
}

TEST_CASE("method names round trip") {
  for (Method m : {Method::parallel, Method::sequential, Method::pinn, Method::meta})
    CHECK(parse_method(method_name(m)) == m);
  CHECK_THROWS(parse_method("maml"));
}

}  // TEST_SUITE
