#include "metakkl/data.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

using namespace metakkl;
using namespace metakkl::data;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

TaskDistribution x0_dist() {
  TaskDistribution d;
  d.kind = DistributionKind::x0_variation;
  return d;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("latin hypercube puts one point in each stratum per axis") {
  const Box box = square_box(-1, 1);
  const Matrix pts = latin_hypercube(20, box, 3);
  for (int d = 0; d < 2; ++d) {
    std::set<int> strata;
    for (int i = 0; i < 20; ++i) {
      CHECK(box.contains(pts.row(i).transpose()));
      strata.insert(static_cast<int>(std::floor((pts(i, d) + 1) / 2 * 20)));
    }
    CHECK(strata.size() == 20);
  }
  CHECK(latin_hypercube(20, box, 3) == pts);
  CHECK(latin_hypercube(20, box, 4) != pts);
}

TEST_CASE("lambda training tasks are evenly spaced") {
  const TaskDistribution d;
  const auto tasks = make_training_tasks(d, 5, 0);
  REQUIRE(tasks.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(tasks[i].lambda == doctest::Approx(1.0 + i));
    CHECK(tasks[i].task_id == i);
    CHECK(tasks[i].x0 == d.fixed_x0);
  }
  CHECK(make_training_tasks(d, 1, 0)[0].lambda == doctest::Approx(3.0));
}

TEST_CASE("empty lambda range is a config error") {
  TaskDistribution d;
  d.lambda_hi = d.lambda_lo;
  CHECK_THROWS_AS(make_training_tasks(d, 5, 0), ConfigError);
}

TEST_CASE("lambda validation tasks avoid training values") {
  const TaskDistribution d;
  std::vector<double> train;
  for (const auto& t : make_training_tasks(d, 5, 0)) train.push_back(t.lambda);
  const auto val = make_validation_tasks(d, ValidationKind::in_range, 50, 0, 1000, train);
  REQUIRE(val.size() == 50);
  CHECK(val.front().task_id == 1000);
  for (const auto& t : val) {
    CHECK(t.lambda > 1.0);
    CHECK(t.lambda < 5.0);
    for (double l : train) CHECK(std::abs(t.lambda - l) > 1e-6);
  }
  // n = 4 with midpoints 1.5, 2.5, ... clashes with nothing; with those
  // values excluded the grid moves.
  const auto four = make_validation_tasks(d, ValidationKind::in_range, 4, 0);
  CHECK(four[0].lambda == doctest::Approx(1.5));
  const auto moved =
      make_validation_tasks(d, ValidationKind::in_range, 4, 0, 1000, {1.5, 2.5, 3.5, 4.5});
  CHECK(moved[0].lambda == doctest::Approx(1.25));
  CHECK_THROWS_AS(make_validation_tasks(d, ValidationKind::out_of_range, 4, 0), ConfigError);
}

TEST_CASE("x0 validation tasks in and out of range") {
  const TaskDistribution d = x0_dist();
  const auto in = make_validation_tasks(d, ValidationKind::in_range, 20, 5);
  const auto out = make_validation_tasks(d, ValidationKind::out_of_range, 20, 6, 2000);
  REQUIRE(in.size() == 20);
  REQUIRE(out.size() == 20);
  for (const auto& t : in) CHECK(d.x0_box.contains(t.x0));
  for (const auto& t : out) {
    CHECK_FALSE(d.x0_box.contains(t.x0));
    CHECK(d.x0_outer_box.contains(t.x0));
    CHECK(t.lambda == d.fixed_lambda);
  }
  CHECK(out.front().task_id == 2000);
}

TEST_CASE("generated dataset contracts") {
  const ObserverDesign design = default_design(2);
  const Task task{3, 2.0, vec({0.5, -0.25})};
  GenerationConfig gen;
  gen.n_steps = 200;
  const TaskDataset a = generate_task_dataset(task, task_model(task), design, gen);
  CHECK(a.rows() == 201);
  CHECK(a.x.row(0).transpose() == task.x0);
  CHECK(a.y.col(0) == a.x.col(0));
  CHECK(a.z.cols() == 5);
  const TaskDataset b = generate_task_dataset(task, task_model(task), design, gen);
  CHECK(a.z == b.z);
  // z follows the filter driven by y.
  const Trajectory z = run_observer(design, a.z.row(0).transpose(), a.y, gen.dt);
  CHECK((z.states - a.z).cwiseAbs().maxCoeff() < 1e-12);

  gen.n_steps = 0;
  const TaskDataset single = generate_task_dataset(task, task_model(task), design, gen);
  CHECK(single.rows() == 1);
  gen.dt = 0;
  CHECK_THROWS(generate_task_dataset(task, task_model(task), design, gen));
}

TEST_CASE("noisy outputs leave the labels clean by default") {
  const ObserverDesign design = default_design(2);
  const Task task{0, 1.0, vec({0.5, 0.5})};
  GenerationConfig gen;
  gen.n_steps = 100;
  const TaskDataset clean = generate_task_dataset(task, task_model(task), design, gen);
  gen.noise.var_y = 0.01;
  gen.noise.seed = 4;
  const TaskDataset noisy = generate_task_dataset(task, task_model(task), design, gen);
  CHECK(noisy.x == clean.x);
  CHECK(noisy.y != clean.y);
}

TEST_CASE("split_adapt_query gives disjoint sets") {
  const ObserverDesign design = default_design(2);
  const Task task{0, 1.0, vec({0.5, 0.5})};
  GenerationConfig gen;
  gen.n_steps = 99;
  const TaskDataset ds = generate_task_dataset(task, task_model(task), design, gen);
  const auto [adapt, query] = split_adapt_query(ds, 30, 1);
  CHECK(adapt.size() == 30);
  CHECK(query.size() == 70);
  std::set<int> all(adapt.begin(), adapt.end());
  all.insert(query.begin(), query.end());
  CHECK(all.size() == 100);
  CHECK(split_adapt_query(ds, 30, 1, 10).second.size() == 10);
  CHECK(split_adapt_query(ds, 99, 1).second.size() == 1);
  CHECK_THROWS(split_adapt_query(ds, 100, 1));
  CHECK(split_adapt_query(ds, 30, 1) == split_adapt_query(ds, 30, 1));
}

TEST_CASE("task CSV round trip is exact") {
  const ObserverDesign design = default_design(2);
  const Task task{7, 1.7, vec({0.123456789012345, -0.9})};
  GenerationConfig gen;
  gen.n_steps = 50;
  const TaskDataset ds = generate_task_dataset(task, task_model(task), design, gen);
  const auto path = std::filesystem::temp_directory_path() / "metakkl_test_task.csv";
  write_task_csv(ds, path);
  const TaskDataset back = read_task_csv(path, 2, 5, 1);
  std::filesystem::remove(path);
  CHECK(back.task.task_id == 7);
  CHECK(back.task.lambda == task.lambda);
  CHECK(back.times == ds.times);
  CHECK(back.x == ds.x);
  CHECK(back.z == ds.z);
  CHECK(back.y == ds.y);
}

TEST_CASE("mixed dataset stacks rows in task order") {
  const ObserverDesign design = default_design(2);
  GenerationConfig gen;
  gen.n_steps = 10;
  std::vector<TaskDataset> sets;
  for (const auto& t : make_training_tasks(TaskDistribution{}, 3, 0))
    sets.push_back(generate_task_dataset(t, task_model(t), design, gen));
  const MixedDataset m = MixedDataset::from(sets);
  CHECK(m.rows() == 33);
  CHECK(m.stacked_x().row(11) == sets[1].x.row(0));
  CHECK(m.index[12] == std::pair<int, int>{1, 1});
}

}  // TEST_SUITE
