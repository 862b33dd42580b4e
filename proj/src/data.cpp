#include "metakkl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace metakkl::data {

bool Box::contains(const Vector& p) const {
  return p.size() == lo.size() && (p.array() >= lo.array()).all() &&
         (p.array() <= hi.array()).all();
}

Box square_box(double lo, double hi, int dim) {
  return {Vector::Constant(dim, lo), Vector::Constant(dim, hi)};
}

MixedDataset MixedDataset::from(std::vector<TaskDataset> tasks) {
  MixedDataset m;
  m.tasks = std::move(tasks);
  for (size_t t = 0; t < m.tasks.size(); ++t)
    for (Eigen::Index r = 0; r < m.tasks[t].rows(); ++r)
      m.index.emplace_back(static_cast<int>(t), static_cast<int>(r));
  return m;
}

namespace {

template <typename Member>
Matrix stack(const std::vector<TaskDataset>& tasks, Member member) {
  Eigen::Index rows = 0, cols = 0;
  for (const auto& t : tasks) {
    rows += (t.*member).rows();
    cols = (t.*member).cols();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& t : tasks) {
    out.middleRows(r, (t.*member).rows()) = t.*member;
    r += (t.*member).rows();
  }
  return out;
}

}  // namespace

Matrix MixedDataset::stacked_x() const { return stack(tasks, &TaskDataset::x); }
Matrix MixedDataset::stacked_z() const { return stack(tasks, &TaskDataset::z); }
Matrix MixedDataset::stacked_y() const { return stack(tasks, &TaskDataset::y); }

Matrix latin_hypercube(int n, const Box& box, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("latin_hypercube: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  Matrix out(n, box.dim());
  std::vector<int> perm(static_cast<size_t>(n));
  for (int d = 0; d < box.dim(); ++d) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const double width = box.hi(d) - box.lo(d);
    for (int i = 0; i < n; ++i)
      out(i, d) = box.lo(d) + (perm[static_cast<size_t>(i)] + jitter(rng)) / n * width;
  }
  return out;
}

std::vector<Task> make_training_tasks(const TaskDistribution& dist, int n,
                                      std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("make_training_tasks: n must be >= 1");
  std::vector<Task> tasks;
  if (dist.kind == DistributionKind::lambda_variation) {
    if (!(dist.lambda_hi > dist.lambda_lo))
      throw ConfigError("make_training_tasks: empty lambda range");
    for (int i = 0; i < n; ++i) {
      const double lambda =
          n == 1 ? (dist.lambda_lo + dist.lambda_hi) / 2
                 : dist.lambda_lo + (dist.lambda_hi - dist.lambda_lo) * i / (n - 1);
      tasks.push_back({i, lambda, dist.fixed_x0});
    }
  } else {
    const Matrix pts = latin_hypercube(n, dist.x0_box, seed);
    for (int i = 0; i < n; ++i)
      tasks.push_back({i, dist.fixed_lambda, pts.row(i).transpose()});
  }
  return tasks;
}

std::vector<Task> make_validation_tasks(const TaskDistribution& dist,
                                        ValidationKind kind, int n,
                                        std::uint64_t seed, int first_id,
                                        const std::vector<double>& exclude) {
  if (n < 1) throw std::invalid_argument("make_validation_tasks: n must be >= 1");
  std::vector<Task> tasks;
  if (dist.kind == DistributionKind::lambda_variation) {
    if (kind != ValidationKind::in_range)
      throw ConfigError("make_validation_tasks: lambda tasks are in-range only");
    const double lo = dist.lambda_lo, hi = dist.lambda_hi;
    // Evenly spaced grid shifted inside its cells until it avoids `exclude`.
    const double offsets[] = {0.5, 0.25, 0.75, 0.375, 0.625, 0.125, 0.875};
    for (double off : offsets) {
      std::vector<double> values;
      for (int k = 0; k < n; ++k) values.push_back(lo + (hi - lo) * (k + off) / n);
      const bool clash = std::any_of(values.begin(), values.end(), [&](double v) {
        return std::any_of(exclude.begin(), exclude.end(),
                           [v](double e) { return std::abs(v - e) < 1e-9; });
      });
      if (clash) continue;
      for (int k = 0; k < n; ++k)
        tasks.push_back({first_id + k, values[static_cast<size_t>(k)], dist.fixed_x0});
      return tasks;
    }
    throw ConfigError("make_validation_tasks: could not avoid training values");
  }

  if (kind == ValidationKind::in_range) {
    const Matrix pts = latin_hypercube(n, dist.x0_box, seed);
    for (int k = 0; k < n; ++k)
      tasks.push_back({first_id + k, dist.fixed_lambda, pts.row(k).transpose()});
    return tasks;
  }

  std::mt19937_64 rng(seed);
  const Box& outer = dist.x0_outer_box;
  std::vector<std::uniform_real_distribution<double>> axes;
  for (int d = 0; d < outer.dim(); ++d) axes.emplace_back(outer.lo(d), outer.hi(d));
  while (static_cast<int>(tasks.size()) < n) {
    Vector p(outer.dim());
    for (int d = 0; d < outer.dim(); ++d) p(d) = axes[static_cast<size_t>(d)](rng);
    if (dist.x0_box.contains(p)) continue;
    tasks.push_back({first_id + static_cast<int>(tasks.size()), dist.fixed_lambda, p});
  }
  return tasks;
}

TaskDataset generate_task_dataset(const Task& task, const SystemModel& model,
                                  const ObserverDesign& design,
                                  const GenerationConfig& cfg) {
  if (!(cfg.dt > 0))
    throw std::invalid_argument("generate_task_dataset: dt must be positive");
  const BackwardSample bs =
      backward_sample_init(model, design, task.x0, cfg.sampling, cfg.dt);
  const Trajectory xt = simulate(model, task.x0, SimGrid{0.0, cfg.dt, cfg.n_steps});
  const Matrix y = model.outputs(xt.states);
  const Trajectory zt = run_observer(design, bs.z0, y, cfg.dt);

  TaskDataset ds;
  ds.task = task;
  ds.times = xt.times;
  ds.x = xt.states;
  ds.z = zt.states;
  ds.y = y;
  if (cfg.noise.var_y > 0 || (cfg.noisy_labels && cfg.noise.var_x > 0)) {
    NoiseSpec spec = cfg.noise;
    if (!cfg.noisy_labels) spec.var_x = 0;
    auto [noisy_x, noisy_y] = apply_noise(xt, y, spec);
    ds.x = noisy_x.states;
    ds.y = noisy_y;
  }
  return ds;
}

std::pair<std::vector<int>, std::vector<int>> split_adapt_query(
    const TaskDataset& ds, int n_adapt_points, std::uint64_t seed, int n_query) {
  const int rows = static_cast<int>(ds.rows());
  if (n_adapt_points < 0 || n_adapt_points >= rows)
    throw std::invalid_argument("split_adapt_query: n_adapt_points (" +
                                std::to_string(n_adapt_points) +
                                ") must be below the row count (" +
                                std::to_string(rows) + ")");
  std::vector<int> idx(static_cast<size_t>(rows));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const int remaining = rows - n_adapt_points;
  const int nq = n_query < 0 ? remaining : std::min(n_query, remaining);
  std::vector<int> adapt(idx.begin(), idx.begin() + n_adapt_points);
  std::vector<int> query(idx.begin() + n_adapt_points,
                         idx.begin() + n_adapt_points + nq);
  return {adapt, query};
}

Matrix rows_of(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_task_csv(const TaskDataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "task_id,lambda,t";
  for (Eigen::Index j = 0; j < ds.x.cols(); ++j) os << ",x" << j + 1;
  for (Eigen::Index j = 0; j < ds.z.cols(); ++j) os << ",z" << j + 1;
  for (Eigen::Index j = 0; j < ds.y.cols(); ++j) os << ",y" << j + 1;
  os << '\n';
  for (Eigen::Index r = 0; r < ds.rows(); ++r) {
    os << ds.task.task_id << ',' << format_double(ds.task.lambda) << ','
       << format_double(ds.times(r));
    for (Eigen::Index j = 0; j < ds.x.cols(); ++j) os << ',' << format_double(ds.x(r, j));
    for (Eigen::Index j = 0; j < ds.z.cols(); ++j) os << ',' << format_double(ds.z(r, j));
    for (Eigen::Index j = 0; j < ds.y.cols(); ++j) os << ',' << format_double(ds.y(r, j));
    os << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

TaskDataset read_task_csv(const std::filesystem::path& path, int dx, int dz,
                          int dy) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<std::vector<double>> rows;
  int task_id = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    if (static_cast<int>(vals.size()) != 3 + dx + dz + dy)
      throw std::runtime_error(path.string() + ": unexpected column count");
    task_id = static_cast<int>(vals[0]);
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw std::runtime_error(path.string() + ": no data rows");
  const auto n = static_cast<Eigen::Index>(rows.size());
  TaskDataset ds;
  ds.task.task_id = task_id;
  ds.task.lambda = rows[0][1];
  ds.times.resize(n);
  ds.x.resize(n, dx);
  ds.z.resize(n, dz);
  ds.y.resize(n, dy);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& v = rows[static_cast<size_t>(r)];
    ds.times(r) = v[2];
    for (int j = 0; j < dx; ++j) ds.x(r, j) = v[static_cast<size_t>(3 + j)];
    for (int j = 0; j < dz; ++j) ds.z(r, j) = v[static_cast<size_t>(3 + dx + j)];
    for (int j = 0; j < dy; ++j) ds.y(r, j) = v[static_cast<size_t>(3 + dx + dz + j)];
  }
  ds.task.x0 = ds.x.row(0).transpose();
  return ds;
}

}  // namespace metakkl::data
