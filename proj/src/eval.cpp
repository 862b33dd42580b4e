#include "metakkl/eval.hpp"

#include "metakkl/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace metakkl::eval {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

using data::format_double;

}  // namespace

double normalized_error(const Vector& truth, const Vector& estimate, bool* floored) {
  if (truth.size() != estimate.size())
    throw std::invalid_argument("normalized_error: dimension mismatch");
  double denom = truth.norm();
  const bool low = denom < kNormFloor;
  if (low) denom = kNormFloor;
  if (floored) *floored = low;
  return (truth - estimate).norm() / denom;
}

ErrorSeries error_series(int task_id, const Vector& times, const Matrix& x,
                         const Matrix& x_hat, const Matrix& z, const Matrix& z_hat) {
  if (x.rows() != times.size() || x_hat.rows() != times.size())
    throw std::invalid_argument("error_series: length mismatch");
  ErrorSeries s;
  s.task_id = task_id;
  s.times = times;
  s.e_x.resize(times.size());
  for (Eigen::Index k = 0; k < times.size(); ++k) {
    bool fl = false;
    s.e_x(k) = normalized_error(x.row(k).transpose(), x_hat.row(k).transpose(), &fl);
    s.floored += fl;
  }
  if (z.size() > 0) {
    if (z.rows() != times.size() || z_hat.rows() != times.size())
      throw std::invalid_argument("error_series: latent length mismatch");
    s.e_z.resize(times.size());
    for (Eigen::Index k = 0; k < times.size(); ++k)
      s.e_z(k) = normalized_error(z.row(k).transpose(), z_hat.row(k).transpose());
  }
  return s;
}

namespace {

void check_grid(const std::vector<ErrorSeries>& series) {
  if (series.empty()) throw std::invalid_argument("task mean: no series");
  for (const auto& s : series)
    if (s.times.size() != series[0].times.size() ||
        !s.times.isApprox(series[0].times, 1e-12))
      throw std::invalid_argument("task mean: series do not share a time grid");
}

}  // namespace

double task_mean_error(const std::vector<ErrorSeries>& series, double t) {
  check_grid(series);
  const Vector& times = series[0].times;
  Eigen::Index k = -1;
  for (Eigen::Index i = 0; i < times.size(); ++i)
    if (std::abs(times(i) - t) < 1e-9) k = i;
  if (k < 0) throw std::invalid_argument("task_mean_error: time not on the grid");
  double sum = 0.0;
  for (const auto& s : series) sum += s.e_x(k);
  return sum / static_cast<double>(series.size());
}

Vector task_mean_curve(const std::vector<ErrorSeries>& series) {
  check_grid(series);
  Vector sum = Vector::Zero(series[0].times.size());
  for (const auto& s : series) sum += s.e_x;
  return sum / static_cast<double>(series.size());
}

double time_mean_error(const Vector& values, TimeMean mode) {
  if (values.size() == 0) throw std::invalid_argument("time_mean_error: empty series");
  if (values.size() == 1) return values(0);
  const double n = static_cast<double>(values.size() - 1);
  return values.sum() / (mode == TimeMean::literal ? n : n + 1);
}

double time_mean_error(const ErrorSeries& series, TimeMean mode) {
  return time_mean_error(series.e_x, mode);
}

double time_mean_error(const ErrorSeries& series, double t_from, TimeMean mode) {
  Eigen::Index first = 0;
  while (first < series.times.size() && series.times(first) < t_from - 1e-9) ++first;
  if (first >= series.times.size())
    throw std::invalid_argument("time_mean_error: window starts after the series ends");
  return time_mean_error(Vector(series.e_x.tail(series.e_x.size() - first)), mode);
}

// ---------------------------------------------------------------------------

namespace {

double output_loss(const MapParams& eta, const Matrix& z, const Matrix& y,
                   const std::vector<int>& rows) {
  if (rows.empty()) return kNaN;
  const Matrix x_hat = nn::predict(eta, data::rows_of(z, rows));
  const Matrix yr = data::rows_of(y, rows);
  return (yr - x_hat.leftCols(yr.cols())).squaredNorm() / static_cast<double>(rows.size());
}

}  // namespace

TaskEvaluation evaluate_task(const TrainedMethod& trained, const data::Task& task,
                             const ObserverDesign& design, const EvalConfig& cfg,
                             const TaskOptions& opts) {
  if (!(cfg.dt > 0) || !(cfg.horizon > 0))
    throw ConfigError("evaluation: dt and horizon must be positive");
  const SystemModel model = data::task_model(task);
  const long n_steps = std::lround(cfg.horizon / cfg.dt);
  const Trajectory xt = simulate(model, task.x0, SimGrid{0.0, cfg.dt, n_steps});
  const Matrix y_clean = model.outputs(xt.states);
  Matrix y = y_clean;
  if (opts.noise_var > 0) {
    NoiseSpec noise{opts.noise_var, 0.0, derive_seed(opts.seed, 0x6e6f)};
    y = model.outputs(apply_noise(xt, y_clean, noise).first.states);
  }

  BackwardSamplingConfig bs = cfg.sampling;
  if (bs.z_norm_bound <= 0)
    bs.z_norm_bound = steady_state_bound(design, y_clean.cwiseAbs().maxCoeff(),
                                         bs.safety_factor);
  const double tau = compute_tau(design, bs);

  const BackwardSample truth = backward_sample_init(model, design, task.x0, bs, cfg.dt);
  const Trajectory z_true = run_observer(design, truth.z0, y_clean, cfg.dt);
  const Vector z0_hat = cfg.init_from_theta
                            ? Vector(nn::predict(trained.theta, task.x0.transpose()).transpose())
                            : Vector::Zero(design.dz);
  const Trajectory z_hat = run_observer(design, z0_hat, y, cfg.dt);

  TaskEvaluation ev;
  ev.task = task;
  ev.tau = tau;
  ev.t_from = cfg.transient ? *cfg.transient : -tau;
  MapParams eta = trained.eta;
  ev.ly_pre = ev.ly_post = kNaN;
  if (trained.meta && cfg.n_adapt > 0) {
    const adapt::SamplingKind kind = opts.strategy ? *opts.strategy : cfg.strategy;
    const adapt::SamplingStrategy strategy =
        adapt::make_strategy(kind, tau, cfg.window_length);
    const adapt::AdaptationRun run =
        adapt::online_adapt(*trained.meta, z_hat, y, strategy, cfg.n_batch, cfg.n_adapt,
                            train::duffing_output_map(), derive_seed(opts.seed, 1));
    eta = run.eta_adapted;
    ev.eta_adapted = eta;
    ev.strategy = adapt::kind_name(kind);

    const std::set<int> used(run.samples_used.begin(), run.samples_used.end());
    std::vector<int> query;
    for (Eigen::Index k = 0; k < xt.times.size(); ++k)
      if (xt.times(k) >= ev.t_from - 1e-9 && !used.count(static_cast<int>(k)))
        query.push_back(static_cast<int>(k));
    ev.ly_pre = output_loss(trained.meta->eta, z_hat.states, y, query);
    ev.ly_post = output_loss(eta, z_hat.states, y, query);
  }

  if (ev.t_from > xt.times(xt.size() - 1))
    throw ConfigError("evaluation: horizon " + data::format_double(cfg.horizon) +
                      " s ends before the aggregation start at " +
                      data::format_double(ev.t_from) + " s");
  const Matrix x_hat = nn::predict(eta, z_hat.states);
  ev.series = error_series(task.task_id, xt.times, xt.states, x_hat, z_true.states,
                           z_hat.states);
  ev.e_bar_t = time_mean_error(ev.series, ev.t_from, cfg.time_mean);
  return ev;
}

// ---------------------------------------------------------------------------

std::vector<data::Task> training_tasks(const ExperimentConfig& cfg, std::uint64_t seed) {
  return data::make_training_tasks(cfg.dist, cfg.n_train_tasks, derive_seed(seed, 100));
}

Trainer::Trainer(ExperimentConfig cfg, bool allow_training)
    : cfg_(std::move(cfg)), allow_training_(allow_training) {}

void Trainer::put(std::uint64_t seed, TrainedMethod trained) {
  const int key = static_cast<int>(trained.method);
  cache_[{key, seed}] = std::move(trained);
}

const data::MixedDataset& Trainer::dataset(std::uint64_t seed) {
  auto it = data_.find(seed);
  if (it != data_.end()) return it->second;
  const auto tasks = training_tasks(cfg_, seed);
  std::vector<data::TaskDataset> sets =
      parallel_map(static_cast<int>(tasks.size()), cfg_.eval.jobs, [&](int i) {
        const auto& t = tasks[static_cast<size_t>(i)];
        return data::generate_task_dataset(t, data::task_model(t), cfg_.design, cfg_.gen);
      });
  return data_.emplace(seed, data::MixedDataset::from(std::move(sets))).first->second;
}

const TrainedMethod& Trainer::get(train::Method method, std::uint64_t seed) {
  const std::pair<int, std::uint64_t> key{static_cast<int>(method), seed};
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  if (!allow_training_)
    throw ConfigError(std::string("no trained artifacts for method ") +
                      train::method_name(method) + " and seed " + std::to_string(seed));

  train::TrainConfig tcfg = cfg_.train;
  tcfg.seed = seed;
  tcfg.method = method;
  const data::MixedDataset& ds = dataset(seed);
  TrainedMethod out;
  out.method = method;
  switch (method) {
    case train::Method::parallel: {
      auto r = train::train_parallel_mixed(ds, tcfg);
      out.theta = r.theta;
      out.eta = r.eta;
      break;
    }
    case train::Method::sequential:
    case train::Method::pinn: {
      auto r = train::train_sequential_mixed(ds, tcfg, cfg_.design);
      out.theta = r.theta;
      out.eta = r.eta;
      break;
    }
    case train::Method::meta: {
      const TrainedMethod& base = get(train::Method::parallel, seed);
      out.theta = base.theta;
      std::optional<MapParams> init;
      if (cfg_.meta.pretrain) init = base.eta;
      train::MetaState st =
          train::train_meta(ds, tcfg, cfg_.meta, train::duffing_output_map(), init);
      out.eta = st.eta;
      out.meta = std::move(st);
      break;
    }
  }
  return cache_.emplace(key, std::move(out)).first->second;
}

// ---------------------------------------------------------------------------

namespace {

struct PassSpec {
  std::string name;
  std::vector<data::Task> tasks;
  double noise_var = 0.0;
};

void run_pass(ExperimentReport& report, const ExperimentConfig& cfg,
              const TrainedMethod& trained, const std::string& method_tag,
              const PassSpec& pass, std::uint64_t seed,
              std::optional<adapt::SamplingKind> strategy = {}) {
  const auto evals =
      parallel_map(static_cast<int>(pass.tasks.size()), cfg.eval.jobs, [&](int i) {
        const data::Task& t = pass.tasks[static_cast<size_t>(i)];
        TaskOptions opts;
        opts.noise_var = pass.noise_var;
        opts.strategy = strategy;
        opts.seed = derive_seed(seed, static_cast<std::uint64_t>(t.task_id));
        return evaluate_task(trained, t, cfg.design, cfg.eval, opts);
      });
  std::vector<ErrorSeries> series;
  for (const auto& ev : evals) {
    ResultRow r;
    r.pass = pass.name;
    r.method = method_tag;
    r.task_id = ev.task.task_id;
    r.lambda = ev.task.lambda;
    r.x0_1 = ev.task.x0(0);
    r.x0_2 = ev.task.x0(1);
    r.strategy = ev.strategy;
    r.seed = seed;
    r.e_bar_t = ev.e_bar_t;
    r.ly_pre = ev.ly_pre;
    r.ly_post = ev.ly_post;
    r.floored = ev.series.floored;
    report.rows.push_back(r);
    series.push_back(ev.series);
  }
  double t_from = 0.0;
  for (const auto& ev : evals) t_from = std::max(t_from, ev.t_from);
  report.curves.push_back({pass.name, method_tag, seed, series[0].times,
                           task_mean_curve(series), t_from});
}

std::vector<double> lambdas_of(const std::vector<data::Task>& tasks) {
  std::vector<double> out;
  for (const auto& t : tasks) out.push_back(t.lambda);
  return out;
}

ExperimentReport new_report(const std::string& name, const ExperimentConfig& cfg) {
  ExperimentReport r;
  r.experiment = name;
  r.config_hash = cfg.config_hash;
  r.seeds = cfg.seeds;
  r.time_mean = cfg.eval.time_mean;
  return r;
}

}  // namespace

ExperimentReport run_experiment_lambda(const ExperimentConfig& cfg, Trainer& trainer) {
  if (cfg.dist.kind != data::DistributionKind::lambda_variation)
    throw ConfigError("lambda experiment needs a lambda_variation distribution");
  ExperimentReport report = new_report("lambda", cfg);
  for (std::uint64_t seed : cfg.seeds) {
    PassSpec pass{"in",
                  data::make_validation_tasks(cfg.dist, data::ValidationKind::in_range,
                                              cfg.n_val, derive_seed(seed, 101), 1000,
                                              lambdas_of(training_tasks(cfg, seed))),
                  0.0};
    for (train::Method m : cfg.methods)
      run_pass(report, cfg, trainer.get(m, seed), train::method_name(m), pass, seed);
  }
  return report;
}

ExperimentReport run_experiment_x0(const ExperimentConfig& cfg, Trainer& trainer) {
  if (cfg.dist.kind != data::DistributionKind::x0_variation)
    throw ConfigError("x0 experiment needs an x0_variation distribution");
  ExperimentReport report = new_report("x0", cfg);
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<PassSpec> passes;
    const auto in = data::make_validation_tasks(cfg.dist, data::ValidationKind::in_range,
                                                cfg.n_val, derive_seed(seed, 101), 1000);
    passes.push_back({"in", in, 0.0});
    if (cfg.noisy_pass && cfg.noise_var > 0) passes.push_back({"noisy", in, cfg.noise_var});
    if (cfg.n_val_out > 0)
      passes.push_back({"out",
                        data::make_validation_tasks(cfg.dist, data::ValidationKind::out_of_range,
                                                    cfg.n_val_out, derive_seed(seed, 102), 2000),
                        0.0});
    for (const auto& pass : passes)
      for (train::Method m : cfg.methods)
        run_pass(report, cfg, trainer.get(m, seed), train::method_name(m), pass, seed);
  }
  return report;
}

ExperimentReport run_experiment_sampling(const ExperimentConfig& cfg, Trainer& trainer) {
  ExperimentReport report = new_report("sampling", cfg);
  for (std::uint64_t seed : cfg.seeds) {
    const TrainedMethod& meta = trainer.get(train::Method::meta, seed);
    if (!meta.meta) throw ConfigError("sampling experiment requires a meta checkpoint");
    const data::ValidationKind kind = data::ValidationKind::in_range;
    PassSpec pass{"in",
                  cfg.dist.kind == data::DistributionKind::x0_variation
                      ? data::make_validation_tasks(cfg.dist, kind, cfg.n_val,
                                                    derive_seed(seed, 101), 1000)
                      : data::make_validation_tasks(cfg.dist, kind, cfg.n_val,
                                                    derive_seed(seed, 101), 1000,
                                                    lambdas_of(training_tasks(cfg, seed))),
                  0.0};
    for (adapt::SamplingKind k : cfg.strategies) {
      const std::string tag = std::string("meta:") + adapt::kind_name(k);
      run_pass(report, cfg, meta, tag, pass, seed, k);
    }
  }
  return report;
}

GridResult error_profile_grid(const TrainedMethod& trained, int resolution,
                              const ExperimentConfig& cfg, std::uint64_t seed) {
  if (resolution < 1) throw ConfigError("grid: resolution must be >= 1");
  const data::Box& box = cfg.dist.x0_box;
  GridResult g;
  g.method = train::method_name(trained.method);
  g.axis.resize(resolution);
  const double lo = box.lo(0), width = box.hi(0) - box.lo(0);
  for (int i = 0; i < resolution; ++i) g.axis(i) = lo + width * (i + 0.5) / resolution;
  const auto vals = parallel_map(resolution * resolution, cfg.eval.jobs, [&](int k) {
    const int i = k / resolution, j = k % resolution;
    data::Task t{3000 + k, cfg.dist.fixed_lambda,
                 (Vector(2) << g.axis(i), g.axis(j)).finished()};
    TaskOptions opts;
    opts.seed = derive_seed(seed, static_cast<std::uint64_t>(t.task_id));
    return evaluate_task(trained, t, cfg.design, cfg.eval, opts).e_bar_t;
  });
  g.values.resize(resolution, resolution);
  for (int k = 0; k < resolution * resolution; ++k)
    g.values(k / resolution, k % resolution) = vals[static_cast<size_t>(k)];
  return g;
}

void GridResult::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  auto os = open_out(dir / "grid.csv");
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j)
      os << (j ? "," : "") << format_double(values(i, j));
    os << '\n';
  }
  nlohmann::json side;
  side["method"] = method;
  side["rows"] = "x0_1";
  side["cols"] = "x0_2";
  side["axis"] = std::vector<double>(axis.data(), axis.data() + axis.size());
  auto js = open_out(dir / "grid.json");
  js << side.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> passes_of(const ExperimentReport& r) {
  std::vector<std::string> out;
  for (const auto& row : r.rows)
    if (std::find(out.begin(), out.end(), row.pass) == out.end()) out.push_back(row.pass);
  return out;
}

std::vector<std::string> methods_of(const ExperimentReport& r, const std::string& pass) {
  std::vector<std::string> out;
  for (const auto& row : r.rows)
    if (row.pass == pass && std::find(out.begin(), out.end(), row.method) == out.end())
      out.push_back(row.method);
  return out;
}

double seed_median(const ExperimentReport& r, const std::string& pass,
                   const std::string& method, const std::string& strategy,
                   std::uint64_t seed) {
  std::vector<double> v;
  for (const auto& row : r.rows)
    if (row.pass == pass && row.method == method && row.seed == seed &&
        (strategy.empty() || row.strategy == strategy))
      v.push_back(row.e_bar_t);
  return median(v);
}

double curve_mean(const ExperimentReport& r, const std::string& pass,
                  const std::string& method, std::uint64_t seed) {
  for (const auto& c : r.curves)
    if (c.pass == pass && c.method == method && c.seed == seed) {
      ErrorSeries curve;
      curve.times = c.times;
      curve.e_x = c.e_bar_T;
      return time_mean_error(curve, c.t_from, r.time_mean);
    }
  return kNaN;
}

}  // namespace

double ExperimentReport::median_e_bar_t(const std::string& pass,
                                        const std::string& method,
                                        const std::string& strategy) const {
  std::vector<double> per_seed;
  for (std::uint64_t s : seeds) {
    const double m = seed_median(*this, pass, method, strategy, s);
    if (!std::isnan(m)) per_seed.push_back(m);
  }
  return median(per_seed);
}

double ExperimentReport::median_mean_e_bar_T(const std::string& pass,
                                             const std::string& method) const {
  std::vector<double> per_seed;
  for (std::uint64_t s : seeds) {
    const double m = curve_mean(*this, pass, method, s);
    if (!std::isnan(m)) per_seed.push_back(m);
  }
  return median(per_seed);
}

double ExperimentReport::adaptation_improvement_rate(const std::string& pass,
                                                     const std::string& method) const {
  int total = 0, better = 0;
  for (const auto& row : rows) {
    if (row.pass != pass || row.method != method) continue;
    if (std::isnan(row.ly_pre) || std::isnan(row.ly_post)) continue;
    ++total;
    better += row.ly_post < row.ly_pre;
  }
  return total ? static_cast<double>(better) / total : kNaN;
}

void ExperimentReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const auto passes = passes_of(*this);
  for (size_t p = 0; p < passes.size(); ++p) {
    const std::string suffix = p == 0 ? "" : "_" + passes[p];
    auto rs = open_out(dir / ("results" + suffix + ".csv"));
    rs << "method,task_id,lambda,x0_1,x0_2,strategy,seed,e_bar_t\n";
    for (const auto& r : rows)
      if (r.pass == passes[p])
        rs << r.method << ',' << r.task_id << ',' << format_double(r.lambda) << ','
           << format_double(r.x0_1) << ',' << format_double(r.x0_2) << ',' << r.strategy
           << ',' << r.seed << ',' << format_double(r.e_bar_t) << '\n';

    // Curve per method: task mean over every (seed, task) evaluation.
    auto cs = open_out(dir / ("curves" + suffix + ".csv"));
    cs << "method,t,e_bar_T\n";
    for (const auto& m : methods_of(*this, passes[p])) {
      Vector sum;
      Vector times;
      double weight = 0.0;
      for (const auto& c : curves) {
        if (c.pass != passes[p] || c.method != m) continue;
        double n = 0;
        for (const auto& r : rows)
          n += r.pass == c.pass && r.method == c.method && r.seed == c.seed;
        if (sum.size() == 0) {
          sum = Vector::Zero(c.e_bar_T.size());
          times = c.times;
        }
        sum += n * c.e_bar_T;
        weight += n;
      }
      for (Eigen::Index k = 0; k < sum.size(); ++k)
        cs << m << ',' << format_double(times(k)) << ',' << format_double(sum(k) / weight)
           << '\n';
    }
  }

  auto as = open_out(dir / "adaptation.csv");
  as << "pass,method,task_id,strategy,seed,ly_pre,ly_post\n";
  for (const auto& r : rows)
    if (!std::isnan(r.ly_pre))
      as << r.pass << ',' << r.method << ',' << r.task_id << ',' << r.strategy << ','
         << r.seed << ',' << format_double(r.ly_pre) << ',' << format_double(r.ly_post)
         << '\n';

  auto ss = open_out(dir / "summary.csv");
  ss << "pass,method,seed,median_e_bar_t,mean_e_bar_T\n";
  for (const auto& p : passes)
    for (const auto& m : methods_of(*this, p))
      for (std::uint64_t s : seeds)
        ss << p << ',' << m << ',' << s << ','
           << format_double(seed_median(*this, p, m, "", s)) << ','
           << format_double(curve_mean(*this, p, m, s)) << '\n';

  nlohmann::json meta;
  meta["experiment"] = experiment;
  meta["config_hash"] = config_hash;
  meta["seeds"] = seeds;
  meta["passes"] = passes;
  meta["time_mean"] = time_mean == TimeMean::literal ? "literal" : "average";
  nlohmann::json methods = nlohmann::json::object();
  for (const auto& p : passes) {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& m : methods_of(*this, p)) {
      per[m]["median_e_bar_t"] = median_e_bar_t(p, m);
      per[m]["median_mean_e_bar_T"] = median_mean_e_bar_T(p, m);
    }
    methods[p] = per;
  }
  meta["summary"] = methods;
  auto js = open_out(dir / "report.json");
  js << meta.dump(2) << '\n';
}

}  // namespace metakkl::eval
