#pragma once

#include "metakkl/adapt.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace metakkl::eval {

using nn::MapParams;

inline constexpr double kNormFloor = 1e-8;

/// |truth - estimate| / |truth|; the denominator is floored at kNormFloor and
/// `floored` is set when that happens.
double normalized_error(const Vector& truth, const Vector& estimate,
                        bool* floored = nullptr);

struct ErrorSeries {
  int task_id = 0;
  Vector times;
  Vector e_x;
  Vector e_z;
  int floored = 0;  // samples whose denominator was floored
};

/// Row-wise normalized errors. `z` / `z_hat` may be empty, leaving e_z empty.
ErrorSeries error_series(int task_id, const Vector& times, const Matrix& x,
                         const Matrix& x_hat, const Matrix& z = {},
                         const Matrix& z_hat = {});

/// Mean of e_x across tasks at time t. All series must share one time grid.
double task_mean_error(const std::vector<ErrorSeries>& series, double t);
/// task_mean_error at every grid time.
Vector task_mean_curve(const std::vector<ErrorSeries>& series);

enum class TimeMean {
  literal,  // sum of N+1 samples divided by N
  average   // divided by N+1
};

double time_mean_error(const Vector& values, TimeMean mode = TimeMean::literal);
double time_mean_error(const ErrorSeries& series, TimeMean mode = TimeMean::literal);
/// Time mean of e_x restricted to samples with time >= t_from.
double time_mean_error(const ErrorSeries& series, double t_from,
                       TimeMean mode = TimeMean::literal);

// -- evaluation of trained maps ----------------------------------------------

struct TrainedMethod {
  train::Method method = train::Method::parallel;
  MapParams theta;
  MapParams eta;
  std::optional<train::MetaState> meta;  // set for Method::meta
};

struct EvalConfig {
  double horizon = 80.0;
  double dt = 0.02;
  /// epsilon / bound used for the per-task transient horizon tau.
  BackwardSamplingConfig sampling;
  /// Aggregation start time; unset means -tau of each task.
  std::optional<double> transient;
  TimeMean time_mean = TimeMean::literal;
  adapt::SamplingKind strategy = adapt::SamplingKind::window_random_delayed;
  double window_length = 50.0;
  int n_batch = 32;
  int n_adapt = 5;
  /// Filter initialised at F_theta(x0) when true, at zero otherwise.
  bool init_from_theta = true;
  int jobs = 1;
};

struct TaskEvaluation {
  data::Task task;
  ErrorSeries series;
  double tau = 0.0;
  double t_from = 0.0;
  double e_bar_t = 0.0;
  std::string strategy = "none";
  /// Output loss on the post-transient samples not used for adaptation,
  /// before and after adapting (NaN without adaptation).
  double ly_pre = 0.0;
  double ly_post = 0.0;
  std::optional<MapParams> eta_adapted;
};

struct TaskOptions {
  double noise_var = 0.0;
  std::optional<adapt::SamplingKind> strategy;  // overrides EvalConfig
  std::uint64_t seed = 0;
};

TaskEvaluation evaluate_task(const TrainedMethod& trained, const data::Task& task,
                             const ObserverDesign& design, const EvalConfig& cfg,
                             const TaskOptions& opts);

// -- experiments ---------------------------------------------------------------

struct ExperimentConfig {
  data::TaskDistribution dist;
  ObserverDesign design = default_design(2);
  int n_train_tasks = 5;
  int n_val = 50;
  int n_val_out = 0;
  data::GenerationConfig gen;
  train::TrainConfig train;
  train::MetaConfig meta;
  EvalConfig eval;
  std::vector<train::Method> methods{train::Method::parallel, train::Method::sequential,
                                     train::Method::meta};
  std::vector<std::uint64_t> seeds{0};
  double noise_var = 0.1;
  bool noisy_pass = true;
  int grid_resolution = 11;
  std::vector<adapt::SamplingKind> strategies{
      adapt::SamplingKind::minimum, adapt::SamplingKind::minimum_delayed,
      adapt::SamplingKind::window_random, adapt::SamplingKind::window_random_delayed};
  std::string config_hash;
};

/// Training tasks of one seed.
std::vector<data::Task> training_tasks(const ExperimentConfig& cfg, std::uint64_t seed);

/// Trains methods on demand and caches them per (method, seed). Entries can
/// be preloaded, e.g. from checkpoints; with training disabled a missing
/// entry is an error.
class Trainer {
 public:
  explicit Trainer(ExperimentConfig cfg, bool allow_training = true);

  void put(std::uint64_t seed, TrainedMethod trained);
  const TrainedMethod& get(train::Method method, std::uint64_t seed);
  const data::MixedDataset& dataset(std::uint64_t seed);

 private:
  ExperimentConfig cfg_;
  bool allow_training_;
  std::map<std::pair<int, std::uint64_t>, TrainedMethod> cache_;
  std::map<std::uint64_t, data::MixedDataset> data_;
};

struct ResultRow {
  std::string pass;
  std::string method;
  int task_id = 0;
  double lambda = 0.0;
  double x0_1 = 0.0;
  double x0_2 = 0.0;
  std::string strategy;
  std::uint64_t seed = 0;
  double e_bar_t = 0.0;
  double ly_pre = 0.0;
  double ly_post = 0.0;
  int floored = 0;
};

struct CurveRow {
  std::string pass;
  std::string method;
  std::uint64_t seed = 0;
  Vector times;
  Vector e_bar_T;
  double t_from = 0.0;  // latest aggregation start across the tasks
};

struct ExperimentReport {
  std::string experiment;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<ResultRow> rows;
  std::vector<CurveRow> curves;
  TimeMean time_mean = TimeMean::literal;

  /// Median over seeds of the per-seed median e_bar_t. An empty `strategy`
  /// matches any.
  double median_e_bar_t(const std::string& pass, const std::string& method,
                        const std::string& strategy = "") const;
  /// Median over seeds of the time mean of the task-mean error curve over
  /// t >= CurveRow::t_from.
  double median_mean_e_bar_T(const std::string& pass, const std::string& method) const;
  /// Fraction of rows with ly_post < ly_pre among rows carrying both.
  double adaptation_improvement_rate(const std::string& pass,
                                     const std::string& method) const;

  /// results[_<pass>].csv, curves[_<pass>].csv, adaptation.csv, summary.csv
  /// and report.json. The first pass gets the unsuffixed names.
  void write(const std::filesystem::path& dir) const;
};

/// Lambda-distribution study: train on cfg.n_train_tasks values, evaluate on
/// cfg.n_val held-out values (pass "in").
ExperimentReport run_experiment_lambda(const ExperimentConfig& cfg, Trainer& trainer);

/// Initial-state study: passes "in", "noisy" (when enabled) and "out" (when
/// n_val_out > 0).
ExperimentReport run_experiment_x0(const ExperimentConfig& cfg, Trainer& trainer);

/// Meta method with each strategy in cfg.strategies on identical in-range
/// tasks and seeds.
ExperimentReport run_experiment_sampling(const ExperimentConfig& cfg, Trainer& trainer);

struct GridResult {
  std::string method;
  Vector axis;      // cell centres, shared by both coordinates
  Matrix values;    // values(i, j): x0 = (axis(i), axis(j))
  void write(const std::filesystem::path& dir) const;
};

/// e_bar_t over a uniform grid of x0 in the training box.
GridResult error_profile_grid(const TrainedMethod& trained, int resolution,
                              const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace metakkl::eval
