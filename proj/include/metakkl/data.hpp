#pragma once

#include "metakkl/observer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace metakkl::data {

/// Axis-aligned box; lo and hi have one entry per dimension.
struct Box {
  Vector lo;
  Vector hi;

  int dim() const { return static_cast<int>(lo.size()); }
  bool contains(const Vector& p) const;
};

Box square_box(double lo, double hi, int dim = 2);

struct Task {
  int task_id = 0;
  double lambda = 1.0;
  Vector x0;
};

enum class DistributionKind { lambda_variation, x0_variation };

struct TaskDistribution {
  DistributionKind kind = DistributionKind::lambda_variation;
  double lambda_lo = 1.0;
  double lambda_hi = 5.0;
  Box x0_box = square_box(-1.0, 1.0);
  Box x0_outer_box = square_box(-2.0, 2.0);
  double fixed_lambda = 1.0;
  Vector fixed_x0 = (Vector(2) << 0.5, 0.5).finished();
};

enum class ValidationKind { in_range, out_of_range };

struct TaskDataset {
  Task task;
  Vector times;
  Matrix x;
  Matrix z;
  Matrix y;

  Eigen::Index rows() const { return times.size(); }
};

struct MixedDataset {
  std::vector<TaskDataset> tasks;
  /// (index into tasks, row) for every row of every task.
  std::vector<std::pair<int, int>> index;

  static MixedDataset from(std::vector<TaskDataset> tasks);
  Eigen::Index rows() const { return static_cast<Eigen::Index>(index.size()); }
  Matrix stacked_x() const;
  Matrix stacked_z() const;
  Matrix stacked_y() const;
};

struct GenerationConfig {
  BackwardSamplingConfig sampling;
  double dt = 0.02;
  long n_steps = 1000;
  NoiseSpec noise;          // applied to y only when nonzero
  bool noisy_labels = false;  // also perturb x labels with noise.var_x
};

/// One point per axis stratum, uniformly jittered inside the stratum.
Matrix latin_hypercube(int n, const Box& box, std::uint64_t seed);

std::vector<Task> make_training_tasks(const TaskDistribution& dist, int n,
                                      std::uint64_t seed);

/// Task ids start at `first_id`. In-range lambda values avoid `exclude`.
std::vector<Task> make_validation_tasks(const TaskDistribution& dist,
                                        ValidationKind kind, int n,
                                        std::uint64_t seed, int first_id = 1000,
                                        const std::vector<double>& exclude = {});

/// Backward-sampled z(0) followed by forward co-simulation of plant and
/// filter. `model` must already carry the task's parameters.
TaskDataset generate_task_dataset(const Task& task, const SystemModel& model,
                                  const ObserverDesign& design,
                                  const GenerationConfig& cfg);

/// Disjoint random row sets: `n_adapt_points` adaptation rows and up to
/// `n_query` query rows (all remaining rows when n_query < 0).
std::pair<std::vector<int>, std::vector<int>> split_adapt_query(
    const TaskDataset& ds, int n_adapt_points, std::uint64_t seed,
    int n_query = -1);

Matrix rows_of(const Matrix& m, const std::vector<int>& rows);

// -- file formats ------------------------------------------------------------

/// `task_<id>.csv`, header task_id,lambda,t,x1..,z1..,y1..; %.17g values.
void write_task_csv(const TaskDataset& ds, const std::filesystem::path& path);
TaskDataset read_task_csv(const std::filesystem::path& path, int dx, int dz,
                          int dy);

std::string format_double(double v);

/// Duffing plant with the task's lambda.
inline SystemModel task_model(const Task& task) { return duffing_model(task.lambda); }

}  // namespace metakkl::data
