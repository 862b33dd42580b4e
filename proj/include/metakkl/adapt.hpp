#pragma once

#include "metakkl/train.hpp"

#include <string>
#include <utility>
#include <vector>

namespace metakkl::adapt {

using nn::MapParams;

enum class SamplingKind { minimum, minimum_delayed, window_random, window_random_delayed };

const char* kind_name(SamplingKind k);
/// Accepts the four canonical names plus "window-delayed" as an alias of
/// window-random-delayed.
SamplingKind parse_kind(const std::string& s);

struct SamplingStrategy {
  SamplingKind kind = SamplingKind::minimum_delayed;
  double window_length = 50.0;  // seconds, window kinds only
  double delay = 0.0;           // seconds, delayed kinds only

  bool delayed() const {
    return kind == SamplingKind::minimum_delayed ||
           kind == SamplingKind::window_random_delayed;
  }
  bool windowed() const {
    return kind == SamplingKind::window_random ||
           kind == SamplingKind::window_random_delayed;
  }
  /// Delay actually applied (zero for undelayed kinds).
  double effective_delay() const { return delayed() ? delay : 0.0; }
};

/// Strategy of the given kind with delay -tau.
SamplingStrategy make_strategy(SamplingKind kind, double tau,
                               double window_length = 50.0);

class InsufficientDataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// n_batch * n_adapt * dt.
double t_init_min(int n_batch, int n_adapt, double dt);

struct Selection {
  std::vector<std::vector<int>> batches;  // sample indices, time ordered
  std::vector<int> indices() const;
};

/// Picks n_adapt batches of n_batch sample indices on a uniform grid of
/// `n_samples` samples spaced `dt` apart.
Selection select_indices(const SamplingStrategy& strategy, long n_samples,
                         double dt, int n_batch, int n_adapt,
                         std::uint64_t seed);

/// select_indices applied to a filter trajectory and its outputs.
std::vector<std::pair<Matrix, Matrix>> select_samples(
    const SamplingStrategy& strategy, const Trajectory& z_traj, const Matrix& y,
    int n_batch, int n_adapt, std::uint64_t seed,
    Selection* selection = nullptr);

struct AdaptationRun {
  MapParams eta_adapted;
  std::vector<int> samples_used;
  double t_init_actual = 0.0;
  std::vector<double> losses;  // L_y before each step
};

/// n_adapt SGD steps on a copy of meta.eta with the learned rate.
AdaptationRun online_adapt(const train::MetaState& meta, const Trajectory& z_traj,
                           const Matrix& y, const SamplingStrategy& strategy,
                           int n_batch, int n_adapt, const train::OutputMap& h,
                           std::uint64_t seed);

}  // namespace metakkl::adapt
