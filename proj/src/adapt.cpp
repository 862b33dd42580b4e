#include "metakkl/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

namespace metakkl::adapt {

const char* kind_name(SamplingKind k) {
  switch (k) {
    case SamplingKind::minimum: return "minimum";
    case SamplingKind::minimum_delayed: return "minimum-delayed";
    case SamplingKind::window_random: return "window-random";
    case SamplingKind::window_random_delayed: return "window-random-delayed";
  }
  return "unknown";
}

SamplingKind parse_kind(const std::string& s) {
  if (s == "minimum") return SamplingKind::minimum;
  if (s == "minimum-delayed") return SamplingKind::minimum_delayed;
  if (s == "window-random") return SamplingKind::window_random;
  if (s == "window-random-delayed" || s == "window-delayed")
    return SamplingKind::window_random_delayed;
  throw ConfigError("unknown sampling strategy '" + s + "'");
}

SamplingStrategy make_strategy(SamplingKind kind, double tau, double window_length) {
  if (tau > 0) throw ConfigError("make_strategy: tau must be <= 0");
  return {kind, window_length, -tau};
}

double t_init_min(int n_batch, int n_adapt, double dt) {
  return static_cast<double>(n_batch) * n_adapt * dt;
}

std::vector<int> Selection::indices() const {
  std::vector<int> out;
  for (const auto& b : batches) out.insert(out.end(), b.begin(), b.end());
  return out;
}

namespace {

std::string seconds(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

long steps_for(double duration, double dt) {
  return static_cast<long>(std::ceil(duration / dt - 1e-9));
}

}  // namespace

Selection select_indices(const SamplingStrategy& strategy, long n_samples,
                         double dt, int n_batch, int n_adapt,
                         std::uint64_t seed) {
  if (!(dt > 0)) throw ConfigError("select_samples: dt must be positive");
  if (n_batch < 1 || n_adapt < 0)
    throw ConfigError("select_samples: need n_batch >= 1 and n_adapt >= 0");
  if (strategy.delay < 0) throw ConfigError("select_samples: delay must be >= 0");
  const long needed = static_cast<long>(n_batch) * n_adapt;
  const long start = steps_for(strategy.effective_delay(), dt);
  const double have = static_cast<double>(n_samples) * dt;

  std::vector<int> chosen;
  if (!strategy.windowed()) {
    if (start + needed > n_samples)
      throw InsufficientDataError(
          std::string("select_samples: strategy ") + kind_name(strategy.kind) +
          " requires " + seconds(static_cast<double>(start + needed) * dt) +
          " s of data, trajectory covers " + seconds(have) + " s");
    chosen.resize(static_cast<size_t>(needed));
    std::iota(chosen.begin(), chosen.end(), static_cast<int>(start));
  } else {
    if (strategy.window_length < t_init_min(n_batch, n_adapt, dt))
      throw ConfigError("select_samples: window_length below t_init_min");
    const long width = static_cast<long>(std::floor(strategy.window_length / dt + 1e-9));
    if (start + width > n_samples)
      throw InsufficientDataError(
          std::string("select_samples: strategy ") + kind_name(strategy.kind) +
          " requires " + seconds(static_cast<double>(start + width) * dt) +
          " s of data, trajectory covers " + seconds(have) + " s");
    std::vector<int> pool(static_cast<size_t>(width));
    std::iota(pool.begin(), pool.end(), static_cast<int>(start));
    std::mt19937_64 rng(seed);
    for (long i = 0; i < needed; ++i) {
      std::uniform_int_distribution<long> pick(i, width - 1);
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(pick(rng))]);
    }
    chosen.assign(pool.begin(), pool.begin() + needed);
    std::sort(chosen.begin(), chosen.end());
  }

  Selection sel;
  for (int j = 0; j < n_adapt; ++j)
    sel.batches.emplace_back(chosen.begin() + static_cast<long>(j) * n_batch,
                             chosen.begin() + static_cast<long>(j + 1) * n_batch);
  return sel;
}

std::vector<std::pair<Matrix, Matrix>> select_samples(
    const SamplingStrategy& strategy, const Trajectory& z_traj, const Matrix& y,
    int n_batch, int n_adapt, std::uint64_t seed, Selection* selection) {
  if (z_traj.states.rows() != y.rows())
    throw std::invalid_argument("select_samples: z and y lengths differ");
  if (z_traj.times.size() < 2)
    throw InsufficientDataError("select_samples: trajectory has fewer than 2 samples");
  const double dt = z_traj.times(1) - z_traj.times(0);
  Selection sel = select_indices(strategy, y.rows(), dt, n_batch, n_adapt, seed);
  std::vector<std::pair<Matrix, Matrix>> out;
  for (const auto& b : sel.batches)
    out.emplace_back(data::rows_of(z_traj.states, b), data::rows_of(y, b));
  if (selection) *selection = std::move(sel);
  return out;
}

AdaptationRun online_adapt(const train::MetaState& meta, const Trajectory& z_traj,
                           const Matrix& y, const SamplingStrategy& strategy,
                           int n_batch, int n_adapt, const train::OutputMap& h,
                           std::uint64_t seed) {
  Selection sel;
  const auto batches = select_samples(strategy, z_traj, y, n_batch, n_adapt, seed, &sel);
  AdaptationRun run;
  run.eta_adapted = train::adapt_inverse(meta.eta, meta.alpha, batches, h, &run.losses);
  run.samples_used = sel.indices();
  const double dt = z_traj.times(1) - z_traj.times(0);
  run.t_init_actual =
      run.samples_used.empty() ? 0.0 : (run.samples_used.back() + 1) * dt;
  return run;
}

}  // namespace metakkl::adapt
