#include "metakkl/train.hpp"

#include "metakkl/util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace metakkl::train {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nn::MlpSpec spec_for(int in_dim, int out_dim, const std::vector<int>& hidden) {
  nn::MlpSpec s;
  s.in_dim = in_dim;
  s.out_dim = out_dim;
  s.hidden = hidden;
  return s;
}

std::vector<Matrix> values_to_matrices(const std::vector<ad::Value>& v) {
  std::vector<Matrix> out;
  out.reserve(v.size());
  for (const auto& x : v) out.push_back(x.data());
  return out;
}

double decayed_lr(const TrainConfig& cfg, int step, int steps) {
  if (steps <= 1) return cfg.lr;
  const double frac = static_cast<double>(step) / (steps - 1);
  return cfg.lr * std::pow(cfg.lr_final_factor, frac);
}

double epoch_lr(const TrainConfig& cfg, int epoch) {
  return decayed_lr(cfg, epoch, cfg.epochs);
}

void check_config(const TrainConfig& cfg, const data::MixedDataset& data) {
  if (data.rows() == 0) throw TrainingError("training data is empty");
  if (!(cfg.lr > 0)) throw ConfigError("training: lr must be positive");
  if (cfg.batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("training: epochs must be >= 0");
}

/// Shuffled mini-batches of global row indices for one epoch.
std::vector<std::vector<int>> epoch_batches(Eigen::Index rows, int batch_size,
                                            std::mt19937_64& rng) {
  std::vector<int> order(static_cast<size_t>(rows));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (size_t s = 0; s < order.size(); s += static_cast<size_t>(batch_size)) {
    const size_t e = std::min(order.size(), s + static_cast<size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<long>(s),
                         order.begin() + static_cast<long>(e));
  }
  return batches;
}

[[noreturn]] void numerical_failure(const char* what, int epoch, size_t batch,
                                    const std::exception& e) {
  throw TrainingError(std::string(what) + ": numerical failure at epoch " +
                      std::to_string(epoch) + ", batch " + std::to_string(batch) +
                      ": " + e.what());
}

struct Fitted {
  MapParams theta;
  MapParams eta;
};

Fitted initial_maps(const data::MixedDataset& data, const TrainConfig& cfg,
                    const Matrix& X, const Matrix& Z) {
  const int dx = static_cast<int>(X.cols()), dz = static_cast<int>(Z.cols());
  Fitted f;
  f.theta = nn::fit_normalization(
      nn::init_params(spec_for(dx, dz, cfg.hidden), derive_seed(cfg.theta_stream(), 0)),
      X, Z);
  f.eta = nn::fit_normalization(
      nn::init_params(spec_for(dz, dx, cfg.hidden), derive_seed(cfg.eta_stream(), 0)),
      Z, X);
  (void)data;
  return f;
}

}  // namespace

OutputMap duffing_output_map() {
  return [](const ad::Value& x) { return ad::slice_cols(x, 0, 1); };
}

const char* method_name(Method m) {
  switch (m) {
    case Method::parallel: return "parallel";
    case Method::sequential: return "sequential";
    case Method::pinn: return "pinn";
    case Method::meta: return "meta";
  }
  return "unknown";
}

Method parse_method(const std::string& s) {
  if (s == "parallel") return Method::parallel;
  if (s == "sequential") return Method::sequential;
  if (s == "pinn") return Method::pinn;
  if (s == "meta") return Method::meta;
  throw ConfigError("unknown method '" + s + "'");
}

std::uint64_t TrainConfig::theta_stream() const { return derive_seed(seed, 1); }

std::uint64_t TrainConfig::eta_stream() const {
  return eta_seed ? derive_seed(*eta_seed, 2) : derive_seed(seed, 2);
}

ad::Value mean_squared_residual(const ad::Value& target, const ad::Value& pred) {
  if (target.rows() == 0) throw std::invalid_argument("loss: empty batch");
  return ad::scale(ad::squared_norm(ad::sub(target, pred)),
                   1.0 / static_cast<double>(target.rows()));
}

ad::Value loss_Lz(const ad::Value& z, const ad::Value& x, const MapParams& fwd,
                  const BoundParams& fwd_bound) {
  return mean_squared_residual(z, nn::forward(fwd, fwd_bound, x));
}

ad::Value loss_Lx_parallel(const ad::Value& x, const ad::Value& z,
                           const MapParams& inv, const BoundParams& inv_bound) {
  return mean_squared_residual(x, nn::forward(inv, inv_bound, z));
}

ad::Value loss_Lx_sequential(const ad::Value& x, const MapParams& fwd,
                             const BoundParams& fwd_bound, const MapParams& inv,
                             const BoundParams& inv_bound) {
  const ad::Value z_hat = nn::forward(fwd, fwd_bound, x);
  return mean_squared_residual(x, nn::forward(inv, inv_bound, z_hat));
}

ad::Value loss_Ly(const ad::Value& y, const ad::Value& z, const MapParams& inv,
                  const BoundParams& inv_bound, const OutputMap& h) {
  return mean_squared_residual(y, h(nn::forward(inv, inv_bound, z)));
}

ad::Value loss_pde_residual(ad::Graph& g, const Matrix& x, const MapParams& fwd,
                            const BoundParams& fwd_bound,
                            const SystemModel& model,
                            const ObserverDesign& design) {
  if (x.rows() == 0) throw std::invalid_argument("loss_pde_residual: empty batch");
  const Matrix f = model.vector_field(x);
  const Matrix bh = model.outputs(x) * design.b.transpose();
  const ad::JvpResult r = ad::jvp(
      [&](const ad::Value& in) { return nn::forward(fwd, fwd_bound, in); }, x, f, g);
  const ad::Value a_f = ad::affine(r.output, design.a_diag.transpose(),
                                   ad::RowVector::Zero(design.dz));
  const ad::Value residual = ad::sub(ad::sub(r.tangent_out, a_f), g.constant(bh));
  return ad::scale(ad::squared_norm(residual), 1.0 / static_cast<double>(x.rows()));
}

void adam_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads,
               AdamState& state, double lr, const AdamHyper& hyper) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Matrix::Zero(p.rows(), p.cols()));
      state.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols())
      throw std::invalid_argument("adam_step: shape mismatch at tensor " +
                                  std::to_string(i));
    state.m[i] = hyper.beta1 * state.m[i] + (1 - hyper.beta1) * grads[i];
    state.v[i] = hyper.beta2 * state.v[i] +
                 (1 - hyper.beta2) * grads[i].cwiseAbs2();
    params[i].array() -= lr * (state.m[i].array() / c1) /
                         ((state.v[i].array() / c2).sqrt() + hyper.eps);
  }
}

std::vector<Matrix> sgd_step(const std::vector<Matrix>& params,
                             const std::vector<Matrix>& grads, double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument("sgd_step: parameter/gradient count mismatch");
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) out.push_back(params[i] - lr * grads[i]);
  return out;
}

namespace {

/// Supervised regression of `net` from `inputs` to `targets` with Adam.
MapParams fit_regression(MapParams net, const Matrix& inputs,
                         const Matrix& targets, const TrainConfig& cfg,
                         std::uint64_t stream, const char* what,
                         std::vector<LossRecord>* history, bool is_theta) {
  std::mt19937_64 rng(derive_seed(stream, 1));
  std::vector<Matrix> params = nn::tensors(net);
  AdamState adam;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = epoch_lr(cfg, epoch);
    const auto batches = epoch_batches(inputs.rows(), cfg.batch_size, rng);
    double total = 0.0;
    for (size_t b = 0; b < batches.size(); ++b) {
      try {
        ad::Graph g;
        const MapParams view = nn::with_tensors(net, params);
        const BoundParams bound = nn::bind(g, view, true);
        const ad::Value in = g.constant(data::rows_of(inputs, batches[b]));
        const ad::Value tgt = g.constant(data::rows_of(targets, batches[b]));
        const ad::Value loss = mean_squared_residual(tgt, nn::forward(view, bound, in));
        total += loss.item() * static_cast<double>(batches[b].size());
        adam_step(params, values_to_matrices(ad::grad(loss, bound.flat())), adam,
                  lr, cfg.adam);
      } catch (const ad::NumericalError& e) {
        numerical_failure(what, epoch, b, e);
      }
    }
    if (history) {
      const double mean = total / static_cast<double>(inputs.rows());
      history->push_back({epoch, is_theta ? mean : kNaN, is_theta ? kNaN : mean,
                          kNaN, kNaN});
    }
  }
  return nn::with_tensors(net, params);
}

}  // namespace

MapParams train_inverse_parallel(const data::MixedDataset& data,
                                 const TrainConfig& cfg,
                                 std::vector<LossRecord>* history) {
  check_config(cfg, data);
  const Matrix X = data.stacked_x(), Z = data.stacked_z();
  const Fitted init = initial_maps(data, cfg, X, Z);
  return fit_regression(init.eta, Z, X, cfg, cfg.eta_stream(), "parallel eta",
                        history, false);
}

TrainResult train_parallel_mixed(const data::MixedDataset& data,
                                 const TrainConfig& cfg) {
  check_config(cfg, data);
  const Matrix X = data.stacked_x(), Z = data.stacked_z();
  const Fitted init = initial_maps(data, cfg, X, Z);
  std::vector<LossRecord> theta_hist, eta_hist;
  TrainResult r;
  r.theta = fit_regression(init.theta, X, Z, cfg, cfg.theta_stream(),
                           "parallel theta", &theta_hist, true);
  r.eta = fit_regression(init.eta, Z, X, cfg, cfg.eta_stream(), "parallel eta",
                         &eta_hist, false);
  for (size_t e = 0; e < theta_hist.size(); ++e)
    r.history.push_back({static_cast<long>(e), theta_hist[e].loss_lz,
                         eta_hist[e].loss_lx, kNaN, kNaN});
  return r;
}

TrainResult train_sequential_mixed(
    const data::MixedDataset& data, const TrainConfig& cfg,
    const ObserverDesign& design,
    const std::function<SystemModel(const data::Task&)>& model_for_task) {
  check_config(cfg, data);
  const Matrix X = data.stacked_x(), Z = data.stacked_z();
  const Fitted init = initial_maps(data, cfg, X, Z);
  const bool use_pde = cfg.method == Method::pinn && cfg.pinn_weight != 0.0;

  std::vector<SystemModel> models;
  if (use_pde)
    for (const auto& t : data.tasks) models.push_back(model_for_task(t.task));

  std::mt19937_64 rng(derive_seed(cfg.theta_stream(), 1));
  std::vector<Matrix> theta = nn::tensors(init.theta), eta = nn::tensors(init.eta);
  AdamState adam_theta, adam_eta;
  TrainResult r;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = epoch_lr(cfg, epoch);
    const auto batches = epoch_batches(X.rows(), cfg.batch_size, rng);
    double sum_lx = 0.0, sum_lz = 0.0;
    for (size_t b = 0; b < batches.size(); ++b) {
      try {
        ad::Graph g;
        const MapParams tv = nn::with_tensors(init.theta, theta);
        const MapParams ev = nn::with_tensors(init.eta, eta);
        const BoundParams tb = nn::bind(g, tv, true);
        const BoundParams eb = nn::bind(g, ev, true);
        const Matrix xb = data::rows_of(X, batches[b]);
        const ad::Value x = g.constant(xb);
        const ad::Value z = g.constant(data::rows_of(Z, batches[b]));
        const ad::Value z_hat = nn::forward(tv, tb, x);
        const ad::Value lx = mean_squared_residual(x, nn::forward(ev, eb, z_hat));
        const ad::Value lz = mean_squared_residual(z, z_hat);
        ad::Value theta_obj = ad::add(lx, lz);
        if (use_pde) {
          // Group rows by task so each residual uses its own plant.
          std::vector<std::vector<int>> by_task(data.tasks.size());
          for (int row : batches[b])
            by_task[static_cast<size_t>(data.index[static_cast<size_t>(row)].first)]
                .push_back(row);
          for (size_t t = 0; t < by_task.size(); ++t) {
            if (by_task[t].empty()) continue;
            const ad::Value pde = loss_pde_residual(
                g, data::rows_of(X, by_task[t]), tv, tb, models[t], design);
            const double share = static_cast<double>(by_task[t].size()) /
                                 static_cast<double>(batches[b].size());
            theta_obj = ad::add(theta_obj, ad::scale(pde, cfg.pinn_weight * share));
          }
        }
        sum_lx += lx.item() * static_cast<double>(batches[b].size());
        sum_lz += lz.item() * static_cast<double>(batches[b].size());
        const auto g_theta = values_to_matrices(ad::grad(theta_obj, tb.flat()));
        const auto g_eta = values_to_matrices(ad::grad(lx, eb.flat()));
        adam_step(theta, g_theta, adam_theta, lr, cfg.adam);
        adam_step(eta, g_eta, adam_eta, lr, cfg.adam);
      } catch (const ad::NumericalError& e) {
        numerical_failure("sequential", epoch, b, e);
      }
    }
    const double n = static_cast<double>(X.rows());
    r.history.push_back({epoch, sum_lz / n, sum_lx / n, kNaN, kNaN});
  }
  r.theta = nn::with_tensors(init.theta, theta);
  r.eta = nn::with_tensors(init.eta, eta);
  return r;
}

namespace {

struct TaskMetaGrad {
  std::vector<Matrix> eta;
  double log_alpha = 0.0;
  double query_lx = 0.0;
  double first_ly = 0.0;
};

TaskMetaGrad meta_task_gradient(const data::TaskDataset& ds,
                                const MapParams& eta, double log_alpha,
                                const MetaConfig& mcfg, const OutputMap& h,
                                std::uint64_t seed) {
  const int adapt_rows = mcfg.n_adapt * mcfg.n_adapt_points;
  const int max_adapt = static_cast<int>(ds.rows()) - 1;
  if (adapt_rows > max_adapt)
    throw ConfigError("meta: task has too few rows for n_adapt * n_adapt_points");
  auto [adapt, query] = data::split_adapt_query(ds, adapt_rows, seed, mcfg.n_query);

  ad::Graph g;
  const BoundParams base = nn::bind(g, eta, true);
  const ad::Value log_a = g.variable(Matrix::Constant(1, 1, log_alpha));
  const ad::Value alpha = ad::exp(log_a);

  TaskMetaGrad out;
  std::vector<ad::Value> cur = base.flat();
  for (int j = 0; j < mcfg.n_adapt; ++j) {
    const std::vector<int> rows(adapt.begin() + j * mcfg.n_adapt_points,
                                adapt.begin() + (j + 1) * mcfg.n_adapt_points);
    const ad::Value za = g.constant(data::rows_of(ds.z, rows));
    const ad::Value ya = g.constant(data::rows_of(ds.y, rows));
    const ad::Value ly = loss_Ly(ya, za, eta, BoundParams::from_flat(cur), h);
    if (j == 0) out.first_ly = ly.item();
    const std::vector<ad::Value> grads = ad::grad(ly, cur, !mcfg.first_order);
    for (size_t k = 0; k < cur.size(); ++k)
      cur[k] = ad::sub(cur[k], ad::scale_by(grads[k], alpha));
  }
  const ad::Value xq = g.constant(data::rows_of(ds.x, query));
  const ad::Value zq = g.constant(data::rows_of(ds.z, query));
  const ad::Value lx = loss_Lx_parallel(xq, zq, eta, BoundParams::from_flat(cur));
  out.query_lx = lx.item();

  std::vector<ad::Value> wrt = base.flat();
  wrt.push_back(log_a);
  const std::vector<ad::Value> grads = ad::grad(lx, wrt);
  for (size_t k = 0; k + 1 < grads.size(); ++k) out.eta.push_back(grads[k].data());
  out.log_alpha = grads.back().item();
  return out;
}

}  // namespace

MetaState train_meta(const data::MixedDataset& pool, const TrainConfig& cfg,
                     const MetaConfig& mcfg, const OutputMap& h,
                     const std::optional<MapParams>& eta_init) {
  check_config(cfg, pool);
  if (mcfg.n_batch_meta < 1) throw ConfigError("meta: n_batch_meta must be >= 1");
  if (mcfg.n_adapt < 0) throw ConfigError("meta: n_adapt must be >= 0");
  if (mcfg.n_adapt_points < 1) throw ConfigError("meta: n_adapt_points must be >= 1");
  if (!(mcfg.alpha_init > 0)) throw ConfigError("meta: alpha_init must be positive");

  MetaState state;
  if (eta_init) {
    state.eta = *eta_init;
  } else if (mcfg.pretrain) {
    state.eta = train_inverse_parallel(pool, cfg);
  } else {
    const Matrix X = pool.stacked_x(), Z = pool.stacked_z();
    state.eta = initial_maps(pool, cfg, X, Z).eta;
  }

  std::vector<Matrix> eta = nn::tensors(state.eta);
  std::vector<Matrix> log_alpha{Matrix::Constant(1, 1, std::log(mcfg.alpha_init))};
  AdamState adam_eta, adam_alpha;
  std::mt19937_64 rng(derive_seed(cfg.eta_stream(), 17));
  const int pool_size = static_cast<int>(pool.tasks.size());
  bool warned = false;

  for (int it = 0; it < mcfg.iterations; ++it) {
    std::vector<int> picks;
    if (pool_size >= mcfg.n_batch_meta) {
      std::vector<int> order(static_cast<size_t>(pool_size));
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      picks.assign(order.begin(), order.begin() + mcfg.n_batch_meta);
    } else {
      std::uniform_int_distribution<int> pick(0, pool_size - 1);
      for (int i = 0; i < mcfg.n_batch_meta; ++i) picks.push_back(pick(rng));
    }
    const std::uint64_t iter_seed = rng();
    const MapParams current = nn::with_tensors(state.eta, eta);
    const double la = log_alpha[0](0, 0);

    std::vector<TaskMetaGrad> parts;
    try {
      parts = parallel_map(mcfg.n_batch_meta, cfg.jobs, [&](int i) {
        return meta_task_gradient(pool.tasks[static_cast<size_t>(picks[static_cast<size_t>(i)])],
                                  current, la, mcfg, h,
                                  derive_seed(iter_seed, static_cast<std::uint64_t>(i)));
      });
    } catch (const ad::NumericalError& e) {
      throw TrainingError("meta: numerical failure at iteration " +
                          std::to_string(it) + ": " + e.what());
    }

    // Ordered reduction over the meta-batch.
    std::vector<Matrix> g_eta = parts[0].eta;
    double g_alpha = parts[0].log_alpha, lx = parts[0].query_lx, ly = parts[0].first_ly;
    for (size_t i = 1; i < parts.size(); ++i) {
      for (size_t k = 0; k < g_eta.size(); ++k) g_eta[k] += parts[i].eta[k];
      g_alpha += parts[i].log_alpha;
      lx += parts[i].query_lx;
      ly += parts[i].first_ly;
    }
    if (!std::isfinite(lx))
      throw TrainingError("meta: non-finite loss at iteration " + std::to_string(it));
    const double lr = decayed_lr(cfg, it, mcfg.iterations);
    adam_step(eta, g_eta, adam_eta, lr, cfg.adam);
    adam_step(log_alpha, {Matrix::Constant(1, 1, g_alpha)}, adam_alpha, lr, cfg.adam);
    const double alpha = std::exp(log_alpha[0](0, 0));
    if (alpha < 1e-10 && !warned) {
      state.warnings.push_back("meta: adaptation rate collapsed below 1e-10 at iteration " +
                               std::to_string(it));
      warned = true;
    }
    const double n = static_cast<double>(parts.size());
    state.history.push_back({it, kNaN, lx / n, mcfg.n_adapt > 0 ? ly / n : kNaN, alpha});
  }
  state.eta = nn::with_tensors(state.eta, eta);
  state.alpha = std::exp(log_alpha[0](0, 0));
  return state;
}

MetaState train_meta(const data::TaskDistribution& dist, int n_tasks,
                     const data::GenerationConfig& gen, const TrainConfig& cfg,
                     const MetaConfig& mcfg, const ObserverDesign& design,
                     const OutputMap& h) {
  const auto tasks = data::make_training_tasks(dist, n_tasks, cfg.seed);
  std::vector<data::TaskDataset> sets;
  for (const auto& t : tasks)
    sets.push_back(data::generate_task_dataset(t, data::task_model(t), design, gen));
  return train_meta(data::MixedDataset::from(std::move(sets)), cfg, mcfg, h);
}

MapParams adapt_inverse(const MapParams& eta, double alpha,
                        const std::vector<std::pair<Matrix, Matrix>>& batches,
                        const OutputMap& h, std::vector<double>* losses) {
  std::vector<Matrix> params = nn::tensors(eta);
  for (const auto& [z, y] : batches) {
    ad::Graph g;
    const MapParams view = nn::with_tensors(eta, params);
    const BoundParams bound = nn::bind(g, view, true);
    const ad::Value ly = loss_Ly(g.constant(y), g.constant(z), view, bound, h);
    if (losses) losses->push_back(ly.item());
    params = sgd_step(params, values_to_matrices(ad::grad(ly, bound.flat())), alpha);
  }
  return nn::with_tensors(eta, params);
}

void write_history_csv(const std::vector<LossRecord>& history,
                       const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "iteration,loss_lz,loss_lx,loss_ly,alpha\n";
  for (const auto& r : history)
    os << r.iteration << ',' << data::format_double(r.loss_lz) << ','
       << data::format_double(r.loss_lx) << ',' << data::format_double(r.loss_ly)
       << ',' << data::format_double(r.alpha) << '\n';
}

}  // namespace metakkl::train
