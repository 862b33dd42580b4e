#pragma once

#include "metakkl/data.hpp"
#include "metakkl/nn.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace metakkl::train {

using nn::BoundParams;
using nn::MapParams;

/// Differentiable output map h applied to rows of state estimates.
using OutputMap = std::function<ad::Value(const ad::Value&)>;

/// h(x) = x1 for the Duffing plant.
OutputMap duffing_output_map();

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { parallel, sequential, pinn, meta };

const char* method_name(Method m);
Method parse_method(const std::string& s);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;
};

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  double lr = 1e-3;
  /// Learning rate decays geometrically to lr * lr_final_factor.
  double lr_final_factor = 0.1;
  AdamHyper adam;
  std::uint64_t seed = 0;
  /// Separate stream for the inverse map; derived from `seed` when unset.
  std::optional<std::uint64_t> eta_seed;
  Method method = Method::parallel;
  double pinn_weight = 1.0;
  std::vector<int> hidden{50, 50, 50, 50, 50};
  int jobs = 1;

  std::uint64_t theta_stream() const;
  std::uint64_t eta_stream() const;
};

struct MetaConfig {
  int n_batch_meta = 4;
  int n_adapt = 5;
  int n_adapt_points = 32;
  int n_query = 128;
  int iterations = 1000;
  double alpha_init = 1e-2;
  bool first_order = false;
  bool pretrain = true;
};

/// One row of the loss-history CSV; NaN marks a loss the method does not use.
struct LossRecord {
  long iteration = 0;
  double loss_lz = 0.0;
  double loss_lx = 0.0;
  double loss_ly = 0.0;
  double alpha = 0.0;
};

struct TrainResult {
  MapParams theta;
  MapParams eta;
  std::vector<LossRecord> history;
};

struct MetaState {
  MapParams eta;
  double alpha = 0.0;
  std::vector<LossRecord> history;
  std::vector<std::string> warnings;
};

// -- losses (batch mean of squared Euclidean residuals) ---------------------

ad::Value mean_squared_residual(const ad::Value& target, const ad::Value& pred);

ad::Value loss_Lz(const ad::Value& z, const ad::Value& x, const MapParams& fwd,
                  const BoundParams& fwd_bound);
ad::Value loss_Lx_parallel(const ad::Value& x, const ad::Value& z,
                           const MapParams& inv, const BoundParams& inv_bound);
ad::Value loss_Lx_sequential(const ad::Value& x, const MapParams& fwd,
                             const BoundParams& fwd_bound, const MapParams& inv,
                             const BoundParams& inv_bound);
ad::Value loss_Ly(const ad::Value& y, const ad::Value& z, const MapParams& inv,
                  const BoundParams& inv_bound, const OutputMap& h);
/// Mean of |dF/dx f(x) - A F(x) - B h(x)|^2 over the rows of x.
ad::Value loss_pde_residual(ad::Graph& g, const Matrix& x, const MapParams& fwd,
                            const BoundParams& fwd_bound,
                            const SystemModel& model,
                            const ObserverDesign& design);

// -- optimizers --------------------------------------------------------------

/// Bias-corrected Adam update, in place.
void adam_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads,
               AdamState& state, double lr, const AdamHyper& hyper);

std::vector<Matrix> sgd_step(const std::vector<Matrix>& params,
                             const std::vector<Matrix>& grads, double lr);

// -- training algorithms -------------------------------------------------------

/// Independent Adam loops: theta on L_z, eta on L_x with true z inputs.
TrainResult train_parallel_mixed(const data::MixedDataset& data,
                                 const TrainConfig& cfg);

/// Only the eta half of train_parallel_mixed (used for meta pretraining).
MapParams train_inverse_parallel(const data::MixedDataset& data,
                                 const TrainConfig& cfg,
                                 std::vector<LossRecord>* history = nullptr);

/// Joint loop on the composed map. For Method::pinn the theta objective also
/// carries pinn_weight times the PDE residual; `model_for_task` supplies the
/// plant of each task (required only when that weight is nonzero).
TrainResult train_sequential_mixed(
    const data::MixedDataset& data, const TrainConfig& cfg,
    const ObserverDesign& design,
    const std::function<SystemModel(const data::Task&)>& model_for_task =
        data::task_model);

/// Meta-learning of the inverse map with output-loss adaptation steps and a
/// learnable adaptation rate. Tasks are drawn from `pool`. When `eta_init` is
/// empty, eta is pretrained with train_inverse_parallel if mcfg.pretrain and
/// freshly initialized otherwise.
MetaState train_meta(const data::MixedDataset& pool, const TrainConfig& cfg,
                     const MetaConfig& mcfg, const OutputMap& h,
                     const std::optional<MapParams>& eta_init = {});

/// Generates the task pool from `dist` and forwards to train_meta.
MetaState train_meta(const data::TaskDistribution& dist, int n_tasks,
                     const data::GenerationConfig& gen, const TrainConfig& cfg,
                     const MetaConfig& mcfg, const ObserverDesign& design,
                     const OutputMap& h);

/// eta <- eta - alpha * grad L_y, one step per batch; plain first-order
/// execution used for online adaptation. Returns the loss before each step.
MapParams adapt_inverse(const MapParams& eta, double alpha,
                        const std::vector<std::pair<Matrix, Matrix>>& batches,
                        const OutputMap& h,
                        std::vector<double>* losses = nullptr);

/// Loss-history CSV: iteration,loss_lz,loss_lx,loss_ly,alpha
void write_history_csv(const std::vector<LossRecord>& history,
                       const std::string& path);

}  // namespace metakkl::train
