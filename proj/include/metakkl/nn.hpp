#pragma once

#include "metakkl/autodiff.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace metakkl::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

enum class Activation { relu };

struct MlpSpec {
  int in_dim = 0;
  int out_dim = 0;
  std::vector<int> hidden{50, 50, 50, 50, 50};
  Activation activation = Activation::relu;

  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }
  bool operator==(const MlpSpec&) const = default;
};

/// Per-column standardization statistics.
struct Normalization {
  RowVector mean;
  RowVector std;

  static Normalization identity(int dim);
  Matrix standardize(const Matrix& v) const;
  Matrix destandardize(const Matrix& v) const;
};

/// Feedforward map parameters. weights[l] is out x in, biases[l] has length
/// out. Values are immutable in spirit: optimizers return updated copies.
struct MapParams {
  MlpSpec spec;
  std::vector<Matrix> weights;
  std::vector<RowVector> biases;
  Normalization norm_in;
  Normalization norm_out;

  std::size_t parameter_count() const;
};

inline constexpr double kStdFloor = 1e-8;

/// He-uniform weights in +-sqrt(6 / fan_in), zero biases, identity
/// normalization.
MapParams init_params(const MlpSpec& spec, std::uint64_t seed);

/// Sets norm_in / norm_out to the per-column mean and population std of the
/// data. Columns with std below kStdFloor are floored and reported in
/// `floored` when given.
MapParams fit_normalization(const MapParams& params, const Matrix& inputs,
                            const Matrix& outputs,
                            std::vector<std::string>* floored = nullptr);

/// Flat tensor list [W0, b0, W1, b1, ...] used by the optimizers.
std::vector<Matrix> tensors(const MapParams& params);
MapParams with_tensors(const MapParams& params, const std::vector<Matrix>& t);

/// Parameters placed on a graph.
struct BoundParams {
  std::vector<ad::Value> weights;
  std::vector<ad::Value> biases;

  std::vector<ad::Value> flat() const;
  static BoundParams from_flat(const std::vector<ad::Value>& flat);
};

BoundParams bind(ad::Graph& g, const MapParams& params, bool requires_grad);

/// standardize -> (affine, relu) x hidden -> affine -> de-standardize, with
/// every step recorded. `params` supplies the architecture and normalization;
/// `bound` the (possibly adapted) weights.
ad::Value forward(const MapParams& params, const BoundParams& bound,
                  const ad::Value& x);

/// Graph-free evaluation for inference.
Matrix predict(const MapParams& params, const Matrix& x);

}  // namespace metakkl::nn
