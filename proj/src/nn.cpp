#include "metakkl/nn.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace metakkl::nn {

Normalization Normalization::identity(int dim) {
  return {RowVector::Zero(dim), RowVector::Ones(dim)};
}

Matrix Normalization::standardize(const Matrix& v) const {
  return ((v.rowwise() - mean).array().rowwise() / std.array()).matrix();
}

Matrix Normalization::destandardize(const Matrix& v) const {
  return (v.array().rowwise() * std.array()).matrix().rowwise() + mean;
}

std::size_t MapParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
  for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
  return n;
}

MapParams init_params(const MlpSpec& spec, std::uint64_t seed) {
  if (spec.in_dim < 1 || spec.out_dim < 1)
    throw std::invalid_argument("init_params: dimensions must be >= 1");
  MapParams p;
  p.spec = spec;
  std::mt19937_64 rng(seed);
  int fan_in = spec.in_dim;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int fan_out = l + 1 < spec.layer_count() ? spec.hidden[l] : spec.out_dim;
    if (fan_out < 1) throw std::invalid_argument("init_params: empty layer");
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix w(fan_out, fan_in);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
    p.weights.push_back(std::move(w));
    p.biases.push_back(RowVector::Zero(fan_out));
    fan_in = fan_out;
  }
  p.norm_in = Normalization::identity(spec.in_dim);
  p.norm_out = Normalization::identity(spec.out_dim);
  return p;
}

namespace {

Normalization column_stats(const Matrix& data, const char* side,
                           std::vector<std::string>* floored) {
  Normalization n;
  n.mean = data.colwise().mean();
  const Matrix centered = data.rowwise() - n.mean;
  n.std = (centered.colwise().squaredNorm() / static_cast<double>(data.rows()))
              .array()
              .sqrt()
              .matrix();
  for (Eigen::Index j = 0; j < n.std.size(); ++j) {
    if (n.std(j) < kStdFloor) {
      n.std(j) = kStdFloor;
      if (floored)
        floored->push_back(std::string(side) + " column " + std::to_string(j) +
                           " has zero variance; std floored");
    }
  }
  return n;
}

}  // namespace

MapParams fit_normalization(const MapParams& params, const Matrix& inputs,
                            const Matrix& outputs,
                            std::vector<std::string>* floored) {
  if (inputs.rows() < 2 || outputs.rows() < 2)
    throw std::invalid_argument("fit_normalization: need at least 2 rows");
  if (inputs.cols() != params.spec.in_dim || outputs.cols() != params.spec.out_dim)
    throw std::invalid_argument("fit_normalization: column count mismatch");
  MapParams p = params;
  p.norm_in = column_stats(inputs, "input", floored);
  p.norm_out = column_stats(outputs, "output", floored);
  return p;
}

std::vector<Matrix> tensors(const MapParams& params) {
  std::vector<Matrix> t;
  t.reserve(params.weights.size() * 2);
  for (size_t l = 0; l < params.weights.size(); ++l) {
    t.push_back(params.weights[l]);
    t.push_back(params.biases[l]);
  }
  return t;
}

MapParams with_tensors(const MapParams& params, const std::vector<Matrix>& t) {
  if (t.size() != params.weights.size() * 2)
    throw std::invalid_argument("with_tensors: tensor count mismatch");
  MapParams p = params;
  for (size_t l = 0; l < p.weights.size(); ++l) {
    if (t[2 * l].rows() != p.weights[l].rows() ||
        t[2 * l].cols() != p.weights[l].cols() ||
        t[2 * l + 1].size() != p.biases[l].size())
      throw std::invalid_argument("with_tensors: shape mismatch in layer " +
                                  std::to_string(l));
    p.weights[l] = t[2 * l];
    p.biases[l] = t[2 * l + 1].reshaped(1, p.biases[l].size());
  }
  return p;
}

std::vector<ad::Value> BoundParams::flat() const {
  std::vector<ad::Value> v;
  v.reserve(weights.size() * 2);
  for (size_t l = 0; l < weights.size(); ++l) {
    v.push_back(weights[l]);
    v.push_back(biases[l]);
  }
  return v;
}

BoundParams BoundParams::from_flat(const std::vector<ad::Value>& flat) {
  if (flat.size() % 2 != 0)
    throw std::invalid_argument("BoundParams::from_flat: odd tensor count");
  BoundParams b;
  for (size_t i = 0; i < flat.size(); i += 2) {
    b.weights.push_back(flat[i]);
    b.biases.push_back(flat[i + 1]);
  }
  return b;
}

BoundParams bind(ad::Graph& g, const MapParams& params, bool requires_grad) {
  BoundParams b;
  for (size_t l = 0; l < params.weights.size(); ++l) {
    b.weights.push_back(requires_grad ? g.variable(params.weights[l])
                                      : g.constant(params.weights[l]));
    b.biases.push_back(requires_grad ? g.variable(params.biases[l])
                                     : g.constant(params.biases[l]));
  }
  return b;
}

ad::Value forward(const MapParams& params, const BoundParams& bound,
                  const ad::Value& x) {
  if (x.cols() != params.spec.in_dim)
    throw ad::ShapeError("forward: input has " + std::to_string(x.cols()) +
                         " columns, expected " +
                         std::to_string(params.spec.in_dim));
  const RowVector in_scale = params.norm_in.std.cwiseInverse();
  const RowVector in_shift = -params.norm_in.mean.cwiseProduct(in_scale);
  ad::Value h = ad::affine(x, in_scale, in_shift);
  const size_t layers = bound.weights.size();
  for (size_t l = 0; l < layers; ++l) {
    h = ad::add_rowwise(ad::matmul_nt(h, bound.weights[l]), bound.biases[l]);
    if (l + 1 < layers) h = ad::relu(h);
  }
  return ad::affine(h, params.norm_out.std, params.norm_out.mean);
}

Matrix predict(const MapParams& params, const Matrix& x) {
  if (x.cols() != params.spec.in_dim)
    throw std::invalid_argument("predict: input column count mismatch");
  Matrix h = params.norm_in.standardize(x);
  const size_t layers = params.weights.size();
  for (size_t l = 0; l < layers; ++l) {
    Matrix next = h * params.weights[l].transpose();
    next.rowwise() += params.biases[l];
    if (l + 1 < layers) next = next.cwiseMax(0.0);
    h = std::move(next);
  }
  return params.norm_out.destandardize(h);
}

}  // namespace metakkl::nn
