#pragma once

// Tape-based reverse-mode differentiation over dense matrices. Backward rules
// are written in terms of recorded operations, so gradients computed with
// `create_graph` can be differentiated again (MAML meta-gradients, PDE
// residual Jacobian-vector products).

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metakkl::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

class Graph;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind {
  leaf,
  add,
  subtract,
  negate,
  elem_mul,
  matmul,
  matmul_nt,
  matmul_tn,
  relu,
  square,
  exp,
  sum,
  mean,
  scale,
  scale_by,
  affine,
  squared_norm,
  concat_cols,
  slice_cols,
  pad_cols,
  sum_rows,
  broadcast,
  broadcast_rows,
  add_rowwise,
};

const char* op_name(OpKind kind);

/// Handle to a node on a Graph. Cheap to copy; valid while the graph lives.
class Value {
 public:
  Value() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }

  const Matrix& data() const;
  Eigen::Index rows() const { return data().rows(); }
  Eigen::Index cols() const { return data().cols(); }
  bool requires_grad() const;
  /// data()(0, 0) of a 1x1 value.
  double item() const;

 private:
  friend class Graph;
  Value(Graph* g, int id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Backward rule: maps the output adjoint to one adjoint per input. Entries
/// for inputs that do not require gradients may be left invalid.
using BackwardFn =
    std::function<std::vector<Value>(const Value& grad_out, const Value& self)>;

struct Node {
  OpKind kind = OpKind::leaf;
  Matrix data;
  bool requires_grad = false;
  std::vector<int> parents;
  BackwardFn backward;
};

/// Append-only tape. Node ids are dense and in topological order. A graph and
/// its values belong to the thread that builds them.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Value constant(Matrix data);
  Value variable(Matrix data);
  Value scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }
  Value at(int id);

  Value record(OpKind kind, Matrix data, std::vector<Value> inputs,
               BackwardFn backward);

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  /// Disables recording of backward rules for the guard's lifetime.
  class NoGradGuard {
   public:
    explicit NoGradGuard(Graph& g) : g_(g), prev_(g.grad_enabled_) {
      g_.grad_enabled_ = false;
    }
    ~NoGradGuard() { g_.grad_enabled_ = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    Graph& g_;
    bool prev_;
  };

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

// -- operations -------------------------------------------------------------

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value neg(const Value& a);
Value mul(const Value& a, const Value& b);
Value matmul(const Value& a, const Value& b);
/// a * b^T
Value matmul_nt(const Value& a, const Value& b);
/// a^T * b
Value matmul_tn(const Value& a, const Value& b);
Value relu(const Value& a);
Value square(const Value& a);
Value exp(const Value& a);
Value sum(const Value& a);
Value mean(const Value& a);
Value scale(const Value& a, double c);
/// a times the 1x1 value s.
Value scale_by(const Value& a, const Value& s);
/// Column-wise a * col_scale + col_shift with constant coefficients.
Value affine(const Value& a, const RowVector& col_scale,
             const RowVector& col_shift);
Value squared_norm(const Value& a);
Value concat_cols(const Value& a, const Value& b);
Value slice_cols(const Value& a, Eigen::Index start, Eigen::Index count);
Value pad_cols(const Value& a, Eigen::Index start, Eigen::Index total);
/// Column sums as a 1 x cols row.
Value sum_rows(const Value& a);
/// Expands a 1x1 value to rows x cols.
Value broadcast(const Value& s, Eigen::Index rows, Eigen::Index cols);
/// Repeats a 1 x cols row `rows` times.
Value broadcast_rows(const Value& row, Eigen::Index rows);
/// Adds a 1 x cols row to every row of a.
Value add_rowwise(const Value& a, const Value& row);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator-(const Value& a) { return neg(a); }
inline Value operator*(const Value& a, double c) { return scale(a, c); }
inline Value operator*(double c, const Value& a) { return scale(a, c); }

// -- differentiation --------------------------------------------------------

/// d output / d wrt for a 1x1 `output`. With `create_graph` the returned
/// gradients are recorded values that can be differentiated again; otherwise
/// they are constants. Inputs outside the output's ancestry get zeros.
std::vector<Value> grad(const Value& output, std::span<const Value> wrt,
                        bool create_graph = false);

inline Value grad(const Value& output, const Value& wrt,
                  bool create_graph = false) {
  return grad(output, std::span<const Value>(&wrt, 1), create_graph)[0];
}

struct JvpResult {
  Value output;
  Value tangent_out;
};

/// Row-wise Jacobian-vector product of `fn` at `x` along `tangent`, obtained
/// by differentiating a vector-Jacobian product with respect to its dummy
/// cotangent. Both results stay differentiable w.r.t. anything `fn` reads.
JvpResult jvp(const std::function<Value(const Value&)>& fn, const Matrix& x,
              const Matrix& tangent, Graph& g);

// -- finite differences -----------------------------------------------------

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_row = -1;
  Eigen::Index worst_col = -1;
  int excluded = 0;
  bool passed = false;
};

/// Compares grad() against central differences. Coordinates where the two
/// one-sided differences disagree (kinks) are excluded. The relative error
/// uses max(|analytic|, |numeric|, floor) as denominator.
FiniteDiffReport finite_diff_check(
    const std::function<Value(Graph&, const Value&)>& f, const Matrix& point,
    double tol, double step = 1e-6, double floor = 1e-3);

}  // namespace metakkl::ad
