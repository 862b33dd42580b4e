#include "metakkl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

namespace metakkl::ad {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::subtract: return "subtract";
    case OpKind::negate: return "negate";
    case OpKind::elem_mul: return "element-multiply";
    case OpKind::matmul: return "matrix-multiply";
    case OpKind::matmul_nt: return "matrix-multiply-nt";
    case OpKind::matmul_tn: return "matrix-multiply-tn";
    case OpKind::relu: return "relu";
    case OpKind::square: return "square";
    case OpKind::exp: return "exp";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::scale: return "scalar-multiply";
    case OpKind::scale_by: return "scale-by";
    case OpKind::affine: return "affine-normalize";
    case OpKind::squared_norm: return "squared-norm";
    case OpKind::concat_cols: return "concat";
    case OpKind::slice_cols: return "slice";
    case OpKind::pad_cols: return "pad";
    case OpKind::sum_rows: return "sum-rows";
    case OpKind::broadcast: return "broadcast";
    case OpKind::broadcast_rows: return "broadcast-rows";
    case OpKind::add_rowwise: return "add-rowwise";
  }
  return "unknown";
}

const Matrix& Value::data() const { return graph_->node(id_).data; }

bool Value::requires_grad() const { return graph_->node(id_).requires_grad; }

double Value::item() const {
  const Matrix& d = data();
  if (d.rows() != 1 || d.cols() != 1)
    throw ShapeError("item: value is not 1x1");
  return d(0, 0);
}

Value Graph::constant(Matrix data) {
  Node n;
  n.data = std::move(data);
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int>(nodes_.size() - 1));
}

Value Graph::variable(Matrix data) {
  Node n;
  n.data = std::move(data);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int>(nodes_.size() - 1));
}

Value Graph::at(int id) {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw std::out_of_range("graph: node id out of range");
  return Value(this, id);
}

Value Graph::record(OpKind kind, Matrix data, std::vector<Value> inputs,
                    BackwardFn backward) {
  if (!data.allFinite())
    throw NumericalError(std::string("non-finite result in op ") +
                         op_name(kind));
  Node n;
  n.kind = kind;
  n.data = std::move(data);
  const bool needs =
      grad_enabled_ && std::any_of(inputs.begin(), inputs.end(),
                                   [](const Value& v) { return v.requires_grad(); });
  if (needs) {
    n.requires_grad = true;
    n.parents.reserve(inputs.size());
    for (const Value& v : inputs) n.parents.push_back(v.id());
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int>(nodes_.size() - 1));
}

namespace {

std::string shape(const Value& v) {
  std::ostringstream os;
  os << v.rows() << "x" << v.cols();
  return os.str();
}

[[noreturn]] void shape_error(OpKind kind, const Value& a, const Value& b) {
  throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " +
                   shape(a) + " and " + shape(b));
}

void same_graph(const Value& a, const Value& b) {
  if (&a.graph() != &b.graph())
    throw std::invalid_argument("values belong to different graphs");
}

void require_same_shape(OpKind kind, const Value& a, const Value& b) {
  same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(kind, a, b);
}

void require_scalar(OpKind kind, const Value& s) {
  if (s.rows() != 1 || s.cols() != 1)
    throw ShapeError(std::string(op_name(kind)) + ": expected 1x1 value, got " +
                     shape(s));
}

}  // namespace

Value add(const Value& a, const Value& b) {
  require_same_shape(OpKind::add, a, b);
  return a.graph().record(OpKind::add, a.data() + b.data(), {a, b},
                          [](const Value& g, const Value&) {
                            return std::vector<Value>{g, g};
                          });
}

Value sub(const Value& a, const Value& b) {
  require_same_shape(OpKind::subtract, a, b);
  return a.graph().record(OpKind::subtract, a.data() - b.data(), {a, b},
                          [b](const Value& g, const Value&) {
                            return std::vector<Value>{
                                g, b.requires_grad() ? neg(g) : Value()};
                          });
}

Value neg(const Value& a) {
  return a.graph().record(OpKind::negate, -a.data(), {a},
                          [](const Value& g, const Value&) {
                            return std::vector<Value>{neg(g)};
                          });
}

Value mul(const Value& a, const Value& b) {
  require_same_shape(OpKind::elem_mul, a, b);
  return a.graph().record(
      OpKind::elem_mul, a.data().cwiseProduct(b.data()), {a, b},
      [a, b](const Value& g, const Value&) {
        return std::vector<Value>{a.requires_grad() ? mul(g, b) : Value(),
                                  b.requires_grad() ? mul(g, a) : Value()};
      });
}

Value matmul(const Value& a, const Value& b) {
  same_graph(a, b);
  if (a.cols() != b.rows()) shape_error(OpKind::matmul, a, b);
  return a.graph().record(
      OpKind::matmul, a.data() * b.data(), {a, b},
      [a, b](const Value& g, const Value&) {
        return std::vector<Value>{a.requires_grad() ? matmul_nt(g, b) : Value(),
                                  b.requires_grad() ? matmul_tn(a, g) : Value()};
      });
}

Value matmul_nt(const Value& a, const Value& b) {
  same_graph(a, b);
  if (a.cols() != b.cols()) shape_error(OpKind::matmul_nt, a, b);
  return a.graph().record(
      OpKind::matmul_nt, a.data() * b.data().transpose(), {a, b},
      [a, b](const Value& g, const Value&) {
        return std::vector<Value>{a.requires_grad() ? matmul(g, b) : Value(),
                                  b.requires_grad() ? matmul_tn(g, a) : Value()};
      });
}

Value matmul_tn(const Value& a, const Value& b) {
  same_graph(a, b);
  if (a.rows() != b.rows()) shape_error(OpKind::matmul_tn, a, b);
  return a.graph().record(
      OpKind::matmul_tn, a.data().transpose() * b.data(), {a, b},
      [a, b](const Value& g, const Value&) {
        return std::vector<Value>{a.requires_grad() ? matmul_nt(b, g) : Value(),
                                  b.requires_grad() ? matmul(a, g) : Value()};
      });
}

Value relu(const Value& a) {
  return a.graph().record(
      OpKind::relu, a.data().cwiseMax(0.0), {a},
      [a](const Value& g, const Value&) {
        // Derivative at exactly zero is taken as zero.
        Matrix mask = (a.data().array() > 0.0).cast<double>().matrix();
        return std::vector<Value>{mul(g, g.graph().constant(std::move(mask)))};
      });
}

Value square(const Value& a) {
  return a.graph().record(OpKind::square, a.data().cwiseAbs2(), {a},
                          [a](const Value& g, const Value&) {
                            return std::vector<Value>{scale(mul(g, a), 2.0)};
                          });
}

Value exp(const Value& a) {
  return a.graph().record(OpKind::exp, a.data().array().exp().matrix(), {a},
                          [](const Value& g, const Value& self) {
                            return std::vector<Value>{mul(g, self)};
                          });
}

Value sum(const Value& a) {
  return a.graph().record(OpKind::sum, Matrix::Constant(1, 1, a.data().sum()),
                          {a},
                          [a](const Value& g, const Value&) {
                            return std::vector<Value>{
                                broadcast(g, a.rows(), a.cols())};
                          });
}

Value mean(const Value& a) {
  const double n = static_cast<double>(a.data().size());
  if (n == 0) throw ShapeError("mean: empty value");
  return a.graph().record(
      OpKind::mean, Matrix::Constant(1, 1, a.data().sum() / n), {a},
      [a, n](const Value& g, const Value&) {
        return std::vector<Value>{scale(broadcast(g, a.rows(), a.cols()), 1.0 / n)};
      });
}

Value scale(const Value& a, double c) {
  return a.graph().record(OpKind::scale, a.data() * c, {a},
                          [c](const Value& g, const Value&) {
                            return std::vector<Value>{scale(g, c)};
                          });
}

Value scale_by(const Value& a, const Value& s) {
  same_graph(a, s);
  require_scalar(OpKind::scale_by, s);
  return a.graph().record(
      OpKind::scale_by, a.data() * s.item(), {a, s},
      [a, s](const Value& g, const Value&) {
        return std::vector<Value>{a.requires_grad() ? scale_by(g, s) : Value(),
                                  s.requires_grad() ? sum(mul(g, a)) : Value()};
      });
}

Value affine(const Value& a, const RowVector& col_scale,
             const RowVector& col_shift) {
  if (col_scale.size() != a.cols() || col_shift.size() != a.cols())
    throw ShapeError("affine-normalize: coefficient length " +
                     std::to_string(col_scale.size()) + " does not match " +
                     shape(a));
  Matrix out = (a.data().array().rowwise() * col_scale.array()).rowwise() +
               col_shift.array();
  return a.graph().record(
      OpKind::affine, std::move(out), {a},
      [col_scale](const Value& g, const Value&) {
        return std::vector<Value>{
            affine(g, col_scale, RowVector::Zero(col_scale.size()))};
      });
}

Value squared_norm(const Value& a) {
  return a.graph().record(OpKind::squared_norm,
                          Matrix::Constant(1, 1, a.data().squaredNorm()), {a},
                          [a](const Value& g, const Value&) {
                            return std::vector<Value>{scale(scale_by(a, g), 2.0)};
                          });
}

Value concat_cols(const Value& a, const Value& b) {
  same_graph(a, b);
  if (a.rows() != b.rows()) shape_error(OpKind::concat_cols, a, b);
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.data(), b.data();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return a.graph().record(OpKind::concat_cols, std::move(out), {a, b},
                          [ca, cb](const Value& g, const Value&) {
                            return std::vector<Value>{slice_cols(g, 0, ca),
                                                      slice_cols(g, ca, cb)};
                          });
}

Value slice_cols(const Value& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw ShapeError("slice: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " +
                     shape(a));
  const Eigen::Index total = a.cols();
  return a.graph().record(OpKind::slice_cols, a.data().middleCols(start, count),
                          {a},
                          [start, total](const Value& g, const Value&) {
                            return std::vector<Value>{pad_cols(g, start, total)};
                          });
}

Value pad_cols(const Value& a, Eigen::Index start, Eigen::Index total) {
  if (start < 0 || start + a.cols() > total)
    throw ShapeError("pad: cannot place " + shape(a) + " at column " +
                     std::to_string(start) + " of " + std::to_string(total));
  Matrix out = Matrix::Zero(a.rows(), total);
  out.middleCols(start, a.cols()) = a.data();
  const Eigen::Index count = a.cols();
  return a.graph().record(OpKind::pad_cols, std::move(out), {a},
                          [start, count](const Value& g, const Value&) {
                            return std::vector<Value>{slice_cols(g, start, count)};
                          });
}

Value sum_rows(const Value& a) {
  const Eigen::Index r = a.rows();
  return a.graph().record(OpKind::sum_rows, a.data().colwise().sum(), {a},
                          [r](const Value& g, const Value&) {
                            return std::vector<Value>{broadcast_rows(g, r)};
                          });
}

Value broadcast(const Value& s, Eigen::Index rows, Eigen::Index cols) {
  require_scalar(OpKind::broadcast, s);
  return s.graph().record(OpKind::broadcast,
                          Matrix::Constant(rows, cols, s.item()), {s},
                          [](const Value& g, const Value&) {
                            return std::vector<Value>{sum(g)};
                          });
}

Value broadcast_rows(const Value& row, Eigen::Index rows) {
  if (row.rows() != 1)
    throw ShapeError("broadcast-rows: expected a row, got " + shape(row));
  return row.graph().record(OpKind::broadcast_rows,
                            row.data().replicate(rows, 1), {row},
                            [](const Value& g, const Value&) {
                              return std::vector<Value>{sum_rows(g)};
                            });
}

Value add_rowwise(const Value& a, const Value& row) {
  same_graph(a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    shape_error(OpKind::add_rowwise, a, row);
  Matrix out = a.data().rowwise() + row.data().row(0);
  return a.graph().record(
      OpKind::add_rowwise, std::move(out), {a, row},
      [row](const Value& g, const Value&) {
        return std::vector<Value>{g, row.requires_grad() ? sum_rows(g) : Value()};
      });
}

std::vector<Value> grad(const Value& output, std::span<const Value> wrt,
                        bool create_graph) {
  if (!output.valid()) throw std::invalid_argument("grad: invalid output");
  if (output.rows() != 1 || output.cols() != 1)
    throw ShapeError("grad: output must be 1x1, got " + shape(output));
  Graph& g = output.graph();
  for (const Value& w : wrt) {
    if (&w.graph() != &g)
      throw std::invalid_argument("grad: wrt value on a different graph");
    if (!w.requires_grad())
      throw std::invalid_argument("grad: wrt value does not require grad");
  }

  std::vector<Value> result;
  result.reserve(wrt.size());
  int lowest = output.id();
  for (const Value& w : wrt) lowest = std::min(lowest, w.id());

  std::vector<Value> adjoint;
  {
    std::optional<Graph::NoGradGuard> guard;
    if (!create_graph) guard.emplace(g);

    adjoint.assign(static_cast<size_t>(output.id()) + 1, Value());
    adjoint[static_cast<size_t>(output.id())] = g.scalar(1.0);
    // Nodes below the lowest wrt id cannot feed back into any wrt adjoint.
    for (int i = output.id(); i >= lowest; --i) {
      const Value adj = adjoint[static_cast<size_t>(i)];
      if (!adj.valid()) continue;
      const Node& node = g.node(i);
      if (!node.backward) continue;
      // Node references in a deque stay valid while new nodes are appended.
      std::vector<Value> parts = node.backward(adj, g.at(i));
      for (size_t k = 0; k < node.parents.size(); ++k) {
        const int p = node.parents[k];
        if (k >= parts.size() || !parts[k].valid()) continue;
        if (!g.node(p).requires_grad || p < lowest) continue;
        Value& slot = adjoint[static_cast<size_t>(p)];
        slot = slot.valid() ? add(slot, parts[k]) : parts[k];
      }
    }
  }
  for (const Value& w : wrt) {
    const Value& a = adjoint[static_cast<size_t>(w.id())];
    result.push_back(a.valid() ? a : g.constant(Matrix::Zero(w.rows(), w.cols())));
  }
  return result;
}

JvpResult jvp(const std::function<Value(const Value&)>& fn, const Matrix& x,
              const Matrix& tangent, Graph& g) {
  if (tangent.rows() != x.rows() || tangent.cols() != x.cols())
    throw ShapeError("jvp: tangent shape does not match input");
  const Value input = g.variable(x);
  const Value out = fn(input);
  // u -> u^T J is linear in u, so d/du <u^T J, v> = J v.
  const Value cotangent = g.variable(Matrix::Zero(out.rows(), out.cols()));
  const Value vjp = grad(sum(mul(cotangent, out)), input, true);
  const Value dir = g.constant(tangent);
  const Value tangent_out = grad(sum(mul(vjp, dir)), cotangent, true);
  return {out, tangent_out};
}

FiniteDiffReport finite_diff_check(
    const std::function<Value(Graph&, const Value&)>& f, const Matrix& point,
    double tol, double step, double floor) {
  Matrix analytic;
  {
    Graph g;
    const Value p = g.variable(point);
    analytic = grad(f(g, p), p).data();
  }
  auto eval = [&f](const Matrix& at) {
    Graph g;
    return f(g, g.constant(at)).item();
  };

  FiniteDiffReport report;
  const double f0 = eval(point);
  for (Eigen::Index j = 0; j < point.cols(); ++j) {
    for (Eigen::Index i = 0; i < point.rows(); ++i) {
      Matrix plus = point, minus = point;
      plus(i, j) += step;
      minus(i, j) -= step;
      const double fp = eval(plus), fm = eval(minus);
      const double fwd = (fp - f0) / step, bwd = (f0 - fm) / step;
      const double numeric = (fp - fm) / (2 * step);
      const double kink_scale = std::max({std::abs(fwd), std::abs(bwd), 1.0});
      if (std::abs(fwd - bwd) > 1e-3 * kink_scale) {
        ++report.excluded;
        continue;
      }
      const double a = analytic(i, j);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double err = std::abs(a - numeric) / denom;
      if (err > report.max_rel_error || report.worst_row < 0) {
        report.max_rel_error = err;
        report.worst_row = i;
        report.worst_col = j;
      }
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace metakkl::ad
