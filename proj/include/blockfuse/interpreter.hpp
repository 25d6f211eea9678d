#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "blockfuse/ir.hpp"

namespace blockfuse {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Value;
using ValueList = std::vector<Value>;

struct Value {
  std::variant<double, Vector, Matrix, ValueList> v;

  Value() : v(0.0) {}
  Value(double d) : v(d) {}
  Value(Vector x) : v(std::move(x)) {}
  Value(Matrix x) : v(std::move(x)) {}
  Value(ValueList x) : v(std::move(x)) {}

  bool is_list() const { return std::holds_alternative<ValueList>(v); }
  const ValueList& list() const { return std::get<ValueList>(v); }
  ValueList& list() { return std::get<ValueList>(v); }
  const Matrix& block() const { return std::get<Matrix>(v); }
  const Vector& vec() const { return std::get<Vector>(v); }
  double scalar() const { return std::get<double>(v); }
};

/// Binds every symbolic dimension to a block count and a block edge length.
struct DimBinding {
  struct Entry {
    int count = 1;
    int block_len = 1;
  };
  std::map<std::string, Entry> dims;
  int free_len = 4;  // edge length used for matrix axes that are not split

  int count(const std::string& d) const {
    auto it = dims.find(d);
    if (it == dims.end()) throw Error("unbound dimension " + d);
    return it->second.count;
  }
  int block_len(const std::string& d) const {
    auto it = dims.find(d);
    if (it == dims.end()) throw Error("unbound dimension " + d);
    return it->second.block_len;
  }
  int total(const std::string& d) const { return count(d) * block_len(d); }

  ScalarExpr::DimResolver resolver() const {
    return [this](const std::string& d) { return static_cast<double>(total(d)); };
  }

  static DimBinding uniform(const std::vector<std::string>& names, int count, int block_len) {
    DimBinding b;
    for (const auto& n : names) b.dims[n] = {count, block_len};
    return b;
  }
};

// --- block layout ------------------------------------------------------------

/// Splits a matrix into a row-major grid: a list (over row blocks) of lists
/// (over column blocks) of equally shaped dense blocks.
inline Value split_into_blocks(const Matrix& m, int row_blocks, int col_blocks) {
  if (row_blocks <= 0 || col_blocks <= 0) throw Error("block counts must be positive");
  if (m.rows() % row_blocks != 0 || m.cols() % col_blocks != 0)
    throw Error("matrix shape not divisible by block grid");
  Eigen::Index br = m.rows() / row_blocks, bc = m.cols() / col_blocks;
  ValueList rows;
  for (int i = 0; i < row_blocks; ++i) {
    ValueList row;
    for (int j = 0; j < col_blocks; ++j) row.push_back(Value(Matrix(m.block(i * br, j * bc, br, bc))));
    rows.push_back(Value(std::move(row)));
  }
  return Value(std::move(rows));
}

namespace detail {
inline Matrix leaf_matrix(const Value& v) {
  if (std::holds_alternative<Matrix>(v.v)) return v.block();
  if (std::holds_alternative<Vector>(v.v)) return v.vec();  // column matrix
  if (std::holds_alternative<double>(v.v)) return Matrix::Constant(1, 1, v.scalar());
  throw Error("assemble: nested value where a block was expected");
}
}  // namespace detail

/// Inverse of split_into_blocks. Accepts a bare block, vector or scalar, a
/// list of them (stacked vertically) or a list of lists (full grid).
inline Matrix assemble(const Value& v) {
  if (!v.is_list()) return detail::leaf_matrix(v);
  const ValueList& rows = v.list();
  if (rows.empty()) throw Error("assemble: empty list");
  std::vector<Matrix> row_mats;
  for (const Value& r : rows) {
    if (!r.is_list()) {
      row_mats.push_back(detail::leaf_matrix(r));
      continue;
    }
    const ValueList& cols = r.list();
    if (cols.empty()) throw Error("assemble: empty row");
    Eigen::Index h = cols[0].block().rows(), w = 0;
    for (const Value& c : cols) {
      if (c.block().rows() != h) throw Error("assemble: ragged blocks");
      w += c.block().cols();
    }
    Matrix row(h, w);
    Eigen::Index off = 0;
    for (const Value& c : cols) {
      row.block(0, off, h, c.block().cols()) = c.block();
      off += c.block().cols();
    }
    row_mats.push_back(std::move(row));
  }
  Eigen::Index w = row_mats[0].cols(), h = 0;
  for (const Matrix& r : row_mats) {
    if (r.cols() != w) throw Error("assemble: ragged rows");
    h += r.rows();
  }
  Matrix out(h, w);
  Eigen::Index off = 0;
  for (const Matrix& r : row_mats) {
    out.block(off, 0, r.rows(), w) = r;
    off += r.rows();
  }
  return out;
}

// --- shape inference -----------------------------------------------------------

struct Shape;
struct Shape {
  Base base = Base::Block;
  Eigen::Index rows = 0, cols = 0;            // Block: rows x cols, Vector: rows
  std::vector<std::pair<std::string, int>> lists;  // outermost first: (dim, length)

  Eigen::Index elems() const {
    Eigen::Index e = base == Base::Block ? rows * cols : (base == Base::Vector ? rows : 1);
    for (const auto& [d, n] : lists) e *= n;
    return e;
  }
  Shape pop_list() const {
    Shape s = *this;
    s.lists.erase(s.lists.begin());
    return s;
  }
  Shape push_list(const std::string& d, int n) const {
    Shape s = *this;
    s.lists.insert(s.lists.begin(), {d, n});
    return s;
  }
};

namespace detail {

inline Shape func_shape(const Node& n, const std::vector<Shape>& in) {
  auto want = [&](size_t i, Base b, const char* what) {
    if (in[i].base != b || !in[i].lists.empty())
      throw Error(std::string("operator ") + func_name(n.op.kind) + ": " + what);
  };
  switch (n.op.kind) {
    case FuncKind::Add:
    case FuncKind::Mul:
      if (in[0].base != in[1].base || in[0].rows != in[1].rows || in[0].cols != in[1].cols)
        throw Error(std::string(func_name(n.op.kind)) + ": shape mismatch");
      return in[0];
    case FuncKind::RowShift:
    case FuncKind::RowScale:
      want(0, Base::Block, "block expected");
      want(1, Base::Vector, "vector expected");
      if (in[1].rows != in[0].rows) throw Error(std::string(func_name(n.op.kind)) + ": vector length must equal block row count");
      return in[0];
    case FuncKind::RowSum: {
      want(0, Base::Block, "block expected");
      Shape s;
      s.base = Base::Vector;
      s.rows = in[0].rows;
      return s;
    }
    case FuncKind::Dot: {
      want(0, Base::Block, "block expected");
      want(1, Base::Block, "block expected");
      if (in[0].cols != in[1].cols) throw Error("dot: column counts must match");
      Shape s;
      s.base = Base::Block;
      s.rows = in[0].rows;
      s.cols = in[1].rows;
      return s;
    }
    case FuncKind::Outer: {
      want(0, Base::Vector, "vector expected");
      want(1, Base::Vector, "vector expected");
      Shape s;
      s.base = Base::Block;
      s.rows = in[0].rows;
      s.cols = in[1].rows;
      return s;
    }
    case FuncKind::Elementwise:
      if (!in[0].lists.empty()) throw Error("elementwise: local value expected");
      return in[0];
  }
  throw Error("bad func kind");
}

}  // namespace detail

// --- execution -----------------------------------------------------------------

using MiscExecutor = std::function<std::vector<Value>(const std::vector<Value>&)>;

struct ExecOptions {
  std::map<std::string, MiscExecutor> misc;
};

namespace detail {

struct ExecCtx {
  const DimBinding& binding;
  const ExecOptions& opts;
};

inline Value add_values(const Value& a, const Value& b) {
  if (std::holds_alternative<double>(a.v)) return Value(a.scalar() + b.scalar());
  if (std::holds_alternative<Vector>(a.v)) return Value(Vector(a.vec() + b.vec()));
  if (std::holds_alternative<Matrix>(a.v)) return Value(Matrix(a.block() + b.block()));
  throw Error("reduction over nested lists is not defined");
}

inline Value apply_elementwise(const Value& in, const ScalarExpr& e, const ScalarExpr::DimResolver& dims) {
  if (std::holds_alternative<double>(in.v)) return Value(e.eval(in.scalar(), dims));
  if (std::holds_alternative<Vector>(in.v)) {
    Vector v = in.vec();
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = e.eval(v[i], dims);
    return Value(std::move(v));
  }
  Matrix m = in.block();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = e.eval(m(i, j), dims);
  return Value(std::move(m));
}

inline void want_same_shape(const Value& a, const Value& b, const char* op) {
  if (a.v.index() != b.v.index()) throw Error(std::string(op) + ": operand kinds differ");
  if (std::holds_alternative<Matrix>(a.v) &&
      (a.block().rows() != b.block().rows() || a.block().cols() != b.block().cols()))
    throw Error(std::string(op) + ": block shapes differ");
  if (std::holds_alternative<Vector>(a.v) && a.vec().size() != b.vec().size())
    throw Error(std::string(op) + ": vector lengths differ");
}

inline Value eval_func(const Node& n, const std::vector<Value>& in, const ExecCtx& ctx) {
  switch (n.op.kind) {
    case FuncKind::Add:
      want_same_shape(in[0], in[1], "add");
      return add_values(in[0], in[1]);
    case FuncKind::Mul: {
      want_same_shape(in[0], in[1], "mul");
      if (std::holds_alternative<double>(in[0].v)) return Value(in[0].scalar() * in[1].scalar());
      if (std::holds_alternative<Vector>(in[0].v)) return Value(Vector(in[0].vec().cwiseProduct(in[1].vec())));
      return Value(Matrix(in[0].block().cwiseProduct(in[1].block())));
    }
    case FuncKind::RowShift: {
      Matrix m = in[0].block();
      const Vector& c = in[1].vec();
      if (c.size() != m.rows()) throw Error("row_shift: vector length must equal block row count");
      m.colwise() += c;
      return Value(std::move(m));
    }
    case FuncKind::RowScale: {
      Matrix m = in[0].block();
      const Vector& c = in[1].vec();
      if (c.size() != m.rows()) throw Error("row_scale: vector length must equal block row count");
      m.array().colwise() *= c.array();
      return Value(std::move(m));
    }
    case FuncKind::RowSum: return Value(Vector(in[0].block().rowwise().sum()));
    case FuncKind::Dot: {
      const Matrix& a = in[0].block();
      const Matrix& b = in[1].block();
      if (a.cols() != b.cols()) throw Error("dot: column counts must match");
      return Value(Matrix(a * b.transpose()));
    }
    case FuncKind::Outer: return Value(Matrix(in[0].vec() * in[1].vec().transpose()));
    case FuncKind::Elementwise: return apply_elementwise(in[0], n.op.expr, ctx.binding.resolver());
  }
  throw Error("bad func kind");
}

// Evaluates one graph given its boundary-in values; returns boundary-out
// values. `io` supplies/collects named values at the root.
struct RootIo {
  const std::map<std::string, Matrix>* inputs = nullptr;
  std::map<std::string, Matrix>* outputs = nullptr;
};

inline std::vector<Value> eval_graph(const BlockGraph& g, const std::vector<Value>& boundary,
                                     const ExecCtx& ctx, RootIo io = {});

inline Value zero_like(const Value& v) {
  if (std::holds_alternative<double>(v.v)) return Value(0.0);
  if (std::holds_alternative<Vector>(v.v)) return Value(Vector(Vector::Zero(v.vec().size())));
  if (std::holds_alternative<Matrix>(v.v))
    return Value(Matrix(Matrix::Zero(v.block().rows(), v.block().cols())));
  throw Error("zero of a list value is not defined");
}

inline std::vector<Value> eval_map(const Node& n, const std::vector<Value>& in, const ExecCtx& ctx) {
  const BlockGraph& inner = *n.inner;
  int count = ctx.binding.count(n.dim);
  int begin = n.range == MapRange::Rest ? 1 : 0;
  int end = n.range == MapRange::First ? 1 : count;
  for (int p = 0; p < map_in_count(n); ++p)
    if (n.in_modes[p] == PortMode::Iterate && static_cast<int>(in[p].list().size()) != count)
      throw Error("map over " + n.dim + ": iterated list length " +
                  std::to_string(in[p].list().size()) + " does not match block count " +
                  std::to_string(count));

  int out_n = map_out_count(n);
  std::vector<ValueList> collected(out_n);
  std::vector<Value> finals(out_n);
  bool ran = false;
  for (int i = begin; i < end; ++i) {
    std::vector<Value> bvals;
    for (int p = 0; p < map_in_count(n); ++p)
      bvals.push_back(n.in_modes[p] == PortMode::Iterate ? in[p].list()[i] : in[p]);
    // Accumulators carry state across iterations: boundary-out port values of
    // this iteration are folded into the running value.
    std::vector<Value> outs = eval_graph(inner, bvals, ctx);
    for (int p = 0; p < out_n; ++p) {
      if (map_out_kind(n, p) == OutKind::Collect) {
        collected[p].push_back(outs[p]);
      } else {
        finals[p] = ran ? add_values(finals[p], outs[p]) : outs[p];
      }
    }
    ran = true;
  }
  if (!ran && count >= 1) {
    // Empty range (a peeled remainder under a singleton binding): accumulators
    // yield the reduction's zero; probe iteration 0 to size it.
    std::vector<Value> bvals;
    for (int p = 0; p < map_in_count(n); ++p)
      bvals.push_back(n.in_modes[p] == PortMode::Iterate ? in[p].list()[0] : in[p]);
    std::vector<Value> outs = eval_graph(inner, bvals, ctx);
    for (int p = 0; p < out_n; ++p)
      if (map_out_kind(n, p) == OutKind::Accumulate) finals[p] = zero_like(outs[p]);
    ran = true;
  }
  std::vector<Value> result(out_n);
  for (int p = 0; p < out_n; ++p) {
    if (map_out_kind(n, p) == OutKind::Collect)
      result[p] = Value(std::move(collected[p]));
    else if (ran)
      result[p] = finals[p];
    else
      throw Error("map over " + n.dim + ": empty iteration range leaves accumulator undefined");
  }
  return result;
}

inline std::vector<Value> eval_graph(const BlockGraph& g, const std::vector<Value>& boundary,
                                     const ExecCtx& ctx, RootIo io) {
  std::map<std::pair<NodeId, int>, Value> vals;
  auto input_of = [&](NodeId id, int port) -> const Value& {
    const Edge* e = g.producer(id, port);
    if (!e) throw Error("node " + std::to_string(id) + ": missing producer");
    auto it = vals.find({e->src.node, e->src.port});
    if (it == vals.end()) throw Error("value not yet computed");
    return it->second;
  };

  for (NodeId id : topological_order(g)) {
    const Node& n = g.node(id);
    switch (n.kind) {
      case NodeKind::Input: {
        if (!io.inputs) throw Error("input node in inner graph");
        auto it = io.inputs->find(n.name);
        if (it == io.inputs->end()) throw Error("missing input matrix " + n.name);
        const Matrix& m = it->second;
        if (n.desc.base != Base::Block) throw Error("input " + n.name + ": only matrix inputs supported");
        std::vector<std::string> split_dims;
        if (!n.rows_dim.empty()) split_dims.push_back(n.rows_dim);
        if (!n.cols_dim.empty()) split_dims.push_back(n.cols_dim);
        if (n.desc.list_dims != split_dims)
          throw Error("input " + n.name + ": descriptor does not match the declared block grid");
        int rb = n.rows_dim.empty() ? 1 : ctx.binding.count(n.rows_dim);
        int cb = n.cols_dim.empty() ? 1 : ctx.binding.count(n.cols_dim);
        if (!n.rows_dim.empty() && m.rows() != ctx.binding.total(n.rows_dim))
          throw Error("input " + n.name + ": row count does not match binding");
        if (!n.cols_dim.empty() && m.cols() != ctx.binding.total(n.cols_dim))
          throw Error("input " + n.name + ": column count does not match binding");
        Value grid = split_into_blocks(m, rb, cb);
        // Reduce the row-major grid to the declared nesting.
        Value out;
        if (n.desc.list_dims.size() == 2) {
          out = std::move(grid);
        } else if (n.desc.list_dims.size() == 1) {
          ValueList flat;
          for (Value& row : grid.list())
            for (Value& b : row.list()) flat.push_back(std::move(b));
          out = Value(std::move(flat));
        } else {
          out = grid.list()[0].list()[0];
        }
        vals[{id, 0}] = std::move(out);
        break;
      }
      case NodeKind::Output: {
        if (!io.outputs) throw Error("output node in inner graph");
        (*io.outputs)[n.name] = assemble(input_of(id, 0));
        break;
      }
      case NodeKind::BoundaryIn:
        vals[{id, 0}] = boundary.at(
            std::find(g.boundary_in.begin(), g.boundary_in.end(), id) - g.boundary_in.begin());
        break;
      case NodeKind::BoundaryOut: break;  // read below
      case NodeKind::Func: {
        std::vector<Value> in;
        for (int p = 0; p < func_arity(n.op.kind); ++p) in.push_back(input_of(id, p));
        vals[{id, 0}] = eval_func(n, in, ctx);
        break;
      }
      case NodeKind::Reduce: {
        const Value& in = input_of(id, 0);
        if (!in.is_list()) {
          // Accumulator form: within a single iteration it passes its input
          // through; cross-iteration folding happens in eval_map.
          vals[{id, 0}] = in;
          break;
        }
        if (in.list().empty()) throw Error("reduction over empty list");
        Value acc = in.list()[0];
        for (size_t i = 1; i < in.list().size(); ++i) acc = add_values(acc, in.list()[i]);
        vals[{id, 0}] = std::move(acc);
        break;
      }
      case NodeKind::Map: {
        std::vector<Value> in;
        for (int p = 0; p < map_in_count(n); ++p) in.push_back(input_of(id, p));
        std::vector<Value> outs = eval_map(n, in, ctx);
        for (int p = 0; p < map_out_count(n); ++p) vals[{id, p}] = std::move(outs[p]);
        break;
      }
      case NodeKind::Misc: {
        auto it = ctx.opts.misc.find(n.name);
        if (it == ctx.opts.misc.end()) throw Error("no executor registered for misc operator " + n.name);
        std::vector<Value> in;
        for (int p = 0; p < n.misc_inputs; ++p) in.push_back(input_of(id, p));
        std::vector<Value> outs = it->second(in);
        for (int p = 0; p < n.misc_outputs; ++p) vals[{id, p}] = std::move(outs[p]);
        break;
      }
    }
  }

  std::vector<Value> out;
  for (NodeId bo : g.boundary_out) out.push_back(input_of(bo, 0));
  return out;
}

}  // namespace detail

/// Runs a block program on concrete inputs. Maps run serially in iteration
/// order; reductions fold left to right from the first element.
inline std::map<std::string, Matrix> execute(const BlockGraph& program,
                                             const std::map<std::string, Matrix>& inputs,
                                             const DimBinding& binding,
                                             const ExecOptions& opts = {}) {
  std::map<std::string, Matrix> outputs;
  detail::ExecCtx ctx{binding, opts};
  detail::RootIo io{&inputs, &outputs};
  detail::eval_graph(program, {}, ctx, io);
  return outputs;
}

// --- dense references ----------------------------------------------------------

/// Whole-matrix evaluations used as oracles; independent of the block IR.
namespace ref {

inline Matrix elementwise(const Matrix& x, const ScalarExpr& e, const ScalarExpr::DimResolver& dims = {}) {
  Matrix r = x;
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    for (Eigen::Index j = 0; j < r.cols(); ++j) r(i, j) = e.eval(r(i, j), dims);
  return r;
}

/// Right-hand operand supplied transposed, matching the block convention.
inline Matrix matmul(const Matrix& a, const Matrix& bt) { return a * bt.transpose(); }

inline Matrix hadamard(const Matrix& a, const Matrix& b) { return a.cwiseProduct(b); }

inline Matrix softmax_rows(const Matrix& x) {
  Matrix e = x.array().exp();
  Vector s = e.rowwise().sum();
  return e.array().colwise() / s.array();
}

inline Matrix layernorm(const Matrix& x) {
  Matrix r(x.rows(), x.cols());
  double k = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double s1 = x.row(i).sum();
    double s2 = x.row(i).squaredNorm();
    double mean = s1 / k;
    double sigma = std::sqrt(s2 / k - mean * mean);
    if (sigma == 0.0) {
      r.row(i).setZero();  // degenerate constant row; shifted numerator is exactly zero
    } else {
      r.row(i) = (x.row(i).array() - mean) / sigma;
    }
  }
  return r;
}

inline Matrix rmsnorm(const Matrix& x, double eps = 0.0) {
  Matrix r(x.rows(), x.cols());
  double k = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double inv = 1.0 / std::sqrt(x.row(i).squaredNorm() / k + eps);
    r.row(i) = x.row(i) * inv;
  }
  return r;
}

inline Matrix swish(const Matrix& x) {
  return x.array() * (1.0 / (1.0 + (-x.array()).exp()));
}

inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& vt) {
  double d = static_cast<double>(q.cols());
  Matrix s = (q * k.transpose()) / std::sqrt(d);
  return softmax_rows(s) * vt.transpose();
}

inline Matrix layernorm_matmul(const Matrix& x, const Matrix& yt) {
  return layernorm(x) * yt.transpose();
}

inline Matrix rms_ffn_swiglu(const Matrix& x, const Matrix& wt, const Matrix& vt, const Matrix& ut,
                             double eps = 0.0) {
  Matrix xn = rmsnorm(x, eps);
  Matrix a = swish(xn * wt.transpose());
  Matrix b = xn * vt.transpose();
  return a.cwiseProduct(b) * ut.transpose();
}

}  // namespace ref

// --- equivalence checking --------------------------------------------------------

struct InputSpec {
  std::string name;
  Eigen::Index rows = 0, cols = 0;
};

/// Matrix sizes implied by a program's input nodes under a binding.
inline std::vector<InputSpec> input_specs(const BlockGraph& program, const DimBinding& b) {
  std::vector<InputSpec> specs;
  for (const auto& [id, n] : program.nodes) {
    if (n.kind != NodeKind::Input) continue;
    InputSpec s;
    s.name = n.name;
    s.rows = n.rows_dim.empty() ? b.free_len : b.total(n.rows_dim);
    s.cols = n.cols_dim.empty() ? b.free_len : b.total(n.cols_dim);
    specs.push_back(std::move(s));
  }
  std::sort(specs.begin(), specs.end(), [](const InputSpec& a, const InputSpec& b) { return a.name < b.name; });
  return specs;
}

inline std::map<std::string, Matrix> random_inputs(const std::vector<InputSpec>& specs,
                                                   unsigned long long seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::map<std::string, Matrix> out;
  for (const InputSpec& s : specs) {
    Matrix m(s.rows, s.cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng) * scale;
    out[s.name] = std::move(m);
  }
  return out;
}

inline double max_rel_error(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("shape mismatch in comparison");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      double diff = std::abs(a(i, j) - b(i, j));
      if (diff <= 1e-12) continue;  // absolute floor
      double scale = std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-30});
      worst = std::max(worst, diff / scale);
    }
  return worst;
}

struct EquivalenceReport {
  bool pass = false;
  double max_rel = 0.0;
  int trials = 0;
  std::string detail;
};

/// Runs two programs on the same seeded random inputs and compares every
/// named output. Programs must agree on input/output names.
inline EquivalenceReport check_equivalence(const BlockGraph& p1, const BlockGraph& p2,
                                           const DimBinding& binding, int trials,
                                           unsigned long long seed, double tol,
                                           const ExecOptions& opts = {}) {
  EquivalenceReport rep;
  rep.trials = trials;
  auto specs = input_specs(p1, binding);
  auto specs2 = input_specs(p2, binding);
  if (specs.size() != specs2.size()) {
    rep.detail = "programs declare different inputs";
    return rep;
  }
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    auto in = random_inputs(specs, seed + static_cast<unsigned long long>(t));
    auto o1 = execute(p1, in, binding, opts);
    auto o2 = execute(p2, in, binding, opts);
    if (o1.size() != o2.size()) {
      rep.detail = "programs produce different outputs";
      return rep;
    }
    for (const auto& [name, m1] : o1) {
      auto it = o2.find(name);
      if (it == o2.end()) {
        rep.detail = "missing output " + name;
        return rep;
      }
      worst = std::max(worst, max_rel_error(m1, it->second));
    }
  }
  rep.max_rel = worst;
  rep.pass = worst <= tol;
  if (!rep.pass) rep.detail = "max relative error " + std::to_string(worst) + " exceeds tolerance";
  return rep;
}

}  // namespace blockfuse
