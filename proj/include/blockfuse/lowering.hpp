#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "blockfuse/ir.hpp"

namespace blockfuse {

// --- array programs ------------------------------------------------------------

enum class ArrayNodeKind { Input, Output, Op };

struct ArrayNode {
  NodeId id = -1;
  ArrayNodeKind kind = ArrayNodeKind::Op;
  std::string name;      // Input/Output
  std::string op_kind;   // Op: "matmul", "softmax", ...
  std::string rows_dim, cols_dim;  // Input grid
  bool transposed = false;
  ScalarExpr expr;   // elementwise payload
  double eps = 0.0;  // rmsnorm
  int inputs = 1;
};

struct ArrayEdge {
  NodeId src = -1;
  NodeId dst = -1;
  int dst_port = 0;
};

/// Whole-matrix operator DAG: the compiler's input form.
struct ArrayProgram {
  std::map<NodeId, ArrayNode> nodes;
  std::vector<ArrayEdge> edges;
  NodeId next_id = 0;

  NodeId add(ArrayNode n) {
    if (n.id < 0) n.id = next_id;
    next_id = std::max(next_id, n.id + 1);
    NodeId id = n.id;
    nodes.emplace(id, std::move(n));
    return id;
  }
  NodeId input(std::string name, std::string rows, std::string cols, bool transposed = false) {
    ArrayNode n;
    n.kind = ArrayNodeKind::Input;
    n.name = std::move(name);
    n.rows_dim = std::move(rows);
    n.cols_dim = std::move(cols);
    n.transposed = transposed;
    return add(std::move(n));
  }
  NodeId output(std::string name, NodeId src) {
    ArrayNode n;
    n.kind = ArrayNodeKind::Output;
    n.name = std::move(name);
    NodeId id = add(std::move(n));
    edges.push_back({src, id, 0});
    return id;
  }
  NodeId op(std::string kind, std::vector<NodeId> srcs, ScalarExpr expr = {}, double eps = 0.0) {
    ArrayNode n;
    n.kind = ArrayNodeKind::Op;
    n.op_kind = std::move(kind);
    n.expr = std::move(expr);
    n.eps = eps;
    n.inputs = static_cast<int>(srcs.size());
    NodeId id = add(std::move(n));
    for (size_t p = 0; p < srcs.size(); ++p) edges.push_back({srcs[p], id, static_cast<int>(p)});
    return id;
  }

  const ArrayNode& node(NodeId id) const {
    auto it = nodes.find(id);
    if (it == nodes.end()) throw Error("unknown array node " + std::to_string(id));
    return it->second;
  }
  std::vector<NodeId> operands(NodeId id) const {
    const ArrayNode& n = node(id);
    int arity = n.kind == ArrayNodeKind::Op ? n.inputs : (n.kind == ArrayNodeKind::Output ? 1 : 0);
    std::vector<NodeId> srcs(arity, -1);
    for (const ArrayEdge& e : edges)
      if (e.dst == id) {
        if (e.dst_port < 0 || e.dst_port >= arity) throw Error("array edge port out of range");
        srcs[e.dst_port] = e.src;
      }
    for (NodeId s : srcs)
      if (s < 0) throw Error("array node " + std::to_string(id) + " has a dangling input");
    return srcs;
  }
};

// --- lowering ------------------------------------------------------------------

namespace lower_detail {

/// A lowered intermediate: the block-program endpoint carrying a full
/// list-of-lists of blocks, plus the dimensions of its grid.
struct Lowered {
  Endpoint at;
  std::string rows_dim, cols_dim;
  ValueDesc desc;
};

struct Builder {
  BlockGraph& g;  // root under construction
  NodeId id() { return g.fresh_id(); }

  ValueDesc grid(const std::string& r, const std::string& c) {
    return ValueDesc::list_of(Base::Block, {r, c});
  }

  // map over rows whose inner is a map over cols applying one functional op
  // on the block (optionally with a broadcast vector operand built per row).
  NodeId elementwise_op(const Lowered& x, const ScalarExpr& expr) {
    BlockGraph cin;
    NodeId bi = mk_boundary_in(cin, id());
    NodeId f = mk_func(cin, id(), FuncKind::Elementwise, expr);
    NodeId bo = mk_boundary_out(cin, id());
    cin.connect(bi, 0, f, 0, ValueDesc::block());
    cin.connect(f, 0, bo, 0, ValueDesc::block());

    BlockGraph rin;
    NodeId rbi = mk_boundary_in(rin, id());
    NodeId cmap = mk_map(rin, id(), x.cols_dim, std::move(cin), {PortMode::Iterate});
    NodeId rbo = mk_boundary_out(rin, id());
    rin.connect(rbi, 0, cmap, 0, ValueDesc::list_of(Base::Block, {x.cols_dim}));
    rin.connect(cmap, 0, rbo, 0, ValueDesc::list_of(Base::Block, {x.cols_dim}));

    NodeId m = mk_map(g, id(), x.rows_dim, std::move(rin), {PortMode::Iterate});
    g.connect(x.at.node, x.at.port, m, 0, x.desc);
    return m;
  }
};

}  // namespace lower_detail

/// Parameterized builder that emits one array operator's block subgraph.
/// `ins` are already-lowered operands; returns the operator's output.
using Template = std::function<lower_detail::Lowered(lower_detail::Builder&,
                                                     const ArrayNode&,
                                                     const std::vector<lower_detail::Lowered>&)>;

namespace lower_detail {

inline Lowered out_of(Builder& b, NodeId node, const std::string& r, const std::string& c) {
  return Lowered{{node, 0}, r, c, b.grid(r, c)};
}

inline Lowered lower_elementwise(Builder& b, const std::vector<Lowered>& in, const ScalarExpr& e) {
  NodeId m = b.elementwise_op(in[0], e);
  return out_of(b, m, in[0].rows_dim, in[0].cols_dim);
}

/// matmul: the right operand arrives pre-transposed, so its row dimension is
/// the output's column dimension and both operands share the contraction dim.
inline Lowered lower_matmul(Builder& b, const std::vector<Lowered>& in) {
  const Lowered& a = in[0];
  const Lowered& bt = in[1];
  if (a.cols_dim != bt.cols_dim)
    throw Error("matmul: right operand must be supplied transposed with matching contraction dim");
  const std::string& m = a.rows_dim;
  const std::string& f = bt.rows_dim;   // free dim of the product
  const std::string& c = a.cols_dim;    // contracted dim

  BlockGraph ci;
  NodeId cba = mk_boundary_in(ci, b.id());
  NodeId cbb = mk_boundary_in(ci, b.id());
  NodeId dot = mk_func(ci, b.id(), FuncKind::Dot);
  NodeId cbo = mk_boundary_out(ci, b.id());
  ci.connect(cba, 0, dot, 0, ValueDesc::block());
  ci.connect(cbb, 0, dot, 1, ValueDesc::block());
  ci.connect(dot, 0, cbo, 0, ValueDesc::block());

  BlockGraph fi;
  NodeId fba = mk_boundary_in(fi, b.id());  // row of A blocks, broadcast
  NodeId fbb = mk_boundary_in(fi, b.id());  // row of Bt blocks, iterated
  NodeId cmap = mk_map(fi, b.id(), c, std::move(ci), {PortMode::Iterate, PortMode::Iterate});
  NodeId red = mk_reduce(fi, b.id());
  NodeId fbo = mk_boundary_out(fi, b.id());
  fi.connect(fba, 0, cmap, 0, ValueDesc::list_of(Base::Block, {c}));
  fi.connect(fbb, 0, cmap, 1, ValueDesc::list_of(Base::Block, {c}));
  fi.connect(cmap, 0, red, 0, ValueDesc::list_of(Base::Block, {c}));
  fi.connect(red, 0, fbo, 0, ValueDesc::block());

  BlockGraph mi;
  NodeId mba = mk_boundary_in(mi, b.id());
  NodeId mbb = mk_boundary_in(mi, b.id());
  NodeId fmap = mk_map(mi, b.id(), f, std::move(fi), {PortMode::Broadcast, PortMode::Iterate});
  NodeId mbo = mk_boundary_out(mi, b.id());
  mi.connect(mba, 0, fmap, 0, ValueDesc::list_of(Base::Block, {c}));
  mi.connect(mbb, 0, fmap, 1, ValueDesc::list_of(Base::Block, {f, c}));
  mi.connect(fmap, 0, mbo, 0, ValueDesc::list_of(Base::Block, {f}));

  NodeId mm = mk_map(b.g, b.id(), m, std::move(mi), {PortMode::Iterate, PortMode::Broadcast});
  b.g.connect(a.at.node, a.at.port, mm, 0, a.desc);
  b.g.connect(bt.at.node, bt.at.port, mm, 1, bt.desc);
  return out_of(b, mm, m, f);
}

// row sums of the blocks, one vector per (row block, col block)
inline NodeId rowsum_map(Builder& b, const Lowered& x, bool square_first) {
  BlockGraph ci;
  NodeId bi = mk_boundary_in(ci, b.id());
  NodeId rs = mk_func(ci, b.id(), FuncKind::RowSum);
  NodeId bo = mk_boundary_out(ci, b.id());
  if (square_first) {
    NodeId sq = mk_func(ci, b.id(), FuncKind::Elementwise, ScalarExpr::square(ScalarExpr::var()));
    ci.connect(bi, 0, sq, 0, ValueDesc::block());
    ci.connect(sq, 0, rs, 0, ValueDesc::block());
  } else {
    ci.connect(bi, 0, rs, 0, ValueDesc::block());
  }
  ci.connect(rs, 0, bo, 0, ValueDesc::vector());

  BlockGraph ri;
  NodeId rbi = mk_boundary_in(ri, b.id());
  NodeId cmap = mk_map(ri, b.id(), x.cols_dim, std::move(ci), {PortMode::Iterate});
  NodeId rbo = mk_boundary_out(ri, b.id());
  ri.connect(rbi, 0, cmap, 0, ValueDesc::list_of(Base::Block, {x.cols_dim}));
  ri.connect(cmap, 0, rbo, 0, ValueDesc::list_of(Base::Vector, {x.cols_dim}));
  NodeId m = mk_map(b.g, b.id(), x.rows_dim, std::move(ri), {PortMode::Iterate});
  b.g.connect(x.at.node, x.at.port, m, 0, x.desc);
  return m;
}

// map over rows wrapping a single list reduction
inline NodeId fold_map(Builder& b, Endpoint src, const std::string& rows_dim,
                       const std::string& fold_dim, Base base) {
  BlockGraph ri;
  NodeId bi = mk_boundary_in(ri, b.id());
  NodeId red = mk_reduce(ri, b.id());
  NodeId bo = mk_boundary_out(ri, b.id());
  ri.connect(bi, 0, red, 0, ValueDesc::list_of(base, {fold_dim}));
  ri.connect(red, 0, bo, 0, ValueDesc{base, {}});
  NodeId m = mk_map(b.g, b.id(), rows_dim, std::move(ri), {PortMode::Iterate});
  b.g.connect(src.node, src.port, m, 0, ValueDesc::list_of(base, {rows_dim, fold_dim}));
  return m;
}

// map over rows applying one elementwise function to a per-row vector
inline NodeId vector_ew_map(Builder& b, Endpoint src, const std::string& rows_dim,
                            const ScalarExpr& expr) {
  BlockGraph ri;
  NodeId bi = mk_boundary_in(ri, b.id());
  NodeId f = mk_func(ri, b.id(), FuncKind::Elementwise, expr);
  NodeId bo = mk_boundary_out(ri, b.id());
  ri.connect(bi, 0, f, 0, ValueDesc::vector());
  ri.connect(f, 0, bo, 0, ValueDesc::vector());
  NodeId m = mk_map(b.g, b.id(), rows_dim, std::move(ri), {PortMode::Iterate});
  b.g.connect(src.node, src.port, m, 0, ValueDesc::list_of(Base::Vector, {rows_dim}));
  return m;
}

// map over rows applying row_scale/row_shift blockwise with a per-row vector
inline NodeId vector_apply_map(Builder& b, const Lowered& x, Endpoint vec,
                               const std::string& vec_rows_dim, FuncKind kind) {
  BlockGraph ci;
  NodeId bia = mk_boundary_in(ci, b.id());
  NodeId bic = mk_boundary_in(ci, b.id());
  NodeId f = mk_func(ci, b.id(), kind);
  NodeId bo = mk_boundary_out(ci, b.id());
  ci.connect(bia, 0, f, 0, ValueDesc::block());
  ci.connect(bic, 0, f, 1, ValueDesc::vector());
  ci.connect(f, 0, bo, 0, ValueDesc::block());

  BlockGraph ri;
  NodeId rba = mk_boundary_in(ri, b.id());
  NodeId rbc = mk_boundary_in(ri, b.id());
  NodeId cmap = mk_map(ri, b.id(), x.cols_dim, std::move(ci), {PortMode::Iterate, PortMode::Broadcast});
  NodeId rbo = mk_boundary_out(ri, b.id());
  ri.connect(rba, 0, cmap, 0, ValueDesc::list_of(Base::Block, {x.cols_dim}));
  ri.connect(rbc, 0, cmap, 1, ValueDesc::vector());
  ri.connect(cmap, 0, rbo, 0, ValueDesc::list_of(Base::Block, {x.cols_dim}));

  NodeId m = mk_map(b.g, b.id(), x.rows_dim, std::move(ri), {PortMode::Iterate, PortMode::Iterate});
  b.g.connect(x.at.node, x.at.port, m, 0, x.desc);
  b.g.connect(vec.node, vec.port, m, 1, ValueDesc::list_of(Base::Vector, {vec_rows_dim}));
  return m;
}

/// softmax: exp map, per-block row sums, summed across column blocks, then a
/// rescale by the reciprocal of the row sums. Four top-level operators.
inline Lowered lower_softmax(Builder& b, const std::vector<Lowered>& in) {
  const Lowered& x = in[0];
  NodeId expm = b.elementwise_op(x, ScalarExpr::exp(ScalarExpr::var()));
  Lowered expd = out_of(b, expm, x.rows_dim, x.cols_dim);
  NodeId partial = rowsum_map(b, expd, false);
  NodeId sums = fold_map(b, {partial, 0}, x.rows_dim, x.cols_dim, Base::Vector);

  // scale map: reciprocal of the row sums feeds a mapped row_scale
  BlockGraph ci;
  NodeId bia = mk_boundary_in(ci, b.id());
  NodeId bic = mk_boundary_in(ci, b.id());
  NodeId f = mk_func(ci, b.id(), FuncKind::RowScale);
  NodeId bo = mk_boundary_out(ci, b.id());
  ci.connect(bia, 0, f, 0, ValueDesc::block());
  ci.connect(bic, 0, f, 1, ValueDesc::vector());
  ci.connect(f, 0, bo, 0, ValueDesc::block());

  BlockGraph ri;
  NodeId rba = mk_boundary_in(ri, b.id());
  NodeId rbs = mk_boundary_in(ri, b.id());
  NodeId rec = mk_func(ri, b.id(), FuncKind::Elementwise, ScalarExpr::recip(ScalarExpr::var()));
  NodeId cmap = mk_map(ri, b.id(), x.cols_dim, std::move(ci), {PortMode::Iterate, PortMode::Broadcast});
  NodeId rbo = mk_boundary_out(ri, b.id());
  ri.connect(rba, 0, cmap, 0, ValueDesc::list_of(Base::Block, {x.cols_dim}));
  ri.connect(rbs, 0, rec, 0, ValueDesc::vector());
  ri.connect(rec, 0, cmap, 1, ValueDesc::vector());
  ri.connect(cmap, 0, rbo, 0, ValueDesc::list_of(Base::Block, {x.cols_dim}));

  NodeId scale = mk_map(b.g, b.id(), x.rows_dim, std::move(ri), {PortMode::Iterate, PortMode::Iterate});
  b.g.connect(expm, 0, scale, 0, expd.desc);
  b.g.connect(sums, 0, scale, 1, ValueDesc::list_of(Base::Vector, {x.rows_dim}));
  return out_of(b, scale, x.rows_dim, x.cols_dim);
}

/// layernorm: row sums and row sums-of-squares, per-row shift and scale
/// vectors from the two statistics, then mapped row_shift and row_scale.
inline Lowered lower_layernorm(Builder& b, const std::vector<Lowered>& in) {
  const Lowered& x = in[0];
  const std::string& k = x.cols_dim;
  NodeId sum_part = rowsum_map(b, x, false);
  NodeId s1 = fold_map(b, {sum_part, 0}, x.rows_dim, k, Base::Vector);
  NodeId sqm = b.elementwise_op(x, ScalarExpr::square(ScalarExpr::var()));
  Lowered sq = out_of(b, sqm, x.rows_dim, k);

  // row sums of the squares with the fold inside the same top-level operator
  BlockGraph ci;
  NodeId bi = mk_boundary_in(ci, b.id());
  NodeId rs = mk_func(ci, b.id(), FuncKind::RowSum);
  NodeId bo = mk_boundary_out(ci, b.id());
  ci.connect(bi, 0, rs, 0, ValueDesc::block());
  ci.connect(rs, 0, bo, 0, ValueDesc::vector());
  BlockGraph ri;
  NodeId rbi = mk_boundary_in(ri, b.id());
  NodeId cmap = mk_map(ri, b.id(), k, std::move(ci), {PortMode::Iterate});
  NodeId red = mk_reduce(ri, b.id());
  NodeId rbo = mk_boundary_out(ri, b.id());
  ri.connect(rbi, 0, cmap, 0, ValueDesc::list_of(Base::Block, {k}));
  ri.connect(cmap, 0, red, 0, ValueDesc::list_of(Base::Vector, {k}));
  ri.connect(red, 0, rbo, 0, ValueDesc::vector());
  NodeId s2 = mk_map(b.g, b.id(), x.rows_dim, std::move(ri), {PortMode::Iterate});
  b.g.connect(sqm, 0, s2, 0, sq.desc);

  // per-row statistics: shift = -s1/k, scale = 1/sqrt(s2/k - (s1/k)^2)
  ScalarExpr kk = ScalarExpr::dim_total(k);
  BlockGraph si;
  NodeId sbi1 = mk_boundary_in(si, b.id());
  NodeId sbi2 = mk_boundary_in(si, b.id());
  NodeId e_shift = mk_func(si, b.id(), FuncKind::Elementwise,
                           ScalarExpr::sub(ScalarExpr::constant(0), ScalarExpr::div(ScalarExpr::var(), kk)));
  NodeId e_m2 = mk_func(si, b.id(), FuncKind::Elementwise,
                        ScalarExpr::sub(ScalarExpr::constant(0),
                                        ScalarExpr::square(ScalarExpr::div(ScalarExpr::var(), kk))));
  NodeId e_s2k = mk_func(si, b.id(), FuncKind::Elementwise, ScalarExpr::div(ScalarExpr::var(), kk));
  NodeId var = mk_func(si, b.id(), FuncKind::Add);
  NodeId e_isig = mk_func(si, b.id(), FuncKind::Elementwise,
                          ScalarExpr::recip(ScalarExpr::sqrt(ScalarExpr::var())));
  NodeId sbo1 = mk_boundary_out(si, b.id());
  NodeId sbo2 = mk_boundary_out(si, b.id());
  si.connect(sbi1, 0, e_shift, 0, ValueDesc::vector());
  si.connect(sbi1, 0, e_m2, 0, ValueDesc::vector());
  si.connect(sbi2, 0, e_s2k, 0, ValueDesc::vector());
  si.connect(e_s2k, 0, var, 0, ValueDesc::vector());
  si.connect(e_m2, 0, var, 1, ValueDesc::vector());
  si.connect(var, 0, e_isig, 0, ValueDesc::vector());
  si.connect(e_shift, 0, sbo1, 0, ValueDesc::vector());
  si.connect(e_isig, 0, sbo2, 0, ValueDesc::vector());
  NodeId stats = mk_map(b.g, b.id(), x.rows_dim, std::move(si), {PortMode::Iterate, PortMode::Iterate});
  b.g.connect(s1, 0, stats, 0, ValueDesc::list_of(Base::Vector, {x.rows_dim}));
  b.g.connect(s2, 0, stats, 1, ValueDesc::list_of(Base::Vector, {x.rows_dim}));

  NodeId shifted = vector_apply_map(b, x, {stats, 0}, x.rows_dim, FuncKind::RowShift);
  Lowered sh = out_of(b, shifted, x.rows_dim, k);
  NodeId scaled = vector_apply_map(b, sh, {stats, 1}, x.rows_dim, FuncKind::RowScale);
  return out_of(b, scaled, x.rows_dim, k);
}

/// rmsnorm: square map, per-row sums with the fold alongside, the inverse
/// root-mean-square vector, and a mapped row_scale. Four top-level operators.
inline Lowered lower_rmsnorm(Builder& b, const std::vector<Lowered>& in, double eps) {
  const Lowered& x = in[0];
  const std::string& k = x.cols_dim;
  NodeId sqm = b.elementwise_op(x, ScalarExpr::square(ScalarExpr::var()));
  Lowered sq = out_of(b, sqm, x.rows_dim, k);

  BlockGraph ci;
  NodeId bi = mk_boundary_in(ci, b.id());
  NodeId rs = mk_func(ci, b.id(), FuncKind::RowSum);
  NodeId bo = mk_boundary_out(ci, b.id());
  ci.connect(bi, 0, rs, 0, ValueDesc::block());
  ci.connect(rs, 0, bo, 0, ValueDesc::vector());
  BlockGraph ri;
  NodeId rbi = mk_boundary_in(ri, b.id());
  NodeId cmap = mk_map(ri, b.id(), k, std::move(ci), {PortMode::Iterate});
  NodeId red = mk_reduce(ri, b.id());
  NodeId rbo = mk_boundary_out(ri, b.id());
  ri.connect(rbi, 0, cmap, 0, ValueDesc::list_of(Base::Block, {k}));
  ri.connect(cmap, 0, red, 0, ValueDesc::list_of(Base::Vector, {k}));
  ri.connect(red, 0, rbo, 0, ValueDesc::vector());
  NodeId s2 = mk_map(b.g, b.id(), x.rows_dim, std::move(ri), {PortMode::Iterate});
  b.g.connect(sqm, 0, s2, 0, sq.desc);

  ScalarExpr inv_rms =
      ScalarExpr::recip(ScalarExpr::sqrt(ScalarExpr::add(
          ScalarExpr::div(ScalarExpr::var(), ScalarExpr::dim_total(k)), ScalarExpr::constant(eps))));
  NodeId c = vector_ew_map(b, {s2, 0}, x.rows_dim, inv_rms);
  NodeId scaled = vector_apply_map(b, x, {c, 0}, x.rows_dim, FuncKind::RowScale);
  return out_of(b, scaled, x.rows_dim, k);
}

inline Lowered lower_hadamard(Builder& b, const std::vector<Lowered>& in) {
  const Lowered& a = in[0];
  const Lowered& c = in[1];
  if (a.rows_dim != c.rows_dim || a.cols_dim != c.cols_dim) throw Error("hadamard: grid mismatch");
  BlockGraph ci;
  NodeId bia = mk_boundary_in(ci, b.id());
  NodeId bib = mk_boundary_in(ci, b.id());
  NodeId f = mk_func(ci, b.id(), FuncKind::Mul);
  NodeId bo = mk_boundary_out(ci, b.id());
  ci.connect(bia, 0, f, 0, ValueDesc::block());
  ci.connect(bib, 0, f, 1, ValueDesc::block());
  ci.connect(f, 0, bo, 0, ValueDesc::block());

  BlockGraph ri;
  NodeId rba = mk_boundary_in(ri, b.id());
  NodeId rbb = mk_boundary_in(ri, b.id());
  NodeId cmap = mk_map(ri, b.id(), a.cols_dim, std::move(ci), {PortMode::Iterate, PortMode::Iterate});
  NodeId rbo = mk_boundary_out(ri, b.id());
  ri.connect(rba, 0, cmap, 0, ValueDesc::list_of(Base::Block, {a.cols_dim}));
  ri.connect(rbb, 0, cmap, 1, ValueDesc::list_of(Base::Block, {a.cols_dim}));
  ri.connect(cmap, 0, rbo, 0, ValueDesc::list_of(Base::Block, {a.cols_dim}));

  NodeId m = mk_map(b.g, b.id(), a.rows_dim, std::move(ri), {PortMode::Iterate, PortMode::Iterate});
  b.g.connect(a.at.node, a.at.port, m, 0, a.desc);
  b.g.connect(c.at.node, c.at.port, m, 1, c.desc);
  return out_of(b, m, a.rows_dim, a.cols_dim);
}

inline Lowered lower_misc(Builder& b, const ArrayNode& n, const std::vector<Lowered>& in) {
  NodeId misc = mk_misc(b.g, b.id(), n.op_kind, static_cast<int>(in.size()), 1);
  for (size_t p = 0; p < in.size(); ++p)
    b.g.connect(in[p].at.node, in[p].at.port, misc, static_cast<int>(p), in[p].desc);
  return out_of(b, misc, in[0].rows_dim, in[0].cols_dim);
}

}  // namespace lower_detail

/// Template lookup. Unregistered kinds fall back to a miscellaneous operator
/// so every array program has a block form.
inline Template template_for(const std::string& kind) {
  using namespace lower_detail;
  if (kind == "elementwise")
    return [](Builder& b, const ArrayNode& n, const std::vector<Lowered>& in) {
      return lower_elementwise(b, in, n.expr);
    };
  if (kind == "divide_const")
    return [](Builder& b, const ArrayNode& n, const std::vector<Lowered>& in) {
      return lower_elementwise(b, in, n.expr);
    };
  if (kind == "swish")
    return [](Builder& b, const ArrayNode&, const std::vector<Lowered>& in) {
      return lower_elementwise(b, in, ScalarExpr::swish());
    };
  if (kind == "matmul")
    return [](Builder& b, const ArrayNode&, const std::vector<Lowered>& in) {
      return lower_matmul(b, in);
    };
  if (kind == "softmax")
    return [](Builder& b, const ArrayNode&, const std::vector<Lowered>& in) {
      return lower_softmax(b, in);
    };
  if (kind == "layernorm")
    return [](Builder& b, const ArrayNode&, const std::vector<Lowered>& in) {
      return lower_layernorm(b, in);
    };
  if (kind == "rmsnorm")
    return [](Builder& b, const ArrayNode& n, const std::vector<Lowered>& in) {
      return lower_rmsnorm(b, in, n.eps);
    };
  if (kind == "hadamard")
    return [](Builder& b, const ArrayNode&, const std::vector<Lowered>& in) {
      return lower_hadamard(b, in);
    };
  return [](Builder& b, const ArrayNode& n, const std::vector<Lowered>& in) {
    return lower_misc(b, n, in);
  };
}

/// Converts an array program into its fully unfused block form: each operator
/// is replaced by its predefined subgraph, with every intermediate result
/// materialized as a buffered list of blocks.
inline BlockGraph lower(const ArrayProgram& p) {
  BlockGraph g;
  lower_detail::Builder b{g};
  std::map<NodeId, lower_detail::Lowered> done;

  // topological order over the array dag, ties by ascending id
  std::map<NodeId, int> indeg;
  for (const auto& [id, n] : p.nodes) indeg[id] = 0;
  for (const ArrayEdge& e : p.edges) {
    if (!p.nodes.count(e.src) || !p.nodes.count(e.dst)) throw Error("array edge references unknown node");
    indeg[e.dst]++;
  }
  std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
  for (const auto& [id, d] : indeg)
    if (d == 0) ready.push(id);
  std::vector<NodeId> order;
  while (!ready.empty()) {
    NodeId id = ready.top();
    ready.pop();
    order.push_back(id);
    for (const ArrayEdge& e : p.edges)
      if (e.src == id && --indeg[e.dst] == 0) ready.push(e.dst);
  }
  if (order.size() != p.nodes.size()) throw Error("array program has a cycle");

  for (NodeId id : order) {
    const ArrayNode& n = p.node(id);
    switch (n.kind) {
      case ArrayNodeKind::Input: {
        ValueDesc d = ValueDesc::list_of(Base::Block, {n.rows_dim, n.cols_dim});
        NodeId in = mk_input(g, g.fresh_id(), n.name, d, n.rows_dim, n.cols_dim, n.transposed);
        done[id] = {{in, 0}, n.rows_dim, n.cols_dim, d};
        break;
      }
      case ArrayNodeKind::Output: {
        const lower_detail::Lowered& src = done.at(p.operands(id)[0]);
        NodeId out = mk_output(g, g.fresh_id(), n.name);
        g.connect(src.at.node, src.at.port, out, 0, src.desc);
        break;
      }
      case ArrayNodeKind::Op: {
        std::vector<lower_detail::Lowered> ins;
        for (NodeId s : p.operands(id)) ins.push_back(done.at(s));
        done[id] = template_for(n.op_kind)(b, n, ins);
        break;
      }
    }
  }

  auto violations = validate(g);
  if (!violations.empty()) throw Error("lowering produced an invalid program: " + violations.front());
  return g;
}

// --- built-in example programs --------------------------------------------------

namespace examples {

/// Attention: Q.Kt scaled by 1/sqrt(d), softmax over rows, times V. The key
/// and value matrices are supplied transposed for the dot convention; the
/// feature and value dims D and L are split independently of M and N.
inline ArrayProgram attention() {
  ArrayProgram p;
  NodeId q = p.input("Q", "M", "D");
  NodeId k = p.input("K", "N", "D", true);
  NodeId vt = p.input("Vt", "L", "N", true);
  NodeId s = p.op("matmul", {q, k});
  NodeId sd = p.op("divide_const", {s},
                   ScalarExpr::div(ScalarExpr::var(), ScalarExpr::sqrt(ScalarExpr::dim_total("D"))));
  NodeId sm = p.op("softmax", {sd});
  NodeId o = p.op("matmul", {sm, vt});
  p.output("O", o);
  return p;
}

inline ArrayProgram layernorm_matmul() {
  ArrayProgram p;
  NodeId x = p.input("X", "M", "K");
  NodeId yt = p.input("Yt", "N", "K", true);
  NodeId ln = p.op("layernorm", {x});
  NodeId o = p.op("matmul", {ln, yt});
  p.output("O", o);
  return p;
}

inline ArrayProgram rms_ffn_swiglu() {
  ArrayProgram p;
  NodeId x = p.input("X", "M", "D");
  NodeId wt = p.input("Wt", "K", "D", true);
  NodeId vt = p.input("Vt", "K", "D", true);
  NodeId ut = p.input("Ut", "N", "K", true);
  NodeId xn = p.op("rmsnorm", {x});
  NodeId a = p.op("matmul", {xn, wt});
  NodeId bb = p.op("matmul", {xn, vt});
  NodeId sw = p.op("swish", {a});
  NodeId h = p.op("hadamard", {sw, bb});
  NodeId o = p.op("matmul", {h, ut});
  p.output("O", o);
  return p;
}

}  // namespace examples

}  // namespace blockfuse
